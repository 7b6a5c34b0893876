"""Datasets, CSV formats, deterministic splits/folds and text cleanup.

Every table on disk is a UTF-8 CSV whose first column is ``id``:

* probabilities: ``id,p0,...,p{C-1}``
* features:      ``id,f0,...,f{D-1}``
* labels:        ``id,label`` (integer class index)

Floats are written with ``repr`` so that a save/load round trip is bit-exact.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

#: rows whose sum deviates from 1 by at most this much are accepted verbatim
STRICT_ROW_TOL = 1e-6
#: rows deviating by more than STRICT_ROW_TOL but at most this are renormalized
RENORM_ROW_TOL = 1e-4
# absorbs decimal->binary rounding at the inclusive RENORM_ROW_TOL boundary
_BOUNDARY_SLACK = 1e-12


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


# --------------------------------------------------------------------------
# text cleanup
# --------------------------------------------------------------------------

_TAG_RE = re.compile(r"</?[A-Za-z][A-Za-z0-9]*(?:\s[^<>]*)?/?>")
# "&#39;" and the semicolon-less "&#39" both occur in scraped product text
_NUMREF_RE = re.compile(r"&#(?:([0-9]{1,7})|[xX]([0-9A-Fa-f]{1,6}));?")
_WS_RE = re.compile(r"\s+")


def _decode_numref(match: re.Match) -> str:
    dec, hexa = match.groups()
    code = int(dec) if dec is not None else int(hexa, 16)
    # NUL, surrogates and out-of-range code points are not text
    if code == 0 or 0xD800 <= code <= 0xDFFF or code > 0x10FFFF:
        return match.group(0)
    return chr(code)


def _clean_once(text: str) -> str:
    text = _TAG_RE.sub(" ", text)
    text = _NUMREF_RE.sub(_decode_numref, text)
    return _WS_RE.sub(" ", text).strip()


def clean_text(raw: str) -> str:
    """Strip HTML tags, decode numeric character references, squeeze spaces.

    Malformed tags or references are left untouched. Each pass can expose new
    markup (``"&#60;p&#62;"`` decodes to a tag), so passes repeat until the
    text stops changing; every changing pass shortens the string, which makes
    the function idempotent.

    >>> clean_text("<p>L&#39;été   chaud</p>")
    "L'été chaud"
    """
    text = raw
    while True:
        cleaned = _clean_once(text)
        if cleaned == text:
            return cleaned
        text = cleaned


# --------------------------------------------------------------------------
# matrices and datasets
# --------------------------------------------------------------------------


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def check_probability_rows(values: np.ndarray, tol: float = STRICT_ROW_TOL) -> None:
    """Raise :class:`DataError` unless ``values`` is a row-stochastic matrix."""
    if values.ndim != 2:
        raise DataError(f"expected a 2-d matrix, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise DataError("probability matrix contains non-finite values")
    if np.any(values < 0):
        raise DataError("probability matrix contains negative entries")
    dev = np.abs(values.sum(axis=1) - 1.0)
    if values.shape[0] and dev.max() > tol:
        row = int(np.argmax(dev))
        raise DataError(f"row {row} sums to {values[row].sum()!r}, outside 1 +/- {tol}")


@dataclass(frozen=True)
class ProbabilityMatrix:
    """Per-sample class probabilities for one modality, in file row order."""

    ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape[0] != len(self.ids):
            raise DataError(f"{len(self.ids)} ids but {values.shape[0]} rows")
        check_probability_rows(values)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "values", _frozen(values))

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureMatrix:
    ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != len(self.ids):
            raise DataError(f"feature matrix shape {values.shape} does not match {len(self.ids)} ids")
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "values", _frozen(values))


@dataclass(frozen=True)
class AlignedDataset:
    """Samples in canonical (sorted-id) order with per-modality matrices.

    ``probabilities`` and ``features`` map modality name to an array whose
    row ``i`` belongs to ``ids[i]``. ``labels`` is ``None`` for unlabeled
    test data.
    """

    ids: tuple[str, ...]
    labels: np.ndarray | None
    probabilities: Mapping[str, np.ndarray] = field(default_factory=dict)
    features: Mapping[str, np.ndarray] = field(default_factory=dict)
    n_classes: int | None = None

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids")
        n = len(ids)
        probs = {k: _frozen(np.asarray(v, dtype=np.float64)) for k, v in sorted(self.probabilities.items())}
        feats = {k: _frozen(np.asarray(v, dtype=np.float64)) for k, v in sorted(self.features.items())}
        for name, mat in {**probs, **feats}.items():
            if mat.ndim != 2 or mat.shape[0] != n:
                raise DataError(f"modality {name!r}: shape {mat.shape} does not match {n} samples")
        n_classes = self.n_classes
        for name, mat in probs.items():
            if n_classes is None:
                n_classes = mat.shape[1]
            elif mat.shape[1] != n_classes:
                raise DataError(f"modality {name!r} has {mat.shape[1]} classes, expected {n_classes}")
        labels = None
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (n,):
                raise DataError(f"labels shape {labels.shape} does not match {n} samples")
            if n and not np.issubdtype(labels.dtype, np.integer):
                raise DataError("labels must be integer class indices")
            labels = labels.astype(np.int64)
            if n and labels.min() < 0:
                raise DataError("negative class index in labels")
            if n_classes is not None and n and labels.max() >= n_classes:
                raise DataError(f"label {labels.max()} out of range for {n_classes} classes")
            labels = _frozen(labels)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "n_classes", n_classes)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def modality_names(self) -> list[str]:
        return sorted(set(self.probabilities) | set(self.features))

    def subset(self, rows: Sequence[int] | np.ndarray) -> "AlignedDataset":
        """Rows ``rows`` (re-sorted into canonical order)."""
        rows = np.sort(np.asarray(rows, dtype=np.int64))
        return AlignedDataset(
            ids=tuple(self.ids[i] for i in rows),
            labels=None if self.labels is None else self.labels[rows],
            probabilities={k: v[rows] for k, v in self.probabilities.items()},
            features={k: v[rows] for k, v in self.features.items()},
            n_classes=self.n_classes,
        )

    def drop_ids(self, ids: Iterable[str]) -> "AlignedDataset":
        drop = set(ids)
        keep = [i for i, sid in enumerate(self.ids) if sid not in drop]
        return self.subset(keep)


def align_modalities(
    probabilities: Mapping[str, ProbabilityMatrix] | None = None,
    features: Mapping[str, FeatureMatrix] | None = None,
    labels: Mapping[str, int] | None = None,
    n_classes: int | None = None,
) -> AlignedDataset:
    """Reorder every modality matrix to sorted-id order.

    All matrices (and ``labels``, an id->class mapping, when given) must cover
    exactly the same id set.
    """
    probabilities = dict(probabilities or {})
    features = dict(features or {})
    tables: list[tuple[str, tuple[str, ...]]] = []
    for name, m in probabilities.items():
        tables.append((f"probabilities[{name}]", m.ids))
    for name, m in features.items():
        tables.append((f"features[{name}]", m.ids))
    if labels is not None:
        tables.append(("labels", tuple(labels)))
    if not tables:
        raise DataError("nothing to align")

    for where, ids in tables:
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise DataError(f"{where}: duplicate id {dup!r}")
    reference = set(tables[0][1])
    for where, ids in tables[1:]:
        other = set(ids)
        if other != reference:
            missing = sorted(reference - other) or sorted(other - reference)
            raise DataError(f"{where}: id set differs from {tables[0][0]} (e.g. {missing[0]!r})")

    order = sorted(reference)

    def reorder(ids: tuple[str, ...], values: np.ndarray) -> np.ndarray:
        pos = {sid: i for i, sid in enumerate(ids)}
        return values[[pos[sid] for sid in order]]

    return AlignedDataset(
        ids=tuple(order),
        labels=None if labels is None else np.array([labels[s] for s in order], dtype=np.int64),
        probabilities={k: reorder(m.ids, m.values) for k, m in probabilities.items()},
        features={k: reorder(m.ids, m.values) for k, m in features.items()},
        n_classes=n_classes,
    )


# --------------------------------------------------------------------------
# CSV i/o
# --------------------------------------------------------------------------


def _read_table(path: str | Path, prefix: str) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        expected = ["id"] + [f"{prefix}{j}" for j in range(len(header) - 1)]
        if header != expected or len(header) < 2:
            raise DataError(f"{path}: bad header {header[:4]}..., expected id,{prefix}0,...")
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: {len(rec)} fields, expected {len(header)}")
            ids.append(rec[0])
            try:
                rows.append([float(x) for x in rec[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    return ids, values


def _write_table(path: str | Path, prefix: str, ids: Sequence[str], values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"{prefix}{j}" for j in range(values.shape[1])])
        for sid, row in zip(ids, values):
            w.writerow([sid] + [repr(float(x)) for x in row])


def load_probability_matrix(path: str | Path, expected_classes: int) -> ProbabilityMatrix:
    """Read a probability CSV, validating shape and row sums.

    Rows summing to within 1e-6 of one are kept verbatim; rows off by up to
    1e-4 are renormalized with a warning; anything else is rejected.
    """
    ids, values = _read_table(path, "p")
    if values.shape[1] != expected_classes:
        raise DataError(f"{path}: {values.shape[1]} probability columns, expected {expected_classes}")
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise DataError(f"{path}: probabilities must be finite and non-negative")
    sums = values.sum(axis=1)
    dev = np.abs(sums - 1.0)
    bad = np.flatnonzero(dev > RENORM_ROW_TOL + _BOUNDARY_SLACK)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{path}: row for id {ids[i]!r} sums to {sums[i]!r}")
    fix = np.flatnonzero(dev > STRICT_ROW_TOL)
    if fix.size:
        logger.warning("%s: renormalized %d row(s) with sums off by up to %.3g", path, fix.size, dev[fix].max())
        values[fix] /= sums[fix, None]
    return ProbabilityMatrix(tuple(ids), values)


def save_probability_matrix(path: str | Path, matrix: ProbabilityMatrix) -> None:
    _write_table(path, "p", matrix.ids, matrix.values)


def load_feature_matrix(path: str | Path) -> FeatureMatrix:
    ids, values = _read_table(path, "f")
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite feature values")
    return FeatureMatrix(tuple(ids), values)


def save_feature_matrix(path: str | Path, matrix: FeatureMatrix) -> None:
    _write_table(path, "f", matrix.ids, matrix.values)


def load_labels(path: str | Path) -> dict[str, int]:
    out: dict[str, int] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "label"]:
            raise DataError(f"{path}: expected header id,label, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields")
            if rec[0] in out:
                raise DataError(f"{path}:{lineno}: duplicate id {rec[0]!r}")
            try:
                out[rec[0]] = int(rec[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {rec[1]!r} is not an integer") from None
    return out


def save_labels(path: str | Path, ids: Sequence[str], labels: Sequence[int]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        for sid, lab in zip(ids, labels):
            w.writerow([sid, int(lab)])


def read_id_order(path: str | Path) -> list[str]:
    """Ids of a CSV in file order (first column, header skipped)."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return [rec[0] for rec in reader if rec]


# --------------------------------------------------------------------------
# splits and folds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")

    def train_size(self, n: int) -> int:
        return math.floor(self.train_fraction * n)


def split_train_val(dataset: AlignedDataset, spec: SplitSpec = SplitSpec()) -> tuple[AlignedDataset, AlignedDataset]:
    """Random train/validation split; train gets ``floor(fraction * N)`` rows."""
    n = len(dataset)
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    if dataset.labels is None:
        raise ValueError("split_train_val requires labels")
    n_train = spec.train_size(n)
    perm = np.random.default_rng(spec.seed).permutation(n)
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


@dataclass(frozen=True)
class FoldAssignment:
    n_samples: int
    k: int
    assignment: np.ndarray
    seed: int
    stratified: bool

    def __post_init__(self):
        object.__setattr__(self, "assignment", _frozen(np.asarray(self.assignment, dtype=np.int64)))

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def train_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def held_out_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)


def make_folds(labels: Sequence[int] | np.ndarray, k: int, seed: int = 0, stratified: bool = True) -> FoldAssignment:
    """Assign each sample to one of ``k`` folds.

    Samples are ordered by (class, random rank) when stratified, or just by
    random rank otherwise, and dealt out round-robin. Consecutive dealing
    keeps global fold sizes within one of each other and, for the stratified
    case, each class's per-fold counts within one as well.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples ({n})")
    rank = np.random.default_rng(seed).permutation(n)
    order = np.lexsort((rank, labels)) if stratified else np.argsort(rank, kind="stable")
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % k
    return FoldAssignment(n, k, assignment, seed, stratified)
