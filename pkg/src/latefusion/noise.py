"""Confident-learning label-noise detection and pruning.

Pipeline: out-of-fold predicted probabilities -> per-class thresholds ->
confident joint -> candidates ranked by self-confidence -> prune the top
fraction of candidates.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import AlignedDataset, FoldAssignment, make_folds
from .shallow_nn import Network, NetworkLayout, TrainConfig, init_network, train

logger = logging.getLogger(__name__)

#: share of each fold's training rows held back to pick the best epoch
INNER_VAL_FRACTION = 0.1


@dataclass(frozen=True)
class ConfidentJoint:
    counts: np.ndarray
    skipped: int
    #: per-sample confidently assigned class, -1 where the candidate set was empty
    assigned: np.ndarray


@dataclass(frozen=True)
class Candidate:
    id: str
    given_label: int
    assigned_label: int
    self_confidence: float


@dataclass(frozen=True)
class NoiseReport:
    thresholds: np.ndarray
    joint: ConfidentJoint
    candidates: list[Candidate]


@dataclass(frozen=True)
class PruneResult:
    dataset: AlignedDataset
    removed_ids: list[str]
    #: candidates selected for removal but kept so that no class is emptied
    skipped_ids: list[str] = field(default_factory=list)


# --------------------------------------------------------------------------
# out-of-fold probabilities
# --------------------------------------------------------------------------


def default_base_layout(input_dim: int, n_classes: int) -> NetworkLayout:
    """Linear-softmax base classifier."""
    return NetworkLayout(input_dim, n_classes, hidden_dim=None)


def train_fold_model(
    features: np.ndarray,
    labels: np.ndarray,
    folds: FoldAssignment,
    fold: int,
    layout: NetworkLayout,
    config: TrainConfig,
    seed: int,
) -> Network:
    """Fit the base classifier on every fold except ``fold``.

    A seeded 10% slice of those rows picks the checkpoint epoch, so no row of
    ``fold`` influences the model.
    """
    rows = folds.train_rows(fold)
    rng = np.random.Generator(np.random.PCG64([seed, fold]))
    rows = rows[rng.permutation(rows.size)]
    n_inner = max(1, math.floor(INNER_VAL_FRACTION * rows.size))
    inner, fit = np.sort(rows[:n_inner]), np.sort(rows[n_inner:])
    net = init_network(layout, seed + 1 + fold)
    cfg = replace(config, shuffle_seed=seed + 101 + fold)
    return train(net, (features[fit], labels[fit]), (features[inner], labels[inner]), cfg).best_network


def _fold_task(args):
    features, labels, folds, fold, layout, config, seed = args
    net = train_fold_model(features, labels, folds, fold, layout, config, seed)
    rows = folds.held_out_rows(fold)
    return fold, rows, net.forward(features[rows])


def cross_val_probabilities(
    features: np.ndarray,
    labels: Sequence[int],
    k: int = 4,
    n_classes: int | None = None,
    layout: NetworkLayout | None = None,
    config: TrainConfig | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> np.ndarray:
    """Out-of-fold predicted probabilities from ``k`` stratified folds.

    Row ``i`` comes from a model that never saw fold ``fold(i)``. The result
    does not depend on ``jobs``: each fold writes only its own rows.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError("features and labels must have the same number of rows")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(labels, minlength=n_classes)
    short = np.flatnonzero(counts < k)
    if short.size:
        raise ValueError(f"classes {short.tolist()} have fewer than k={k} samples; stratified folds impossible")
    layout = layout or default_base_layout(features.shape[1], n_classes)
    config = config or TrainConfig()
    folds = make_folds(labels, k, seed=seed, stratified=True)
    tasks = [(features, labels, folds, f, layout, config, seed) for f in range(k)]
    out = np.empty((labels.size, n_classes))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]
    for _, rows, probs in results:
        out[rows] = probs
    return out


# --------------------------------------------------------------------------
# confident learning
# --------------------------------------------------------------------------


def class_thresholds(probs: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Per-class mean of ``p(j | x)`` over samples labelled ``j``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = probs.shape[1]
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        raise ValueError(f"classes {np.flatnonzero(counts == 0).tolist()} have no samples")
    sums = np.zeros(n_classes)
    np.add.at(sums, labels, probs[np.arange(labels.size), labels])
    return sums / counts


def confident_joint(probs: np.ndarray, labels: Sequence[int], thresholds: np.ndarray) -> ConfidentJoint:
    """Count (given label, confidently assigned class) pairs.

    A sample's candidates are the classes whose probability reaches that
    class's threshold (inclusive); it is assigned the most probable
    candidate, the smallest index on ties, and skipped if it has none.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    n, c = probs.shape
    if labels.shape != (n,) or thresholds.shape != (c,):
        raise ValueError(f"shape mismatch: probs {probs.shape}, labels {labels.shape}, thresholds {thresholds.shape}")
    above = probs >= thresholds[None, :]
    masked = np.where(above, probs, -np.inf)
    assigned = np.argmax(masked, axis=1)  # first maximum -> smallest index
    empty = ~above.any(axis=1)
    assigned[empty] = -1
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (labels[~empty], assigned[~empty]), 1)
    return ConfidentJoint(counts, int(empty.sum()), assigned)


def rank_label_errors(
    probs: np.ndarray,
    labels: Sequence[int],
    joint: ConfidentJoint,
    ids: Sequence[str] | None = None,
    thresholds: np.ndarray | None = None,
) -> NoiseReport:
    """Off-diagonal samples of the joint, lowest self-confidence first (ties by id)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    ids = [str(i) for i in range(labels.size)] if ids is None else [str(i) for i in ids]
    flagged = np.flatnonzero((joint.assigned >= 0) & (joint.assigned != labels))
    cands = [
        Candidate(ids[i], int(labels[i]), int(joint.assigned[i]), float(probs[i, labels[i]]))
        for i in flagged
    ]
    cands.sort(key=lambda c: (c.self_confidence, c.id))
    if thresholds is None:
        thresholds = class_thresholds(probs, labels)
    return NoiseReport(np.asarray(thresholds), joint, cands)


def find_label_errors(probs: np.ndarray, labels: Sequence[int], ids: Sequence[str] | None = None) -> NoiseReport:
    """Thresholds, confident joint and ranked candidates in one call."""
    t = class_thresholds(probs, labels)
    return rank_label_errors(probs, labels, confident_joint(probs, labels, t), ids, t)


def n_to_remove(n_candidates: int, fraction: float | None = None, count: int | None = None) -> int:
    if count is not None:
        if count < 0:
            raise ValueError("count must be non-negative")
        return min(count, n_candidates)
    if fraction is None or not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    # guard against 0.1 * 100 landing a hair above 10
    return min(math.ceil(fraction * n_candidates - 1e-9), n_candidates)


def prune_dataset(
    dataset: AlignedDataset,
    report: NoiseReport,
    fraction: float | None = 0.10,
    count: int | None = None,
) -> PruneResult:
    """Drop the highest-ranked candidates (a fraction of the list, or ``count``).

    A removal that would leave its given class without samples is skipped
    and reported in ``skipped_ids``; skipped slots are not refilled.
    """
    if dataset.labels is None:
        raise ValueError("pruning requires labels")
    n = n_to_remove(len(report.candidates), fraction, count)
    index = {sid: i for i, sid in enumerate(dataset.ids)}
    remaining = np.bincount(dataset.labels, minlength=dataset.n_classes or 0)
    removed, skipped = [], []
    for cand in report.candidates[:n]:
        cls = int(dataset.labels[index[cand.id]])
        if remaining[cls] <= 1:
            skipped.append(cand.id)
            continue
        remaining[cls] -= 1
        removed.append(cand.id)
    if skipped:
        logger.warning("kept %d candidate(s) to avoid emptying a class", len(skipped))
    return PruneResult(dataset.drop_ids(removed), removed, skipped)


@dataclass(frozen=True)
class DenoiseResult:
    oof_probabilities: np.ndarray
    report: NoiseReport
    pruned: PruneResult


def denoise(
    dataset: AlignedDataset,
    k: int = 4,
    fraction: float | None = 0.10,
    count: int | None = None,
    modalities: Sequence[str] | None = None,
    layout: NetworkLayout | None = None,
    config: TrainConfig | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> DenoiseResult:
    """Run the full noise-reduction step on ``dataset``'s feature matrices."""
    if dataset.labels is None:
        raise ValueError("denoising requires labels")
    names = sorted(modalities) if modalities else sorted(dataset.features)
    missing = [m for m in names if m not in dataset.features]
    if not names or missing:
        raise ValueError(f"no feature matrix for modalities {missing or names}")
    x = np.hstack([dataset.features[m] for m in names])
    oof = cross_val_probabilities(x, dataset.labels, k, dataset.n_classes, layout, config, seed, jobs)
    report = find_label_errors(oof, dataset.labels, dataset.ids)
    return DenoiseResult(oof, report, prune_dataset(dataset, report, fraction, count))


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------


def write_noise_report(path: str | Path, report: NoiseReport) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "id", "given_label", "assigned_label", "self_confidence"])
        for rank, c in enumerate(report.candidates, start=1):
            w.writerow([rank, c.id, c.given_label, c.assigned_label, repr(c.self_confidence)])


def read_noise_report(path: str | Path) -> list[Candidate]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            Candidate(r["id"], int(r["given_label"]), int(r["assigned_label"]), float(r["self_confidence"]))
            for r in reader
        ]


def write_removed_ids(path: str | Path, ids: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
