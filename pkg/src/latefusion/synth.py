"""Synthetic multimodal classification data with known ground truth.

Each sample has a true class ``y``; its observed label is ``y`` or, with
probability ``label_noise_rate``, a uniformly drawn other class. Every
modality "perceives" a class ``z ~ Q_m[y, :]`` and emits a probability row
``~ Dirichlet(alpha0 + kappa * Q_m[z, :])`` together with a feature row (the
elementwise logit of the probability row plus Gaussian jitter).

Randomness comes from a counter-based Philox stream keyed by ``(seed,
block)``, with fixed-size blocks of samples, so any partition of the blocks
across workers reproduces the serial output exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import gammaln, logsumexp

from . import dataio
from .dataio import AlignedDataset, FeatureMatrix, ProbabilityMatrix
from .metrics import accuracy, macro_f1

BLOCK_SIZE = 1024
#: category sizes reported for the challenge training set (smallest, largest)
CHALLENGE_CLASS_RANGE = (764, 10209)
# probability rows are clipped to this before the logit feature transform
FEATURE_CLIP = 1e-6


def default_priors(n_classes: int = 27, smallest: float = CHALLENGE_CLASS_RANGE[0], largest: float = CHALLENGE_CLASS_RANGE[1]) -> np.ndarray:
    """Geometrically spaced class priors, largest first, max/min = largest/smallest."""
    if n_classes == 1:
        return np.ones(1)
    counts = smallest * (largest / smallest) ** (np.arange(n_classes)[::-1] / (n_classes - 1))
    return counts / counts.sum()


def contiguous_groups(n_classes: int, n_groups: int) -> np.ndarray:
    """Class -> group map with groups of consecutive classes, sizes within one."""
    if not 1 <= n_groups <= n_classes:
        raise ValueError(f"need 1 <= n_groups <= n_classes, got {n_groups} groups for {n_classes} classes")
    return np.arange(n_classes) * n_groups // n_classes


@dataclass(frozen=True)
class ModalitySpec:
    confusion: np.ndarray
    kappa: float
    alpha0: float

    def __post_init__(self):
        q = np.asarray(self.confusion, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError(f"confusion must be square, got {q.shape}")
        if np.any(q < 0) or not np.allclose(q.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("confusion rows must be probability vectors")
        if self.kappa <= 0 or self.alpha0 <= 0:
            raise ValueError("kappa and alpha0 must be positive")
        q.setflags(write=False)
        object.__setattr__(self, "confusion", q)


@dataclass(frozen=True)
class GeneratorConfig:
    n_samples: int
    modalities: Mapping[str, ModalitySpec]
    n_classes: int = 27
    class_priors: np.ndarray | None = None
    n_groups: int = 4
    groups: np.ndarray | None = None
    label_noise_rate: float = 0.0
    feature_jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        c = self.n_classes
        if self.n_samples < 1 or c < 2:
            raise ValueError("need n_samples >= 1 and n_classes >= 2")
        priors = default_priors(c) if self.class_priors is None else np.asarray(self.class_priors, dtype=np.float64)
        if priors.shape != (c,) or np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
            raise ValueError("class_priors must be a probability vector over n_classes")
        groups = contiguous_groups(c, self.n_groups) if self.groups is None else np.asarray(self.groups, dtype=np.int64)
        if groups.shape != (c,) or groups.min() < 0 or groups.max() >= self.n_groups:
            raise ValueError("groups must map every class to a group in [0, n_groups)")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise ValueError("label_noise_rate must be in [0, 1)")
        if not self.modalities:
            raise ValueError("at least one modality is required")
        for name, spec in self.modalities.items():
            if spec.confusion.shape != (c, c):
                raise ValueError(f"modality {name!r}: confusion is {spec.confusion.shape}, expected {(c, c)}")
        priors.setflags(write=False)
        groups.setflags(write=False)
        object.__setattr__(self, "class_priors", priors)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "modalities", dict(sorted(self.modalities.items())))


@dataclass(frozen=True)
class SyntheticDataset:
    dataset: AlignedDataset
    true_labels: np.ndarray
    flipped_ids: tuple[str, ...]
    config: GeneratorConfig = field(repr=False)

    @property
    def flipped_mask(self) -> np.ndarray:
        flipped = set(self.flipped_ids)
        return np.array([sid in flipped for sid in self.dataset.ids])


# --------------------------------------------------------------------------
# confusion structures
# --------------------------------------------------------------------------


def within_group_confusion(groups: np.ndarray, correct: float) -> np.ndarray:
    """Keep ``correct`` on the diagonal, spread the rest over the same group."""
    groups = np.asarray(groups)
    c = groups.size
    q = np.zeros((c, c))
    for y in range(c):
        mates = np.flatnonzero((groups == groups[y]) & (np.arange(c) != y))
        if mates.size == 0:
            q[y, y] = 1.0
        else:
            q[y, y] = correct
            q[y, mates] = (1.0 - correct) / mates.size
    return q


def cross_group_confusion(groups: np.ndarray, correct: float) -> np.ndarray:
    """Keep ``correct`` on the diagonal, send the rest to one partner class in another group.

    Classes ``k`` and ``k + C//2`` are partners; with odd ``C`` the last
    class spreads its error uniformly over the other groups. Partners must
    sit in different groups (true for contiguous groups and ``n_groups >= 2``).
    """
    groups = np.asarray(groups)
    c = groups.size
    half = c // 2
    q = np.zeros((c, c))
    for y in range(c):
        q[y, y] = correct
        if y < 2 * half:
            partner = (y + half) % (2 * half)
            if groups[partner] == groups[y]:
                raise ValueError(f"partner classes {y} and {partner} share a group")
            q[y, partner] = 1.0 - correct
        else:
            others = np.flatnonzero(groups != groups[y])
            q[y, others] = (1.0 - correct) / others.size
    return q


def identity_confusion(n_classes: int) -> np.ndarray:
    return np.eye(n_classes)


def complementary_preset(
    n_samples: int = 20000,
    n_classes: int = 27,
    seed: int = 0,
    label_noise_rate: float = 0.0,
    image_correct: float = 0.65,
    text_correct: float = 0.88,
    kappa: float = 10.0,
    alpha0: float = 0.3,
) -> GeneratorConfig:
    """Two modalities whose mistakes are complementary.

    ``image`` confuses classes within the 4 top-level groups and is the
    weaker modality; ``text`` is stronger but sends its errors to a partner
    class in a different group. Knowing the group from ``image`` resolves
    most ``text`` errors, so fusing both beats either alone.
    """
    groups = contiguous_groups(n_classes, 4)
    return GeneratorConfig(
        n_samples=n_samples,
        n_classes=n_classes,
        n_groups=4,
        groups=groups,
        label_noise_rate=label_noise_rate,
        seed=seed,
        modalities={
            "image": ModalitySpec(within_group_confusion(groups, image_correct), kappa, alpha0),
            "text": ModalitySpec(cross_group_confusion(groups, text_correct), kappa, alpha0),
        },
    )


def separable_preset(
    n_samples: int = 5000,
    n_classes: int = 10,
    seed: int = 0,
    label_noise_rate: float = 0.1,
    kappa: float = 200.0,
    alpha0: float = 1.0,
) -> GeneratorConfig:
    """One near-perfect modality (identity confusion, large kappa), uniform priors."""
    return GeneratorConfig(
        n_samples=n_samples,
        n_classes=n_classes,
        class_priors=np.full(n_classes, 1.0 / n_classes),
        n_groups=1,
        label_noise_rate=label_noise_rate,
        seed=seed,
        modalities={"image": ModalitySpec(identity_confusion(n_classes), kappa, alpha0)},
    )


PRESETS = {"complementary": complementary_preset, "separable": separable_preset}


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[block, seed]))


def _inverse_cdf(rng: np.random.Generator, rows: np.ndarray) -> np.ndarray:
    """One categorical draw per row of a row-stochastic matrix."""
    cdf = np.cumsum(rows, axis=1)
    u = rng.random(rows.shape[0])[:, None]
    return np.minimum((cdf <= u * cdf[:, -1:]).sum(axis=1), rows.shape[1] - 1)


def _generate_block(config: GeneratorConfig, block: int, size: int):
    rng = _block_rng(config.seed, block)
    c = config.n_classes
    y = _inverse_cdf(rng, np.broadcast_to(config.class_priors, (size, c)))
    flip = rng.random(size) < config.label_noise_rate
    shift = rng.integers(1, c, size)
    observed = np.where(flip, (y + shift) % c, y)
    probs, feats = {}, {}
    for name, spec in config.modalities.items():
        z = _inverse_cdf(rng, spec.confusion[y])
        g = rng.standard_gamma(spec.alpha0 + spec.kappa * spec.confusion[z])
        p = g / g.sum(axis=1, keepdims=True)
        clipped = np.clip(p, FEATURE_CLIP, 1.0 - FEATURE_CLIP)
        f = np.log(clipped) - np.log1p(-clipped) + rng.normal(0.0, config.feature_jitter, p.shape)
        probs[name] = p
        feats[name] = f
    return y, observed, flip, probs, feats


def generate_blocks(config: GeneratorConfig, blocks: range | list[int]):
    """Raw block outputs for ``blocks``; independent of how blocks are partitioned."""
    out = []
    for b in blocks:
        start = b * BLOCK_SIZE
        size = min(BLOCK_SIZE, config.n_samples - start)
        if size <= 0:
            raise ValueError(f"block {b} is past the end of the dataset")
        out.append(_generate_block(config, b, size))
    return out


def n_blocks(n_samples: int) -> int:
    return -(-n_samples // BLOCK_SIZE)


def sample_ids(n_samples: int, prefix: str = "s") -> list[str]:
    width = max(6, len(str(n_samples - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(n_samples)]


def generate(config: GeneratorConfig, id_prefix: str = "s") -> SyntheticDataset:
    """Draw a full dataset; bit-identical for identical ``config``."""
    parts = generate_blocks(config, range(n_blocks(config.n_samples)))
    y = np.concatenate([p[0] for p in parts])
    observed = np.concatenate([p[1] for p in parts])
    flip = np.concatenate([p[2] for p in parts])
    probs = {m: np.concatenate([p[3][m] for p in parts]) for m in config.modalities}
    feats = {m: np.concatenate([p[4][m] for p in parts]) for m in config.modalities}
    ids = sample_ids(config.n_samples, id_prefix)
    dataset = AlignedDataset(tuple(ids), observed, probs, feats, n_classes=config.n_classes)
    flipped = tuple(sid for sid, f in zip(ids, flip) if f)
    return SyntheticDataset(dataset, y, flipped, config)


def write_dataset(synthetic: SyntheticDataset, out_dir: str | Path, prefix: str = "") -> dict[str, str]:
    """Write labels, per-modality probability/feature CSVs and the truth file.

    Returns the file names written (relative to ``out_dir``) keyed by role.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = synthetic.dataset
    files: dict[str, str] = {}
    files["labels"] = f"{prefix}labels.csv"
    dataio.save_labels(out_dir / files["labels"], ds.ids, ds.labels)
    for m in ds.modality_names:
        files[f"{m}.probabilities"] = f"{prefix}{m}_probs.csv"
        files[f"{m}.features"] = f"{prefix}{m}_features.csv"
        dataio.save_probability_matrix(out_dir / files[f"{m}.probabilities"], ProbabilityMatrix(ds.ids, ds.probabilities[m]))
        dataio.save_feature_matrix(out_dir / files[f"{m}.features"], FeatureMatrix(ds.ids, ds.features[m]))
    files["truth"] = f"{prefix}truth.csv"
    flipped = synthetic.flipped_mask
    with (out_dir / files["truth"]).open("w", encoding="utf-8") as fh:
        fh.write("id,true_label,flipped\n")
        for sid, t, f in zip(ds.ids, synthetic.true_labels, flipped):
            fh.write(f"{sid},{int(t)},{int(f)}\n")
    return files


def load_truth(path: str | Path) -> tuple[dict[str, int], set[str]]:
    truth, flipped = {}, set()
    with Path(path).open(encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            sid, t, f = line.rstrip("\n").split(",")
            truth[sid] = int(t)
            if f == "1":
                flipped.add(sid)
    return truth, flipped


# --------------------------------------------------------------------------
# Bayes oracle
# --------------------------------------------------------------------------


def _log_likelihood(spec: ModalitySpec, rows: np.ndarray) -> np.ndarray:
    """``log p(row | y)`` for every row and every class ``y``, shape (n, C)."""
    alpha = spec.alpha0 + spec.kappa * spec.confusion  # alpha[z] is the Dirichlet for perceived z
    log_norm = gammaln(alpha.sum(axis=1)) - gammaln(alpha).sum(axis=1)
    log_rows = np.log(np.maximum(rows, np.finfo(float).tiny))
    dir_ll = log_rows @ (alpha - 1.0).T + log_norm  # (n, z)
    with np.errstate(divide="ignore"):
        log_q = np.log(spec.confusion)  # (y, z)
    return logsumexp(log_q[None, :, :] + dir_ll[:, None, :], axis=2)


def posterior(config: GeneratorConfig, probabilities: Mapping[str, np.ndarray], modalities=None) -> np.ndarray:
    """Exact posterior over the true class given the chosen modalities' rows."""
    names = list(config.modalities) if modalities is None else list(modalities)
    log_post = np.log(np.maximum(config.class_priors, 1e-300))[None, :]
    for m in names:
        log_post = log_post + _log_likelihood(config.modalities[m], probabilities[m])
    log_post = log_post - logsumexp(log_post, axis=1, keepdims=True)
    return np.exp(log_post)


@dataclass(frozen=True)
class OracleEstimate:
    accuracy: float
    accuracy_se: float
    macro_f1: float


def bayes_oracle(config: GeneratorConfig, n_mc: int = 20000, seed: int | None = None) -> dict[str, OracleEstimate]:
    """Monte Carlo accuracy of the posterior-argmax classifier.

    Keys are the modality names plus ``"fused"`` (all modalities, which are
    conditionally independent given the true class). The estimate is scored
    against true, not observed, labels.
    """
    if n_mc < 1000:
        raise ValueError(f"n_mc must be >= 1000, got {n_mc}")
    mc_seed = config.seed + 7919 if seed is None else seed
    draw = generate(replace(config, n_samples=n_mc, seed=mc_seed))
    truth = draw.true_labels
    probs = draw.dataset.probabilities
    out = {}
    for key, names in [(m, [m]) for m in config.modalities] + [("fused", list(config.modalities))]:
        pred = np.argmax(posterior(config, probs, names), axis=1)
        acc = accuracy(pred, truth)
        out[key] = OracleEstimate(acc, float(np.sqrt(acc * (1 - acc) / n_mc)), macro_f1(pred, truth, config.n_classes))
    return out
