"""Decision-level fusion, feature-level fusion baselines and majority voting."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataio import AlignedDataset, FoldAssignment, check_probability_rows, make_folds
from .metrics import macro_f1
from .shallow_nn import (
    DEFAULT_HIDDEN,
    Network,
    NetworkLayout,
    TrainConfig,
    TrainedModel,
    _check_inputs,
    glorot_uniform,
    init_network,
    load_checkpoint,
    save_checkpoint,
    softmax,
    train,
)

logger = logging.getLogger(__name__)

ENSEMBLE_FORMAT = "latefusion.ensemble/1"
FUSION_MODES = ("concat", "sum", "attention")


# --------------------------------------------------------------------------
# decision-level fusion
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FusionInput:
    """Per-modality probability rows laid side by side in ``modality_order``."""

    modality_order: tuple[str, ...]
    vectors: np.ndarray
    n_classes: int

    def block(self, modality: str) -> np.ndarray:
        i = self.modality_order.index(modality)
        return self.vectors[:, i * self.n_classes : (i + 1) * self.n_classes]


def assemble_fusion_input(dataset: AlignedDataset, modalities: Sequence[str] | None = None) -> FusionInput:
    names = tuple(sorted(modalities)) if modalities is not None else tuple(sorted(dataset.probabilities))
    if not names:
        raise ValueError("dataset has no probability matrices")
    missing = [m for m in names if m not in dataset.probabilities]
    if missing:
        raise ValueError(f"no class probabilities for modalities {missing}")
    blocks = [dataset.probabilities[m] for m in names]
    for m, b in zip(names, blocks):
        try:
            check_probability_rows(b)
        except ValueError as exc:
            raise ValueError(f"modality {m!r}: {exc}") from None
    return FusionInput(names, np.hstack(blocks), blocks[0].shape[1])


def default_policy_layout(n_modalities: int, n_classes: int, hidden_dim: int | None = DEFAULT_HIDDEN) -> NetworkLayout:
    return NetworkLayout(n_modalities * n_classes, n_classes, hidden_dim)


@dataclass
class PolicyEnsemble:
    members: list[TrainedModel]
    folds: FoldAssignment
    modality_order: tuple[str, ...]
    layout: NetworkLayout
    config: TrainConfig
    seed: int
    #: per member, classes with no sample in its training folds
    absent_classes: list[list[int]] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.layout.output_dim


def member_seeds(seed: int, fold: int) -> tuple[int, int]:
    """(init seed, shuffle seed) of the member held out on ``fold``."""
    return seed + fold, seed + 1000 + fold


def _member_task(args):
    x, y, folds, fold, layout, config, seed = args
    init_seed, shuffle_seed = member_seeds(seed, fold)
    tr, va = folds.train_rows(fold), folds.held_out_rows(fold)
    net = init_network(layout, init_seed)
    return train(net, (x[tr], y[tr]), (x[va], y[va]), replace(config, shuffle_seed=shuffle_seed))


def train_policy_ensemble(
    fusion_input: FusionInput,
    labels: Sequence[int],
    k: int = 8,
    layout: NetworkLayout | None = None,
    config: TrainConfig | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> PolicyEnsemble:
    """One policy network per fold: trained on the other folds, checkpointed on its own.

    Classes missing from a member's training folds are logged and recorded in
    ``absent_classes``; training still proceeds.
    """
    x = fusion_input.vectors
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (x.shape[0],):
        raise ValueError(f"{x.shape[0]} fusion rows but {y.size} labels")
    c = fusion_input.n_classes
    layout = layout or default_policy_layout(len(fusion_input.modality_order), c)
    if layout.input_dim != x.shape[1] or layout.output_dim != c:
        raise ValueError(f"layout {layout} does not fit inputs of width {x.shape[1]} with {c} classes")
    config = config or TrainConfig()
    folds = make_folds(y, k, seed=seed, stratified=True)

    absent = []
    for f in range(k):
        present = np.bincount(y[folds.train_rows(f)], minlength=c) > 0
        missing = np.flatnonzero(~present).tolist()
        if missing:
            logger.warning("policy member %d: classes %s absent from its training folds", f, missing)
        absent.append(missing)

    tasks = [(x, y, folds, f, layout, config, seed) for f in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            members = list(pool.map(_member_task, tasks))
    else:
        members = [_member_task(t) for t in tasks]
    return PolicyEnsemble(members, folds, fusion_input.modality_order, layout, config, seed, absent)


@dataclass(frozen=True)
class VoteResult:
    winners: np.ndarray
    counts: np.ndarray
    tie_broken: np.ndarray

    @property
    def votes_for_winner(self) -> np.ndarray:
        return self.counts[np.arange(self.winners.size), self.winners]


def majority_vote(votes, mean_probs: np.ndarray | None = None, n_classes: int | None = None) -> VoteResult:
    """Most frequent class per row of ``votes`` (samples x members).

    Ties go to the tied class with the largest ``mean_probs`` entry, then to
    the smallest class index.
    """
    votes = np.asarray(votes, dtype=np.int64)
    if votes.ndim == 1:
        votes = votes[:, None]
    if votes.ndim != 2 or votes.shape[1] == 0:
        raise ValueError("every vote row needs at least one vote")
    n = votes.shape[0]
    if mean_probs is not None:
        mean_probs = np.asarray(mean_probs, dtype=np.float64)
        n_classes = mean_probs.shape[1]
        if mean_probs.shape[0] != n:
            raise ValueError(f"{n} vote rows but {mean_probs.shape[0]} probability rows")
    elif n_classes is None:
        n_classes = int(votes.max()) + 1 if votes.size else 1
    if votes.size and (votes.min() < 0 or votes.max() >= n_classes):
        raise ValueError(f"vote outside [0, {n_classes})")
    counts = np.zeros((n, n_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(n), votes.shape[1]), votes.ravel()), 1)
    tied = counts == counts.max(axis=1, keepdims=True)
    tie_broken = tied.sum(axis=1) > 1
    score = np.zeros((n, n_classes)) if mean_probs is None else mean_probs
    winners = np.argmax(np.where(tied, score, -np.inf), axis=1)
    return VoteResult(winners, counts, tie_broken)


@dataclass(frozen=True)
class EnsemblePrediction:
    labels: np.ndarray
    vote: VoteResult
    member_predictions: np.ndarray
    mean_probs: np.ndarray


def policy_predict(ensemble: PolicyEnsemble, fusion_input: FusionInput | np.ndarray) -> EnsemblePrediction:
    if isinstance(fusion_input, FusionInput):
        if fusion_input.modality_order != ensemble.modality_order:
            raise ValueError(f"modality order {fusion_input.modality_order} != ensemble's {ensemble.modality_order}")
        x = fusion_input.vectors
    else:
        x = np.asarray(fusion_input, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != ensemble.layout.input_dim:
        raise ValueError(f"inputs of width {x.shape[1] if x.ndim == 2 else '?'} but ensemble expects {ensemble.layout.input_dim}")
    probs = np.stack([m.best_network.forward(x) for m in ensemble.members])
    preds = np.argmax(probs, axis=2).T
    mean = probs.mean(axis=0)
    vote = majority_vote(preds, mean)
    return EnsemblePrediction(vote.winners, vote, preds, mean)


def pipeline_ensemble(variant_labels: Sequence[Sequence[int]], variant_mean_probs: Sequence[np.ndarray]) -> VoteResult:
    """Vote across whole pipeline variants with the majority-vote tie rule."""
    if not variant_labels:
        raise ValueError("need at least one variant")
    lengths = {len(v) for v in variant_labels} | {len(p) for p in variant_mean_probs}
    if len(lengths) != 1 or len(variant_labels) != len(variant_mean_probs):
        raise ValueError("variants disagree on the number of samples")
    votes = np.stack([np.asarray(v, dtype=np.int64) for v in variant_labels], axis=1)
    mean = np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in variant_mean_probs]), axis=0)
    return majority_vote(votes, mean)


def save_ensemble(ensemble: PolicyEnsemble, out_dir: str | Path, name: str = "policy", extra: dict | None = None) -> Path:
    """Write one checkpoint per member plus an ensemble manifest; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for f, member in enumerate(ensemble.members):
        path = f"{name}_member{f}.json"
        init_seed, shuffle_seed = member_seeds(ensemble.seed, f)
        save_checkpoint(out_dir / path, member, replace(ensemble.config, shuffle_seed=shuffle_seed), {"fold": f})
        paths.append(path)
    manifest = {
        "format": ENSEMBLE_FORMAT,
        "modality_order": list(ensemble.modality_order),
        "layout": asdict(ensemble.layout),
        "config": asdict(ensemble.config),
        "seed": ensemble.seed,
        "k": ensemble.folds.k,
        "fold_assignment": ensemble.folds.assignment.tolist(),
        "absent_classes": ensemble.absent_classes,
        "members": paths,
    }
    if extra:
        manifest["extra"] = extra
    target = out_dir / f"{name}_ensemble.json"
    target.write_text(json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8")
    return target


def load_ensemble(path: str | Path) -> PolicyEnsemble:
    path = Path(path)
    d = json.loads(path.read_text(encoding="utf-8"))
    if d.get("format") != ENSEMBLE_FORMAT:
        raise ValueError(f"{path}: not a {ENSEMBLE_FORMAT} file")
    members = [load_checkpoint(path.parent / p)[0] for p in d["members"]]
    assignment = np.array(d["fold_assignment"], dtype=np.int64)
    folds = FoldAssignment(assignment.size, d["k"], assignment, d["seed"], True)
    return PolicyEnsemble(
        members,
        folds,
        tuple(d["modality_order"]),
        NetworkLayout(**d["layout"]),
        TrainConfig(**d["config"]),
        d["seed"],
        d.get("absent_classes", []),
    )


# --------------------------------------------------------------------------
# feature-level fusion
# --------------------------------------------------------------------------


def attention_weights(stacked: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Softmax over modalities of ``stacked[n, m] @ w + b[m]``; shape (n, M)."""
    scores = stacked @ w
    if b is not None:
        scores = scores + b
    return softmax(scores)


def feature_level_fuse(
    features: Mapping[str, np.ndarray] | Sequence[np.ndarray],
    mode: str = "concat",
    attention: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Merge per-modality feature matrices into one.

    Mappings are taken in sorted-key order. ``attention`` holds the learned
    ``(w, b)`` scorer; see :class:`FeatureFusionNetwork` for training it.
    """
    if isinstance(features, Mapping):
        mats = [np.asarray(features[k], dtype=np.float64) for k in sorted(features)]
    else:
        mats = [np.asarray(f, dtype=np.float64) for f in features]
    if not mats:
        raise ValueError("no feature matrices")
    if len({m.shape[0] for m in mats}) != 1:
        raise ValueError("feature matrices differ in row count")
    if mode == "concat":
        return np.hstack(mats)
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    if len({m.shape[1] for m in mats}) != 1:
        raise ValueError(f"{mode} fusion needs equal feature dims, got {[m.shape[1] for m in mats]}")
    stacked = np.stack(mats, axis=1)
    if mode == "sum":
        return stacked.sum(axis=1)
    if attention is None:
        raise ValueError("attention fusion needs scorer weights")
    w, b = attention
    alpha = attention_weights(stacked, w, b)
    return np.einsum("nm,nmd->nd", alpha, stacked)


class FeatureFusionNetwork:
    """Feature fusion plus a shallow classification head, trained jointly.

    Inputs are the per-modality feature rows concatenated in modality order
    (``n_modalities`` blocks of ``feature_dim``). For ``attention`` the
    parameters are ``[w, b] + head.params``; otherwise just the head's.
    """

    def __init__(self, mode: str, n_modalities: int, feature_dim: int, head: Network, scorer=None, init_seed=None):
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.n_modalities = n_modalities
        self.feature_dim = feature_dim
        self.init_seed = init_seed
        fused_dim = feature_dim * n_modalities if mode == "concat" else feature_dim
        if head.layout.input_dim != fused_dim:
            raise ValueError(f"head expects {head.layout.input_dim} inputs, fusion produces {fused_dim}")
        self.head = head
        if mode == "attention":
            w, b = scorer if scorer is not None else (np.zeros(feature_dim), np.zeros(n_modalities))
            self._scorer = [np.array(w, dtype=np.float64), np.array(b, dtype=np.float64)]
        else:
            self._scorer = []

    @property
    def input_dim(self) -> int:
        return self.n_modalities * self.feature_dim

    @property
    def n_classes(self) -> int:
        return self.head.n_classes

    @property
    def params(self) -> list[np.ndarray]:
        return self._scorer + self.head.params

    @params.setter
    def params(self, values: list[np.ndarray]) -> None:
        k = len(self._scorer)
        self._scorer = list(values[:k])
        self.head.params = list(values[k:])

    def copy(self) -> "FeatureFusionNetwork":
        scorer = tuple(p.copy() for p in self._scorer) if self._scorer else None
        return FeatureFusionNetwork(self.mode, self.n_modalities, self.feature_dim, self.head.copy(), scorer, self.init_seed)

    def _fuse(self, x: np.ndarray):
        stacked = x.reshape(x.shape[0], self.n_modalities, self.feature_dim)
        if self.mode == "concat":
            return x, stacked, None
        if self.mode == "sum":
            return stacked.sum(axis=1), stacked, None
        alpha = attention_weights(stacked, *self._scorer)
        return np.einsum("nm,nmd->nd", alpha, stacked), stacked, alpha

    def forward(self, x) -> np.ndarray:
        x = _check_inputs(x, self.input_dim)
        return self.head.forward(self._fuse(x)[0])

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)

    def loss_and_grad(self, x, y) -> tuple[float, list[np.ndarray]]:
        x = _check_inputs(x, self.input_dim)
        fused, stacked, alpha = self._fuse(x)
        loss, head_grads, dfused = self.head.loss_grad_input(fused, y)
        if alpha is None:
            return loss, head_grads
        dalpha = np.einsum("nd,nmd->nm", dfused, stacked)
        dscore = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        dw = np.einsum("nm,nmd->d", dscore, stacked)
        db = dscore.sum(axis=0)
        return loss, [dw, db] + head_grads

    def to_dict(self) -> dict:
        return {
            "kind": "feature_fusion",
            "mode": self.mode,
            "n_modalities": self.n_modalities,
            "feature_dim": self.feature_dim,
            "init_seed": self.init_seed,
            "scorer": [{"shape": list(p.shape), "values": p.ravel().tolist()} for p in self._scorer],
            "head": self.head.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureFusionNetwork":
        scorer = [np.array(p["values"], dtype=np.float64).reshape(p["shape"]) for p in d["scorer"]]
        return cls(d["mode"], d["n_modalities"], d["feature_dim"], Network.from_dict(d["head"]), tuple(scorer) or None, d["init_seed"])


def init_feature_fusion(
    mode: str, n_modalities: int, feature_dim: int, n_classes: int, hidden_dim: int | None, seed: int
) -> FeatureFusionNetwork:
    fused_dim = feature_dim * n_modalities if mode == "concat" else feature_dim
    head = init_network(NetworkLayout(fused_dim, n_classes, hidden_dim), seed)
    scorer = None
    if mode == "attention":
        rng = np.random.Generator(np.random.PCG64([seed, 1]))
        scorer = (glorot_uniform(rng, 1, feature_dim)[0], np.zeros(n_modalities))
    return FeatureFusionNetwork(mode, n_modalities, feature_dim, head, scorer, seed)


def network_from_dict(d: dict):
    kind = d.get("kind", "network")
    if kind == "network":
        return Network.from_dict(d)
    if kind == "feature_fusion":
        return FeatureFusionNetwork.from_dict(d)
    raise ValueError(f"unknown model kind {kind!r}")


def stack_features(dataset: AlignedDataset, modalities: Sequence[str] | None = None) -> tuple[tuple[str, ...], np.ndarray]:
    names = tuple(sorted(modalities)) if modalities is not None else tuple(sorted(dataset.features))
    if not names:
        raise ValueError("dataset has no feature matrices")
    return names, np.hstack([dataset.features[m] for m in names])


def train_feature_fusion(
    train_set: AlignedDataset,
    val_set: AlignedDataset,
    mode: str = "concat",
    hidden_dim: int | None = None,
    config: TrainConfig | None = None,
    seed: int = 0,
) -> TrainedModel:
    """Train the fusion head (and attention scorer) on fixed pre-extracted features."""
    names, x = stack_features(train_set)
    _, xv = stack_features(val_set, names)
    dims = {train_set.features[m].shape[1] for m in names}
    if mode != "concat" and len(dims) != 1:
        raise ValueError(f"{mode} fusion needs equal feature dims, got {sorted(dims)}")
    dim = train_set.features[names[0]].shape[1] if len(dims) == 1 else None
    if mode == "concat" and dim is None:
        # unequal dims: a single block spanning all features
        model = init_feature_fusion("concat", 1, x.shape[1], train_set.n_classes, hidden_dim, seed)
    else:
        model = init_feature_fusion(mode, len(names), dim, train_set.n_classes, hidden_dim, seed)
    config = config or TrainConfig()
    return train(model, (x, train_set.labels), (xv, val_set.labels), config)


def member_scores(ensemble: PolicyEnsemble, fusion_input: FusionInput, labels) -> list[float]:
    """Macro-F1 of every single member on ``fusion_input``."""
    return [
        macro_f1(np.argmax(m.best_network.forward(fusion_input.vectors), axis=1), labels, ensemble.n_classes)
        for m in ensemble.members
    ]
