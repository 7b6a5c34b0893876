"""Manifest-driven end-to-end run.

Stages, in order: load -> split -> denoise -> unimodal -> feature_fusion ->
decision_fusion -> variants -> evaluate. Every stage seed is derived from the
manifest's single ``seed`` by a fixed offset (see :data:`SEED_OFFSETS`), so a
report's config echo is enough to reproduce the run.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import dataio, fusion, noise
from .dataio import AlignedDataset, SplitSpec
from .metrics import accuracy, evaluation_report, format_report, macro_f1
from .shallow_nn import DEFAULT_HIDDEN, TrainConfig, save_checkpoint

logger = logging.getLogger(__name__)

REPORT_FORMAT = "latefusion.report/1"
STAGES = ("load", "split", "denoise", "unimodal", "feature_fusion", "decision_fusion", "variants", "evaluate")
SEED_OFFSETS = {"split": 0, "denoise": 1, "feature_fusion": 2, "decision_fusion": 3, "variants": 100}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------


@dataclass
class ModalityFiles:
    probabilities: str | None = None
    features: str | None = None


@dataclass
class DataFiles:
    modalities: dict[str, ModalityFiles]
    labels: str | None = None


@dataclass
class DenoiseSpec:
    enabled: bool = False
    k: int = 4
    fraction: float | None = 0.10
    count: int | None = None
    modalities: list[str] | None = None
    #: "full": cross-validate over every labelled sample; "train": the training split only
    scope: str = "full"
    learning_rate: float = 0.01
    epochs: int = 40
    batch_size: int = 64


@dataclass
class FeatureFusionSpec:
    enabled: bool = True
    mode: str = "concat"
    hidden_dim: int | None = None
    learning_rate: float = 0.01
    epochs: int = 40
    batch_size: int = 64


@dataclass
class FusionSpec:
    k: int = 8
    hidden_dim: int | None = DEFAULT_HIDDEN
    learning_rate: float = 0.01
    epochs: int = 40
    batch_size: int = 64
    optimizer: str = "adam"
    #: "validation" trains the policy on the validation split; "train" on the (cleaned) training split
    train_on: str = "validation"


@dataclass
class VariantSpec:
    name: str
    hidden_dim: int | None = DEFAULT_HIDDEN
    learning_rate: float | None = None
    batch_size: int | None = None
    epochs: int | None = None
    #: modality -> alternative probability file (e.g. a scorer trained on denoised data)
    probabilities: dict[str, str] = field(default_factory=dict)
    #: the same modalities' alternative files for the test set
    test_probabilities: dict[str, str] = field(default_factory=dict)


@dataclass
class PipelineManifest:
    data: DataFiles
    n_classes: int
    test: DataFiles | None = None
    class_codes: list[Any] | None = None
    seed: int = 0
    split: SplitSpec = field(default_factory=SplitSpec)
    denoise: DenoiseSpec = field(default_factory=DenoiseSpec)
    feature_fusion: FeatureFusionSpec = field(default_factory=FeatureFusionSpec)
    fusion: FusionSpec = field(default_factory=FusionSpec)
    variants: list[VariantSpec] = field(default_factory=list)
    out_dir: str = "out"
    jobs: int = 1
    #: directory that relative paths are resolved against
    base_dir: str = "."

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def seeds(self) -> dict[str, int]:
        return {stage: self.seed + off for stage, off in SEED_OFFSETS.items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["split"] = {"train_fraction": self.split.train_fraction}
        return d


def _build(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ValueError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**raw)


def _data_files(raw: Any, where: str) -> DataFiles:
    if not isinstance(raw, dict) or "modalities" not in raw:
        raise ValueError(f"{where}: needs a 'modalities' mapping")
    unknown = set(raw) - {"modalities", "labels"}
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    mods = {str(name): _build(ModalityFiles, spec, f"{where}.modalities.{name}") for name, spec in raw["modalities"].items()}
    if not mods:
        raise ValueError(f"{where}: no modalities")
    return DataFiles(mods, raw.get("labels"))


def manifest_from_dict(raw: dict, base_dir: str | Path = ".") -> PipelineManifest:
    raw = dict(raw)
    known = {f.name for f in fields(PipelineManifest)} - {"base_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"manifest: unknown keys {sorted(unknown)}")
    for key in ("data", "n_classes"):
        if key not in raw:
            raise ValueError(f"manifest: missing required key {key!r}")
    split_raw = raw.get("split") or {}
    split = SplitSpec(train_fraction=float(split_raw.get("train_fraction", 0.9)), seed=int(raw.get("seed", 0)) + SEED_OFFSETS["split"])
    if set(split_raw) - {"train_fraction"}:
        raise ValueError("manifest.split: only 'train_fraction' is configurable (seed derives from the global seed)")
    variants = [_build(VariantSpec, v, f"variants[{i}]") for i, v in enumerate(raw.get("variants") or [])]
    m = PipelineManifest(
        data=_data_files(raw["data"], "data"),
        n_classes=int(raw["n_classes"]),
        test=None if raw.get("test") is None else _data_files(raw["test"], "test"),
        class_codes=raw.get("class_codes"),
        seed=int(raw.get("seed", 0)),
        split=split,
        denoise=_build(DenoiseSpec, raw.get("denoise"), "denoise"),
        feature_fusion=_build(FeatureFusionSpec, raw.get("feature_fusion"), "feature_fusion"),
        fusion=_build(FusionSpec, raw.get("fusion"), "fusion"),
        variants=variants,
        out_dir=str(raw.get("out_dir", "out")),
        jobs=int(raw.get("jobs", 1)),
        base_dir=str(base_dir),
    )
    validate_manifest(m)
    return m


def validate_manifest(m: PipelineManifest) -> None:
    if m.n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if m.class_codes is not None and len(m.class_codes) != m.n_classes:
        raise ValueError(f"class_codes has {len(m.class_codes)} entries for {m.n_classes} classes")
    if m.fusion.train_on not in ("validation", "train"):
        raise ValueError(f"fusion.train_on must be 'validation' or 'train', got {m.fusion.train_on!r}")
    if m.denoise.scope not in ("full", "train"):
        raise ValueError(f"denoise.scope must be 'full' or 'train', got {m.denoise.scope!r}")
    if m.feature_fusion.mode not in fusion.FUSION_MODES:
        raise ValueError(f"feature_fusion.mode must be one of {fusion.FUSION_MODES}")
    if m.data.labels is None:
        raise ValueError("data.labels is required")
    names = [v.name for v in m.variants]
    if len(set(names)) != len(names):
        raise ValueError("variant names must be unique")
    for v in m.variants:
        if m.test is not None and set(v.probabilities) != set(v.test_probabilities):
            raise ValueError(f"variant {v.name!r}: probabilities and test_probabilities must cover the same modalities")


def load_manifest(path: str | Path, overrides: dict | None = None) -> PipelineManifest:
    """Read a YAML (or JSON) manifest; ``overrides`` replace top-level keys or
    dotted ``section.key`` entries before validation."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, leaf = key.partition(".")
        if leaf:
            raw.setdefault(section, {})
            raw[section] = {**(raw[section] or {}), leaf: value}
        else:
            raw[key] = value
    return manifest_from_dict(raw, path.parent)


def dump_manifest(m: PipelineManifest, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(m.to_dict(), sort_keys=True), encoding="utf-8")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def load_dataset(m: PipelineManifest, files: DataFiles, require_labels: bool = True) -> AlignedDataset:
    probs, feats = {}, {}
    for name, spec in files.modalities.items():
        if spec.probabilities:
            probs[name] = dataio.load_probability_matrix(m.resolve(spec.probabilities), m.n_classes)
        if spec.features:
            feats[name] = dataio.load_feature_matrix(m.resolve(spec.features))
    labels = None
    if files.labels:
        labels = dataio.load_labels(m.resolve(files.labels))
    elif require_labels:
        raise ValueError("labels file required")
    return dataio.align_modalities(probs, feats, labels, n_classes=m.n_classes)


def file_order(m: PipelineManifest, files: DataFiles) -> list[str]:
    """Ids in the row order of the first modality file (prediction output order)."""
    name = sorted(files.modalities)[0]
    spec = files.modalities[name]
    return dataio.read_id_order(m.resolve(spec.probabilities or spec.features))


def _train_config(lr: float, epochs: int, batch_size: int, optimizer: str = "adam") -> TrainConfig:
    return TrainConfig(learning_rate=lr, epochs=epochs, batch_size=batch_size, optimizer=optimizer)


def _scores(preds, labels, n_classes: int) -> dict:
    return {
        "macro_f1": round(macro_f1(preds, labels, n_classes), 6),
        "accuracy": round(accuracy(preds, labels), 6),
    }


def write_predictions(path: Path, ids, prediction: fusion.EnsemblePrediction | fusion.VoteResult, order: list[str] | None = None) -> None:
    vote = prediction.vote if isinstance(prediction, fusion.EnsemblePrediction) else prediction
    rows = {sid: i for i, sid in enumerate(ids)}
    order = list(ids) if order is None else order
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "predicted_label", "votes_for_winner", "tie_broken"])
        for sid in order:
            i = rows[sid]
            w.writerow([sid, int(vote.winners[i]), int(vote.votes_for_winner[i]), str(bool(vote.tie_broken[i])).lower()])


def read_predictions(path: str | Path) -> dict[str, int]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return {r["id"]: int(r["predicted_label"]) for r in csv.DictReader(fh)}


def write_submission(path: Path, ids, winners, order: list[str], codes: list | None) -> None:
    rows = {sid: i for i, sid in enumerate(ids)}
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "predicted_label"])
        for sid in order:
            lab = int(winners[rows[sid]])
            w.writerow([sid, codes[lab] if codes else lab])


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    report: dict
    out_dir: Path
    train: AlignedDataset
    val: AlignedDataset
    test: AlignedDataset | None
    ensemble: fusion.PolicyEnsemble
    denoise: noise.DenoiseResult | None = None


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        logger.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, f"{type(exc).__name__}: {exc}") from exc
        return False


def run_denoise(m: PipelineManifest, dataset: AlignedDataset) -> noise.DenoiseResult:
    d = m.denoise
    cfg = _train_config(d.learning_rate, d.epochs, d.batch_size)
    return noise.denoise(dataset, d.k, d.fraction, d.count, d.modalities, None, cfg, m.seeds()["denoise"], m.jobs)


def run_pipeline(m: PipelineManifest, out_dir: str | Path | None = None) -> RunResult:
    """Execute every stage and write all artifacts under ``out_dir``.

    Raises :class:`PipelineError` tagged with the failing stage; artifacts of
    completed stages stay on disk.
    """
    out = Path(out_dir) if out_dir is not None else m.resolve(m.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = m.seeds()
    c = m.n_classes
    artifacts: dict[str, Any] = {}
    metrics: dict[str, Any] = {}
    sizes: dict[str, int] = {}
    denoise_result = None

    with _Stage("load"):
        full = load_dataset(m, m.data)
        test = load_dataset(m, m.test, require_labels=False) if m.test else None
        test_order = file_order(m, m.test) if m.test else None
        sizes["labelled"] = len(full)
        if test is not None:
            sizes["test"] = len(test)

    with _Stage("split"):
        train, val = dataio.split_train_val(full, m.split)
        sizes["train"], sizes["validation"] = len(train), len(val)
        with (out / "split.csv").open("w", encoding="utf-8") as fh:
            fh.write("id,subset\n")
            val_ids = set(val.ids)
            for sid in full.ids:
                fh.write(f"{sid},{'validation' if sid in val_ids else 'train'}\n")
        artifacts["split"] = "split.csv"

    with _Stage("denoise"):
        train_clean = train
        if m.denoise.enabled:
            scope = full if m.denoise.scope == "full" else train
            denoise_result = run_denoise(m, scope)
            removed = [sid for sid in denoise_result.pruned.removed_ids if sid in set(train.ids)]
            train_clean = train.drop_ids(removed)
            noise.write_noise_report(out / "noise_report.csv", denoise_result.report)
            noise.write_removed_ids(out / "removed_ids.txt", removed)
            artifacts["noise_report"] = "noise_report.csv"
            artifacts["removed_ids"] = "removed_ids.txt"
            sizes["noise_candidates"] = len(denoise_result.report.candidates)
            sizes["removed"] = len(removed)
            sizes["train_after_denoise"] = len(train_clean)

    labelled_test = test is not None and test.labels is not None

    with _Stage("unimodal"):
        if labelled_test:
            metrics["unimodal"] = {
                name: _scores(np.argmax(p, axis=1), test.labels, c) for name, p in test.probabilities.items()
            }

    with _Stage("feature_fusion"):
        ff = m.feature_fusion
        if ff.enabled and train_clean.features:
            cfg = _train_config(ff.learning_rate, ff.epochs, ff.batch_size)
            trained = fusion.train_feature_fusion(train_clean, val, ff.mode, ff.hidden_dim, replace(cfg, shuffle_seed=seeds["feature_fusion"]), seeds["feature_fusion"])
            save_checkpoint(out / "feature_fusion.json", trained, replace(cfg, shuffle_seed=seeds["feature_fusion"]), {"mode": ff.mode})
            artifacts["feature_fusion_checkpoint"] = "feature_fusion.json"
            entry = {"best_epoch": trained.best_epoch, "best_val_macro_f1": round(trained.best_val_score, 6)}
            if labelled_test and test.features:
                _, xt = fusion.stack_features(test, sorted(train_clean.features))
                entry.update(_scores(np.argmax(trained.best_network.forward(xt), axis=1), test.labels, c))
            metrics["feature_fusion"] = entry

    fz = m.fusion
    policy_set = val if fz.train_on == "validation" else train_clean

    def train_policy(dataset: AlignedDataset, hidden_dim, lr, epochs, batch_size, seed):
        fin = fusion.assemble_fusion_input(dataset)
        layout = fusion.default_policy_layout(len(fin.modality_order), c, hidden_dim)
        cfg = _train_config(lr, epochs, batch_size, fz.optimizer)
        return fusion.train_policy_ensemble(fin, dataset.labels, fz.k, layout, cfg, seed, m.jobs)

    with _Stage("decision_fusion"):
        ensemble = train_policy(policy_set, fz.hidden_dim, fz.learning_rate, fz.epochs, fz.batch_size, seeds["decision_fusion"])
        artifacts["policy_ensemble"] = fusion.save_ensemble(ensemble, out, "policy").name
        entry = {
            "trained_on": fz.train_on,
            "members_best_epoch": [mem.best_epoch for mem in ensemble.members],
            "members_best_val_macro_f1": [round(mem.best_val_score, 6) for mem in ensemble.members],
        }
        prediction = None
        if test is not None:
            prediction = fusion.policy_predict(ensemble, fusion.assemble_fusion_input(test))
            write_predictions(out / "predictions.csv", test.ids, prediction, test_order)
            write_submission(out / "submission.csv", test.ids, prediction.labels, test_order, m.class_codes)
            artifacts["predictions"] = "predictions.csv"
            artifacts["submission"] = "submission.csv"
            if labelled_test:
                entry.update(_scores(prediction.labels, test.labels, c))
                entry["members_macro_f1"] = [
                    round(macro_f1(prediction.member_predictions[:, j], test.labels, c), 6)
                    for j in range(prediction.member_predictions.shape[1])
                ]
                entry["ties_broken"] = int(prediction.vote.tie_broken.sum())
        metrics["decision_fusion"] = entry

    with _Stage("variants"):
        if m.variants:
            if test is None:
                raise ValueError("variants need a test set to ensemble over")
            variant_labels, variant_probs, variant_entries = [], [], {}
            for i, v in enumerate(m.variants):
                vset, vtest = policy_set, test
                if v.probabilities:
                    vset = _override_probabilities(m, policy_set, v.probabilities)
                    vtest = _override_probabilities(m, test, v.test_probabilities)
                ens = train_policy(
                    vset,
                    v.hidden_dim,
                    v.learning_rate or fz.learning_rate,
                    v.epochs or fz.epochs,
                    v.batch_size or fz.batch_size,
                    seeds["variants"] + 100 * i,
                )
                fusion.save_ensemble(ens, out, f"variant_{v.name}")
                pred = fusion.policy_predict(ens, fusion.assemble_fusion_input(vtest))
                variant_labels.append(pred.labels)
                variant_probs.append(pred.mean_probs)
                variant_entries[v.name] = _scores(pred.labels, test.labels, c) if labelled_test else {}
            vote = fusion.pipeline_ensemble(variant_labels, variant_probs)
            write_predictions(out / "ensemble_predictions.csv", test.ids, vote, test_order)
            artifacts["ensemble_predictions"] = "ensemble_predictions.csv"
            entry = {"variants": variant_entries}
            if labelled_test:
                entry.update(_scores(vote.winners, test.labels, c))
            metrics["variant_ensemble"] = entry

    with _Stage("evaluate"):
        if labelled_test and prediction is not None:
            final = vote.winners if m.variants else prediction.labels
            (out / "evaluation.json").write_text(format_report(evaluation_report(final, test.labels, c)), encoding="utf-8")
            artifacts["evaluation"] = "evaluation.json"
        report = {
            "format": REPORT_FORMAT,
            "stages": list(STAGES),
            "seed": m.seed,
            "seeds": seeds,
            "config": m.to_dict(),
            "sizes": sizes,
            "metrics": metrics,
            "artifacts": artifacts,
        }
        _dump_json(out / "report.json", report)

    return RunResult(report, out, train_clean, val, test, ensemble, denoise_result)


def _override_probabilities(m: PipelineManifest, dataset: AlignedDataset, files: dict[str, str]) -> AlignedDataset:
    probs = dict(dataset.probabilities)
    for name, path in files.items():
        mat = dataio.load_probability_matrix(m.resolve(path), m.n_classes)
        pos = {sid: i for i, sid in enumerate(mat.ids)}
        missing = [sid for sid in dataset.ids if sid not in pos]
        if missing:
            raise ValueError(f"{path}: no row for id {missing[0]!r}")
        probs[name] = mat.values[[pos[sid] for sid in dataset.ids]]
    return AlignedDataset(dataset.ids, dataset.labels, probs, dataset.features, dataset.n_classes)
