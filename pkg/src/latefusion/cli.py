"""Command line entry point: ``latefusion <subcommand> ...``.

Subcommands mirror the pipeline stages (``synth``, ``denoise``,
``fuse-train``, ``predict``, ``evaluate``) plus ``run`` for the whole
manifest. Flags override the manifest; failures exit with status 2 and a
stage-tagged message on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import dataio, fusion, noise, pipeline, synth
from .metrics import evaluation_report, format_report


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides the manifest)")
    p.add_argument("--out-dir", default=None, help="output directory (overrides the manifest)")
    p.add_argument("--jobs", type=int, default=None, help="worker processes for fold training")


def _manifest(args, extra: dict | None = None) -> pipeline.PipelineManifest:
    overrides = {"seed": args.seed, "jobs": args.jobs, **(extra or {})}
    return pipeline.load_manifest(args.manifest, overrides)


def _out_dir(args, m: pipeline.PipelineManifest | None = None) -> Path:
    if args.out_dir:
        out = Path(args.out_dir)
    elif m is not None:
        out = m.resolve(m.out_dir)
    else:
        out = Path("out")
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    kwargs = {"n_samples": args.n_samples, "seed": args.seed or 0, "label_noise_rate": args.noise_rate}
    if args.n_classes is not None:
        kwargs["n_classes"] = args.n_classes
    config = synth.PRESETS[args.preset](**kwargs)
    out = _out_dir(args)
    with pipeline._Stage("synth"):
        files = synth.write_dataset(synth.generate(config), out)
        manifest = {
            "n_classes": config.n_classes,
            "seed": args.seed or 0,
            "data": {
                "labels": files["labels"],
                "modalities": {
                    m: {"probabilities": files[f"{m}.probabilities"], "features": files[f"{m}.features"]}
                    for m in config.modalities
                },
            },
            "out_dir": "run",
        }
        if args.n_test:
            test_cfg = replace(config, n_samples=args.n_test, seed=config.seed + 1)
            tfiles = synth.write_dataset(synth.generate(test_cfg, id_prefix="t"), out, prefix="test_")
            manifest["test"] = {
                "labels": tfiles["labels"],
                "modalities": {
                    m: {"probabilities": tfiles[f"{m}.probabilities"], "features": tfiles[f"{m}.features"]}
                    for m in config.modalities
                },
            }
        (out / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True), encoding="utf-8")
    print(out / "manifest.yaml")
    return 0


def cmd_denoise(args) -> int:
    m = _manifest(args, {"denoise.k": args.k, "denoise.fraction": args.fraction, "denoise.count": args.count})
    out = _out_dir(args, m)
    with pipeline._Stage("load"):
        dataset = pipeline.load_dataset(m, m.data)
    with pipeline._Stage("denoise"):
        result = pipeline.run_denoise(m, dataset)
        noise.write_noise_report(out / "noise_report.csv", result.report)
        noise.write_removed_ids(out / "removed_ids.txt", result.pruned.removed_ids)
    print(f"{len(result.report.candidates)} candidates, {len(result.pruned.removed_ids)} removed -> {out}")
    return 0


def cmd_fuse_train(args) -> int:
    m = _manifest(
        args,
        {
            "fusion.k": args.k,
            "fusion.hidden_dim": args.hidden_dim or None,
            "fusion.learning_rate": args.learning_rate,
            "fusion.epochs": args.epochs,
            "fusion.batch_size": args.batch_size,
        },
    )
    if args.hidden_dim == 0:
        m.fusion.hidden_dim = None
    out = _out_dir(args, m)
    with pipeline._Stage("load"):
        dataset = pipeline.load_dataset(m, m.data)
    with pipeline._Stage("split"):
        train, val = dataio.split_train_val(dataset, m.split)
    with pipeline._Stage("decision_fusion"):
        fz = m.fusion
        policy_set = val if fz.train_on == "validation" else train
        fin = fusion.assemble_fusion_input(policy_set)
        layout = fusion.default_policy_layout(len(fin.modality_order), m.n_classes, fz.hidden_dim)
        cfg = pipeline._train_config(fz.learning_rate, fz.epochs, fz.batch_size, fz.optimizer)
        ens = fusion.train_policy_ensemble(fin, policy_set.labels, fz.k, layout, cfg, m.seeds()["decision_fusion"], m.jobs)
        path = fusion.save_ensemble(ens, out, "policy")
    print(path)
    return 0


def _parse_named(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            raise SystemExit(f"expected NAME=PATH, got {item!r}")
        out[name] = path
    return out


def cmd_predict(args) -> int:
    with pipeline._Stage("load"):
        ens = fusion.load_ensemble(args.ensemble)
        files = _parse_named(args.probs)
        mats = {n: dataio.load_probability_matrix(p, ens.n_classes) for n, p in files.items()}
        dataset = dataio.align_modalities(mats, n_classes=ens.n_classes)
        order = list(mats[sorted(mats)[0]].ids)
    with pipeline._Stage("predict"):
        pred = fusion.policy_predict(ens, fusion.assemble_fusion_input(dataset))
        target = Path(args.output)
        target.parent.mkdir(parents=True, exist_ok=True)
        pipeline.write_predictions(target, dataset.ids, pred, order)
    print(target)
    return 0


def cmd_evaluate(args) -> int:
    with pipeline._Stage("evaluate"):
        preds = pipeline.read_predictions(args.predictions)
        labels = dataio.load_labels(args.labels)
        missing = sorted(set(labels) ^ set(preds))
        if missing:
            raise ValueError(f"predictions and labels cover different ids (e.g. {missing[0]!r})")
        ids = sorted(labels)
        report = format_report(
            evaluation_report(np.array([preds[i] for i in ids]), np.array([labels[i] for i in ids]), args.n_classes)
        )
        if args.output:
            Path(args.output).write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return 0


def cmd_run(args) -> int:
    extra = {"denoise.enabled": True} if args.denoise else {}
    if args.no_denoise:
        extra["denoise.enabled"] = False
    m = _manifest(args, extra)
    result = pipeline.run_pipeline(m, _out_dir(args, m))
    print(result.out_dir / "report.json")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latefusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multimodal dataset and manifest")
    p.add_argument("--preset", choices=sorted(synth.PRESETS), default="complementary")
    p.add_argument("--n-samples", type=int, default=20000)
    p.add_argument("--n-test", type=int, default=5000, help="size of the separate labelled test set (0 for none)")
    p.add_argument("--n-classes", type=int, default=None)
    p.add_argument("--noise-rate", type=float, default=0.0)
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("denoise", help="rank likely label errors and write the pruning list")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--count", type=int, default=None)
    _common(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("fuse-train", help="train the k-fold policy-network ensemble")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None, help="0 for a 1-layer policy")
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    _common(p)
    p.set_defaults(func=cmd_fuse_train)

    p = sub.add_parser("predict", help="majority-vote prediction with a trained ensemble")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--probs", action="append", default=[], metavar="NAME=PATH", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="macro-F1/accuracy/confusion of a prediction file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--n-classes", type=int, required=True)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="run the full manifest")
    p.add_argument("--manifest", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--denoise", action="store_true")
    g.add_argument("--no-denoise", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except pipeline.PipelineError as exc:
        print(f"latefusion {args.command}: error {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"latefusion {args.command}: error [config] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
