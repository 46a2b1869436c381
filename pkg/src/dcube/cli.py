"""Command-line entry point: ``dcube <subcommand> [--config PATH] [--seed N] [--out DIR] [--override KEY=VALUE ...]``.

Every run reads one JSON config (defaults merged with the file and then with
each override), writes its artifacts under ``--out`` and finishes with a JSON
report. Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .classifier import DCube, FrozenDriftError, evaluate
from .config import ConfigError, RunConfig, config_from_dict, load_checkpoint, load_config, load_params, save_checkpoint, stream_seed
from .data import LabeledImages, compute_metrics, load_dataset, read_labels, save_dataset, write_json
from .denoiser import Denoiser, available_taps, sample_class_conditional
from .experiments import SUITES, DeskRunner, build_dataset, desk_config, fit_dcube, fit_denoiser, render_table, schedule_for
from .gaussianity import GaussianityReport, scan_taps, select_features
from .stage1 import NumericalError, evaluate_fid_lite

log = logging.getLogger("dcube")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# --------------------------------------------------------------------------- helpers


def _config(args, base: RunConfig | None = None) -> RunConfig:
    """Defaults (or a checkpoint's stored config), then --config, --override and --seed."""
    return load_config(args.config, args.override, args.seed, base)


def load_denoiser(path, payload: str = "ema") -> tuple[Denoiser, RunConfig, dict]:
    manifest, states = load_checkpoint(path)
    if manifest["kind"] != "denoiser":
        raise ConfigError(f"{path}: expected a denoiser checkpoint, found {manifest['kind']!r}")
    cfg = config_from_dict(manifest["config"])
    model = load_params(Denoiser(cfg.denoiser), states[payload if payload in states else "raw"])
    model.eval()
    return model, cfg, manifest


def load_dcube(path, payload: str = "ema") -> tuple[DCube, Denoiser, RunConfig, dict]:
    manifest, states = load_checkpoint(path)
    if manifest["kind"] != "dcube":
        raise ConfigError(f"{path}: expected a classifier checkpoint, found {manifest['kind']!r}")
    cfg = config_from_dict(manifest["config"])
    extra = manifest["extra"]
    denoiser, _, _ = load_denoiser(extra["denoiser_checkpoint"])
    dcube = DCube(cfg.denoiser, extra["tap_ids"], cfg.denoiser.num_classes, extra["use_sub_features"])
    load_params(dcube, states[payload])
    dcube.eval()
    return dcube, denoiser, cfg, manifest


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report(out: Path, name: str, report: dict, table: str | None = None) -> None:
    write_json(out / f"{name}.json", report)
    if table is not None:
        (out / f"{name}.txt").write_text(table + "\n")
        print(table)
    print(f"wrote {out / (name + '.json')}")


def _split(ds, name: str) -> LabeledImages:
    return {"train": ds.train, "test": ds.test}[name]


# --------------------------------------------------------------------------- subcommands


def cmd_train_diffusion(args) -> int:
    cfg = _config(args)
    out = _out(args, "runs/diffusion")
    schedule = schedule_for(cfg)
    ds = build_dataset(cfg, cfg.seed)
    with open(out / "train_log.jsonl", "w") as logf:
        result = fit_denoiser(cfg, schedule, ds.train, cfg.seed, log_file=logf)
    last = result.history[-1] if result.history else {}
    report = {"step": result.step, "final": last, "train_counts": ds.train.counts(cfg.data.num_classes)}
    if args.fid:
        model = Denoiser(cfg.denoiser)
        model.load_state_dict(result.model.state_dict())
        result.ema.copy_to(model)
        model.eval()
        report["fid_lite"] = evaluate_fid_lite(model, schedule, ds.train.x, ds.train.y, cfg.stage1.fid_samples, stream_seed(cfg.seed, "fid"))
    save_checkpoint(out / "checkpoint", "denoiser", result.model, result.ema.shadow, cfg, result.step, {"report": report})
    _report(out, "report", report)
    return EXIT_OK


def cmd_scan(args) -> int:
    model, stored, _ = load_denoiser(args.checkpoint, "ema" if not args.raw else "raw")
    cfg = _config(args, stored)
    out = _out(args, "runs/scan")
    ds = build_dataset(cfg, cfg.seed)
    sc = cfg.scan
    report = scan_taps(
        model,
        torch.from_numpy(ds.train.x),
        torch.from_numpy(ds.train.y),
        schedule_for(cfg),
        sc.t,
        sc.batch,
        sc.standardize,
        seed=stream_seed(cfg.seed, "scan"),
        aggregate=sc.aggregate,
        lilliefors=sc.lilliefors,
    )
    _report(out, "gaussianity", report.to_dict(), report.render())
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    denoiser, stored, _ = load_denoiser(args.checkpoint)
    cfg = _config(args, stored)
    out = _out(args, "runs/classifier")
    s2 = cfg.stage2
    if s2.selection_mode == "manual":
        known = available_taps(cfg.denoiser.depth)
        taps = list(s2.manual_taps)
        if not taps or set(taps) - set(known):
            raise ConfigError(f"stage2.manual_taps: must be a non-empty subset of {known}")
    else:
        if args.report is None:
            raise ConfigError("stage2.selection_mode: best/worst selection needs --report from the scan subcommand")
        report = GaussianityReport.from_dict(json.loads(Path(args.report).read_text()))
        try:
            taps = select_features(report, s2.selection_mode).selected_tap_ids
        except ValueError as exc:
            raise ConfigError(f"stage2.selection_mode: {exc}") from exc
    ds = build_dataset(cfg, cfg.seed)
    with open(out / "train_log.jsonl", "w") as logf:
        result = fit_dcube(s2, denoiser, schedule_for(cfg), taps, ds, cfg.seed, logf)
    extra = {
        "denoiser_checkpoint": str(Path(args.checkpoint).resolve()),
        "tap_ids": taps,
        "use_sub_features": s2.use_sub_features,
    }
    save_checkpoint(out / "checkpoint", "dcube", result.dcube, result.ema.shadow, cfg, result.steps, extra)
    metrics = {"tap_ids": taps, "steps": result.steps, **result.metrics}
    _report(out, "metrics", metrics, render_table([{"seed": cfg.seed, "variant": "+".join(taps), **result.metrics}]))
    return EXIT_OK


def cmd_generate(args) -> int:
    model, stored, _ = load_denoiser(args.checkpoint)
    cfg = _config(args, stored)
    out = _out(args, "runs/generated")
    k = cfg.denoiser.num_classes
    if not 0 <= args.cls < k:
        raise ConfigError(f"class: {args.cls} outside [0, {k})")
    if args.count < 0:
        raise ConfigError("count: must be non-negative")
    x = sample_class_conditional(model, args.count, args.cls, schedule_for(cfg), seed=stream_seed(cfg.seed, f"generate/{args.cls}"))
    y = np.full(args.count, args.cls, dtype=np.int64)
    shard = LabeledImages(x.numpy().astype(np.float32), y, np.ones(args.count, dtype=bool))
    save_dataset(out, {"synthetic": shard}, spec={"checkpoint": str(Path(args.checkpoint).resolve()), "class": args.cls}, seed=cfg.seed)
    print(f"wrote {args.count} samples of class {args.cls} to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = _out(args, "runs/evaluate")
    if args.dataset is not None:
        _, splits = load_dataset(args.dataset)
        if args.split not in splits:
            raise ConfigError(f"split: dataset has no split {args.split!r}")
        data = splits[args.split]
    else:
        data = None
    if args.predictions is not None:
        if data is None:
            raise ConfigError("dataset: --predictions needs --dataset for the ground truth")
        pred = _read_predictions(args.predictions)
        if pred.shape != data.y.shape:
            raise ConfigError(f"predictions: {pred.size} labels for {data.y.size} samples")
        k = args.num_classes or int(max(pred.max(initial=0), data.y.max(initial=0)) + 1)
        metrics = compute_metrics(pred, data.y, k).to_dict()
    else:
        if args.checkpoint is None:
            raise ConfigError("checkpoint: evaluate needs --checkpoint or --predictions")
        dcube, denoiser, stored, _ = load_dcube(args.checkpoint)
        cfg = _config(args, stored)
        if data is None:
            data = _split(build_dataset(cfg, cfg.seed), args.split)
        metrics = evaluate(
            dcube,
            denoiser,
            torch.from_numpy(data.x),
            data.y,
            schedule_for(cfg),
            cfg.stage2.input_mode,
            stream_seed(cfg.seed, "evaluate"),
            cfg.stage2.eval_draws,
        )
    _report(out, "metrics", metrics, render_table([{"seed": args.seed if args.seed is not None else "-", "variant": args.split, **metrics}]))
    return EXIT_OK


def _read_predictions(path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".json":
        return np.asarray(json.loads(p.read_text()), dtype=np.int64)
    return read_labels(p).astype(np.int64)


def cmd_ablation(args) -> int:
    cfg = _config(args, desk_config())
    out = _out(args, f"runs/ablation_{args.suite}")
    seeds = args.seeds or [cfg.seed]
    runner = DeskRunner(cfg)
    rows = runner.run(args.suite, seeds)
    report = {"suite": args.suite, "seeds": seeds, "config": cfg.to_dict(), "rows": rows}
    _report(out, args.suite, report, render_table(rows))
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file merged over the defaults")
    common.add_argument("--seed", type=int, help="root seed (config key: seed)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dcube", description="Diffusion features for imbalanced image classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-diffusion", parents=[common], help="stage 1: train the class-conditional denoiser")
    p.add_argument("--fid", action="store_true", help="also report FID-lite of EMA samples")
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("scan", parents=[common], help="Gaussianity scan of the denoiser taps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--raw", action="store_true", help="scan raw instead of EMA weights")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("train-classifier", parents=[common], help="stage 2: train the classifier on frozen features")
    p.add_argument("--checkpoint", required=True, help="denoiser checkpoint directory")
    p.add_argument("--report", help="gaussianity.json from the scan subcommand")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("generate", parents=[common], help="sample a synthetic shard for one class")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="metrics for a classifier checkpoint or a predictions file")
    p.add_argument("--checkpoint", help="classifier checkpoint directory")
    p.add_argument("--dataset", help="dataset directory (defaults to the run's own data)")
    p.add_argument("--split", default="test")
    p.add_argument("--predictions", help="predicted labels (.json list or raw u16 file)")
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablation", parents=[common], help="run a desk-scale ablation suite (desk settings are the base config)")
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.snapshot:
            print(json.dumps(exc.snapshot, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except FrozenDriftError as exc:
        print(f"frozen model changed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
