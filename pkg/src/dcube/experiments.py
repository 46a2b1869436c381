"""Desk-scale ablation suites.

Each suite compares a few pipeline variants per seed. Stage-1 models, scans
and stage-2 runs are cached per runner so suites that share a variant (the
last ladder row, the best selection and the (x0, random t) input mode are the
same run) only pay for it once.
"""

from __future__ import annotations

import dataclasses
import logging
import time

import numpy as np
import torch

from .classifier import Stage2Config, Stage2Result, train_stage2
from .config import ConfigError, RunConfig, make_streams, stream_seed
from .data import LabeledImages, ToyDataset, generate_toy_dataset, load_dataset, rebalance_with_synthetic
from .denoiser import Denoiser
from .diffusion import NoiseSchedule
from .diffusion import make_linear_schedule
from .gaussianity import GaussianityReport, scan_taps, select_features
from .reference import evaluate_reference, minority_recall, train_reference
from .stage1 import Stage1Config, Stage1Result, ema_model, evaluate_fid_lite, train_stage1

log = logging.getLogger(__name__)

SUITES = ("table3", "table4", "table5", "table6", "table7")

LADDER = (
    ("baseline", dict(contrastive=False, fs=False, losses=False, sub=False)),
    ("+L_Gen", dict(contrastive=True, fs=False, losses=False, sub=False)),
    ("+Fs", dict(contrastive=True, fs=True, losses=False, sub=False)),
    ("+L_Cls", dict(contrastive=True, fs=True, losses=True, sub=False)),
    ("+f_sub", dict(contrastive=True, fs=True, losses=True, sub=True)),
)

METRIC_KEYS = ("accuracy", "macro_precision", "macro_recall", "macro_f1")


def schedule_for(cfg: RunConfig) -> NoiseSchedule:
    return make_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def build_dataset(cfg: RunConfig, seed: int) -> ToyDataset:
    """Toy data from ``cfg.data``, or train/test splits read from ``cfg.data_path``."""
    if cfg.data_path is None:
        return generate_toy_dataset(cfg.data, stream_seed(seed, "data"))
    manifest, splits = load_dataset(cfg.data_path)
    missing = {"train", "test"} - set(splits)
    if missing:
        raise ConfigError(f"data_path: dataset lacks split(s) {sorted(missing)}")
    return ToyDataset(manifest.get("spec") or cfg.data, manifest.get("seed"), splits["train"], splits["test"])


def fit_denoiser(cfg: RunConfig, schedule: NoiseSchedule, train: LabeledImages, seed: int, s1: Stage1Config | None = None, log_file=None) -> Stage1Result:
    streams = make_streams(stream_seed(seed, "stage1"), ["init", "data", "pairing", "noise"])
    with torch.random.fork_rng():
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=streams["init"])))
        model = Denoiser(cfg.denoiser)
    x, y = torch.from_numpy(train.x), torch.from_numpy(train.y)
    return train_stage1(model, x, y, schedule, s1 or cfg.stage1, streams, log_file)


def fit_dcube(
    s2: Stage2Config, denoiser: Denoiser, schedule: NoiseSchedule, tap_ids, ds: ToyDataset, seed: int, log_file=None
) -> Stage2Result:
    streams = make_streams(stream_seed(seed, "stage2"), ["init", "data", "augment", "noise", "eval"])
    t = torch.from_numpy
    return train_stage2(denoiser, schedule, tap_ids, t(ds.train.x), t(ds.train.y), t(ds.test.x), t(ds.test.y), s2, streams, log_file)


def desk_config(**updates) -> RunConfig:
    """Settings used for the desk-scale suites (single CPU core, minutes per run)."""
    cfg = RunConfig()
    cfg.data = dataclasses.replace(cfg.data, difficulty=0.3, noise_level=0.2)
    cfg.stage1 = dataclasses.replace(cfg.stage1, steps=400, lr=1e-3, fid_samples=150)
    cfg.stage2 = dataclasses.replace(cfg.stage2, lr=1e-3, epochs=40, batch_size=16, eval_draws=8)
    for k, v in updates.items():
        setattr(cfg, k, v)
    return cfg


class DeskRunner:
    def __init__(self, config: RunConfig):
        self.config = config
        self.schedule = schedule_for(config)
        self._data: dict = {}
        self._stage1: dict = {}
        self._scan: dict = {}
        self._stage2: dict = {}

    # ------------------------------------------------------------------ shared pieces

    def dataset(self, seed: int) -> ToyDataset:
        if seed not in self._data:
            self._data[seed] = build_dataset(self.config, seed)
        return self._data[seed]

    def stage1(self, seed: int, contrastive: bool):
        """(EMA denoiser, fid_lite, history) for one seed and objective."""
        key = (seed, contrastive)
        if key not in self._stage1:
            ds = self.dataset(seed)
            s1 = dataclasses.replace(self.config.stage1, use_contrastive=contrastive)
            t0 = time.time()
            result = fit_denoiser(self.config, self.schedule, ds.train, seed, s1)
            ema = ema_model(result.model, result.ema)
            fid = evaluate_fid_lite(ema, self.schedule, ds.train.x, ds.train.y, s1.fid_samples, stream_seed(seed, "fid"))
            log.info("stage1 seed=%s contrastive=%s fid=%.4f (%.0fs)", seed, contrastive, fid, time.time() - t0)
            self._stage1[key] = (ema, fid, result.history)
        return self._stage1[key]

    def scan(self, seed: int, contrastive: bool = True) -> GaussianityReport:
        key = (seed, contrastive)
        if key not in self._scan:
            model, _, _ = self.stage1(seed, contrastive)
            ds = self.dataset(seed)
            sc = self.config.scan
            self._scan[key] = scan_taps(
                model,
                torch.from_numpy(ds.train.x),
                torch.from_numpy(ds.train.y),
                self.schedule,
                sc.t,
                sc.batch,
                sc.standardize,
                seed=stream_seed(seed, "scan"),
                aggregate=sc.aggregate,
                lilliefors=sc.lilliefors,
            )
        return self._scan[key]

    def taps_for(self, seed: int, selection: str, contrastive: bool = True) -> list[str]:
        if selection == "final":
            return ["out"]
        return select_features(self.scan(seed, contrastive), selection).selected_tap_ids

    def stage2(self, seed: int, contrastive: bool, selection: str, **overrides) -> dict:
        taps = self.taps_for(seed, selection, contrastive)
        s2 = dataclasses.replace(self.config.stage2, **overrides)
        key = (seed, contrastive, tuple(taps), repr(s2))
        if key not in self._stage2:
            model, _, _ = self.stage1(seed, contrastive)
            t0 = time.time()
            res = fit_dcube(s2, model, self.schedule, taps, self.dataset(seed), seed)
            log.info("stage2 seed=%s taps=%s f1=%.4f (%.0fs)", seed, taps, res.metrics["macro_f1"], time.time() - t0)
            self._stage2[key] = {"taps": taps, **{k: res.metrics[k] for k in METRIC_KEYS}, "recall": res.metrics["recall"]}
        return self._stage2[key]

    def full(self, seed: int, selection: str = "best", **overrides) -> dict:
        return self.stage2(seed, True, selection, use_cycle=True, use_cr=True, use_sub_features=True, **overrides)

    # ------------------------------------------------------------------ suites

    def table4(self, seed: int) -> list[dict]:
        rows = []
        for name, v in LADDER:
            m = self.stage2(
                seed,
                v["contrastive"],
                "best" if v["fs"] else "final",
                use_cycle=v["losses"],
                use_cr=v["losses"],
                use_sub_features=v["sub"],
            )
            rows.append({"variant": name, **m})
        return rows

    def table5(self, seed: int) -> list[dict]:
        return [
            {"variant": "L_Diff", "fid_lite": self.stage1(seed, False)[1]},
            {"variant": "L_Gen", "fid_lite": self.stage1(seed, True)[1]},
        ]

    def table6(self, seed: int) -> list[dict]:
        return [{"variant": mode, **self.full(seed, input_mode=mode)} for mode in ("x0_rand_t", "xt_t", "x0_t0")]

    def table7(self, seed: int) -> list[dict]:
        return [{"variant": f"{sel} selection", **self.full(seed, sel)} for sel in ("worst", "best")]

    def table3(self, seed: int) -> list[dict]:
        cfg = self.config
        ds = self.dataset(seed)
        k = cfg.data.num_classes
        counts = ds.train.counts(k)
        model, _, _ = self.stage1(seed, True)
        rb = cfg.rebalance
        augmented = rebalance_with_synthetic(
            ds.train, model, rb.target_ratio, self.schedule, stream_seed(seed, "synthetic"), rb.total_synthetic, rb.cap
        )
        rows = []
        for name, part in (("reference", ds.train), ("+Syn", augmented)):
            net = train_reference(part, k, rb.reference_epochs, stream_seed(seed, "reference"))
            rep = evaluate_reference(net, ds.test, k)
            rows.append(
                {
                    "variant": name,
                    "train_counts": part.counts(k),
                    **{m: getattr(rep, m) for m in METRIC_KEYS},
                    "recall": rep.recall,
                    "minority_recall": minority_recall(rep, counts),
                }
            )
        return rows

    def run(self, suite: str, seeds) -> list[dict]:
        if suite not in SUITES:
            raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
        rows = []
        for seed in seeds:
            for row in getattr(self, suite)(int(seed)):
                rows.append({"suite": suite, "seed": int(seed), **row})
        return rows


def summarize(rows: list[dict], key: str) -> dict[str, float]:
    """Mean of ``key`` per variant, in first-seen variant order."""
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r["variant"], []).append(r[key])
    return {k: float(np.mean(v)) for k, v in out.items()}


def render_table(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)"
    cols = ["seed", "variant"] + [c for c in ("fid_lite", "minority_recall", *METRIC_KEYS) if c in rows[0]]
    widths = {c: max(len(c), *(len(_fmt(r.get(c))) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines += ["  ".join(_fmt(r.get(c)).ljust(widths[c]) for c in cols) for r in rows]
    return "\n".join(lines)


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)
