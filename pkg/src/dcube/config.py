"""Run configuration, seeded random streams and checkpoint files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .classifier import Stage2Config
from .data import ToyDatasetSpec, read_tensor, write_json, write_tensor
from .denoiser import DenoiserConfig
from .stage1 import Stage1Config


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class ScheduleConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ScanConfig:
    t: int = 100
    batch: int = 256
    standardize: bool = True
    aggregate: str = "per_sample"
    lilliefors: bool = False
    use_ema: bool = True


@dataclass
class RebalanceConfig:
    target_ratio: list[float] = field(default_factory=lambda: [2.0, 2.0, 3.0])
    total_synthetic: int | None = None
    cap: int = 2000
    reference_epochs: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    data_path: str | None = None
    data: ToyDatasetSpec = field(default_factory=ToyDatasetSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=lambda: DenoiserConfig(base_channels=8))
    stage1: Stage1Config = field(default_factory=Stage1Config)
    scan: ScanConfig = field(default_factory=ScanConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    rebalance: RebalanceConfig = field(default_factory=RebalanceConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(key: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return type(default)(value)
    return value


def _merge(obj, updates: dict, prefix: str = ""):
    """Return a copy of dataclass ``obj`` with ``updates`` applied; unknown keys are rejected."""
    if not isinstance(updates, dict):
        raise ConfigError(f"{prefix.rstrip('.') or '<root>'}: expected an object")
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in updates.items():
        full = prefix + key
        if key not in names:
            raise ConfigError(f"unknown config key: {full}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            changes[key] = _merge(current, value, full + ".")
        else:
            changes[key] = _coerce(full, current, value)
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or '<root>'}: {exc}") from exc


def parse_override(text: str) -> dict:
    """``a.b.c=VALUE`` -> nested dict; VALUE is parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides=(), seed: int | None = None, base: RunConfig | None = None) -> RunConfig:
    """``base`` (defaults when omitted), then the JSON file at ``path``, then each override, then ``seed``."""
    cfg = base if base is not None else RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = _merge(cfg, data)
    for item in overrides:
        cfg = _merge(cfg, parse_override(item))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    from .classifier import INPUT_MODES

    checks = [
        ("schedule.T", cfg.schedule.T >= 1),
        ("schedule.beta_start", 0 < cfg.schedule.beta_start <= cfg.schedule.beta_end < 1),
        ("scan.t", 1 <= cfg.scan.t <= cfg.schedule.T),
        ("scan.batch", cfg.scan.batch >= 1),
        ("scan.aggregate", cfg.scan.aggregate in ("per_sample", "batch_mean")),
        ("stage1.margin", cfg.stage1.margin > 0),
        ("stage1.steps", cfg.stage1.steps >= 0),
        ("stage1.ema_alpha", 0 <= cfg.stage1.ema_alpha <= 1),
        ("stage2.selection_mode", cfg.stage2.selection_mode in ("best", "worst", "manual")),
        ("stage2.input_mode", cfg.stage2.input_mode in INPUT_MODES),
        ("stage2.lambda1", cfg.stage2.lambda1 >= 0),
        ("stage2.lambda2", cfg.stage2.lambda2 >= 0),
        ("stage2.flip_prob", 0 <= cfg.stage2.flip_prob <= 1),
        ("stage2.epochs", cfg.stage2.epochs >= 0),
        ("stage2.ema_alpha", 0 <= cfg.stage2.ema_alpha <= 1),
        ("stage2.eval_draws", cfg.stage2.eval_draws >= 1),
        ("denoiser.num_classes", cfg.denoiser.num_classes == cfg.data.num_classes),
    ]
    for key, ok in checks:
        if not ok:
            raise ConfigError(f"invalid value for {key}")
    try:
        cfg.data.validate()
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    return _merge(RunConfig(), d)


# --------------------------------------------------------------------------- random streams


def stream_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_streams(seed: int, names) -> dict[str, torch.Generator]:
    """Independent torch generators derived from one root seed, one per name."""
    return {n: torch.Generator().manual_seed(stream_seed(seed, n)) for n in names}


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(out_dir, kind: str, model: torch.nn.Module, ema_shadow: dict | None, config: RunConfig, step: int, extra=None) -> Path:
    """Write raw/EMA parameter payloads, then the manifest (last, so it never dangles)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [k for k, _ in model.named_parameters()]
    raw = dict(model.named_parameters())
    payloads = {"raw": raw}
    if ema_shadow is not None:
        payloads["ema"] = ema_shadow
    files = {}
    for tag, params in payloads.items():
        flat = np.concatenate([params[k].detach().cpu().float().numpy().ravel() for k in names]) if names else np.zeros(0, np.float32)
        write_tensor(out / f"{tag}.bin", flat)
        files[tag] = f"{tag}.bin"
    manifest = {
        "kind": kind,
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "step": int(step),
        "parameters": [{"name": k, "shape": list(raw[k].shape)} for k in names],
        "payloads": files,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "extra": extra or {},
    }
    write_json(out / "manifest.json", manifest)
    return out


def load_checkpoint(path) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    states = {}
    for tag, fname in manifest["payloads"].items():
        flat = read_tensor(root / fname)
        state, offset = {}, 0
        for entry in manifest["parameters"]:
            size = int(np.prod(entry["shape"], dtype=np.int64))
            state[entry["name"]] = torch.from_numpy(flat[offset : offset + size].copy()).reshape(entry["shape"])
            offset += size
        if offset != flat.size:
            raise ValueError(f"{root / fname}: payload has {flat.size} values, manifest describes {offset}")
        states[tag] = state
    return manifest, states


def load_params(model: torch.nn.Module, state: dict[str, torch.Tensor]) -> torch.nn.Module:
    params = dict(model.named_parameters())
    missing = set(params) - set(state)
    if missing:
        raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
    with torch.no_grad():
        for k, p in params.items():
            p.copy_(state[k])
    return model
