"""Small class-conditional U-Net noise predictor with named feature taps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, reverse_step


def available_taps(depth: int) -> list[str]:
    return [f"enc{i}" for i in range(depth)] + ["mid"] + [f"dec{i}" for i in reversed(range(depth))] + ["out"]


@dataclass
class DenoiserConfig:
    image_size: tuple[int, int, int] = (1, 32, 32)
    num_classes: int = 3
    base_channels: int = 16
    depth: int = 3
    channel_mults: tuple[int, ...] = (1, 2, 2)
    mid_mult: int = 4
    time_embed_dim: int = 64
    class_embed_dim: int = 64
    tap_ids: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.channel_mults = tuple(int(v) for v in self.channel_mults)
        if not self.tap_ids:
            self.tap_ids = tuple(available_taps(self.depth))
        self.tap_ids = tuple(self.tap_ids)
        if len(self.channel_mults) != self.depth:
            raise ValueError(f"channel_mults needs {self.depth} entries, got {len(self.channel_mults)}")
        _, h, w = self.image_size
        if h % (2**self.depth) or w % (2**self.depth):
            raise ValueError(f"image size {h}x{w} is not divisible by 2**depth={2**self.depth}")
        if len(set(self.tap_ids)) != len(self.tap_ids):
            raise ValueError("tap_ids must be unique")
        unknown = set(self.tap_ids) - set(available_taps(self.depth))
        if unknown:
            raise ValueError(f"unknown tap ids: {sorted(unknown)}")
        if "mid" not in self.tap_ids:
            raise ValueError("tap_ids must include the 'mid' bottleneck tap")

    def to_dict(self) -> dict:
        return asdict(self)

    def tap_shape(self, tap_id: str) -> tuple[int, int, int]:
        """(channels, height, width) of a tap's activation for one sample."""
        _, h, w = self.image_size
        c = self.base_channels
        if tap_id == "out":
            return self.image_size
        if tap_id == "mid":
            s = 2**self.depth
            return (c * self.mid_mult, h // s, w // s)
        i = int(tap_id[3:])
        return (c * self.channel_mults[i], h // 2**i, w // 2**i)


class DenoiserOutput(NamedTuple):
    eps_hat: torch.Tensor
    taps: dict[str, torch.Tensor]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def class_probs(cond: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Normalize a hard (integer labels) or soft (N x K probabilities) condition to N x K."""
    if not torch.is_floating_point(cond):
        cond = cond.long().reshape(-1)
        if cond.numel() and (int(cond.min()) < 0 or int(cond.max()) >= num_classes):
            raise ValueError(f"class labels must lie in [0, {num_classes - 1}]")
        return F.one_hot(cond, num_classes)
    if cond.dim() != 2 or cond.shape[1] != num_classes:
        raise ValueError(f"soft condition must have shape (N, {num_classes}), got {tuple(cond.shape)}")
    with torch.no_grad():
        if bool(torch.any(cond < 0)) or bool(torch.any((cond.sum(1) - 1).abs() > 1e-6)):
            raise ValueError("soft condition rows must be nonnegative and sum to 1")
    return cond


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        # scale/shift after the norm; an additive bias before it would be normalized away
        scale, shift = self.emb(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.conv2(F.silu(self.norm2(h) * (1 + scale) + shift))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """U-Net predicting the injected noise.

    Every encoder stage, the bottleneck, every decoder stage and the output
    projection ("out", identical to ``eps_hat``) is a named tap; ``forward``
    returns the configured subset alongside ``eps_hat``.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        cfg = config
        c_img = cfg.image_size[0]
        c = cfg.base_channels
        emb = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.class_embed = nn.Parameter(torch.randn(cfg.num_classes, cfg.class_embed_dim) * 0.5)
        self.class_proj = nn.Linear(cfg.class_embed_dim, emb)

        widths = [c * m for m in cfg.channel_mults]
        self.stem = nn.Conv2d(c_img, widths[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = widths[0]
        for w in widths:
            self.enc.append(ResBlock(prev, w, emb))
            self.down.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w
        c_mid = c * cfg.mid_mult
        self.mid1 = ResBlock(prev, c_mid, emb)
        self.mid2 = ResBlock(c_mid, c_mid, emb)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        prev = c_mid
        for w in reversed(widths):
            self.up.append(nn.Conv2d(prev, w, 3, padding=1))
            self.dec.append(ResBlock(2 * w, w, emb))
            prev = w
        self.out_norm = nn.GroupNorm(_groups(prev), prev)
        self.out = nn.Conv2d(prev, c_img, 3, padding=1)

    def embed(self, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        probs = class_probs(cond, self.config.num_classes).to(self.class_embed.dtype)
        te = self.time_mlp(timestep_embedding(t, self.config.time_embed_dim).to(self.class_embed.dtype))
        return te + self.class_proj(probs @ self.class_embed)

    def forward(self, x: torch.Tensor, t, cond: torch.Tensor) -> DenoiserOutput:
        cfg = self.config
        if tuple(x.shape[1:]) != cfg.image_size:
            raise ValueError(f"expected images of shape {cfg.image_size}, got {tuple(x.shape[1:])}")
        n = x.shape[0]
        t = torch.as_tensor(t, device=x.device).long().reshape(-1)
        if t.numel() == 1:
            t = t.expand(n)
        if t.numel() != n:
            raise ValueError(f"got {t.numel()} timesteps for a batch of {n}")
        if n and int(t.min()) < 0:
            raise ValueError("timesteps must be nonnegative")
        if cond.shape[0] != n:
            raise ValueError(f"condition batch {cond.shape[0]} does not match input batch {n}")
        emb = self.embed(t, cond)

        feats: dict[str, torch.Tensor] = {}
        h = self.stem(x)
        skips = []
        for i, (block, down) in enumerate(zip(self.enc, self.down)):
            h = block(h, emb)
            feats[f"enc{i}"] = h
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid1(h, emb), emb)
        feats["mid"] = h
        for j, (up, block) in enumerate(zip(self.up, self.dec)):
            i = cfg.depth - 1 - j
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skips[i]], dim=1), emb)
            feats[f"dec{i}"] = h
        eps_hat = self.out(F.silu(self.out_norm(h)))
        feats["out"] = eps_hat
        return DenoiserOutput(eps_hat, {k: feats[k] for k in cfg.tap_ids})


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@torch.no_grad()
def sample_class_conditional(
    model: Denoiser,
    n: int,
    y: int,
    schedule: NoiseSchedule,
    seed: int,
    batch_size: int = 256,
) -> torch.Tensor:
    """Ancestral sampling of ``n`` images of class ``y``, clipped to [-1, 1]."""
    cfg = model.config
    if not 0 <= int(y) < cfg.num_classes:
        raise ValueError(f"class {y} out of range for {cfg.num_classes} classes")
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ValueError(f"parameter {name} contains non-finite values")
    dtype = next(model.parameters()).dtype
    out = torch.empty((n, *cfg.image_size), dtype=dtype)
    if n == 0:
        return out
    gen = torch.Generator().manual_seed(int(seed))
    was_training = model.training
    model.eval()
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        x = torch.randn((m, *cfg.image_size), generator=gen, dtype=dtype)
        labels = torch.full((m,), int(y), dtype=torch.long)
        for t in range(schedule.T, 0, -1):
            eps_hat = model(x, t, labels).eps_hat
            z = torch.randn(x.shape, generator=gen, dtype=dtype) if t > 1 else None
            x = reverse_step(x, t, eps_hat, schedule, z)
        out[start : start + m] = x.clamp(-1.0, 1.0)
    model.train(was_training)
    return out
