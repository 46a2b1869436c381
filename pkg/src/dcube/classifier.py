"""Stage-2 classifier on frozen denoiser features.

The trainable part (``DCube``) holds the 1x1 reduction of the selected taps,
the optional sub-feature CNN and the convolutional head. The denoiser is
passed in separately and never receives gradient updates.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import compute_metrics
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, q_sample
from .stage1 import EmaState, NumericalError, ema_update, warmup_decay

log = logging.getLogger(__name__)

INPUT_MODES = ("x0_rand_t", "xt_t", "x0_t0")


class FrozenDriftError(RuntimeError):
    pass


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(model: nn.Module) -> nn.Module:
    model.requires_grad_(False)
    model.eval()
    return model


def _check_frozen(model: nn.Module) -> None:
    if any(p.requires_grad for p in model.parameters()):
        raise FrozenDriftError("denoiser parameters must be frozen (requires_grad=False)")


# --------------------------------------------------------------------------- features


def uniform_condition(n: int, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    return torch.full((n, num_classes), 1.0 / num_classes, dtype=dtype)


def draw_feature_timestep(mode: str, T: int, generator: torch.Generator) -> int:
    if mode not in INPUT_MODES:
        raise ValueError(f"unknown input mode {mode!r}; choose from {INPUT_MODES}")
    if mode == "x0_t0":
        return 0
    return int(torch.randint(1, T + 1, (1,), generator=generator))


@torch.no_grad()
def denoiser_taps(
    denoiser: Denoiser,
    x0: torch.Tensor,
    tap_ids,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    mode: str = "x0_rand_t",
) -> dict[str, torch.Tensor]:
    """Selected activations of the frozen denoiser under a label-free (uniform) condition.

    One timestep is drawn per batch. ``x0_rand_t`` feeds the clean image with
    that timestep, ``xt_t`` noises the image to it first, ``x0_t0`` uses t = 0.
    """
    t = draw_feature_timestep(mode, schedule.T, generator)
    x = x0
    if mode == "xt_t":
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
        x = q_sample(x0, t, eps, schedule)
    cond = uniform_condition(x0.shape[0], denoiser.config.num_classes, x0.dtype)
    taps = denoiser(x, t, cond).taps
    return {k: taps[k] for k in tap_ids}


def target_size(denoiser_config, tap_ids) -> tuple[int, int]:
    """Spatial size of the largest selected tap."""
    shapes = [denoiser_config.tap_shape(k) for k in tap_ids]
    return max((s[1], s[2]) for s in shapes)


def stack_taps(taps: dict[str, torch.Tensor], tap_ids, size: tuple[int, int], normalize: bool = False) -> torch.Tensor:
    """Resize the selected taps to ``size`` and concatenate them along channels.

    With ``normalize`` each tap is standardized per sample first, so taps of
    very different scale enter the 1x1 reduction on an equal footing.
    """
    parts = []
    for k in tap_ids:
        a = taps[k]
        if normalize:
            a = F.layer_norm(a, a.shape[1:])
        if tuple(a.shape[2:]) != tuple(size):
            a = F.interpolate(a, size=size, mode="bilinear", align_corners=False)
        parts.append(a)
    return torch.cat(parts, dim=1)


class SubCNN(nn.Module):
    """Small trainable CNN giving a 3-channel map at the fusion resolution."""

    def __init__(self, in_channels: int, out_size: tuple[int, int], width: int = 16):
        super().__init__()
        self.out_size = tuple(out_size)
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def forward(self, x):
        h = self.net(x)
        if tuple(h.shape[2:]) != self.out_size:
            h = F.adaptive_avg_pool2d(h, self.out_size)
        return h


class FusionBundle(NamedTuple):
    f_main: torch.Tensor
    f_sub: torch.Tensor
    expanded: torch.Tensor
    scores: torch.Tensor
    fused: torch.Tensor


def fuse(f_main: torch.Tensor, f_sub: torch.Tensor, score_scale=1.0, score_bias=0.0) -> FusionBundle:
    """Expand the 1-channel diffusion map by the 3-channel sub features and reweight channels.

    expanded = f_main * f_sub; concat = [expanded, f_sub];
    scores = sigmoid(score_scale * (sum over H, W of concat) + score_bias);
    fused = concat * scores. ``score_scale``/``score_bias`` may be per-channel.
    """
    if f_main.shape[1] != 1:
        raise ValueError(f"f_main must have one channel, got {f_main.shape[1]}")
    if f_main.shape[2:] != f_sub.shape[2:]:
        raise ValueError(f"spatial mismatch: {tuple(f_main.shape[2:])} vs {tuple(f_sub.shape[2:])}")
    expanded = f_main * f_sub
    concat = torch.cat([expanded, f_sub], dim=1)
    scores = torch.sigmoid(score_scale * concat.sum(dim=(2, 3)) + score_bias)
    fused = concat * scores[:, :, None, None]
    return FusionBundle(f_main, f_sub, expanded, scores, fused)


class MultiKernelBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.k3 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.k5 = nn.Conv2d(c_in, c_out, 5, padding=2)
        self.proj = nn.Conv2d(2 * c_out, c_out, 1)

    def forward(self, x):
        return F.silu(self.proj(torch.cat([self.k3(x), self.k5(x)], dim=1)))


class DCubeHead(nn.Module):
    """Three 3x3/5x5 blocks with shrinking width, no pooling, then two linear layers."""

    def __init__(self, in_channels: int, size: tuple[int, int], num_classes: int, widths=(32, 16, 8), hidden: int = 64):
        super().__init__()
        blocks = []
        prev = in_channels
        for w in widths:
            blocks.append(MultiKernelBlock(prev, w))
            prev = w
        self.blocks = nn.Sequential(*blocks)
        self.fc1 = nn.Linear(prev * size[0] * size[1], hidden)
        self.fc2 = nn.Linear(hidden, num_classes)
        self.in_channels = in_channels

    def forward(self, fused):
        if fused.shape[1] != self.in_channels:
            raise ValueError(f"head expects {self.in_channels} channels, got {fused.shape[1]}")
        h = self.blocks(fused)
        return self.fc2(F.silu(self.fc1(h.flatten(1))))


class DCube(nn.Module):
    def __init__(self, denoiser_config, tap_ids, num_classes: int, use_sub_features: bool = True, normalize_taps: bool = True):
        super().__init__()
        self.normalize_taps = normalize_taps
        self.tap_ids = list(tap_ids)
        if not self.tap_ids:
            raise ValueError("at least one tap must be selected")
        self.size = target_size(denoiser_config, self.tap_ids)
        c_total = sum(denoiser_config.tap_shape(k)[0] for k in self.tap_ids)
        self.reduce = nn.Conv2d(c_total, 1, 1)
        self.use_sub_features = use_sub_features
        self.sub = SubCNN(denoiser_config.image_size[0], self.size) if use_sub_features else None
        # sigmoid of a raw sum over H'*W' saturates; start the learned scale at a spatial mean
        self.score_scale = nn.Parameter(torch.full((6,), 1.0 / (self.size[0] * self.size[1])))
        self.score_bias = nn.Parameter(torch.zeros(6))
        self.head = DCubeHead(6 if use_sub_features else 1, self.size, num_classes)

    def main_features(self, taps: dict[str, torch.Tensor]) -> torch.Tensor:
        return self.reduce(stack_taps(taps, self.tap_ids, self.size, self.normalize_taps))

    def forward(self, taps: dict[str, torch.Tensor], x0: torch.Tensor) -> torch.Tensor:
        f_main = self.main_features(taps)
        if self.sub is None:
            return self.head(f_main)
        return self.head(fuse(f_main, self.sub(x0), self.score_scale, self.score_bias).fused)


def extract_main_features(
    denoiser: Denoiser,
    x0: torch.Tensor,
    dcube: DCube,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    mode: str = "x0_rand_t",
) -> torch.Tensor:
    """Single-channel diffusion feature map (N x 1 x H' x W')."""
    taps = denoiser_taps(denoiser, x0, dcube.tap_ids, schedule, generator, mode)
    return dcube.main_features(taps)


def extract_sub_features(dcube: DCube, x0: torch.Tensor) -> torch.Tensor:
    if dcube.sub is None:
        raise ValueError("this classifier was built without sub features")
    return dcube.sub(x0)


# --------------------------------------------------------------------------- losses


def cycle_loss(
    denoiser: Denoiser,
    x0: torch.Tensor,
    y: torch.Tensor,
    probs: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """MSE between the frozen denoiser's noise predictions under predicted vs. true class.

    Both branches share (t, eps). Gradients reach ``probs`` through the soft
    branch only; the hard branch and the denoiser weights get none.
    """
    _check_frozen(denoiser)
    n = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (n,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    xt = q_sample(x0, t, eps, schedule)
    eps_soft = denoiser(xt, t, probs).eps_hat
    with torch.no_grad():
        eps_hard = denoiser(xt, t, y.long()).eps_hat
    return ((eps_soft - eps_hard) ** 2).mean()


def cr_loss(logits_a: torch.Tensor, logits_b: torch.Tensor) -> torch.Tensor:
    """(1/N) sum_i ||g(x_i) - g(flip(x_i))||^2."""
    if logits_a.shape != logits_b.shape:
        raise ValueError(f"shape mismatch: {tuple(logits_a.shape)} vs {tuple(logits_b.shape)}")
    return ((logits_a - logits_b) ** 2).sum(dim=1).mean()


CE_FLOOR = 1e-12


def ce_loss(probs: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the true class; probabilities are floored at 1e-12."""
    y = y.long().reshape(-1)
    if probs.dim() != 2 or probs.shape[0] != y.shape[0]:
        raise ValueError("probs must be N x K with one label per row")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= probs.shape[1]):
        raise ValueError("labels out of range")
    p_true = probs.gather(1, y[:, None]).squeeze(1)
    return -torch.log(torch.clamp(p_true, min=CE_FLOOR)).mean()


@dataclass
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


def cls_loss(ce, cycle, cr, weights: LossWeights):
    if weights.lambda1 < 0 or weights.lambda2 < 0:
        raise ValueError("loss weights must be nonnegative")
    return ce + weights.lambda1 * cycle + weights.lambda2 * cr


def hflip(x: torch.Tensor) -> torch.Tensor:
    return torch.flip(x, dims=(-1,))


# --------------------------------------------------------------------------- training


@dataclass
class Stage2Config:
    selection_mode: str = "best"
    manual_taps: list[str] = field(default_factory=list)
    input_mode: str = "x0_rand_t"
    lambda1: float = 10.0
    lambda2: float = 0.1
    use_cycle: bool = True
    use_cr: bool = True
    use_sub_features: bool = True
    flip_prob: float = 0.5
    lr: float = 2e-4
    weight_decay: float = 0.0
    epochs: int = 15
    batch_size: int = 32
    ema_alpha: float = 0.999
    ema_warmup: bool = True
    eval_every: int = 0
    eval_draws: int = 1


@dataclass
class Stage2Result:
    dcube: DCube
    ema: EmaState
    history: list[dict]
    metrics: dict
    steps: int


def stage2_losses(
    dcube: DCube,
    denoiser: Denoiser,
    x: torch.Tensor,
    y: torch.Tensor,
    schedule: NoiseSchedule,
    cfg: Stage2Config,
    generator: torch.Generator,
) -> tuple[torch.Tensor, dict[str, float]]:
    """L_CE + lambda1 * L_Cycle + lambda2 * L_CR for one (already augmented) batch."""
    n = x.shape[0]
    use_cr = cfg.use_cr and cfg.lambda2 > 0
    use_cycle = cfg.use_cycle and cfg.lambda1 > 0
    x_in = torch.cat([x, hflip(x)]) if use_cr else x
    taps = denoiser_taps(denoiser, x_in, dcube.tap_ids, schedule, generator, cfg.input_mode)
    logits = dcube(taps, x_in)
    logits_a = logits[:n]
    probs = torch.softmax(logits_a, dim=1)
    ce = ce_loss(probs, y)
    zero = torch.zeros((), dtype=ce.dtype)
    cr = cr_loss(logits_a, logits[n:]) if use_cr else zero
    cyc = cycle_loss(denoiser, x, y, probs, schedule, generator) if use_cycle else zero
    weights = LossWeights(cfg.lambda1 if use_cycle else 0.0, cfg.lambda2 if use_cr else 0.0)
    total = cls_loss(ce, cyc, cr, weights)
    return total, {"ce": ce.item(), "cycle": cyc.item(), "cr": cr.item(), "cls": total.item()}


@torch.no_grad()
def predict_logits(
    dcube: DCube,
    denoiser: Denoiser,
    x: torch.Tensor,
    schedule: NoiseSchedule,
    mode: str,
    seed: int,
    batch_size: int = 128,
    draws: int = 1,
) -> torch.Tensor:
    """Logits on ``x``; with ``draws`` > 1 the log of the mean softmax over independent timestep draws."""
    if draws < 1:
        raise ValueError("draws must be at least 1")
    if mode == "x0_t0":
        draws = 1  # deterministic features, nothing to average
    gen = torch.Generator().manual_seed(int(seed))
    was_training = dcube.training
    dcube.eval()
    out = []
    for start in range(0, x.shape[0], batch_size):
        xb = x[start : start + batch_size]
        runs = [dcube(denoiser_taps(denoiser, xb, dcube.tap_ids, schedule, gen, mode), xb) for _ in range(draws)]
        if draws == 1:
            out.append(runs[0])
        else:
            out.append(torch.stack([torch.softmax(r, dim=1) for r in runs]).mean(0).log())
    dcube.train(was_training)
    return torch.cat(out)


def evaluate(dcube, denoiser, x, y, schedule, mode, seed, draws: int = 1) -> dict:
    pred = predict_logits(dcube, denoiser, x, schedule, mode, seed, draws=draws).argmax(1)
    return compute_metrics(pred.numpy(), np.asarray(y), dcube.head.fc2.out_features).to_dict()


def ema_dcube(dcube: DCube, ema: EmaState) -> DCube:
    clone = copy.deepcopy(dcube)
    ema.copy_to(clone)
    return clone


def train_stage2(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    tap_ids,
    x: torch.Tensor,
    y: torch.Tensor,
    x_test: torch.Tensor,
    y_test: torch.Tensor,
    cfg: Stage2Config,
    streams,
    log_file=None,
) -> Stage2Result:
    """Train sub CNN, reduction and head on frozen denoiser features; evaluate with EMA weights.

    ``streams`` maps "init", "data", "augment", "noise" and "eval" to torch
    generators (only "eval" is used as an integer seed source).
    """
    freeze(denoiser)
    before = parameter_hash(denoiser)
    num_classes = denoiser.config.num_classes
    with torch.random.fork_rng():
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=streams["init"])))
        dcube = DCube(denoiser.config, tap_ids, num_classes, cfg.use_sub_features)
    opt = torch.optim.AdamW(dcube.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    ema = EmaState.from_model(dcube, cfg.ema_alpha)
    eval_seed = int(torch.randint(0, 2**31 - 1, (1,), generator=streams["eval"]))
    n = x.shape[0]
    bs = min(cfg.batch_size, n)
    history: list[dict] = []
    step = 0
    sums: dict[str, float] = {}
    dcube.train()
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(n, generator=streams["data"])
        sums = {"ce": 0.0, "cycle": 0.0, "cr": 0.0, "cls": 0.0}
        n_batches = 0
        for start in range(0, n - bs + 1, bs):
            idx = order[start : start + bs]
            xb, yb = x[idx], y[idx]
            flip = torch.rand(bs, generator=streams["augment"]) < cfg.flip_prob
            xb = torch.where(flip[:, None, None, None], hflip(xb), xb)
            loss, parts = stage2_losses(dcube, denoiser, xb, yb, schedule, cfg, streams["noise"])
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite stage-2 loss at epoch {epoch}", {"epoch": epoch, **parts})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            decay = warmup_decay(cfg.ema_alpha, ema.num_updates) if cfg.ema_warmup else cfg.ema_alpha
            ema_update(ema, dcube, decay)
            step += 1
            n_batches += 1
            for k, v in parts.items():
                sums[k] += v
        record = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        if (cfg.eval_every and epoch % cfg.eval_every == 0) or epoch == cfg.epochs:
            record.update(_metrics_row(evaluate(ema_dcube(dcube, ema), denoiser, x_test, y_test, schedule, cfg.input_mode, eval_seed, cfg.eval_draws)))
        history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
    if parameter_hash(denoiser) != before:
        raise FrozenDriftError("denoiser parameters changed during stage-2 training")
    final = ema_dcube(dcube, ema)
    metrics = evaluate(final, denoiser, x_test, y_test, schedule, cfg.input_mode, eval_seed, cfg.eval_draws)
    return Stage2Result(dcube=dcube, ema=ema, history=history, metrics=metrics, steps=step)


def _metrics_row(m: dict) -> dict:
    return {k: m[k] for k in ("accuracy", "macro_precision", "macro_recall", "macro_f1")} | {"acc": m["accuracy"]}
