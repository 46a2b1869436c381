"""Stage-1 training: denoising plus a contrastive term on the bottleneck feature."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg

from .diffusion import NoiseSchedule, diffusion_loss, q_sample
from .denoiser import Denoiser, sample_class_conditional

log = logging.getLogger(__name__)

FID_EMBEDDER_SEED = 20240917


class NumericalError(RuntimeError):
    """Raised when a loss turns non-finite; ``snapshot`` carries the offending state."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class ContrastivePairBatch(NamedTuple):
    x1: torch.Tensor
    x2: torch.Tensor
    y1: torch.Tensor
    y2: torch.Tensor
    target: torch.Tensor  # 0 for same-class pairs, 1 otherwise
    t: torch.Tensor  # one timestep per pair, shared by both members
    margin: float = 0.1


def random_derangement(n: int, generator: torch.Generator) -> torch.Tensor:
    """Uniform permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise ValueError("a derangement needs at least 2 elements")
    idx = torch.arange(n)
    while True:
        perm = torch.randperm(n, generator=generator)
        if not bool((perm == idx).any()):
            return perm


def make_contrastive_pairs(
    x: torch.Tensor, y: torch.Tensor, T: int, generator: torch.Generator, margin: float = 0.1
) -> ContrastivePairBatch:
    if x.shape[0] < 2:
        raise ValueError("contrastive pairs need a batch of at least 2")
    perm = random_derangement(x.shape[0], generator)
    y = y.long()
    y2 = y[perm]
    t = torch.randint(1, T + 1, (x.shape[0],), generator=generator)
    target = (y != y2).to(x.dtype)
    return ContrastivePairBatch(x, x[perm], y, y2, target, t, margin)


def same_class_pair_probability(counts) -> float:
    """Expected fraction of same-class pairs under a uniform random derangement."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    return float((counts * (counts - 1)).sum() / (n * (n - 1)))


def mid_embedding(tap: torch.Tensor) -> torch.Tensor:
    """Global-average-pool the bottleneck activation and scale it to unit length."""
    return F.normalize(tap.mean(dim=(2, 3)), dim=1)


def contrastive_loss(
    f1: torch.Tensor, f2: torch.Tensor, target: torch.Tensor, margin: float = 0.1, reduction: str = "mean"
) -> torch.Tensor:
    """Pull same-class pairs (target 0) together, push others past ``margin``.

    ``reduction="sum"`` is the plain sum over pairs; ``"mean"`` divides it by N.
    """
    if f1.shape != f2.shape:
        raise ValueError(f"shape mismatch: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    if margin <= 0:
        raise ValueError("margin must be positive")
    target = target.to(f1.dtype).reshape(-1)
    d = torch.linalg.vector_norm((f1 - f2).reshape(f1.shape[0], -1), dim=1)
    per_pair = (1 - target) * d + target * torch.clamp(margin - d, min=0)
    if reduction == "sum":
        return per_pair.sum()
    if reduction == "mean":
        return per_pair.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def gen_loss(
    pairs: ContrastivePairBatch,
    model: nn.Module,
    schedule: NoiseSchedule,
    eps1: torch.Tensor,
    eps2: torch.Tensor,
    use_contrastive: bool = True,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Contrastive term on the noised pair plus the denoising loss of each member."""
    x1t = q_sample(pairs.x1, pairs.t, eps1, schedule)
    x2t = q_sample(pairs.x2, pairs.t, eps2, schedule)
    n = x1t.shape[0]
    out = model(torch.cat([x1t, x2t]), torch.cat([pairs.t, pairs.t]), torch.cat([pairs.y1, pairs.y2]))
    l_diff1 = diffusion_loss(out.eps_hat[:n], eps1)
    l_diff2 = diffusion_loss(out.eps_hat[n:], eps2)
    if use_contrastive:
        emb = mid_embedding(out.taps["mid"])
        l_cont = contrastive_loss(emb[:n], emb[n:], pairs.target, pairs.margin)
    else:
        l_cont = torch.zeros((), dtype=l_diff1.dtype)
    total = l_cont + l_diff1 + l_diff2
    parts = {
        "L_Cont": l_cont.item(),
        "L_Diff1": l_diff1.item(),
        "L_Diff2": l_diff2.item(),
        "L_Gen": total.item(),
    }
    return total, parts


# --------------------------------------------------------------------------- EMA


@dataclass
class EmaState:
    shadow: dict[str, torch.Tensor]
    decay: float = 0.999
    num_updates: int = 0

    @classmethod
    def from_model(cls, model: nn.Module, decay: float = 0.999) -> "EmaState":
        return cls({k: p.detach().clone() for k, p in model.named_parameters() if p.requires_grad}, decay)

    def copy_to(self, model: nn.Module) -> None:
        with torch.no_grad():
            params = dict(model.named_parameters())
            for k, v in self.shadow.items():
                params[k].copy_(v)


@torch.no_grad()
def ema_update(ema: EmaState, params, decay: float | None = None) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    alpha = ema.decay if decay is None else decay
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("EMA decay must lie in [0, 1]")
    params = dict(params.named_parameters()) if isinstance(params, nn.Module) else dict(params)
    for k, s in ema.shadow.items():
        p = params[k]
        if p.shape != s.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(p.shape)} vs {tuple(s.shape)}")
        s.mul_(alpha).add_(p.detach(), alpha=1.0 - alpha)
    ema.num_updates += 1
    return ema


def warmup_decay(decay: float, num_updates: int) -> float:
    """Ramp the EMA decay up from 0.1 so short runs are not dominated by the initialization."""
    return min(decay, (1.0 + num_updates) / (10.0 + num_updates))


# --------------------------------------------------------------------------- FID-lite


class FidEmbedder(nn.Module):
    """Frozen random conv net mapping images to 64-D vectors."""

    def __init__(self, in_channels: int = 1, dim: int = 64, seed: int = FID_EMBEDDER_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(in_channels, 16, 5, stride=2, padding=2),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.Conv2d(32, dim, 3, stride=2, padding=1),
            ]
        )
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                conv.bias.zero_()
        self.requires_grad_(False)

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x.float()
        for conv in self.convs:
            h = F.relu(conv(h))
        return h.mean(dim=(2, 3))


def gaussian_fit(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance; Ledoit-Wolf shrinkage when samples do not exceed the dimension."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    n, d = feats.shape
    if n < 2:
        raise ValueError("need at least 2 samples for a Gaussian fit")
    mu = feats.mean(0)
    if n <= d:
        from sklearn.covariance import ledoit_wolf

        cov, _ = ledoit_wolf(feats)
    else:
        cov = np.atleast_2d(np.cov(feats, rowvar=False))
    return mu, cov


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    root1 = linalg.sqrtm(cov1)
    root1 = np.real(root1)
    middle = root1 @ cov2 @ root1
    eig = np.linalg.eigvalsh((middle + middle.T) / 2)
    tr_covmean = np.sqrt(np.clip(eig, 0.0, None)).sum()
    diff = mu1 - mu2
    value = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_covmean
    return float(max(value, 0.0))


def fid_lite(real, fake, embedder: Callable | None = None) -> float:
    """Frechet distance between Gaussian fits of embedded samples.

    ``real``/``fake`` are image batches when an ``embedder`` is given,
    otherwise they are taken to be already embedded (N x D or N).
    """
    if embedder is not None:
        real = embedder(torch.as_tensor(real)).numpy()
        fake = embedder(torch.as_tensor(fake)).numpy()
    mu1, cov1 = gaussian_fit(real)
    mu2, cov2 = gaussian_fit(fake)
    d_ab = frechet_distance(mu1, cov1, mu2, cov2)
    d_ba = frechet_distance(mu2, cov2, mu1, cov1)
    return 0.5 * (d_ab + d_ba)


def class_stratified_counts(labels: np.ndarray, num_classes: int, total: int) -> list[int]:
    """Split ``total`` across classes in proportion to ``labels`` (largest remainder)."""
    share = np.bincount(labels, minlength=num_classes) / len(labels) * total
    out = np.floor(share).astype(int)
    order = np.argsort(-(share - out), kind="stable")
    out[order[: total - out.sum()]] += 1
    return out.tolist()


def evaluate_fid_lite(model: Denoiser, schedule: NoiseSchedule, real_x, real_y, num_samples: int, seed: int) -> float:
    k = model.config.num_classes
    real_y = np.asarray(real_y)
    fakes = []
    for cls, n in enumerate(class_stratified_counts(real_y, k, num_samples)):
        if n:
            fakes.append(sample_class_conditional(model, n, cls, schedule, seed=(int(seed) * 7919 + cls) % 2**63))
    emb = FidEmbedder(model.config.image_size[0])
    return fid_lite(torch.as_tensor(real_x), torch.cat(fakes), emb)


# --------------------------------------------------------------------------- training


@dataclass
class Stage1Config:
    use_contrastive: bool = True
    margin: float = 0.1
    lr: float = 2e-4
    weight_decay: float = 0.0
    steps: int = 400
    batch_size: int = 32
    ema_alpha: float = 0.999
    ema_warmup: bool = True
    log_every: int = 10
    fid_every: int = 0
    fid_samples: int = 150


@dataclass
class Stage1Result:
    model: Denoiser
    ema: EmaState
    step: int
    history: list[dict] = field(default_factory=list)


def train_stage1(
    model: Denoiser,
    x: torch.Tensor,
    y: torch.Tensor,
    schedule: NoiseSchedule,
    cfg: Stage1Config,
    streams,
    log_file=None,
) -> Stage1Result:
    """Optimize L_Cont + L_Diff(x1_t) + L_Diff(x2_t) with AdamW and track an EMA copy.

    ``streams`` maps names ("data", "pairing", "noise") to torch generators.
    """
    num_classes = int(torch.unique(y).numel())
    use_cont = cfg.use_contrastive and num_classes >= 2
    if cfg.use_contrastive and not use_cont:
        log.info("single-class dataset: contrastive term dropped")
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    ema = EmaState.from_model(model, cfg.ema_alpha)
    history: list[dict] = []
    n = x.shape[0]
    bs = min(cfg.batch_size, n)
    order = torch.randperm(n, generator=streams["data"])
    cursor = 0
    model.train()
    for step in range(1, cfg.steps + 1):
        if cursor + bs > n:
            order = torch.randperm(n, generator=streams["data"])
            cursor = 0
        idx = order[cursor : cursor + bs]
        cursor += bs
        pairs = make_contrastive_pairs(x[idx], y[idx], schedule.T, streams["pairing"], cfg.margin)
        eps1 = torch.randn(pairs.x1.shape, generator=streams["noise"], dtype=x.dtype)
        eps2 = torch.randn(pairs.x2.shape, generator=streams["noise"], dtype=x.dtype)
        loss, parts = gen_loss(pairs, model, schedule, eps1, eps2, use_contrastive=use_cont)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite stage-1 loss at step {step}", {"step": step, **parts})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        decay = warmup_decay(cfg.ema_alpha, ema.num_updates) if cfg.ema_warmup else cfg.ema_alpha
        ema_update(ema, model, decay)
        record = {"step": step, **parts}
        if cfg.fid_every and step % cfg.fid_every == 0:
            record["fid_lite"] = _ema_fid(model, ema, schedule, x, y, cfg.fid_samples, step)
        if step % cfg.log_every == 0 or step == cfg.steps or "fid_lite" in record:
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
    return Stage1Result(model=model, ema=ema, step=cfg.steps, history=history)


def ema_model(model: Denoiser, ema: EmaState) -> Denoiser:
    clone = Denoiser(model.config).to(next(model.parameters()).dtype)
    clone.load_state_dict(model.state_dict())
    ema.copy_to(clone)
    clone.eval()
    return clone


def _ema_fid(model, ema, schedule, x, y, num_samples, seed) -> float:
    return evaluate_fid_lite(ema_model(model, ema), schedule, x, y.numpy(), num_samples, seed)
