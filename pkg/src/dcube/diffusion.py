"""
Gaussian diffusion primitives.

Forward process (closed form for any timestep t in [1, T]):
    x_t = sqrt(alpha_bar_t) * x_0 + sqrt(1 - alpha_bar_t) * eps,   eps ~ N(0, I)

Reverse step with epsilon parameterization and fixed variance beta_t:
    mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
    x_{t-1} = mu + sqrt(beta_t) * z

Timesteps are 1-based throughout; the schedule arrays are stored 0-based so
that ``schedule.alpha_bar[t - 1]`` is the value for step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Fixed variance schedule. Arrays are float64 and indexed by ``t - 1``."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise ValueError("beta must be a non-empty 1-D sequence")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for arr in (beta, alpha, alpha_bar):
            arr.setflags(write=False)
        return cls(beta=beta, alpha=alpha, alpha_bar=alpha_bar)

    def gather(self, name: str, t, like: torch.Tensor) -> torch.Tensor:
        """Values of ``name`` at 1-based timesteps ``t``, shaped to broadcast against ``like``."""
        arr = torch.tensor(getattr(self, name), dtype=like.dtype, device=like.device)
        t = torch.as_tensor(t, device=like.device).long().reshape(-1)
        vals = arr[t - 1]
        return vals.reshape(-1, *([1] * (like.dim() - 1)))


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def _check_t(t, T: int, low: int = 1) -> torch.Tensor:
    t = torch.as_tensor(t).long()
    if t.numel() and (int(t.min()) < low or int(t.max()) > T):
        raise ValueError(f"timesteps must lie in [{low}, {T}], got range [{int(t.min())}, {int(t.max())}]")
    return t


def _expand_t(t: torch.Tensor, batch: int) -> torch.Tensor:
    t = t.reshape(-1)
    if t.numel() == 1:
        return t.expand(batch)
    if t.numel() != batch:
        raise ValueError(f"got {t.numel()} timesteps for a batch of {batch}")
    return t


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise ``x0`` to timestep ``t`` using the given ``eps``."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} does not match eps shape {tuple(eps.shape)}")
    t = _expand_t(_check_t(t, schedule.T), x0.shape[0])
    ab = schedule.gather("alpha_bar", t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def reverse_step(
    xt: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    noise_in: torch.Tensor | None = None,
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1} with Sigma fixed to beta_t I.

    The class condition enters only through ``eps_hat``. ``noise_in`` of None
    means zero noise; a nonzero tensor at t = 1 is rejected.
    """
    if eps_hat.shape != xt.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} does not match xt shape {tuple(xt.shape)}")
    t = int(t)
    _check_t(t, schedule.T)
    beta = float(schedule.beta[t - 1])
    alpha = float(schedule.alpha[t - 1])
    ab = float(schedule.alpha_bar[t - 1])
    mean = (xt - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    if noise_in is None:
        return mean
    if noise_in.shape != xt.shape:
        raise ValueError("noise_in must match xt in shape")
    if t == 1:
        if bool(torch.any(noise_in != 0)):
            raise ValueError("noise_in must be zero at t = 1")
        return mean
    return mean + np.sqrt(beta) * noise_in


def diffusion_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element of the batch."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    return ((eps_hat - eps) ** 2).mean()
