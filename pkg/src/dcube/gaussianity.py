"""Kolmogorov-Smirnov Gaussianity scoring of denoiser feature maps and tap selection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.special import ndtr

from .diffusion import NoiseSchedule, q_sample

P_THRESHOLD = 0.05
SERIES_TOL = 1e-12
SERIES_MAX_TERMS = 100


def ecdf_eval(sample, x) -> float | np.ndarray:
    """Right-continuous empirical CDF of an ascending ``sample`` at ``x``."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.size == 0:
        raise ValueError("empirical CDF of an empty sample")
    if np.any(np.diff(sample) < 0):
        raise ValueError("sample must be sorted ascending")
    out = np.searchsorted(sample, x, side="right") / sample.size
    return float(out) if np.ndim(out) == 0 else out


def _standardize_rows(z: np.ndarray) -> np.ndarray:
    std = z.std(axis=-1, ddof=1, keepdims=True)
    if np.any(~(std > 0)):
        raise ValueError("cannot standardize a zero-variance sample")
    return (z - z.mean(axis=-1, keepdims=True)) / std


def ks_statistic_rows(samples: np.ndarray, standardize: bool = False) -> np.ndarray:
    """KS distance to the standard normal for every row of a 2-D array."""
    z = np.asarray(samples, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] == 0:
        raise ValueError("expected a non-empty 2-D array of samples")
    if standardize:
        if z.shape[1] < 2:
            raise ValueError("standardization needs at least 2 values")
        z = _standardize_rows(z)
    n = z.shape[1]
    cdf = ndtr(np.sort(z, axis=1))
    i = np.arange(1, n + 1, dtype=np.float64)
    d_plus = (i / n - cdf).max(axis=1)
    d_minus = (cdf - (i - 1) / n).max(axis=1)
    return np.maximum(d_plus, d_minus)


def ks_statistic(sample, standardize: bool = False) -> float:
    """sup_x |F_n(x) - Phi(x)|, optionally after standardizing the sample."""
    sample = np.asarray(sample, dtype=np.float64).reshape(1, -1)
    if sample.size == 0:
        raise ValueError("KS statistic of an empty sample")
    return float(ks_statistic_rows(sample, standardize)[0])


def ks_pvalue(D: float, n: int) -> float:
    """Asymptotic Kolmogorov p-value 2 * sum_{k>=1} (-1)^(k-1) exp(-2 k^2 n D^2).

    Summation stops once a term drops below 1e-12 (at most 100 terms). If the
    cap is hit the statistic is so small that the true value equals 1 to
    double precision, which is what is returned.
    """
    if not 0.0 <= D <= 1.0:
        raise ValueError(f"D must lie in [0, 1], got {D}")
    if n < 1:
        raise ValueError("n must be positive")
    lam2 = n * D * D
    if lam2 == 0.0:
        return 1.0
    total = 0.0
    for k in range(1, SERIES_MAX_TERMS + 1):
        term = math.exp(-2.0 * k * k * lam2)
        total += term if k % 2 else -term
        if term < SERIES_TOL:
            break
    else:
        return 1.0
    return min(max(2.0 * total, 0.0), 1.0)


def ks_pvalues(D: np.ndarray, n: int) -> np.ndarray:
    return np.array([ks_pvalue(float(d), n) for d in np.ravel(D)]).reshape(np.shape(D))


def lilliefors_pvalues(samples: np.ndarray) -> np.ndarray:
    """Lilliefors-corrected p-values (mean and variance estimated from each row)."""
    from statsmodels.stats.diagnostic import lilliefors

    return np.array([lilliefors(row, dist="norm", pvalmethod="table")[1] for row in samples])


# --------------------------------------------------------------------------- reports


@dataclass
class TapResult:
    id: str
    D_mean: float
    p_mean: float
    verdict: str  # "gaussian" or "non_gaussian"


@dataclass
class GaussianityReport:
    taps: list[TapResult]
    protocol: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "taps": [asdict(r) for r in self.taps]}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianityReport":
        return cls([TapResult(**r) for r in d["taps"]], dict(d.get("protocol", {})))

    def render(self) -> str:
        """Text table; '*' marks non-Gaussian (selected) taps, 'x' Gaussian ones."""
        lines = [f"{'tap':<8}{'D_mean':>10}{'p_mean':>12}  mark  verdict"]
        for r in self.taps:
            mark = "*" if r.verdict == "non_gaussian" else "x"
            lines.append(f"{r.id:<8}{r.D_mean:>10.4f}{r.p_mean:>12.3e}  {mark:^4}  {r.verdict}")
        p = self.protocol
        lines.append(f"t={p.get('t')} batch={p.get('batch')} standardize={p.get('standardize')}")
        return "\n".join(lines)


def verdict_for(p: float) -> str:
    return "gaussian" if p > P_THRESHOLD else "non_gaussian"


def score_activations(
    taps: dict[str, torch.Tensor | np.ndarray],
    standardize: bool = True,
    aggregate: str = "per_sample",
    lilliefors: bool = False,
) -> list[TapResult]:
    """Score each tap's batch of activations (N x C x H x W).

    ``per_sample``: KS test on every sample's flattened map, then the mean of
    the p-values. ``batch_mean``: average the maps over the batch first and
    run a single test.
    """
    results = []
    for tap_id, act in taps.items():
        a = act.detach().double().cpu().numpy() if isinstance(act, torch.Tensor) else np.asarray(act, np.float64)
        a = a.reshape(a.shape[0], -1)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"tap {tap_id} has non-finite activations")
        if aggregate == "batch_mean":
            a = a.mean(axis=0, keepdims=True)
        elif aggregate != "per_sample":
            raise ValueError(f"unknown aggregate {aggregate!r}")
        D = ks_statistic_rows(a, standardize)
        if lilliefors:
            p = lilliefors_pvalues(a)
        else:
            p = ks_pvalues(D, a.shape[1])
        p_mean = float(p.mean())
        results.append(TapResult(tap_id, float(D.mean()), p_mean, verdict_for(p_mean)))
    return results


@torch.no_grad()
def collect_taps(model, x0: torch.Tensor, y: torch.Tensor, t: int, schedule: NoiseSchedule, generator) -> dict:
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    xt = q_sample(x0, t, eps, schedule)
    model.eval()
    return model(xt, t, y).taps


def scan_taps(
    model,
    x: torch.Tensor,
    y: torch.Tensor,
    schedule: NoiseSchedule,
    timestep_t: int = 100,
    batch_size: int = 256,
    standardize: bool = True,
    seed: int = 0,
    aggregate: str = "per_sample",
    lilliefors: bool = False,
) -> GaussianityReport:
    """Noise one batch to ``timestep_t``, run the frozen denoiser and score every tap."""
    if x.shape[0] < batch_size:
        raise ValueError(f"dataset has {x.shape[0]} samples, fewer than batch_size={batch_size}")
    gen = torch.Generator().manual_seed(int(seed))
    idx = torch.randperm(x.shape[0], generator=gen)[:batch_size]
    taps = collect_taps(model, x[idx], y[idx], timestep_t, schedule, gen)
    results = score_activations(taps, standardize, aggregate, lilliefors)
    protocol = {
        "t": int(timestep_t),
        "batch": int(batch_size),
        "standardize": bool(standardize),
        "aggregate": aggregate,
        "lilliefors": bool(lilliefors),
        "seed": int(seed),
        "sample_count_n": {k: int(np.prod(v.shape[1:])) for k, v in taps.items()},
    }
    return GaussianityReport(results, protocol)


# --------------------------------------------------------------------------- selection


@dataclass
class SelectionConfig:
    selected_tap_ids: list[str]
    mode: str

    def to_dict(self) -> dict:
        return asdict(self)


def select_features(report: GaussianityReport, mode: str = "best", manual_ids=None) -> SelectionConfig:
    """``best``: non-Gaussian taps; ``worst``: Gaussian taps; ``manual``: ``manual_ids`` as given."""
    if not report.taps:
        raise ValueError("empty Gaussianity report")
    if mode == "manual":
        known = {r.id for r in report.taps}
        ids = list(manual_ids or [])
        if not ids or set(ids) - known:
            raise ValueError(f"manual selection must be a non-empty subset of {sorted(known)}")
        return SelectionConfig(ids, mode)
    if mode not in ("best", "worst"):
        raise ValueError(f"unknown selection mode {mode!r}")
    wanted = "non_gaussian" if mode == "best" else "gaussian"
    ids = [r.id for r in report.taps if r.verdict == wanted]
    if not ids:
        raise ValueError(f"no {wanted} taps for mode {mode!r}; use mode 'manual' with explicit tap ids")
    return SelectionConfig(ids, mode)
