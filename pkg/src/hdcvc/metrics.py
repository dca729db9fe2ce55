"""Quality metrics and the Bjontegaard delta bit-rate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.interpolate import PchipInterpolator

from .tensor import ContractError, check_tensor, note_kink

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return torch.mean((a - b) ** 2)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB for signals in [0, 1]; identical inputs give ``inf``."""
    m = float(mse(a.double(), b.double()))
    if m == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


def psnr_capped(a: torch.Tensor, b: torch.Tensor) -> float:
    return min(psnr(a, b), PSNR_CAP)


def _gauss_window(dtype) -> torch.Tensor:
    r = torch.arange(SSIM_WINDOW, dtype=dtype) - SSIM_WINDOW // 2
    g = torch.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    x = F.conv2d(x, win.reshape(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, win.reshape(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _ssim_terms(a: torch.Tensor, b: torch.Tensor, win: torch.Tensor):
    mu_a, mu_b = _blur(a, win), _blur(b, win)
    saa = _blur(a * a, win) - mu_a * mu_a
    sbb = _blur(b * b, win) - mu_b * mu_b
    sab = _blur(a * b, win) - mu_a * mu_b
    cs = (2 * sab + _C2) / (saa + sbb + _C2)
    lum = (2 * mu_a * mu_b + _C1) / (mu_a * mu_a + mu_b * mu_b + _C1)
    # per image and channel means
    return (lum * cs).mean(dim=(2, 3)), cs.mean(dim=(2, 3))


def ms_ssim_scales(h: int, w: int) -> int:
    """Number of dyadic scales whose smallest level still fits the 11-tap window."""
    n = 0
    while n < len(MS_SSIM_WEIGHTS) and min(h, w) // (2**n) >= SSIM_WINDOW:
        n += 1
    return n


def ms_ssim(a: torch.Tensor, b: torch.Tensor, scales: int | None = None) -> torch.Tensor:
    """Multi-scale SSIM averaged over batch and channels (differentiable).

    Five scales need at least 176 pixels per side; smaller inputs use as many
    scales as fit, with the standard weights renormalized.  Negative contrast
    terms are clamped to zero before exponentiation.
    """
    check_tensor(a, "a")
    _same_shape(a, b)
    fit = ms_ssim_scales(*a.shape[2:])
    n = fit if scales is None else scales
    if n < 1 or n > fit:
        raise ContractError(
            f"input {tuple(a.shape[2:])} supports {fit} MS-SSIM scales, {n} requested"
        )
    weights = torch.tensor(MS_SSIM_WEIGHTS[:n], dtype=a.dtype)
    weights = weights / weights.sum()
    win = _gauss_window(a.dtype)
    factors = []
    for i in range(n):
        ssim_i, cs_i = _ssim_terms(a, b, win)
        term = ssim_i if i == n - 1 else cs_i
        note_kink(term > 0)
        factors.append(torch.relu(term))
        if i < n - 1:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
    stack = torch.stack(factors, dim=0)  # (n, B, C)
    val = torch.prod(stack ** weights.reshape(-1, 1, 1), dim=0)
    return val.mean()


# ----------------------------------------------------------------------------
# BD-rate


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    quality: float


def rd_curve(points) -> list[RdPoint]:
    """Sort by bpp and check the RD-curve invariants."""
    pts = sorted((RdPoint(float(p[0]), float(p[1])) if not isinstance(p, RdPoint) else p for p in points), key=lambda p: p.bpp)
    if len(pts) < 4:
        raise ValueError(f"an RD curve needs at least 4 points, got {len(pts)}")
    if any(q.bpp <= p.bpp for p, q in zip(pts, pts[1:])):
        raise ValueError("RD curve bpp values must be strictly increasing")
    if pts[0].bpp <= 0:
        raise ValueError("bpp must be positive")
    return pts


def _log_rate_fit(curve):
    pts = sorted(curve, key=lambda p: p.quality)
    q = np.array([p.quality for p in pts])
    if np.any(np.diff(q) <= 0):
        raise ValueError("quality values must be distinct along a curve")
    return PchipInterpolator(q, np.log([p.bpp for p in pts])), q.min(), q.max()


def bdbr(anchor, test) -> float:
    """Average bit-rate difference (percent) of ``test`` vs ``anchor`` at equal quality.

    Piecewise-cubic Hermite fits of log-rate against quality, integrated over
    the shared quality interval.  Negative means ``test`` saves bits.
    """
    fa, lo_a, hi_a = _log_rate_fit(rd_curve(anchor))
    ft, lo_t, hi_t = _log_rate_fit(rd_curve(test))
    lo, hi = max(lo_a, lo_t), min(hi_a, hi_t)
    if lo >= hi:
        raise ValueError(f"quality ranges do not overlap ({lo_a}-{hi_a} vs {lo_t}-{hi_t})")
    int_a = fa.integrate(lo, hi)
    int_t = ft.integrate(lo, hi)
    avg = (int_t - int_a) / (hi - lo)
    return (math.exp(avg) - 1.0) * 100.0
