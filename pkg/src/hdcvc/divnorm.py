"""Divisive normalization: channel pooling (GDN), spatial pooling (SNCDN) and
their union (MixDN), each with a multiplicative inverse, plus the ResDN
transform blocks.

The functional forms take *effective* parameters (beta > 0, gamma >= 0).  The
modules store raw parameters and map them through ``max(raw**2, floor)`` for
beta and ``raw**2`` for gamma, so the effective values stay valid whatever an
optimizer does to the raw ones.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensor import ContractError, ResidualBlock, check_tensor, note_kink, surrogates_enabled

BETA_FLOOR = 1e-6


def _power(z: torch.Tensor, alpha: float) -> torch.Tensor:
    if alpha == 2:
        return z * z
    return z.abs().pow(alpha)


def _root(pool: torch.Tensor, eps_exp: float) -> torch.Tensor:
    if eps_exp == 0.5:
        return torch.sqrt(pool)
    if eps_exp == 1:
        return pool
    return pool.pow(eps_exp)


def _channel_pool(zp: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    c = zp.shape[1]
    if gamma.shape != (c, c):
        raise ContractError(f"channel gamma must be {c}x{c}, got {tuple(gamma.shape)}")
    return F.conv2d(zp, gamma.reshape(c, c, 1, 1))


def _spatial_pool(zp: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    """Per-channel zero-padded window sum; gamma is (C, k, k) or broadcastable to it."""
    c = zp.shape[1]
    if gamma.dim() == 0:
        raise ContractError("spatial gamma needs a window, got a scalar")
    k = gamma.shape[-1]
    if k % 2 == 0 or gamma.shape[-2] != k:
        raise ContractError(f"spatial window must be odd and square, got {tuple(gamma.shape[-2:])}")
    g = gamma.expand(c, k, k).reshape(c, 1, k, k)
    return F.conv2d(zp, g, padding=k // 2, groups=c)


def _beta(beta, c: int, ref: torch.Tensor) -> torch.Tensor:
    b = torch.as_tensor(beta, dtype=ref.dtype)
    if b.dim() == 0:
        b = b.expand(c)
    if b.shape != (c,):
        raise ContractError(f"beta must have {c} entries, got {tuple(b.shape)}")
    return b.reshape(1, c, 1, 1)


def _denominator(z, beta, gamma_ch=None, gamma_sp=None, alpha=2.0, eps_exp=0.5):
    check_tensor(z, "z")
    c = z.shape[1]
    zp = _power(z, alpha)
    pool = _beta(beta, c, z)
    if gamma_ch is not None:
        pool = pool + _channel_pool(zp, torch.as_tensor(gamma_ch, dtype=z.dtype))
    if gamma_sp is not None:
        pool = pool + _spatial_pool(zp, torch.as_tensor(gamma_sp, dtype=z.dtype))
    return _root(pool, eps_exp)


def gdn(z, beta, gamma, alpha=2.0, eps_exp=0.5):
    return z / _denominator(z, beta, gamma_ch=gamma, alpha=alpha, eps_exp=eps_exp)


def igdn(y, beta, gamma, alpha=2.0, eps_exp=0.5):
    return y * _denominator(y, beta, gamma_ch=gamma, alpha=alpha, eps_exp=eps_exp)


def sncdn(z, beta, gamma, alpha=2.0, eps_exp=0.5):
    """Normalize each value by its own channel's spatial neighborhood energy."""
    return z / _denominator(z, beta, gamma_sp=gamma, alpha=alpha, eps_exp=eps_exp)


def isncdn(y, beta, gamma, alpha=2.0, eps_exp=0.5):
    return y * _denominator(y, beta, gamma_sp=gamma, alpha=alpha, eps_exp=eps_exp)


def mixdn(z, beta, gamma_ch, gamma_sp, alpha=2.0, eps_exp=0.5):
    return z / _denominator(z, beta, gamma_ch, gamma_sp, alpha, eps_exp)


def imixdn(y, beta, gamma_ch, gamma_sp, alpha=2.0, eps_exp=0.5):
    return y * _denominator(y, beta, gamma_ch, gamma_sp, alpha, eps_exp)


class _LowerBound(torch.autograd.Function):
    """max(x, bound) whose gradient still flows when it would lift x above the bound."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        ctx.surrogate = surrogates_enabled()
        note_kink(x >= bound)
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        pass_through = x >= ctx.bound
        if ctx.surrogate:
            pass_through = pass_through | (grad < 0)
        return grad * pass_through.to(grad.dtype), None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


class DivNorm(nn.Module):
    """One divisive-normalization stage with learnable beta / gamma.

    ``pool``: 'channel' (GDN), 'spatial' (SNCDN) or 'mixed'.
    ``gamma_mode`` controls spatial gamma sharing: 'offset' learns one weight
    per channel per window position, 'channel' one per channel, 'scalar' one
    for the whole stage.
    """

    def __init__(
        self,
        channels: int,
        pool: str = "channel",
        inverse: bool = False,
        window: int = 3,
        alpha: float = 2.0,
        eps_exp: float = 0.5,
        gamma_mode: str = "offset",
        gamma_init: float = 0.1,
    ):
        super().__init__()
        if pool not in ("channel", "spatial", "mixed"):
            raise ValueError(f"unknown pool kind {pool!r}")
        if window % 2 == 0:
            raise ContractError(f"window must be odd, got {window}")
        self.channels = channels
        self.pool = pool
        self.inverse = inverse
        self.window = window
        self.alpha = alpha
        self.eps_exp = eps_exp
        self.gamma_mode = gamma_mode
        self.beta_raw = nn.Parameter(torch.ones(channels))
        self.gamma_ch_raw = None
        self.gamma_sp_raw = None
        if pool in ("channel", "mixed"):
            self.gamma_ch_raw = nn.Parameter(torch.eye(channels) * gamma_init**0.5)
        if pool in ("spatial", "mixed"):
            shape = {"offset": (channels, window, window), "channel": (channels, 1, 1), "scalar": (1, 1, 1)}
            if gamma_mode not in shape:
                raise ValueError(f"unknown gamma_mode {gamma_mode!r}")
            n = 1 if gamma_mode != "offset" else window * window
            self.gamma_sp_raw = nn.Parameter(torch.full(shape[gamma_mode], (gamma_init / n) ** 0.5))

    @property
    def beta(self) -> torch.Tensor:
        return lower_bound(self.beta_raw * self.beta_raw, BETA_FLOOR)

    @property
    def gamma_ch(self):
        return None if self.gamma_ch_raw is None else self.gamma_ch_raw * self.gamma_ch_raw

    @property
    def gamma_sp(self):
        if self.gamma_sp_raw is None:
            return None
        g = self.gamma_sp_raw * self.gamma_sp_raw
        return g.expand(self.channels, self.window, self.window)

    @torch.no_grad()
    def set_identity(self) -> "DivNorm":
        """beta = 1, gamma = 0: the stage becomes an exact identity."""
        self.beta_raw.fill_(1.0)
        for g in (self.gamma_ch_raw, self.gamma_sp_raw):
            if g is not None:
                g.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_tensor(x, channels=self.channels)
        d = _denominator(x, self.beta, self.gamma_ch, self.gamma_sp, self.alpha, self.eps_exp)
        return x * d if self.inverse else x / d


_BLOCK_POOLS = {"ResGDN": "channel", "ResSNCDN": "spatial", "ResMixDN": "mixed"}


class ResDNBlock(nn.Module):
    """Residual block fused with a divisive normalization.

    Forward blocks: DN(residual_block(x)).  Inverse blocks (decoder side):
    residual_block(iDN(x)).
    """

    def __init__(self, channels: int, kind: str = "ResGDN", inverse: bool = False, **dn_kw):
        super().__init__()
        if kind not in _BLOCK_POOLS:
            raise ValueError(f"unknown block kind {kind!r}; expected one of {sorted(_BLOCK_POOLS)}")
        self.kind = kind
        self.inverse = inverse
        self.res = ResidualBlock(channels)
        self.norm = DivNorm(channels, _BLOCK_POOLS[kind], inverse=inverse, **dn_kw)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.inverse:
            return self.res(self.norm(x))
        return self.norm(self.res(x))
