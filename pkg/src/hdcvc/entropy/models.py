"""Likelihood models and their discretized coding tables.

``FactorizedPrior`` is a per-channel learned monotone CDF used for the
hyper-latents.  ``GaussianConditional`` models each latent as a Gaussian with
mean and scale predicted from the decoded hyper-latents.  ``Hyperprior``
bundles the hyper analysis/synthesis nets with both models and owns the real
coding path (tensor -> bytes -> tensor).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..divnorm import lower_bound
from ..tensor import Conv, SubPixelUp, leaky_relu, note_kink
from .quantize import NOISE, ROUND, quantize
from .rangecoder import CoderError, RangeDecoder, RangeEncoder, pmf_to_cdf

PMF_FLOOR = 2.0**-16
SCALE_FLOOR = 0.11
SCALE_MAX = 64.0
SCALE_LEVELS = 64
MAX_HALF_WIDTH = 256
_ESCAPE_LEN_BITS = 5


class EntropyError(CoderError):
    pass


def estimate_bits(likelihoods: torch.Tensor) -> torch.Tensor:
    """Sum of -log2 p over all symbols."""
    if likelihoods.numel() and (bool((likelihoods <= 0).any()) or bool((likelihoods > 1).any())):
        raise EntropyError("likelihoods must lie in (0, 1]")
    return -torch.log2(likelihoods).sum()


def _std_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def gaussian_likelihood(values: torch.Tensor, mean, scale) -> torch.Tensor:
    """Probability of the unit bin around each value under N(mean, scale), floored."""
    scale = lower_bound(torch.as_tensor(scale, dtype=values.dtype), SCALE_FLOOR)
    d = values - mean
    note_kink(d >= 0)
    v = d.abs()
    p = _std_cdf((0.5 - v) / scale) - _std_cdf((-0.5 - v) / scale)
    return lower_bound(p, PMF_FLOOR)


def likelihood(values: torch.Tensor, model, **params) -> torch.Tensor:
    """Dispatch: ``model`` is a FactorizedPrior or GaussianConditional."""
    return model.likelihood(values, **params)


# ----------------------------------------------------------------------------
# table coding with escapes


@dataclass(frozen=True)
class CodingTable:
    """Bins for integer values -half..half, plus one escape bin at the end."""

    cdf: tuple
    half: int

    @classmethod
    def from_pmf(cls, pmf: np.ndarray, tail: float, half: int) -> "CodingTable":
        p = np.maximum(np.append(pmf, tail), PMF_FLOOR)
        return cls(tuple(pmf_to_cdf(p)), half)

    @property
    def escape(self) -> int:
        return 2 * self.half + 1


def _encode_value(enc: RangeEncoder, value: int, table: CodingTable) -> None:
    cdf = table.cdf
    i = value + table.half
    if 0 <= i < table.escape:
        enc.encode(cdf[i], cdf[i + 1] - cdf[i])
        return
    e = table.escape
    enc.encode(cdf[e], cdf[e + 1] - cdf[e])
    enc.encode_bits(int(value < 0), 1)
    mag = abs(value) - table.half  # >= 1
    n = mag.bit_length()
    if n >= 1 << _ESCAPE_LEN_BITS:
        raise EntropyError(f"value {value} too large to escape-code")
    enc.encode_bits(n, _ESCAPE_LEN_BITS)
    enc.encode_bits(mag - (1 << (n - 1)), n - 1)


def _decode_value(dec: RangeDecoder, table: CodingTable) -> int:
    i = dec.decode(table.cdf)
    if i < table.escape:
        return i - table.half
    neg = dec.decode_bits(1)
    n = dec.decode_bits(_ESCAPE_LEN_BITS)
    if n == 0:
        raise EntropyError("corrupt escape code")
    mag = (1 << (n - 1)) + dec.decode_bits(n - 1)
    v = table.half + mag
    return -v if neg else v


def encode_with_tables(values, table_index, tables) -> bytes:
    enc = RangeEncoder()
    for v, t in zip(np.asarray(values, dtype=np.int64).ravel().tolist(), np.asarray(table_index).ravel().tolist()):
        _encode_value(enc, v, tables[t])
    return enc.finish()


def decode_with_tables(data: bytes, table_index, tables) -> np.ndarray:
    dec = RangeDecoder(data)
    idx = np.asarray(table_index).ravel().tolist()
    out = np.array([_decode_value(dec, tables[t]) for t in idx], dtype=np.int64)
    if dec.overrun > 8:
        raise EntropyError("corrupt stream: decoder read far beyond the payload")
    return out


def table_bits(values, table_index, tables) -> float:
    """Ideal code length (bits) of ``values`` under the quantized tables, escapes included."""
    bits = 0.0
    for v, t in zip(np.asarray(values, dtype=np.int64).ravel().tolist(), np.asarray(table_index).ravel().tolist()):
        tab = tables[t]
        i = v + tab.half
        if not 0 <= i < tab.escape:
            mag = abs(v) - tab.half
            i = tab.escape
            bits += 1 + _ESCAPE_LEN_BITS + mag.bit_length() - 1
        bits -= math.log2((tab.cdf[i + 1] - tab.cdf[i]) / 65536)
    return bits


# ----------------------------------------------------------------------------
# Gaussian conditional


@functools.lru_cache(maxsize=4)
def scale_table(levels: int = SCALE_LEVELS, lo: float = SCALE_FLOOR, hi: float = SCALE_MAX) -> tuple:
    return tuple(float(v) for v in np.exp(np.linspace(math.log(lo), math.log(hi), levels)).astype(np.float32))


@functools.lru_cache(maxsize=4)
def gaussian_tables(levels: int = SCALE_LEVELS) -> tuple:
    from scipy.special import ndtr

    tables = []
    for s in scale_table(levels):
        half = int(min(max(math.ceil(6 * s) + 1, 2), MAX_HALF_WIDTH))
        v = np.arange(-half, half + 1, dtype=np.float64)
        pmf = ndtr((v + 0.5) / s) - ndtr((v - 0.5) / s)
        tail = 2 * ndtr((-half - 0.5) / s)
        tables.append(CodingTable.from_pmf(pmf, tail, half))
    return tuple(tables)


class GaussianConditional(nn.Module):
    """Discretized Gaussian with per-symbol mean and scale.

    Coding quantizes ``value - mean`` (ties away from zero) and codes that
    integer with the table whose scale is the smallest table entry >= scale.
    """

    def __init__(self, levels: int = SCALE_LEVELS):
        super().__init__()
        self.levels = levels
        self.register_buffer("scales", torch.tensor(scale_table(levels), dtype=torch.float32), persistent=False)

    def table_index(self, scale: torch.Tensor) -> torch.Tensor:
        s = scale.detach().to(torch.float32).clamp_min(SCALE_FLOOR).contiguous()
        return torch.searchsorted(self.scales, s).clamp_max(self.levels - 1)

    def table_scale(self, scale: torch.Tensor) -> torch.Tensor:
        return self.scales[self.table_index(scale)]

    def likelihood(self, values, mean, scale) -> torch.Tensor:
        return gaussian_likelihood(values, mean, scale)

    def tables(self):
        return gaussian_tables(self.levels)

    def compress(self, symbols: torch.Tensor, scale: torch.Tensor) -> bytes:
        return encode_with_tables(symbols.to(torch.int64).numpy(), self.table_index(scale).numpy(), self.tables())

    def decompress(self, data: bytes, scale: torch.Tensor) -> torch.Tensor:
        vals = decode_with_tables(data, self.table_index(scale).numpy(), self.tables())
        return torch.from_numpy(vals).reshape(scale.shape).to(torch.float32)


# ----------------------------------------------------------------------------
# factorized prior


class FactorizedPrior(nn.Module):
    """Per-channel univariate density with a learned monotone CDF.

    The CDF is sigmoid(h(x)), h a channel-wise cascade of affine maps with
    softplus-constrained (positive) matrices and tanh-gated nonlinearities,
    which keeps it nondecreasing.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0, half_width: int = 24):
        super().__init__()
        self.channels = channels
        self.half_width = half_width
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cdf(self, x: torch.Tensor) -> torch.Tensor:
        """x: (C, 1, N) -> logits of the CDF, (C, 1, N)."""
        h = x
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            h = torch.matmul(F.softplus(m).to(x.dtype), h) + b.to(x.dtype)
            if i < len(self.factors):
                h = h + torch.tanh(self.factors[i]).to(x.dtype) * torch.tanh(h)
        return h

    def likelihood(self, values: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = values.shape
        x = values.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self.logits_cdf(x - 0.5)
        upper = self.logits_cdf(x + 0.5)
        sign = -torch.sign(lower + upper).detach()
        p = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        p = p.reshape(c, b, hh, ww).permute(1, 0, 2, 3)
        return lower_bound(p, PMF_FLOOR)

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits_cdf(x))

    @torch.no_grad()
    def tables(self) -> list[CodingTable]:
        half = self.half_width
        edges = torch.arange(-half - 0.5, half + 1.0, 1.0, dtype=torch.float64)
        x = edges.reshape(1, 1, -1).expand(self.channels, 1, -1)
        logits = self.logits_cdf(x).reshape(self.channels, -1)
        cdf = torch.sigmoid(logits).numpy()
        lower_tail = torch.sigmoid(logits[:, 0]).numpy()
        upper_tail = torch.sigmoid(-logits[:, -1]).numpy()
        out = []
        for c in range(self.channels):
            pmf = np.clip(np.diff(cdf[c]), 0.0, None)
            out.append(CodingTable.from_pmf(pmf, float(lower_tail[c] + upper_tail[c]), half))
        return out

    def _index(self, shape) -> np.ndarray:
        b, c, h, w = shape
        return np.broadcast_to(np.arange(c).reshape(1, c, 1, 1), (b, c, h, w))

    def compress(self, symbols: torch.Tensor) -> bytes:
        return encode_with_tables(symbols.to(torch.int64).numpy(), self._index(symbols.shape), self.tables())

    def decompress(self, data: bytes, shape) -> torch.Tensor:
        vals = decode_with_tables(data, self._index(shape), self.tables())
        return torch.from_numpy(vals).reshape(shape).to(torch.float32)


# ----------------------------------------------------------------------------
# hyperprior


class MaskedConv(nn.Module):
    """Causal 'type A' convolution: each site sees only sites earlier in raster order."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 5):
        super().__init__()
        self.conv = Conv(in_ch, out_ch, kernel)
        mask = torch.ones(1, 1, kernel, kernel)
        c = kernel // 2
        mask[..., c, c:] = 0
        mask[..., c + 1 :, :] = 0
        self.register_buffer("mask", mask, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.conv.weight * self.mask, self.conv.bias, padding=self.conv.padding)

    def at(self, x: torch.Tensor, i: int, j: int) -> torch.Tensor:
        """Output at site (i, j) only, computed from an explicit causal patch."""
        k = self.conv.weight.shape[-1]
        r = k // 2
        padded = F.pad(x, (r, r, r, r))
        patch = padded[:, :, i : i + k, j : j + k] * self.mask
        w = self.conv.weight * self.mask
        return torch.einsum("bcij,ocij->bo", patch, w) + self.conv.bias


class Hyperprior(nn.Module):
    """Hyper analysis/synthesis plus factorized and Gaussian-conditional models.

    Modes: 'noise' (training, additive uniform noise) and 'round' (inference).
    """

    def __init__(self, latent_ch: int, hyper_ch: int, context: bool = False):
        super().__init__()
        self.latent_ch = latent_ch
        self.context = context
        self.h_a = nn.ModuleList([Conv(latent_ch, hyper_ch, 3), Conv(hyper_ch, hyper_ch, 5, 2), Conv(hyper_ch, hyper_ch, 5, 2)])
        self.h_s = nn.ModuleList([SubPixelUp(hyper_ch, hyper_ch), SubPixelUp(hyper_ch, hyper_ch), Conv(hyper_ch, 2 * latent_ch, 3)])
        self.prior = FactorizedPrior(hyper_ch)
        self.conditional = GaussianConditional()
        if context:
            self.ctx = MaskedConv(latent_ch, 2 * latent_ch, 5)
            self.ctx_merge = nn.ModuleList([Conv(4 * latent_ch, 2 * latent_ch, 1), Conv(2 * latent_ch, 2 * latent_ch, 1)])

    def analysis(self, y: torch.Tensor) -> torch.Tensor:
        h = y
        for i, conv in enumerate(self.h_a):
            h = conv(h)
            if i < len(self.h_a) - 1:
                h = leaky_relu(h)
        return h

    def synthesis(self, z_hat: torch.Tensor) -> torch.Tensor:
        h = z_hat
        for i, layer in enumerate(self.h_s):
            h = layer(h)
            if i < len(self.h_s) - 1:
                h = leaky_relu(h)
        return h

    def _params(self, hyper: torch.Tensor, ctx: torch.Tensor | None = None):
        if ctx is not None:
            h = leaky_relu(self.ctx_merge[0](torch.cat([hyper, ctx], dim=1)))
            hyper = self.ctx_merge[1](h)
        mean, scale_raw = hyper.chunk(2, dim=1)
        return mean, F.softplus(scale_raw)

    def forward(self, y: torch.Tensor, mode: str = NOISE, generator: torch.Generator | None = None):
        """Returns (y_hat, info) with per-symbol likelihoods and bit estimates."""
        z = self.analysis(y)
        if mode == NOISE:
            z_hat = quantize(z, NOISE, generator)
            y_hat = quantize(y, NOISE, generator)
            hyper = self.synthesis(z_hat)
            ctx = self.ctx(y_hat) if self.context else None
            mean, scale = self._params(hyper, ctx)
            y_lik = self.conditional.likelihood(y_hat, mean, scale)
        elif mode == ROUND:
            z_hat = quantize(z, ROUND)
            hyper = self.synthesis(z_hat)
            if self.context:
                y_hat, mean, scale = self._sequential(y, hyper)
            else:
                mean, scale = self._params(hyper)
                y_hat = quantize(y - mean, ROUND) + mean
            y_lik = self.conditional.likelihood(y_hat, mean, self.conditional.table_scale(scale))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        z_lik = self.prior.likelihood(z_hat)
        info = {
            "y_likelihoods": y_lik,
            "z_likelihoods": z_lik,
            "y_bits": estimate_bits(y_lik),
            "z_bits": estimate_bits(z_lik),
        }
        info["bits"] = info["y_bits"] + info["z_bits"]
        return y_hat, info

    # -- coding ---------------------------------------------------------------

    def _sequential(self, y, hyper, decoder=None):
        """Raster-order coding with the causal context model.

        Runs identically on both sides; ``decoder`` is a callable decoding one
        site's symbols from (scale) when y is unknown.
        """
        b, c, h, w = hyper.shape[0], self.latent_ch, hyper.shape[2], hyper.shape[3]
        y_hat = torch.zeros(b, c, h, w)
        means = torch.zeros(b, c, h, w)
        scales = torch.zeros(b, c, h, w)
        symbols = torch.zeros(b, c, h, w)
        for i in range(h):
            for j in range(w):
                ctx = self.ctx.at(y_hat, i, j).reshape(b, 2 * c, 1, 1)
                mean, scale = self._params(hyper[:, :, i : i + 1, j : j + 1], ctx)
                if decoder is None:
                    sym = quantize(y[:, :, i : i + 1, j : j + 1] - mean, ROUND)
                else:
                    sym = decoder(scale)
                symbols[:, :, i : i + 1, j : j + 1] = sym
                y_hat[:, :, i : i + 1, j : j + 1] = sym + mean
                means[:, :, i : i + 1, j : j + 1] = mean
                scales[:, :, i : i + 1, j : j + 1] = scale
        self._last_symbols = symbols
        return y_hat, means, scales

    @torch.no_grad()
    def compress(self, y: torch.Tensor):
        """Returns (y_hat, z_bytes, y_bytes); y_hat equals what decompress yields."""
        z_sym = quantize(self.analysis(y), ROUND)
        z_bytes = self.prior.compress(z_sym)
        hyper = self.synthesis(z_sym)
        if self.context:
            y_hat, mean, scale = self._sequential(y, hyper)
            symbols = self._last_symbols
        else:
            mean, scale = self._params(hyper)
            symbols = quantize(y - mean, ROUND)
            y_hat = symbols + mean
        if self.context:
            # decoder consumes all channels of one site before the next site
            symbols = symbols.permute(2, 3, 0, 1)
            scale = scale.permute(2, 3, 0, 1)
        y_bytes = self.conditional.compress(symbols, scale)
        return y_hat, z_bytes, y_bytes

    @torch.no_grad()
    def decompress(self, z_bytes: bytes, y_bytes: bytes, latent_hw, batch: int = 1) -> torch.Tensor:
        h, w = latent_hw
        z_shape = (batch, self.prior.channels, h // 4, w // 4)
        z_sym = self.prior.decompress(z_bytes, z_shape)
        hyper = self.synthesis(z_sym)
        if self.context:
            dec = RangeDecoder(y_bytes)
            tables = self.conditional.tables()

            def decode_site(scale):
                idx = self.conditional.table_index(scale).reshape(-1).tolist()
                vals = [_decode_value(dec, tables[t]) for t in idx]
                return torch.tensor(vals, dtype=torch.float32).reshape(scale.shape)

            y_hat, _, _ = self._sequential(None, hyper, decode_site)
            return y_hat
        mean, scale = self._params(hyper)
        symbols = self.conditional.decompress(y_bytes, scale)
        return symbols + mean
