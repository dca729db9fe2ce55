"""Heterogeneous and single-size deformable convolution.

Offset layout (shared by encoder and decoder, must never change): for a
kernel of size K the offset tensor has 2*K*K channels, taps in row-major
order, each tap contributing (dy, dx) in that order.  A heterogeneous offset
tensor concatenates the 1x1, 3x3 and 5x5 groups: 2 + 18 + 50 = 70 channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import torch
import torch.nn as nn

from .tensor import ContractError, bilinear_gather, check_tensor

HET_KERNELS = (1, 3, 5)
HET_OFFSET_CHANNELS = sum(2 * k * k for k in HET_KERNELS)


def offset_channels(kernels) -> int:
    return sum(2 * k * k for k in kernels)


@dataclass(frozen=True)
class HetOffsets:
    off1: torch.Tensor
    off3: torch.Tensor
    off5: torch.Tensor

    @classmethod
    def split(cls, m: torch.Tensor) -> "HetOffsets":
        check_tensor(m, "motion", HET_OFFSET_CHANNELS)
        return cls(m[:, :2], m[:, 2:20], m[:, 20:])

    def pack(self) -> torch.Tensor:
        return torch.cat([self.off1, self.off3, self.off5], dim=1)

    def groups(self):
        return (self.off1, self.off3, self.off5)


def _sampling_positions(offsets: torch.Tensor, k: int):
    """Absolute (px, py) of every tap, each shaped (B, K*K, H, W)."""
    b, c, h, w = offsets.shape
    r = k // 2
    taps = torch.arange(-r, r + 1, dtype=offsets.dtype)
    ty, tx = torch.meshgrid(taps, taps, indexing="ij")
    ty = ty.reshape(1, k * k, 1, 1)
    tx = tx.reshape(1, k * k, 1, 1)
    gy = torch.arange(h, dtype=offsets.dtype).reshape(1, 1, h, 1)
    gx = torch.arange(w, dtype=offsets.dtype).reshape(1, 1, 1, w)
    off = offsets.reshape(b, k * k, 2, h, w)
    py = gy + ty + off[:, :, 0]
    px = gx + tx + off[:, :, 1]
    return px, py


def deform_conv_single(
    f_ref: torch.Tensor,
    offsets: torch.Tensor,
    weight: torch.Tensor,
    k: int | None = None,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Stride-1 deformable convolution with one K x K kernel over all channels.

    ``weight`` is (N, M, K, K); ``offsets`` is (B, 2*K*K, H, W) aligned with
    ``f_ref``.  Output is (B, N, H, W).
    """
    check_tensor(f_ref, "f_ref")
    k = weight.shape[-1] if k is None else k
    if weight.shape[-2:] != (k, k) or weight.shape[1] != f_ref.shape[1]:
        raise ContractError(
            f"weight shape {tuple(weight.shape)} incompatible with K={k}, M={f_ref.shape[1]}"
        )
    check_tensor(offsets, "offsets")
    if offsets.shape[1] != 2 * k * k:
        raise ContractError(f"offsets have {offsets.shape[1]} channels, expected 2*K*K = {2 * k * k}")
    if offsets.shape[0] != f_ref.shape[0] or offsets.shape[2:] != f_ref.shape[2:]:
        raise ContractError(
            f"offsets {tuple(offsets.shape)} not aligned with features {tuple(f_ref.shape)}"
        )
    b, _, h, w = f_ref.shape
    px, py = _sampling_positions(offsets, k)
    cols = bilinear_gather(f_ref, px, py)  # (B, M, K*K, H, W)
    out = torch.einsum("bmkhw,nmk->bnhw", cols, weight.reshape(weight.shape[0], weight.shape[1], k * k))
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def het_deform_conv(
    f_ref: torch.Tensor,
    offsets: HetOffsets | torch.Tensor,
    weights,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Sum of 1x1, 3x3 and 5x5 deformable convolutions over channel thirds.

    ``weights`` is a (w1, w3, w5) triple with shapes (N, M/3, k, k).  Input
    channels [0, M/3) feed the 1x1 kernel, [M/3, 2M/3) the 3x3 kernel and
    [2M/3, M) the 5x5 kernel; the three outputs are summed without scaling.
    """
    check_tensor(f_ref, "f_ref")
    m = f_ref.shape[1]
    if m % 3:
        raise ContractError(f"feature channels M={m} not divisible by 3")
    if isinstance(offsets, torch.Tensor):
        offsets = HetOffsets.split(offsets)
    third = m // 3
    out = None
    for g, (k, off, w) in enumerate(zip(HET_KERNELS, offsets.groups(), weights)):
        if w.shape[1] != third or w.shape[-1] != k:
            raise ContractError(f"group {g} weight {tuple(w.shape)} expected (N, {third}, {k}, {k})")
        y = deform_conv_single(f_ref[:, g * third : (g + 1) * third], off, w, k)
        out = y if out is None else out + y
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


class HetDeformConv(nn.Module):
    """Learnable heterogeneous deformable convolution (offsets supplied per call)."""

    kernels = HET_KERNELS

    def __init__(self, in_ch: int, out_ch: int, bias: bool = True):
        super().__init__()
        if in_ch % 3:
            raise ContractError(f"in_ch={in_ch} not divisible by 3")
        third = in_ch // 3
        self.w1 = nn.Parameter(torch.empty(out_ch, third, 1, 1))
        self.w3 = nn.Parameter(torch.empty(out_ch, third, 3, 3))
        self.w5 = nn.Parameter(torch.empty(out_ch, third, 5, 5))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        fan_in = third * 35
        for w in (self.w1, self.w3, self.w5):
            nn.init.uniform_(w, -1 / math.sqrt(fan_in), 1 / math.sqrt(fan_in))

    @property
    def offset_channels(self) -> int:
        return HET_OFFSET_CHANNELS

    def forward(self, f_ref: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
        return het_deform_conv(f_ref, offsets, (self.w1, self.w3, self.w5), self.bias)


class DeformConv(nn.Module):
    """Single-size deformable convolution, the ablation counterpart of HetDeformConv."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, bias: bool = True):
        super().__init__()
        self.kernel = kernel
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        bound = 1 / math.sqrt(in_ch * kernel * kernel)
        nn.init.uniform_(self.weight, -bound, bound)

    @property
    def offset_channels(self) -> int:
        return 2 * self.kernel * self.kernel

    def forward(self, f_ref: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
        return deform_conv_single(f_ref, offsets, self.weight, self.kernel, self.bias)


def make_compensation(kind: str, in_ch: int, out_ch: int) -> nn.Module:
    """'het' or 'k1' / 'k3' / 'k5'."""
    if kind == "het":
        return HetDeformConv(in_ch, out_ch)
    if kind in ("k1", "k3", "k5"):
        return DeformConv(in_ch, out_ch, int(kind[1]))
    raise ValueError(f"unknown compensation kind {kind!r}")


# ----------------------------------------------------------------------------
# compute-cost model


@dataclass(frozen=True)
class CostModel:
    kind: str  # "het" or "single"
    height: int
    width: int
    in_channels: int
    out_channels: int
    kernel: int = 3
    bilinear: Fraction | int = 1

    def __post_init__(self):
        if self.kind not in ("het", "single"):
            raise ValueError(f"kind must be 'het' or 'single', got {self.kind!r}")
        if min(self.height, self.width, self.in_channels, self.out_channels, self.kernel) < 1:
            raise ValueError("all extents must be >= 1")


def com_cost(model: CostModel) -> Fraction:
    """Multiply-accumulate count of a deformable layer, exact rational."""
    base = Fraction(model.height * model.width * model.in_channels * model.out_channels) * Fraction(
        model.bilinear
    )
    if model.kind == "single":
        return model.kernel * model.kernel * base
    taps = sum(k * k for k in HET_KERNELS)  # 35
    return Fraction(taps, 3) * base
