"""Tensor contract, primitive layers and the finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects in (batch, channel, height, width)
layout, float32 unless a caller asks otherwise.  Gradients come from torch's
autograd tape; :func:`grad_check` verifies them against central differences.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_SLOPE = 0.1


class ContractError(ValueError):
    """Raised when an operation's shape or value precondition is violated."""


def check_tensor(x: torch.Tensor, name: str = "x", channels: int | None = None) -> None:
    if x.dim() != 4:
        raise ContractError(f"{name} must be 4-D (B, C, H, W), got shape {tuple(x.shape)}")
    if any(s < 1 for s in x.shape):
        raise ContractError(f"{name} has an empty extent: {tuple(x.shape)}")
    if channels is not None and x.shape[1] != channels:
        raise ContractError(f"{name} has {x.shape[1]} channels, expected {channels}")


def assert_finite(x: torch.Tensor, name: str = "tensor") -> None:
    bad = ~torch.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in bad.nonzero()[0])
        raise ContractError(f"{name} has a non-finite value at index {idx}")


# ----------------------------------------------------------------------------
# kink recording (used by grad_check)


class KinkLog(list):
    """Branch patterns of non-smooth ops seen during one forward pass."""

    def __eq__(self, other) -> bool:
        return len(self) == len(other) and all(torch.equal(a, b) for a, b in zip(self, other))

    def __ne__(self, other) -> bool:
        return not self == other


_kink_log: KinkLog | None = None
_exact = False


@contextmanager
def record_kinks():
    global _kink_log
    prev, _kink_log = _kink_log, KinkLog()
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def note_kink(pattern: torch.Tensor) -> None:
    if _kink_log is not None:
        _kink_log.append(pattern.detach().clone())


def surrogates_enabled() -> bool:
    """False while grad_check runs: ops with surrogate gradients then use their true derivative."""
    return not _exact


# ----------------------------------------------------------------------------
# primitive ops


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> torch.Tensor:
    """Zero-padded 2-D convolution with weight of shape (N, M/groups, K, K)."""
    check_tensor(x)
    if weight.dim() != 4:
        raise ContractError(f"weight must be 4-D, got {tuple(weight.shape)}")
    m = weight.shape[1] * groups
    if x.shape[1] != m:
        raise ContractError(
            f"input has {x.shape[1]} channels but weight expects {m} "
            f"(weight shape {tuple(weight.shape)}, groups={groups})"
        )
    k = weight.shape[-1]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ContractError(
            f"kernel {k} larger than padded input {tuple(x.shape[2:])} (padding {padding})"
        )
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def leaky_relu(x: torch.Tensor, slope: float = DEFAULT_SLOPE) -> torch.Tensor:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"slope must lie in (0, 1), got {slope}")
    note_kink(x >= 0)
    return torch.maximum(x, slope * x)


def depth_to_space(x: torch.Tensor, factor: int) -> torch.Tensor:
    """(B, C*f*f, H, W) -> (B, C, H*f, W*f); channel c*f*f + i*f + j lands at (i, j)."""
    check_tensor(x)
    b, c, h, w = x.shape
    if c % (factor * factor):
        raise ContractError(f"channels {c} not divisible by factor^2 = {factor * factor}")
    if factor == 1:
        return x
    x = x.reshape(b, c // (factor * factor), factor, factor, h, w)
    x = x.permute(0, 1, 4, 2, 5, 3)
    return x.reshape(b, c // (factor * factor), h * factor, w * factor)


def space_to_depth(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Exact inverse of :func:`depth_to_space`."""
    check_tensor(x)
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise ContractError(f"spatial extents {h}x{w} not divisible by {factor}")
    if factor == 1:
        return x
    x = x.reshape(b, c, h // factor, factor, w // factor, factor)
    x = x.permute(0, 1, 3, 5, 2, 4)
    return x.reshape(b, c * factor * factor, h // factor, w // factor)


def _gather_plane(f: torch.Tensor, xi: torch.Tensor, yi: torch.Tensor) -> torch.Tensor:
    """Gather f[b, c, yi, xi] with zero padding.

    f is (B, C, H, W); xi, yi are integer-valued (B, *S) tensors shared across
    channels.  Returns (B, C, *S).
    """
    b, c, h, w = f.shape
    spatial = xi.shape[1:]
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).long().reshape(b, 1, -1)
    vals = torch.gather(f.reshape(b, c, h * w), 2, idx.expand(b, c, idx.shape[-1]))
    vals = vals * inside.reshape(b, 1, -1).to(f.dtype)
    return vals.reshape(b, c, *spatial)


def bilinear_gather(f: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Bilinear samples of every channel of ``f`` at real positions (px, py).

    px, py have shape (B, *S) in grid-pixel units and are shared by all
    channels; reads outside the grid return zero.  Output is (B, C, *S).
    Differentiable w.r.t. f, px and py.
    """
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    note_kink(x0)
    note_kink(y0)
    ax = px - x0
    ay = py - y0
    x0d, y0d = x0.detach(), y0.detach()
    v00 = _gather_plane(f, x0d, y0d)
    v01 = _gather_plane(f, x0d + 1, y0d)
    v10 = _gather_plane(f, x0d, y0d + 1)
    v11 = _gather_plane(f, x0d + 1, y0d + 1)
    ax = ax.unsqueeze(1)
    ay = ay.unsqueeze(1)
    top = v00 + ax * (v01 - v00)
    bottom = v10 + ax * (v11 - v10)
    return top + ay * (bottom - top)


def bilinear_sample(f: torch.Tensor, x, y, c: int, b: int = 0) -> torch.Tensor:
    """Scalar bilinear read of f[b, c] at column x, row y (zero outside)."""
    px = torch.as_tensor(x, dtype=f.dtype).reshape(1, 1)
    py = torch.as_tensor(y, dtype=f.dtype).reshape(1, 1)
    plane = f[b : b + 1, c : c + 1]
    return bilinear_gather(plane, px, py).reshape(())


# ----------------------------------------------------------------------------
# layers


class Conv(nn.Module):
    """Conv M, N, K, S with 'same'-style zero padding K // 2."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def zero_(self) -> "Conv":
        with torch.no_grad():
            self.weight.zero_()
            if self.bias is not None:
                self.bias.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class SubPixelUp(nn.Module):
    """Conv to f*f times the channels followed by depth_to_space(f)."""

    def __init__(self, in_ch: int, out_ch: int, factor: int = 2, kernel: int = 3):
        super().__init__()
        self.factor = factor
        self.conv = Conv(in_ch, out_ch * factor * factor, kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return depth_to_space(self.conv(x), self.factor)


def residual_branch(x, w1, b1, w2, b2, slope: float = DEFAULT_SLOPE) -> torch.Tensor:
    h = leaky_relu(conv2d(x, w1, b1, 1, w1.shape[-1] // 2), slope)
    return conv2d(h, w2, b2, 1, w2.shape[-1] // 2)


class ResidualBlock(nn.Module):
    """x + conv3(lrelu(conv3(x))), channel preserving.

    The second conv starts at ``branch_init`` times its usual scale so deep
    stacks begin close to the identity.
    """

    def __init__(self, channels: int, slope: float = DEFAULT_SLOPE, branch_init: float = 0.1):
        super().__init__()
        self.channels = channels
        self.slope = slope
        self.conv1 = Conv(channels, channels, 3)
        self.conv2 = Conv(channels, channels, 3)
        with torch.no_grad():
            self.conv2.weight.mul_(branch_init)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_tensor(x, channels=self.channels)
        return x + residual_branch(
            x, self.conv1.weight, self.conv1.bias, self.conv2.weight, self.conv2.bias, self.slope
        )


# ----------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    checked: int
    skipped: int
    tol: float
    worst: str = ""
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel={self.max_rel_error:.3e} mean_rel={self.mean_rel_error:.3e} "
            f"checked={self.checked} skipped={self.skipped} worst={self.worst}"
        )


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-3,
    tol: float = 1e-2,
    max_coords: int = 64,
    seed: int = 0,
    dtype: torch.dtype = torch.float64,
    kink_tol: float = 1e-2,
    floor_frac: float = 1e-3,
    params: Sequence[nn.Parameter] = (),
) -> GradCheckReport:
    """Compare autograd gradients of ``fn`` against central differences.

    The scalar probed is ``sum(fn(*inputs) * r)`` for a fixed random ``r``.
    Up to ``max_coords`` coordinates are sampled per checked tensor (inputs
    and ``params``).  A coordinate is skipped as non-smooth when its one-sided
    differences disagree by more than ``kink_tol`` (relative), or when the
    +-eps perturbation changes the branch pattern recorded by
    :func:`record_kinks` (an activation sign or a bilinear sampling cell):
    an activation kink lies within ``eps`` of it.  The relative error of a coordinate is
    ``|analytic - numeric| / max(|numeric|, floor)`` where ``floor`` is
    ``floor_frac`` times the largest numeric gradient magnitude seen for that
    tensor.  Computation runs in ``dtype`` (float64 by default) so that the
    differences measure the derivative rather than rounding noise.  Surrogate
    gradients (see :func:`surrogates_enabled`) are switched off meanwhile.
    """
    global _exact
    gen = torch.Generator().manual_seed(seed)
    xs = [x.detach().to(dtype).clone().requires_grad_(True) for x in inputs]
    saved = [(p, p.data) for p in params]
    for p in params:
        p.data = p.data.to(dtype)
    _exact = True
    try:
        out = fn(*xs)
        assert_finite(out.detach(), "op output")
        r = torch.randn(out.shape, generator=gen, dtype=dtype)
        for p in params:
            p.grad = None
        (out * r).sum().backward()
        targets = [(f"input{i}", x, x.grad) for i, x in enumerate(xs)]
        targets += [(f"param{i}", p, p.grad) for i, p in enumerate(params)]

        def probe() -> float:
            with torch.no_grad():
                return float((fn(*xs) * r).sum())

        def probe_kinks():
            with record_kinks() as log:
                v = probe()
            return v, log

        f0, kinks_0 = probe_kinks()
        errors: list[float] = []
        failures: list[str] = []
        skipped = 0
        worst, worst_err = "", -1.0
        for name, t, g in targets:
            g = torch.zeros_like(t) if g is None else g.detach()
            assert_finite(g, f"analytic gradient of {name}")
            n = t.numel()
            picks = torch.randperm(n, generator=gen)[: min(n, max_coords)].tolist()
            flat = t.data.view(-1)
            numeric, analytic = [], []
            for j in picks:
                orig = float(flat[j])
                flat[j] = orig + eps
                fp, kinks_p = probe_kinks()
                flat[j] = orig - eps
                fm, kinks_m = probe_kinks()
                flat[j] = orig
                if not all(math.isfinite(v) for v in (fp, fm, f0)):
                    failures.append(f"{name}[{j}] non-finite objective")
                    continue
                dp, dm = (fp - f0) / eps, (f0 - fm) / eps
                if abs(dp - dm) > kink_tol * max(abs(dp), abs(dm), 1e-12) and abs(dp - dm) > 1e-9:
                    skipped += 1
                    continue
                if kinks_p != kinks_0 or kinks_m != kinks_0:
                    skipped += 1
                    continue
                numeric.append((fp - fm) / (2 * eps))
                analytic.append(float(g.view(-1)[j]))
            if not numeric:
                continue
            floor = floor_frac * max(abs(v) for v in numeric) + 1e-12
            for j, (a, nu) in enumerate(zip(analytic, numeric)):
                err = abs(a - nu) / max(abs(nu), floor)
                errors.append(err)
                if err > worst_err:
                    worst_err, worst = err, f"{name}: analytic={a:.6g} numeric={nu:.6g}"
        if not errors and not failures:
            failures.append("no coordinate could be checked")
        return GradCheckReport(
            max_rel_error=max(errors) if errors else math.inf,
            mean_rel_error=sum(errors) / len(errors) if errors else math.inf,
            checked=len(errors),
            skipped=skipped,
            tol=tol,
            worst=worst,
            failures=failures,
        )
    finally:
        _exact = False
        for p, data in saved:
            p.data = data
            p.grad = None


def module_grad_check(module: nn.Module, inputs: Sequence[torch.Tensor], fn=None, **kw) -> GradCheckReport:
    """grad_check over a module's inputs and all of its parameters."""
    call = fn if fn is not None else module
    params = [p for p in module.parameters() if p.requires_grad]
    return grad_check(call, inputs, params=params, **kw)
