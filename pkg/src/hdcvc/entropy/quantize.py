from __future__ import annotations

import torch

NOISE = "noise"
ROUND = "round"


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Nearest integer, ties away from zero (used identically by encoder and decoder)."""
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def quantize(x: torch.Tensor, mode: str = ROUND, generator: torch.Generator | None = None) -> torch.Tensor:
    """Additive uniform noise on [-0.5, 0.5) or rounding with a pass-through gradient."""
    if mode == NOISE:
        u = torch.rand(x.shape, generator=generator, dtype=x.dtype) - 0.5
        return x + u
    if mode == ROUND:
        q = round_half_away(x.detach())
        return x + (q - x).detach() if x.requires_grad else q
    raise ValueError(f"unknown quantization mode {mode!r}")
