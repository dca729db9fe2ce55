from __future__ import annotations

from dataclasses import dataclass

import torch

from ..metrics import ms_ssim, mse

PSNR_LAMBDAS = (256, 512, 1024, 2048)
MSSSIM_LAMBDAS = (8, 16, 32, 64)


@dataclass(frozen=True)
class RdLambda:
    """One point of the lambda grid: metric 'psnr' (MSE distortion) or 'msssim'."""

    index: int
    metric: str = "psnr"

    def __post_init__(self):
        if self.metric not in ("psnr", "msssim"):
            raise ValueError(f"metric must be 'psnr' or 'msssim', got {self.metric!r}")
        if not 0 <= self.index < 4:
            raise ValueError(f"lambda index must be in 0..3, got {self.index}")

    @property
    def value(self) -> float:
        grid = PSNR_LAMBDAS if self.metric == "psnr" else MSSSIM_LAMBDAS
        return float(grid[self.index])


def distortion(x_hat: torch.Tensor, x: torch.Tensor, metric: str = "psnr") -> torch.Tensor:
    if metric == "psnr":
        return mse(x_hat, x)
    if metric == "msssim":
        return 1.0 - ms_ssim(x_hat, x)
    raise ValueError(f"unknown metric {metric!r}")


def loss_rc(pred, frame, rate_motion, lam: float):
    """Stage-1 objective: lam * MSE(prediction, frame) + motion rate."""
    return lam * mse(pred, frame) + rate_motion


def loss_total(recon, frame, rate_motion, rate_residual, lam: float, metric: str = "psnr"):
    return lam * distortion(recon, frame, metric) + rate_motion + rate_residual
