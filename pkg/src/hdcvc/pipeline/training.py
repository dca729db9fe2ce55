"""Progressive three-stage training with recurrent multi-frame unrolls.

Stage 1 trains only the motion modules on the rate-compensation loss.
Stage 2 adds the residual codec and optimizes the full RD loss with
enhancement bypassed.  Stage 3 trains everything, enhancement included.

A clip of T frames is unrolled over T-1 transitions; every transition is one
optimizer step.  The first transition of a clip predicts from ground-truth
frame 0.  In stage 1 every later transition does too (there is no
reconstruction yet); from stage 2 on, later transitions predict from the
buffered, detached reconstruction.  Stages 2-3 also train the intra mode
(residual codec with zero prediction): each step adds the intra RD loss of
its target frame.  They further add ``pred_weight * lam * MSE`` of the
motion-compensated prediction: otherwise the residual codec learns to absorb
prediction errors and compensation drifts below a plain frame copy.  The
logged RD loss covers the P-frame objective only.

Stage 1 may begin with a motion warm-up: compensation reads the estimated
motion directly (no motion codec, zero rate) while the motion codec is fitted
to reproduce it.  The estimator thus learns something worth sending, and the
codec can send it, before rate pressure applies.  ``rate_ramp`` then raises
the rate weight linearly from 0 to 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from ..entropy.quantize import NOISE
from ..nets import HDCVC
from .codec import p_forward
from ..metrics import mse
from .losses import RdLambda, distortion

log = logging.getLogger(__name__)

STAGE_GROUPS = {1: ("motion",), 2: ("motion", "residual"), 3: ("motion", "residual", "mfer")}


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 2000
    lam: RdLambda = field(default_factory=lambda: RdLambda(2))
    seed: int = 0
    lr: float = 3e-4
    batch: int = 4
    crop: int = 64
    plateau_window: int = 100
    plateau_patience: int = 4
    grad_clip: float = 10.0
    motion_warmup: int = 800
    rate_ramp: int = 200
    fit_weight: float = 4.0
    intra: bool = True
    pred_weight: float = 0.5
    log_every: int = 100


@dataclass
class TrainResult:
    """Per-step logs; ``losses`` is the RD objective lam * D + R, unweighted."""

    losses: list
    distortions: list
    rates: list
    final_lr: float

    def window_means(self, frac: float = 0.1) -> tuple[float, float]:
        n = max(1, int(len(self.losses) * frac))
        return float(np.mean(self.losses[:n])), float(np.mean(self.losses[-n:]))


def trainable_parameters(model: HDCVC, stage: int) -> list:
    if stage not in STAGE_GROUPS:
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    return model.group_parameters(*STAGE_GROUPS[stage])


def rate_weight(step: int, cfg: TrainConfig) -> float:
    """Weight of the rate term; only stage 1 ramps it, right after the warm-up."""
    if cfg.stage != 1 or step < cfg.motion_warmup or cfg.rate_ramp <= 0:
        return 1.0
    return min(1.0, (step - cfg.motion_warmup + 1) / cfg.rate_ramp)


def motion_fit_loss(model: HDCVC, m: torch.Tensor, weight: float, generator=None) -> torch.Tensor:
    """weight * normalized squared error of the motion codec on ``m``, plus its rate (bpp)."""
    b, _, h, w = m.shape
    m_hat, info = model.motion(m, NOISE, generator)
    err = ((m_hat - m) ** 2).mean() / (m**2).mean().clamp_min(1e-6)
    pixels = b * h * w * 4**model.cfg.motion_downsamples
    return weight * err + info["bits"] / pixels


def _batches(clips, cfg: TrainConfig, rng: np.random.Generator):
    """Endless stream of (T, B, 3, crop, crop) clip batches."""
    while True:
        idx = rng.choice(len(clips), size=cfg.batch, replace=len(clips) < cfg.batch)
        seqs = []
        for i in idx:
            clip = clips[int(i)]
            h, w = clip[0].shape[2:]
            y = int(rng.integers(0, h - cfg.crop + 1))
            x = int(rng.integers(0, w - cfg.crop + 1))
            seqs.append(torch.cat([f[:, :, y : y + cfg.crop, x : x + cfg.crop] for f in clip], dim=0))
        yield torch.stack(seqs, dim=1)


def train(model: HDCVC, clips, cfg: TrainConfig, callback=None) -> TrainResult:
    """Optimize ``model`` in place for ``cfg.steps`` transitions."""
    if not clips:
        raise ValueError("empty dataset")
    for c in clips:
        if len(c) < 2:
            raise ValueError("every clip needs at least 2 frames")
    if cfg.stage == 3 and model.mfer is None:
        raise ValueError("stage 3 needs a model with the enhancement module")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = trainable_parameters(model, cfg.stage)
    wanted = {id(p) for p in params}
    saved_flags = [(p, p.requires_grad) for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(id(p) in wanted)
    # clipped per submodule so one module's large gradients cannot starve the rest
    clip_groups = [list(mod.parameters()) for n in STAGE_GROUPS[cfg.stage] for mod in model.groups()[n]]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, factor=0.5, patience=cfg.plateau_patience)
    lam = cfg.lam.value
    settled = cfg.motion_warmup + cfg.rate_ramp if cfg.stage == 1 else 0
    losses, dists, rates = [], [], []
    step = 0
    model.train()
    try:
        for batch in _batches(clips, cfg, rng):
            ref = batch[0]
            shown = [batch[0]]
            for t in range(1, batch.shape[0]):
                if step >= cfg.steps:
                    break
                frame = batch[t]
                gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + step)
                intra_loss = None
                if cfg.stage >= 2 and cfg.intra:
                    # the intra mode (residual codec, zero prediction) trains on the same frame
                    i_hat, i_info = model.residual(frame, NOISE, gen)
                    pixels = frame.shape[0] * frame.shape[2] * frame.shape[3]
                    intra_loss = lam * distortion(i_hat, frame, cfg.lam.metric) + i_info["bits"] / pixels
                out = p_forward(
                    model, frame, ref, shown[-3:], NOISE, gen,
                    use_residual=cfg.stage >= 2, use_mfer=cfg.stage == 3,
                    motion_bypass=cfg.stage == 1 and step < cfg.motion_warmup,
                )
                rw = rate_weight(step, cfg)
                if cfg.stage == 1:
                    d = mse(out["pred"], frame)
                    rate = out["rate_motion"]
                    ref = frame
                else:
                    d = distortion(out["final"], frame, cfg.lam.metric)
                    rate = out["rate_motion"] + out["rate_residual"]
                    if cfg.pred_weight:
                        # keeps the prediction itself meaningful once the residual codec can mask it
                        d_pred = mse(out["pred"], frame)
                    ref = out["recon"].detach().clamp(0, 1)
                    shown.append(out["final"].detach().clamp(0, 1))
                loss = lam * d + rw * rate
                if cfg.stage >= 2 and cfg.pred_weight:
                    loss = loss + cfg.pred_weight * lam * d_pred
                if intra_loss is not None:
                    loss = loss + intra_loss
                if cfg.stage == 1 and step < cfg.motion_warmup:
                    loss = loss + motion_fit_loss(model, out["m"].detach(), cfg.fit_weight, gen)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    for group in clip_groups:
                        torch.nn.utils.clip_grad_norm_(group, cfg.grad_clip)
                opt.step()
                dv, rv = float(d.detach()), float(rate.detach())
                lv = lam * dv + rv
                losses.append(lv)
                rates.append(rv)
                dists.append(dv)
                step += 1
                # plateaus are judged only once the objective stops changing (warm-up and ramp over)
                if step % cfg.plateau_window == 0 and step - settled >= cfg.plateau_window:
                    sched.step(float(np.mean(losses[-cfg.plateau_window :])))
                if cfg.log_every and step % cfg.log_every == 0:
                    log.info("stage %d step %d loss %.4f rate %.4f lr %.2e", cfg.stage, step,
                             float(np.mean(losses[-cfg.log_every:])), float(np.mean(rates[-cfg.log_every:])),
                             opt.param_groups[0]["lr"])
                if callback is not None:
                    callback(step, lv)
            if step >= cfg.steps:
                break
    finally:
        for p, flag in saved_flags:
            p.requires_grad_(flag)
        model.eval()
    return TrainResult(losses, dists, rates, opt.param_groups[0]["lr"])


def train_stages(model: HDCVC, clips, schedule, lam: RdLambda, seed: int = 0, **overrides) -> list[TrainResult]:
    """Run ``schedule`` = [(stage, steps), ...] in order on one model.

    Stage k reuses seed ``seed + k`` so a schedule is reproducible as a whole
    and stages never replay each other's crops or noise.
    """
    results = []
    for stage, steps in schedule:
        cfg = TrainConfig(stage=stage, steps=steps, lam=lam, seed=seed + stage, **overrides)
        results.append(train(model, clips, cfg))
    return results


def train_variant(variant: str, clips, schedule, lam: RdLambda, seed: int = 0, base=None, **overrides):
    """Ablation harness: fresh model for ``variant``, same flags otherwise."""
    from ..nets import DESK

    cfg = (base or DESK).with_variant(variant)
    torch.manual_seed(seed)
    model = HDCVC(cfg)
    return model, train_stages(model, clips, schedule, lam, seed, **overrides)
