"""Frame- and sequence-level encoding and decoding.

The encoder reconstructs every frame with exactly the operations the decoder
runs on the decoded symbols, so both sides hold bit-identical frame buffers.
Prediction always uses the reconstruction *before* multi-frame enhancement;
the enhanced frames are only consumed by the enhancement module itself.  That
keeps the bitstream independent of whether enhancement is switched on.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import torch

from ..entropy.bitstream import Bitstream, BitstreamError, FrameRecord, I_FRAME, P_FRAME
from ..entropy.quantize import NOISE
from ..metrics import mse, ms_ssim, ms_ssim_scales, psnr
from ..nets import HDCVC, check_frame
from .losses import distortion


@dataclass(frozen=True)
class GopConfig:
    intra_period: int = 12
    frame_count: int = 0
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if not 1 <= self.intra_period <= 255:
            raise ValueError(f"intra period must be in 1..255, got {self.intra_period}")

    def frame_type(self, t: int) -> int:
        return I_FRAME if t % self.intra_period == 0 else P_FRAME

    def frame_types(self) -> list[int]:
        return [self.frame_type(t) for t in range(self.frame_count)]


class FrameBuffer:
    """Last three reconstructions: ``coded`` feed prediction, ``shown`` feed enhancement."""

    def __init__(self, size: int = 3):
        self.coded: deque = deque(maxlen=size)
        self.shown: deque = deque(maxlen=size)

    def __len__(self) -> int:
        return len(self.coded)

    def push(self, coded: torch.Tensor, shown: torch.Tensor | None = None) -> None:
        self.coded.append(coded)
        self.shown.append(coded if shown is None else shown)

    @property
    def last(self) -> torch.Tensor:
        if not self.coded:
            raise BitstreamError("P frame without a reference (buffer empty)")
        return self.coded[-1]

    def refs(self) -> list[torch.Tensor]:
        """Three references, oldest first; missing ones repeat the oldest available."""
        refs = list(self.shown)
        while len(refs) < self.shown.maxlen:
            refs.insert(0, refs[0])
        return refs

    def clear(self) -> None:
        self.coded.clear()
        self.shown.clear()


@dataclass
class FrameStats:
    frame_type: int
    bytes: int
    bpp: float
    bits_motion: float = 0.0
    bits_residual: float = 0.0
    distortion: float = 0.0
    extra: dict = field(default_factory=dict)


def _clip(x: torch.Tensor) -> torch.Tensor:
    return x.clamp(0.0, 1.0)


# ----------------------------------------------------------------------------
# differentiable forward used in training


def p_forward(model: HDCVC, frame, ref, refs=None, mode=NOISE, generator=None, use_residual=True, use_mfer=True,
              motion_bypass=False):
    """One P-frame pass with estimated rates (bits per pixel).

    ``motion_bypass`` feeds the raw motion to compensation at zero rate; it
    exists only for the motion warm-up phase of training.
    """
    b, _, h, w = frame.shape
    pixels = b * h * w
    f_prev, m = model.estimate_motion(ref, frame)
    if motion_bypass:
        m_hat, rate_motion = m, m.new_zeros(())
    else:
        m_hat, m_info = model.motion(m, mode, generator)
        rate_motion = m_info["bits"] / pixels
    pred = model.compensate(f_prev, m_hat, ref)
    out = {"pred": pred, "rate_motion": rate_motion, "m": m, "m_hat": m_hat}
    if not use_residual:
        return out
    r_hat, r_info = model.residual(frame - pred, mode, generator)
    recon = pred + r_hat
    out.update(r_hat=r_hat, recon=recon, rate_residual=r_info["bits"] / pixels)
    if use_mfer and model.mfer is not None:
        out["final"] = model.mfer(recon, pred, r_hat, refs if refs else [ref])
    else:
        out["final"] = recon
    return out


# ----------------------------------------------------------------------------
# frame-level coding


def _finish(model: HDCVC, recon, pred, r_hat, buffer: FrameBuffer | None, mfer: bool):
    if mfer and model.mfer is not None and buffer is not None and len(buffer):
        return _clip(model.mfer(recon, pred, r_hat, buffer.refs()))
    return recon


@torch.no_grad()
def encode_frame_i(frame: torch.Tensor, model: HDCVC):
    """Intra frame: the residual codec applied with a zero prediction."""
    check_frame(frame)
    h, w = frame.shape[2:]
    r_hat, rz, ry = model.residual.compress(frame)
    recon = _clip(r_hat)
    rec = FrameRecord(I_FRAME, residual_hyper=rz, residual_latent=ry)
    return recon, rec


@torch.no_grad()
def decode_frame_i(record: FrameRecord, model: HDCVC, hw) -> torch.Tensor:
    if record.frame_type != I_FRAME:
        raise BitstreamError("expected an I-frame record")
    if record.motion_hyper or record.motion_latent:
        raise BitstreamError("I-frame record carries motion payloads")
    return _clip(model.residual.decompress(record.residual_hyper, record.residual_latent, hw))


@torch.no_grad()
def encode_frame_p(frame: torch.Tensor, buffer: FrameBuffer, model: HDCVC, mfer: bool = True):
    """Returns (coded reconstruction, displayed reconstruction, record)."""
    check_frame(frame)
    ref = buffer.last
    f_prev, m = model.estimate_motion(ref, frame)
    m_hat, mz, my = model.motion.compress(m)
    pred = model.compensate(f_prev, m_hat, ref)
    r_hat, rz, ry = model.residual.compress(frame - pred)
    recon = _clip(pred + r_hat)
    shown = _finish(model, recon, pred, r_hat, buffer, mfer)
    return recon, shown, FrameRecord(P_FRAME, mz, my, rz, ry)


@torch.no_grad()
def decode_frame_p(record: FrameRecord, buffer: FrameBuffer, model: HDCVC, hw, mfer: bool = True):
    if record.frame_type != P_FRAME:
        raise BitstreamError("expected a P-frame record")
    ref = buffer.last
    f_prev = model.features(ref)
    h, w = hw
    m_hat = model.motion.decompress(record.motion_hyper, record.motion_latent, (h // 4, w // 4))
    pred = model.compensate(f_prev, m_hat, ref)
    r_hat = model.residual.decompress(record.residual_hyper, record.residual_latent, hw)
    recon = _clip(pred + r_hat)
    return recon, _finish(model, recon, pred, r_hat, buffer, mfer)


# ----------------------------------------------------------------------------
# sequences


def quantize_8bit(x: torch.Tensor) -> torch.Tensor:
    """The frame as it is written to disk (8-bit), mapped back to [0, 1]."""
    return torch.round(x.clamp(0, 1) * 255.0) / 255.0


def frame_quality(recon: torch.Tensor, frame: torch.Tensor) -> dict:
    """PSNR / MS-SSIM of the 8-bit rendition of ``recon`` against ``frame``."""
    r8 = quantize_8bit(recon).double()
    f = frame.double()
    q = {"psnr": psnr(r8, f), "mse": float(mse(r8, f))}
    q["msssim"] = float(ms_ssim(r8, f)) if ms_ssim_scales(*frame.shape[2:]) else float("nan")
    return q


@dataclass
class SequenceResult:
    bitstream: Bitstream
    coded: list
    shown: list
    stats: list

    @property
    def bpp(self) -> float:
        return self.bitstream.bpp()


def encode_sequence(frames, model: HDCVC, gop: GopConfig, lambda_index: int = 0, mfer: bool = True) -> SequenceResult:
    """Encode a list of (1, 3, H, W) frames."""
    frames = list(frames)
    if not frames:
        raise ValueError("empty sequence")
    h, w = frames[0].shape[2:]
    for f in frames:
        check_frame(f)
        if f.shape[2:] != (h, w):
            raise ValueError("all frames must share extents")
    model.eval()
    buffer = FrameBuffer()
    bs = Bitstream(w, h, gop.intra_period, lambda_index)
    coded, shown, stats = [], [], []
    for t, frame in enumerate(frames):
        if gop.frame_type(t) == I_FRAME:
            buffer.clear()
            recon, rec = encode_frame_i(frame, model)
            disp = recon
        else:
            recon, disp, rec = encode_frame_p(frame, buffer, model, mfer)
        buffer.push(recon, disp)
        bs.records.append(rec)
        q = frame_quality(disp, frame)
        stats.append(
            FrameStats(
                rec.frame_type, rec.num_bytes, 8.0 * rec.num_bytes / (h * w),
                8.0 * (len(rec.motion_hyper) + len(rec.motion_latent)) / (h * w),
                8.0 * (len(rec.residual_hyper) + len(rec.residual_latent)) / (h * w),
                q["mse"], q,
            )
        )
        coded.append(recon)
        shown.append(disp)
    return SequenceResult(bs, coded, shown, stats)


def decode_sequence(bitstream: Bitstream | bytes, model: HDCVC, mfer: bool = True) -> list[torch.Tensor]:
    """Decode to the displayed frames (enhanced when ``mfer``)."""
    if isinstance(bitstream, (bytes, bytearray)):
        bitstream = Bitstream.from_bytes(bytes(bitstream))
    h, w = bitstream.height, bitstream.width
    check_frame(torch.zeros(1, 3, h, w), "bitstream extents")
    gop = GopConfig(bitstream.intra_period, bitstream.frame_count, w, h)
    model.eval()
    buffer = FrameBuffer()
    out = []
    for t, rec in enumerate(bitstream.records):
        if rec.frame_type != gop.frame_type(t):
            raise BitstreamError(
                f"frame {t} has type {rec.frame_type}, header intra period {gop.intra_period} implies {gop.frame_type(t)}"
            )
        if rec.frame_type == I_FRAME:
            buffer.clear()
            recon = decode_frame_i(rec, model, (h, w))
            disp = recon
        else:
            recon, disp = decode_frame_p(rec, buffer, model, (h, w), mfer)
        buffer.push(recon, disp)
        out.append(disp)
    return out


def decode_sequence_coded(bitstream, model: HDCVC) -> list[torch.Tensor]:
    """Decoder-side reconstructions before enhancement (the prediction loop)."""
    return decode_sequence(bitstream, model, mfer=False)


def rd_point(model: HDCVC, clips, lambda_index: int = 0, metric: str = "psnr", mfer: bool = True) -> dict:
    """Mean bpp and distortion of real coding over clips (one GOP per clip)."""
    bpps, dists, quals = [], [], []
    for clip in clips:
        res = encode_sequence(clip, model, GopConfig(len(clip), len(clip)), lambda_index, mfer)
        bpps.append(res.bpp)
        for rec, frame in zip(res.shown, clip):
            dists.append(float(distortion(rec.double(), frame.double(), metric)))
        quals.extend(s.extra[metric] for s in res.stats)
    n = len(dists)
    return {"bpp": sum(bpps) / len(bpps), "distortion": sum(dists) / n, "quality": sum(quals) / n}
