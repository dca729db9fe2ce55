"""Network graphs of the codec.

Spatial bookkeeping for an H x W frame (H, W multiples of 64):

* features and motion offsets live at H/4
* motion and residual latents both land on H/16 (motion needs two fewer
  stride-2 stages because it starts at H/4)
* hyper-latents land on H/64
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import torch
import torch.nn as nn

from .deform import HET_OFFSET_CHANNELS, HetDeformConv, make_compensation, offset_channels
from .divnorm import ResDNBlock
from .entropy.models import Hyperprior
from .entropy.quantize import NOISE
from .tensor import Conv, ContractError, ResidualBlock, SubPixelUp, check_tensor, leaky_relu

FRAME_MULTIPLE = 64

_KERNELS = {"het": (1, 3, 5), "k1": (1,), "k3": (3,), "k5": (5,)}


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 128
    latent_channels: int = 128
    hyper_channels: int = 64
    mfer_channels: int = 48
    motion_downsamples: int = 2
    residual_downsamples: int = 4
    compensation: str = "het"
    motion_blocks: tuple = ("ResSNCDN", "ResMixDN")
    residual_blocks: tuple = ("ResSNCDN", "ResSNCDN", "ResMixDN", "ResGDN")
    sncdn_window: int = 3
    gamma_mode: str = "offset"
    mfer: bool = True
    context_model: bool = False
    motion_gain: float = 4.0
    residual_gain: float = 16.0
    offset_gain: float = 16.0

    def __post_init__(self):
        if self.base_channels % 3:
            raise ContractError(f"base_channels must be divisible by 3, got {self.base_channels}")
        if self.mfer_channels % 3:
            raise ContractError(f"mfer_channels must be divisible by 3, got {self.mfer_channels}")
        if self.compensation not in _KERNELS:
            raise ValueError(f"unknown compensation {self.compensation!r}")
        if len(self.motion_blocks) != self.motion_downsamples:
            raise ValueError("one motion block per motion downsampling stage")
        if len(self.residual_blocks) != self.residual_downsamples:
            raise ValueError("one residual block per residual downsampling stage")
        if self.residual_downsamples != self.motion_downsamples + 2:
            raise ValueError("motion and residual latents must share a spatial size")

    @property
    def offset_channels(self) -> int:
        return offset_channels(_KERNELS[self.compensation])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["motion_blocks"] = list(self.motion_blocks)
        d["residual_blocks"] = list(self.residual_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["motion_blocks"] = tuple(d["motion_blocks"])
        d["residual_blocks"] = tuple(d["residual_blocks"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_variant(self, variant: str) -> "NetworkConfig":
        """Ablation configurations: het, k1, k3, k5, no-sncdn, no-mfer."""
        if variant in _KERNELS:
            return dataclasses.replace(self, compensation=variant)
        if variant == "no-sncdn":
            return dataclasses.replace(
                self,
                motion_blocks=("ResGDN",) * self.motion_downsamples,
                residual_blocks=("ResGDN",) * self.residual_downsamples,
            )
        if variant == "no-mfer":
            return dataclasses.replace(self, mfer=False)
        raise ValueError(f"unknown variant {variant!r}")


DESK = NetworkConfig(base_channels=48, latent_channels=48, hyper_channels=32, mfer_channels=24)
VARIANTS = ("het", "k1", "k3", "k5", "no-sncdn", "no-mfer")


def check_frame(x: torch.Tensor, name: str = "frame") -> None:
    check_tensor(x, name, 3)
    h, w = x.shape[2:]
    if h % FRAME_MULTIPLE or w % FRAME_MULTIPLE:
        raise ContractError(f"{name} extents {h}x{w} must be multiples of {FRAME_MULTIPLE}")


class FeatureExtractor(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = Conv(3, channels, 5, 2)
        self.conv2 = Conv(channels, channels, 3, 2)
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(3)])

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        check_frame(frame)
        return self.blocks(self.conv2(leaky_relu(self.conv1(frame))))


class MotionEstimator(nn.Module):
    """Two plain convolutions over concatenated features; final layer starts at zero.

    ``gain`` is a fixed output scale.  Offsets of a pixel or so need large
    weights in the zero-initialized last layer, and Adam's step size bounds how
    fast they grow; the gain speeds that up without touching other layers.
    """

    def __init__(self, channels: int, out_channels: int, feature_channels: int | None = None, gain: float = 1.0):
        super().__init__()
        fc = channels if feature_channels is None else feature_channels
        self.feature_channels = fc
        self.gain = float(gain)
        self.conv1 = Conv(2 * fc, channels, 3)
        self.conv2 = Conv(channels, out_channels, 3).zero_()

    def forward(self, f_prev: torch.Tensor, f_cur: torch.Tensor) -> torch.Tensor:
        if f_prev.shape != f_cur.shape:
            raise ContractError(f"feature shapes differ: {tuple(f_prev.shape)} vs {tuple(f_cur.shape)}")
        check_tensor(f_cur, "f_cur", self.feature_channels)
        return self.gain * self.conv2(leaky_relu(self.conv1(torch.cat([f_prev, f_cur], dim=1))))


class TransformCodec(nn.Module):
    """Analysis/synthesis autoencoder with ResDN blocks and a hyperprior.

    Encoder stage k: stride-2 conv then forward block k.  Decoder mirrors it:
    inverse block k then a x2 sub-pixel up-sampling.  ``zero_output`` starts
    the synthesis at zero (used for motion, so untrained offsets are zero
    whatever the quantization noise).  ``latent_gain`` G is a fixed quantization
    step of 1/G in the transforms' natural units: latents are G * g_a(x) and
    synthesis reads y_hat / G.
    """

    def __init__(self, in_ch: int, channels: int, latent_ch: int, hyper_ch: int, blocks, first_kernel: int = 5,
                 zero_output: bool = False, context: bool = False, latent_gain: float = 1.0, **dn_kw):
        super().__init__()
        self.in_ch = in_ch
        self.latent_gain = float(latent_gain)
        self.stages = len(blocks)
        enc = []
        for k, kind in enumerate(blocks):
            enc += [Conv(in_ch if k == 0 else channels, channels, first_kernel if k == 0 else 3, 2), ResDNBlock(channels, kind, **dn_kw)]
        enc.append(Conv(channels, latent_ch, 3))
        self.g_a = nn.Sequential(*enc)
        dec = [Conv(latent_ch, channels, 3)]
        for k, kind in reversed(list(enumerate(blocks))):
            dec += [ResDNBlock(channels, kind, inverse=True, **dn_kw), SubPixelUp(channels, in_ch if k == 0 else channels)]
        if zero_output:
            dec[-1].conv.zero_()
        self.g_s = nn.Sequential(*dec)
        self.entropy = Hyperprior(latent_ch, hyper_ch, context=context)

    def latent_hw(self, h: int, w: int):
        f = 2**self.stages
        return h // f, w // f

    def forward(self, x: torch.Tensor, mode: str = NOISE, generator=None):
        check_tensor(x, "transform input", self.in_ch)
        y = self.g_a(x) * self.latent_gain
        y_hat, info = self.entropy(y, mode, generator)
        return self.g_s(y_hat / self.latent_gain), info

    @torch.no_grad()
    def compress(self, x: torch.Tensor):
        check_tensor(x, "transform input", self.in_ch)
        y_hat, z_bytes, y_bytes = self.entropy.compress(self.g_a(x) * self.latent_gain)
        return self.g_s(y_hat / self.latent_gain), z_bytes, y_bytes

    @torch.no_grad()
    def decompress(self, z_bytes: bytes, y_bytes: bytes, hw) -> torch.Tensor:
        y_hat = self.entropy.decompress(z_bytes, y_bytes, self.latent_hw(*hw))
        return self.g_s(y_hat / self.latent_gain)


def motion_codec(cfg: NetworkConfig) -> TransformCodec:
    return TransformCodec(
        cfg.offset_channels, cfg.base_channels, cfg.latent_channels, cfg.hyper_channels, cfg.motion_blocks,
        first_kernel=3, zero_output=True, context=cfg.context_model, latent_gain=cfg.motion_gain,
        window=cfg.sncdn_window, gamma_mode=cfg.gamma_mode,
    )


def residual_codec(cfg: NetworkConfig) -> TransformCodec:
    return TransformCodec(
        3, cfg.base_channels, cfg.latent_channels, cfg.hyper_channels, cfg.residual_blocks,
        first_kernel=5, context=cfg.context_model, latent_gain=cfg.residual_gain, window=cfg.sncdn_window, gamma_mode=cfg.gamma_mode,
    )


class RefinementNet(nn.Module):
    """Fuses compensated and reference features and restores full resolution.

    With ``base`` (the reference frame) the output is ``base`` plus the
    predicted correction; the last layer starts at zero, so an untrained
    network predicts by copying the reference.
    """

    def __init__(self, channels: int):
        super().__init__()
        c2, c4 = max(channels // 2, 3), max(channels // 4, 3)
        self.fuse = Conv(2 * channels, channels, 3)
        self.blocks = nn.Sequential(ResidualBlock(channels), ResidualBlock(channels))
        self.up1 = SubPixelUp(channels, c2)
        self.up2 = SubPixelUp(c2, c4)
        self.out = Conv(c4, 3, 3).zero_()

    def forward(self, f_comp: torch.Tensor, f_prev: torch.Tensor, base: torch.Tensor | None = None) -> torch.Tensor:
        if f_comp.shape != f_prev.shape:
            raise ContractError(f"shape mismatch {tuple(f_comp.shape)} vs {tuple(f_prev.shape)}")
        h = self.blocks(leaky_relu(self.fuse(torch.cat([f_comp, f_prev], dim=1))))
        h = leaky_relu(self.up1(h))
        h = leaky_relu(self.up2(h))
        out = self.out(h)
        if base is not None:
            if base.shape != out.shape:
                raise ContractError(f"base shape {tuple(base.shape)} != output {tuple(out.shape)}")
            out = out + base
        return out


class _TwoConvEncoder(nn.Module):
    def __init__(self, in_ch: int, channels: int):
        super().__init__()
        self.conv1 = Conv(in_ch, channels, 3, 2)
        self.conv2 = Conv(channels, channels, 3, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(leaky_relu(self.conv1(x)))


class MFER(nn.Module):
    """Decoder-side multi-frame enhancement; reads no bits.

    Target feature from (decoded, prediction, decoded residual); each of the
    three reference frames is aligned to it with a heterogeneous deformable
    convolution driven by a two-conv offset head; the fusion tail's last
    layer starts at zero so the module starts as the identity on ``decoded``.
    """

    num_refs = 3

    def __init__(self, channels: int):
        super().__init__()
        self.target = _TwoConvEncoder(9, channels)
        self.reference = _TwoConvEncoder(3, channels)
        self.offsets = MotionEstimator(channels, HET_OFFSET_CHANNELS)
        self.align = HetDeformConv(channels, channels)
        self.fuse = Conv((1 + self.num_refs) * channels, channels, 3)
        self.blocks = nn.Sequential(ResidualBlock(channels), ResidualBlock(channels))
        self.up1 = SubPixelUp(channels, channels)
        self.up2 = SubPixelUp(channels, channels)
        self.out = Conv(channels, 3, 3).zero_()

    def forward(self, decoded, prediction, residual, refs) -> torch.Tensor:
        if not refs:
            raise ContractError("MFER needs at least one reference frame")
        refs = list(refs)[-self.num_refs :]
        while len(refs) < self.num_refs:
            refs.insert(0, refs[0])
        check_frame(decoded, "decoded")
        target = self.target(torch.cat([decoded, prediction, residual], dim=1))
        aligned = []
        for ref in refs:
            f = self.reference(ref)
            aligned.append(self.align(f, self.offsets(target, f)))
        h = leaky_relu(self.fuse(torch.cat([target] + aligned, dim=1)))
        h = self.blocks(h)
        h = leaky_relu(self.up1(h))
        h = leaky_relu(self.up2(h))
        return decoded + self.out(h)


class HDCVC(nn.Module):
    """All learnable parts of the codec, grouped for staged training."""

    def __init__(self, cfg: NetworkConfig = DESK):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.features = FeatureExtractor(c)
        self.motion_est = MotionEstimator(c, cfg.offset_channels, gain=cfg.offset_gain)
        self.motion = motion_codec(cfg)
        self.compensation = make_compensation(cfg.compensation, c, c)
        self.refine = RefinementNet(c)
        self.residual = residual_codec(cfg)
        self.mfer = MFER(cfg.mfer_channels) if cfg.mfer else None

    def groups(self) -> dict[str, list[nn.Module]]:
        return {
            "motion": [self.features, self.motion_est, self.motion, self.compensation, self.refine],
            "residual": [self.residual],
            "mfer": [self.mfer] if self.mfer is not None else [],
        }

    def group_parameters(self, *names: str) -> list[nn.Parameter]:
        out = []
        for n in names:
            for m in self.groups()[n]:
                out.extend(m.parameters())
        return out

    def estimate_motion(self, ref: torch.Tensor, cur: torch.Tensor):
        f_prev = self.features(ref)
        f_cur = self.features(cur)
        return f_prev, self.motion_est(f_prev, f_cur)

    def compensate(self, f_prev: torch.Tensor, m_hat: torch.Tensor, ref: torch.Tensor | None = None) -> torch.Tensor:
        return self.refine(self.compensation(f_prev, m_hat), f_prev, ref)
