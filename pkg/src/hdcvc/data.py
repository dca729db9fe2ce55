"""Frame I/O (numbered 8-bit RGB PNGs) and synthetic clip generation."""

from __future__ import annotations

import os
import re
import shutil
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter, rotate as nd_rotate

FRAME_NAME = "frame_{:05d}.png"
_NUM = re.compile(r"(\d+)")


def list_frames(directory) -> list[Path]:
    d = Path(directory)
    files = [p for p in d.iterdir() if p.suffix.lower() == ".png"]
    if not files:
        raise FileNotFoundError(f"no PNG frames in {d}")

    def key(p: Path):
        m = _NUM.findall(p.stem)
        return (int(m[-1]) if m else -1, p.name)

    return sorted(files, key=key)


def load_frame(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0).contiguous()


def load_sequence(directory) -> list[torch.Tensor]:
    frames = [load_frame(p) for p in list_frames(directory)]
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise ValueError(f"frame {i} has extents {tuple(f.shape[2:])}, expected {tuple(shape[2:])}")
    return frames


def to_uint8(frame: torch.Tensor) -> np.ndarray:
    x = frame.detach()[0].clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(x * 255.0).astype(np.uint8)


def save_sequence(frames, directory) -> None:
    """Write frames atomically: the directory appears complete or not at all."""
    d = Path(directory)
    d.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=d.parent, prefix=f".{d.name}-"))
    try:
        for i, f in enumerate(frames):
            Image.fromarray(to_uint8(f)).save(tmp / FRAME_NAME.format(i))
        if d.exists():
            shutil.rmtree(d)
        os.replace(tmp, d)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


# ----------------------------------------------------------------------------
# synthetic clips


def texture(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Random smooth RGB texture in [0, 1], (size, size, 3), periodic in both axes.

    Band-limited on purpose: structure sits at scales of 4-8 pixels, which a
    quarter-resolution motion path can represent.
    """
    img = np.zeros((size, size, 3))
    for sigma, amp in ((8.0, 1.0), (4.0, 0.5)):
        noise = rng.standard_normal((size, size, 3))
        img += amp * sigma * gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
    img -= img.min()
    img /= max(img.max(), 1e-8)
    return img


def translate_clip(base: np.ndarray, frames: int, dx: int = 1, dy: int = 0) -> list[np.ndarray]:
    """Frame t is ``base`` shifted by (t*dy, t*dx) pixels with wrap-around."""
    return [np.roll(base, shift=(t * dy, t * dx), axis=(0, 1)) for t in range(frames)]


def rotate_clip(base: np.ndarray, frames: int, degrees: float = 2.0) -> list[np.ndarray]:
    return [np.clip(nd_rotate(base, t * degrees, axes=(0, 1), reshape=False, mode="wrap", order=1), 0, 1) for t in range(frames)]


def noise_clip(rng: np.random.Generator, frames: int, size: int) -> list[np.ndarray]:
    return [rng.uniform(0, 1, size=(size, size, 3)) for _ in range(frames)]


def to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0).contiguous()


def synth_clip(pattern: str, frames: int = 7, size: int = 64, seed: int = 0, dx: int = 1, dy: int = 0, degrees: float = 2.0):
    """Return a list of (1, 3, size, size) float32 frames quantized to 8 bits."""
    rng = np.random.default_rng(seed)
    if pattern == "translate":
        imgs = translate_clip(texture(rng, size), frames, dx, dy)
    elif pattern == "rotate":
        imgs = rotate_clip(texture(rng, size), frames, degrees)
    elif pattern == "noise":
        imgs = noise_clip(rng, frames, size)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    return [to_tensor(np.round(im * 255.0) / 255.0) for im in imgs]


def translation_dataset(count: int, frames: int = 7, size: int = 64, seed: int = 0, max_speed: int = 3):
    """Clips with random textures and random integer velocities in [-max_speed, max_speed]."""
    rng = np.random.default_rng(seed)
    clips = []
    for _ in range(count):
        dx, dy = (int(v) for v in rng.integers(-max_speed, max_speed + 1, size=2))
        clips.append(synth_clip("translate", frames, size, int(rng.integers(2**31)), dx, dy))
    return clips


def load_clips(directory) -> list[list[torch.Tensor]]:
    """A directory of frames is one clip; a directory of frame directories is many."""
    d = Path(directory)
    subdirs = sorted(p for p in d.iterdir() if p.is_dir())
    if subdirs:
        return [load_sequence(p) for p in subdirs]
    return [load_sequence(d)]
