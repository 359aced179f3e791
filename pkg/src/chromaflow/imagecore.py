"""Image and video containers, PNG codec, colour conversions and pixel metrics.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in
``{1, 3}`` and values in ``[0, 1]`` (float32). A video is a :class:`VideoClip`
holding equally sized frames; on disk it is a directory of ``%06d.png``
frames.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image as PILImage

from .errors import FormatError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
PSNR_CAP = 99.0
FRAME_PATTERN = "{:06d}.png"


def as_image(arr) -> np.ndarray:
    """Validate and normalise an array into the ``(H, W, C)`` float32 layout."""
    img = np.asarray(arr, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"image has zero extent: {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


@dataclass
class VideoClip:
    frames: List[np.ndarray]
    frame_rate: Optional[float] = None
    shape: tuple = field(init=False)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a clip needs at least one frame")
        self.frames = [as_image(f) for f in self.frames]
        self.shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != self.shape:
                raise ValueError(f"frame {i} has shape {f.shape}, expected {self.shape}")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)

    @property
    def height(self):
        return self.shape[0]

    @property
    def width(self):
        return self.shape[1]

    @property
    def channels(self):
        return self.shape[2]

    def stack(self) -> np.ndarray:
        return np.stack(self.frames)


# ---------------------------------------------------------------- PNG codec

def load_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    with PILImage.open(path) as im:
        if im.format != "PNG":
            raise FormatError(f"{path} is not a PNG file")
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.uint8)[:, :, None]
        elif im.mode == "RGB":
            arr = np.asarray(im, dtype=np.uint8)
        elif im.mode in ("RGBA", "LA", "PA") or "transparency" in im.info:
            raise FormatError(f"{path}: alpha channels are not supported")
        else:
            raise FormatError(f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit gray or RGB)")
    return arr.astype(np.float32) / np.float32(255.0)


def to_bytes(img) -> np.ndarray:
    img = as_image(img)
    return np.rint(img * 255.0).astype(np.uint8)


def save_png(img, path) -> None:
    data = to_bytes(img)
    mode = "L" if data.shape[2] == 1 else "RGB"
    pil = PILImage.fromarray(data[:, :, 0] if mode == "L" else data, mode=mode)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG")


def load_video(directory) -> VideoClip:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such frame directory: {directory}")
    names = sorted(p for p in os.listdir(directory) if p.endswith(".png"))
    if not names:
        raise FileNotFoundError(f"{directory} holds no PNG frames")
    return VideoClip([load_png(directory / n) for n in names])


def save_video(clip: VideoClip, directory) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(clip.frames):
        p = directory / FRAME_PATTERN.format(i)
        save_png(frame, p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------- colour

def _require_rgb(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected a 3-channel image, got shape {img.shape}")
    return img


def luma(img) -> np.ndarray:
    """Rec.601 luma of an ``(..., 3)`` array, no clamping, float64."""
    return np.asarray(img, dtype=np.float64) @ LUMA_WEIGHTS


def to_grayscale(img) -> np.ndarray:
    img = _require_rgb(img)
    return np.clip(luma(img), 0.0, 1.0).astype(np.float32)[:, :, None]


def gray_to_rgb(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] != 1:
        raise ValueError(f"expected a 1-channel image, got shape {img.shape}")
    return np.repeat(img, 3, axis=2)


def saturation_map(img) -> np.ndarray:
    """HSV saturation ``(max - min) / max`` per pixel, 0 on black."""
    img = _require_rgb(img).astype(np.float64)
    hi = img.max(axis=2)
    lo = img.min(axis=2)
    s = np.divide(hi - lo, hi, out=np.zeros_like(hi), where=hi > 0)
    return s.astype(np.float32)[:, :, None]


def replace_luminance(colorized, gray, iterations: int = 60) -> np.ndarray:
    """Shift every pixel along the grey axis until its luma equals ``gray``.

    A per-pixel offset ``delta`` is added to all three channels and the
    result clipped to ``[0, 1]``; the luma of the clipped colour is monotone
    in ``delta``, so bisection finds the offset wherever the plain shift
    overflows.
    """
    c = _require_rgb(colorized).astype(np.float64)
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim == 3:
        if g.shape[2] != 1:
            raise ValueError(f"expected a 1-channel gray image, got shape {g.shape}")
        g = g[:, :, 0]
    if g.shape != c.shape[:2]:
        raise ValueError(f"size mismatch: colour {c.shape[:2]} vs gray {g.shape}")
    g = np.clip(g, 0.0, 1.0)

    delta = g - luma(c)
    out = c + delta[:, :, None]
    bad = (out < 0.0).any(axis=2) | (out > 1.0).any(axis=2)
    if bad.any():
        cb, gb = c[bad], g[bad]
        lo = np.full(gb.shape, -1.0)
        hi = np.full(gb.shape, 1.0)
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            too_bright = luma(np.clip(cb + mid[:, None], 0.0, 1.0)) > gb
            hi = np.where(too_bright, mid, hi)
            lo = np.where(too_bright, lo, mid)
        out[bad] = np.clip(cb + (0.5 * (lo + hi))[:, None], 0.0, 1.0)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- metrics

def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float) -> float:
    if err < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / err))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit-peak images."""
    return psnr_from_mse(mse(a, b))


def mean_l1(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def mean_saturation(frames: Sequence[np.ndarray]) -> float:
    return float(np.mean([saturation_map(f).mean(dtype=np.float64) for f in frames]))
