"""Grayscale images, anisotropic pyramids, normed gradients and patches."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
from PIL import Image as PILImage

LUMA = (0.299, 0.587, 0.114)


class ScaleLevel(NamedTuple):
    """Pyramid coordinate; the level is at scale ``(s**m, s**n)``."""

    m: int
    n: int

    def scale(self, s: float) -> tuple[float, float]:
        return s ** self.m, s ** self.n


@dataclass(frozen=True)
class Image:
    """Single-channel intensity grid in [0, 1], indexed ``data[row, col]``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image must be a nonempty 2-D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def from_rgb(cls, rgb: np.ndarray) -> "Image":
        rgb = np.asarray(rgb, dtype=np.float64)
        return cls(np.clip(rgb[..., :3] @ np.array(LUMA), 0.0, 1.0))


def as_array(img) -> np.ndarray:
    return img.data if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Triangle (bilinear) kernel widened by the reduction factor, pixel-centre aligned.
    scale = n_in / n_out
    support = max(scale, 1.0)
    centres = (np.arange(n_out) + 0.5) * scale
    src = np.arange(n_in) + 0.5
    w = 1.0 - np.abs(src[None, :] - centres[:, None]) / support
    np.maximum(w, 0.0, out=w)
    return w / w.sum(axis=1, keepdims=True)


def resize(img: Image, w: int, h: int) -> Image:
    """Bilinear resampling to exactly ``w`` x ``h`` pixels.

    Downsampling widens the triangle kernel by the reduction factor, so
    heavy reductions average rather than alias. Same-size resizing returns
    the input unchanged.
    """
    if w < 1 or h < 1:
        raise ValueError(f"target size must be positive, got {w}x{h}")
    arr = as_array(img)
    if arr.shape == (h, w):
        return img if isinstance(img, Image) else Image(arr)
    out = _resample_matrix(arr.shape[0], h) @ arr @ _resample_matrix(arr.shape[1], w).T
    return Image(np.clip(out, 0.0, 1.0))


def level_size(w0: int, h0: int, s: float, level: ScaleLevel) -> tuple[int, int]:
    return math.floor(w0 * s ** level.m), math.floor(h0 * s ** level.n)


def valid_exponents(size: int, s: float, min_dim: int) -> list[int]:
    out = []
    e = 0
    while math.floor(size * s ** e) >= min_dim:
        out.append(e)
        e += 1
    return out


@dataclass
class Pyramid:
    """Anisotropic pyramid; each axis is downsampled independently."""

    base: Image
    s: float
    min_dim: int
    levels: dict[ScaleLevel, Image] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self) -> Iterator[tuple[ScaleLevel, Image]]:
        return iter(self.levels.items())

    def __getitem__(self, level) -> Image:
        return self.levels[ScaleLevel(*level)]


def build_pyramid(img: Image, s: float = 0.95, min_dim: int = 10) -> Pyramid:
    if not 0.0 < s < 1.0:
        raise ValueError(f"scale ratio must lie in (0, 1), got {s}")
    if min_dim < 1:
        raise ValueError("min_dim must be >= 1")
    arr = as_array(img)
    h0, w0 = arr.shape
    if w0 < min_dim or h0 < min_dim:
        raise ValueError(f"base image {w0}x{h0} is smaller than min_dim={min_dim}")
    ms = valid_exponents(w0, s, min_dim)
    ns = valid_exponents(h0, s, min_dim)
    # Rows are resampled once per n and reused across every m.
    col_mats = {m: _resample_matrix(w0, math.floor(w0 * s ** m)).T for m in ms}
    levels = {}
    for n in ns:
        h = math.floor(h0 * s ** n)
        rows = arr if h == h0 else _resample_matrix(h0, h) @ arr
        for m in ms:
            out = rows if m == 0 else rows @ col_mats[m]
            levels[ScaleLevel(m, n)] = Image(out if (m, n) == (0, 0) else np.clip(out, 0.0, 1.0))
    base = img if isinstance(img, Image) else Image(arr)
    return Pyramid(base=base, s=s, min_dim=min_dim, levels=levels)


def gradient_norm(img: Image) -> Image:
    """Euclidean norm of the intensity gradient, divided by sqrt(2) and clipped to [0, 1]."""
    arr = as_array(img)
    if min(arr.shape) < 2:
        raise ValueError(f"gradient needs at least 2 pixels per axis, got {arr.shape}")
    gy, gx = np.gradient(arr)
    return Image(np.clip(np.hypot(gx, gy) / math.sqrt(2.0), 0.0, 1.0))


def extract_patches(img: Image, size: int, stride: int) -> np.ndarray:
    """All ``size`` x ``size`` patches in raster order, one flattened patch per row."""
    arr = as_array(img)
    if size > min(arr.shape):
        raise ValueError(f"patch size {size} exceeds image {arr.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    win = np.lib.stride_tricks.sliding_window_view(arr, (size, size))[::stride, ::stride]
    return win.reshape(-1, size * size).copy()


def read_image(path) -> Image:
    """Load PNG / PGM (or anything Pillow reads) as grayscale in [0, 1]."""
    with PILImage.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "CMYK"):
            return Image.from_rgb(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return Image(np.clip(arr / 65535.0, 0.0, 1.0))
        return Image(np.asarray(im.convert("L"), dtype=np.float64) / 255.0)


def _to_u8(img) -> np.ndarray:
    return np.round(as_array(img) * 255.0).astype(np.uint8)


def write_pgm(img, path) -> None:
    arr = _to_u8(img)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_png(img, path) -> None:
    PILImage.fromarray(_to_u8(img), mode="L").save(Path(path), format="PNG")
