"""Vehicle-centred square regions of interest.

Coordinates are continuous pixel coordinates: pixel ``(i, j)`` (row, column)
covers ``[j, j + 1) x [i, i + 1)`` and its centre sits at ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, GeometryError

SCALES = (1, 2, 3, 4)
DEFAULT_OUTPUT_SIZE = 112
NORM_MEAN = 0.5
NORM_STD = 0.5


class RoiOutsideWarning(UserWarning):
    """A crop box does not overlap the image at all."""


@dataclass(frozen=True)
class Contour:
    vertices: np.ndarray  # (k, 2) array of (x, y)
    frame: int

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise GeometryError(f"contour needs at least 3 (x, y) vertices, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GeometryError(f"contour at frame {self.frame} has non-finite coordinates")
        object.__setattr__(self, "vertices", v)

    def bounds(self) -> tuple[float, float, float, float]:
        """``(x_min, y_min, x_max, y_max)``."""
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    @classmethod
    def rectangle(cls, cx: float, cy: float, width: float, height: float, frame: int = 0) -> "Contour":
        hw, hh = width / 2, height / 2
        return cls(np.array([[cx - hw, cy - hh], [cx + hw, cy - hh], [cx + hw, cy + hh], [cx - hw, cy + hh]]), frame)


@dataclass(frozen=True)
class RoiSpec:
    scale: int
    output_size: int = DEFAULT_OUTPUT_SIZE

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"ROI scale must be one of {SCALES}, got {self.scale}")
        if self.output_size <= 0:
            raise ValueError("output_size must be positive")


@dataclass(frozen=True)
class RoiBox:
    center: tuple[float, float]
    side: float


def square_box(contour: Contour, scale: int) -> RoiBox:
    """Square of side ``scale * max(w, h)`` centred on the contour's bounding box."""
    x0, y0, x1, y1 = contour.bounds()
    extent = max(x1 - x0, y1 - y0)
    if extent <= 0:
        raise GeometryError(f"degenerate contour at frame {contour.frame}: zero width and height")
    return RoiBox(((x0 + x1) / 2, (y0 + y1) / 2), scale * extent)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def crop_pad(image: np.ndarray, box: RoiBox) -> np.ndarray:
    """Cut ``box`` out of a ``C x H x W`` image, zero-filling outside the frame."""
    if image.ndim != 3:
        raise DimensionError(f"crop_pad expects C x H x W, got shape {image.shape}")
    C, H, W = image.shape
    side = max(1, _round_half_up(box.side))
    left = _round_half_up(box.center[0] - side / 2)
    top = _round_half_up(box.center[1] - side / 2)
    out = np.zeros((C, side, side), dtype=image.dtype)
    sx0, sx1 = max(left, 0), min(left + side, W)
    sy0, sy1 = max(top, 0), min(top + side, H)
    if sx0 >= sx1 or sy0 >= sy1:
        warnings.warn(f"ROI box centred at {box.center} lies entirely outside the image", RoiOutsideWarning, stacklevel=2)
        return out
    out[:, sy0 - top : sy1 - top, sx0 - left : sx1 - left] = image[:, sy0:sy1, sx0:sx1]
    return out


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` matrix of half-pixel-centred bilinear weights."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize(image: np.ndarray, output_size: int) -> np.ndarray:
    """Bilinear resize of a ``C x S x S`` (or ``S x S``) array to ``output_size``."""
    if image.size == 0:
        raise DimensionError("cannot resize an empty crop")
    squeeze = image.ndim == 2
    img = image[None] if squeeze else image
    if img.ndim != 3:
        raise DimensionError(f"resize expects C x H x W, got shape {image.shape}")
    _, h, w = img.shape
    if (h, w) == (output_size, output_size):
        out = img.astype(np.float64)
    else:
        my = _bilinear_matrix(h, output_size)
        mx = _bilinear_matrix(w, output_size)
        out = my @ img @ mx.T
    return out[0] if squeeze else out


def resize_normalize(crop: np.ndarray, output_size: int = DEFAULT_OUTPUT_SIZE, normalize: bool = True) -> np.ndarray:
    """Resize a square crop in [0, 1] and optionally standardize with mean/std 0.5."""
    if crop.size == 0:
        raise DimensionError("cannot resize an empty crop")
    if crop.shape[-1] != crop.shape[-2]:
        raise DimensionError(f"expected a square crop, got {crop.shape[-2]}x{crop.shape[-1]}")
    out = resize(crop, output_size)
    if normalize:
        out = (out - NORM_MEAN) / NORM_STD
    return out


def _sampling_matrix(start: float, side: float, n_src: int, n_out: int) -> np.ndarray:
    """Bilinear weights from ``n_out`` samples spanning ``[start, start + side)``.

    Taps that fall outside ``[0, n_src)`` are dropped, i.e. read as zero.
    """
    src = start + (np.arange(n_out) + 0.5) * (side / n_out) - 0.5
    lo = np.floor(src).astype(int)
    frac = src - lo
    m = np.zeros((n_out, n_src))
    rows = np.arange(n_out)
    for idx, w in ((lo, 1 - frac), (lo + 1, frac)):
        ok = (idx >= 0) & (idx < n_src)
        np.add.at(m, (rows[ok], idx[ok]), w[ok])
    return m


def sample_box(image: np.ndarray, box: RoiBox, output_size: int) -> np.ndarray:
    """Resample the exact (sub-pixel) box to ``output_size`` with zero padding.

    Matches ``resize(crop_pad(image, box))`` for pixel-aligned boxes that are not
    upscaled, and keeps the box centre on the output centre for fractional boxes.
    """
    if image.ndim != 3:
        raise DimensionError(f"sample_box expects C x H x W, got shape {image.shape}")
    _, H, W = image.shape
    left = box.center[0] - box.side / 2
    top = box.center[1] - box.side / 2
    my = _sampling_matrix(top, box.side, H, output_size)
    mx = _sampling_matrix(left, box.side, W, output_size)
    if not my.any() or not mx.any():
        warnings.warn(f"ROI box centred at {box.center} lies entirely outside the image", RoiOutsideWarning, stacklevel=2)
    return my @ image @ mx.T


def extract_roi(image: np.ndarray, contour: Contour, spec: RoiSpec, normalize: bool = False) -> np.ndarray:
    """Full chain: square box around the contour, zero-padded, resampled to ``spec.output_size``."""
    out = sample_box(image, square_box(contour, spec.scale), spec.output_size)
    if normalize:
        out = (out - NORM_MEAN) / NORM_STD
    return out
