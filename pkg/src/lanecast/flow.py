"""Dense optical flow by quadratic polynomial expansion (Farnebäck style).

Each pixel neighbourhood is approximated by ``f(x) ~ x^T A x + b^T x + c`` in
local coordinates (``x`` = column offset, ``y`` = row offset). If the second
frame is the first one shifted by ``d`` then ``b2 = b1 - 2 A d``, which gives a
linear system for ``d``. The system is averaged over a Gaussian neighbourhood,
iterated with a warped second expansion, and run coarse to fine.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DimensionError

LUMA = np.array([0.299, 0.587, 0.114])
FLOW_MAGIC = b"LCFL"

DEFAULT_LEVELS = 3
DEFAULT_WINDOW_RADIUS = 5
DEFAULT_SIGMA = 1.1
DEFAULT_ITERATIONS = 3
DEFAULT_AGGREGATION_RADIUS = 6
DEFAULT_CLAMP = 20.0


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    singular_pixels: int = 0

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise DimensionError(f"flow planes must share a 2-D shape, got {self.u.shape} and {self.v.shape}")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass
class ExpansionCoefficients:
    """Per-pixel quadratic model: ``A`` (H, W, 2, 2), ``b`` (H, W, 2), ``c`` (H, W)."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.c.shape


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luma of a ``3 x H x W`` image; 2-D and ``1 x H x W`` inputs pass through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[0] == 1:
        return image[0]
    if image.ndim == 3 and image.shape[0] == 3:
        return np.tensordot(LUMA, image, axes=1)
    raise DimensionError(f"expected H x W, 1 x H x W or 3 x H x W image, got {image.shape}")


def _gaussian_1d(radius: int, sigma: float) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _separable(image: np.ndarray, kx: np.ndarray, ky: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(image, kx, axis=1, mode="reflect")
    return ndimage.correlate1d(out, ky, axis=0, mode="reflect")


def polynomial_expansion(
    image: np.ndarray, window_radius: int = DEFAULT_WINDOW_RADIUS, sigma: float = DEFAULT_SIGMA
) -> ExpansionCoefficients:
    """Gaussian-weighted least-squares quadratic fit around every pixel."""
    f = to_gray(image)
    n = int(window_radius)
    if min(f.shape) < 2 * n + 1:
        raise DimensionError(f"image extents {f.shape} smaller than the {2 * n + 1}-pixel expansion window")
    g = _gaussian_1d(n, sigma)
    x = np.arange(-n, n + 1, dtype=np.float64)
    xg, xxg = x * g, x * x * g

    # Gram matrix of the basis [1, x, y, x^2, y^2, xy] under the weights.
    X, Y = np.meshgrid(x, x)
    W = np.outer(g, g)
    basis = np.stack([np.ones_like(X), X, Y, X * X, Y * Y, X * Y]).reshape(6, -1)
    gram = (basis * W.reshape(-1)) @ basis.T
    inv = np.linalg.inv(gram)

    moments = np.stack(
        [
            _separable(f, g, g),
            _separable(f, xg, g),
            _separable(f, g, xg),
            _separable(f, xxg, g),
            _separable(f, g, xxg),
            _separable(f, xg, xg),
        ]
    )
    r = np.tensordot(inv, moments, axes=1)
    A = np.empty(f.shape + (2, 2))
    A[..., 0, 0] = r[3]
    A[..., 1, 1] = r[4]
    A[..., 0, 1] = A[..., 1, 0] = r[5] / 2
    b = np.stack([r[1], r[2]], axis=-1)
    return ExpansionCoefficients(A, b, r[0])


def _warp(plane: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(plane, [rows, cols], order=1, mode="nearest")


def displacement_from_expansions(
    coeffs_a: ExpansionCoefficients,
    coeffs_b: ExpansionCoefficients,
    prior: FlowField | None = None,
    aggregation_radius: int = DEFAULT_AGGREGATION_RADIUS,
) -> FlowField:
    """One displacement estimate given expansions of both frames and a prior flow.

    Pixels whose aggregated 2x2 system is singular keep the prior displacement;
    their count is reported in ``FlowField.singular_pixels``.
    """
    if coeffs_a.shape != coeffs_b.shape:
        raise DimensionError(f"expansion shapes differ: {coeffs_a.shape} vs {coeffs_b.shape}")
    H, W = coeffs_a.shape
    if prior is None:
        prior = FlowField.zeros(H, W)
    if (prior.height, prior.width) != (H, W):
        raise DimensionError(f"prior flow {prior.height}x{prior.width} does not match {H}x{W}")

    du, dv = prior.u, prior.v
    if np.any(du) or np.any(dv):
        rows0, cols0 = np.mgrid[0:H, 0:W].astype(np.float64)
        rows, cols = rows0 + dv, cols0 + du
        A2 = np.empty_like(coeffs_b.A)
        A2[..., 0, 0] = _warp(coeffs_b.A[..., 0, 0], rows, cols)
        A2[..., 1, 1] = _warp(coeffs_b.A[..., 1, 1], rows, cols)
        A2[..., 0, 1] = A2[..., 1, 0] = _warp(coeffs_b.A[..., 0, 1], rows, cols)
        b2 = np.stack([_warp(coeffs_b.b[..., k], rows, cols) for k in range(2)], axis=-1)
    else:
        A2, b2 = coeffs_b.A, coeffs_b.b

    A = (coeffs_a.A + A2) / 2
    a11, a12, a22 = A[..., 0, 0], A[..., 0, 1], A[..., 1, 1]
    db1 = -0.5 * (b2[..., 0] - coeffs_a.b[..., 0]) + a11 * du + a12 * dv
    db2 = -0.5 * (b2[..., 1] - coeffs_a.b[..., 1]) + a12 * du + a22 * dv

    # Normal equations A^T A d = A^T db (A symmetric), Gaussian-averaged.
    g = _gaussian_1d(aggregation_radius, max(aggregation_radius / 2.0, 0.5))
    G11 = _separable(a11 * a11 + a12 * a12, g, g)
    G12 = _separable(a11 * a12 + a12 * a22, g, g)
    G22 = _separable(a12 * a12 + a22 * a22, g, g)
    h1 = _separable(a11 * db1 + a12 * db2, g, g)
    h2 = _separable(a12 * db1 + a22 * db2, g, g)

    det = G11 * G22 - G12 * G12
    trace = G11 + G22
    singular = (trace <= 1e-12) | (det <= 1e-6 * trace * trace)
    safe = np.where(singular, 1.0, det)
    u = np.where(singular, du, (G22 * h1 - G12 * h2) / safe)
    v = np.where(singular, dv, (G11 * h2 - G12 * h1) / safe)
    return FlowField(u, v, int(singular.sum()))


def _downsample(image: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(image, 1.0, mode="reflect")[::2, ::2]


def _upsample_flow(flow: FlowField, shape: tuple[int, int]) -> FlowField:
    rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64) / 2
    return FlowField(
        2 * _warp(flow.u, rows, cols),
        2 * _warp(flow.v, rows, cols),
    )


def dense_flow(
    frame_a: np.ndarray,
    frame_b: np.ndarray,
    levels: int = DEFAULT_LEVELS,
    iterations: int = DEFAULT_ITERATIONS,
    window_radius: int = DEFAULT_WINDOW_RADIUS,
    sigma: float = DEFAULT_SIGMA,
    aggregation_radius: int = DEFAULT_AGGREGATION_RADIUS,
) -> FlowField:
    """Coarse-to-fine flow from ``frame_a`` to ``frame_b``.

    ``frame_b(x + flow(x)) ~ frame_a(x)``. Pyramid levels that would be smaller
    than the expansion window are dropped.
    """
    a, b = to_gray(frame_a), to_gray(frame_b)
    if a.shape != b.shape:
        raise DimensionError(f"frames differ in shape: {a.shape} vs {b.shape}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    pyr_a, pyr_b = [a], [b]
    while len(pyr_a) < levels and min(pyr_a[-1].shape) // 2 >= 2 * window_radius + 1:
        pyr_a.append(_downsample(pyr_a[-1]))
        pyr_b.append(_downsample(pyr_b[-1]))

    flow = None
    singular = 0
    for img_a, img_b in zip(reversed(pyr_a), reversed(pyr_b)):
        if flow is None:
            flow = FlowField.zeros(*img_a.shape)
        else:
            flow = _upsample_flow(flow, img_a.shape)
        ca = polynomial_expansion(img_a, window_radius, sigma)
        cb = polynomial_expansion(img_b, window_radius, sigma)
        for _ in range(iterations):
            flow = displacement_from_expansions(ca, cb, flow, aggregation_radius)
        singular = flow.singular_pixels
    flow.singular_pixels = singular
    return flow


def flow_to_channels(flows: Sequence[FlowField], clamp: float = DEFAULT_CLAMP) -> np.ndarray:
    """Stack fields as ``[u1, v1, u2, v2, ...]`` clamped to ``+-clamp`` and scaled to [-1, 1]."""
    if not flows:
        raise DimensionError("flow_to_channels needs at least one field")
    shape = (flows[0].height, flows[0].width)
    planes = []
    for i, f in enumerate(flows):
        if (f.height, f.width) != shape:
            raise DimensionError(f"field {i} is {f.height}x{f.width}, expected {shape[0]}x{shape[1]}")
        planes.extend((f.u, f.v))
    return (np.clip(np.stack(planes), -clamp, clamp) / clamp).astype(np.float32)


# ---------------------------------------------------------------- file formats


def write_flow(path, flow: FlowField) -> None:
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", flow.width, flow.height))
        fh.write(np.ascontiguousarray(flow.u, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(flow.v, dtype="<f4").tobytes())


def read_flow(path) -> FlowField:
    raw = Path(path).read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: missing LCFL magic")
    width, height = struct.unpack("<II", raw[4:12])
    n = width * height
    if len(raw) != 12 + 8 * n:
        raise ValueError(f"{path}: expected {12 + 8 * n} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float64)
    return FlowField(body[:n].reshape(height, width), body[n:].reshape(height, width))


def flow_to_color(flow: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    """HSV coding (hue = direction, value = magnitude) as an ``H x W x 3`` uint8 image."""
    mag = flow.magnitude()
    scale = max_magnitude or max(float(mag.max()), 1e-9)
    hue = (np.arctan2(-flow.v, -flow.u) / (2 * np.pi)) % 1.0
    value = np.clip(mag / scale, 0, 1)
    # Fully saturated HSV to RGB.
    h6 = hue * 6
    sector = np.floor(h6).astype(int) % 6
    frac = h6 - np.floor(h6)
    rising, falling = value * frac, value * (1 - frac)
    zero = np.zeros_like(value)
    table = [
        (value, rising, zero),
        (falling, value, zero),
        (zero, value, rising),
        (zero, falling, value),
        (rising, zero, value),
        (value, zero, falling),
    ]
    rgb = np.zeros(value.shape + (3,))
    for k, channels in enumerate(table):
        mask = sector == k
        for c in range(3):
            rgb[..., c][mask] = channels[c][mask]
    return (rgb * 255).round().astype(np.uint8)
