"""Frozen smoothing kernels and the discrete differential operators.

The convolution uses symmetric (reflect) boundary padding, which preserves
constant fields and makes the operator exactly self-adjoint for kernels
that are symmetric under 180-degree rotation.  The gradient/divergence
pair is built so that ``<grad u, v> == -<u, div v>`` holds to machine
precision; the dual updates in the star-shape solver rely on this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = ["KernelSpec", "VectorField", "make_gaussian", "depthwise_conv", "grad", "div"]


@dataclass(frozen=True)
class KernelSpec:
    """A normalized, 180-degree-symmetric convolution kernel."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"kernel must be square 2-D, got shape {w.shape}")
        if w.shape[0] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {w.shape[0]}")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel weights must be finite")
        if np.any(w < 0):
            raise ValueError("kernel weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"kernel weights must sum to 1, got {w.sum()!r}")
        if not np.array_equal(w, w[::-1, ::-1]):
            raise ValueError("kernel must be symmetric under 180-degree rotation")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class VectorField:
    """A per-pixel 2-vector field stored as (y-component, x-component)."""

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        if y.shape != x.shape or y.ndim != 2:
            raise ValueError(f"components must share a 2-D shape, got {y.shape} and {x.shape}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("vector field components must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)


def make_gaussian(size: int, sigma: float) -> KernelSpec:
    """Sampled 2-D Gaussian on a ``size x size`` grid, normalized to sum 1.

    ``weights[i, j]`` is proportional to ``exp(-((i-m)^2+(j-m)^2)/(2 sigma^2))``
    with ``m = (size-1)/2``.  Normalization keeps smoothed fields inside the
    range of the input, so regularization forces stay bounded.
    """
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    m = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    w = np.exp(-((yy - m) ** 2 + (xx - m) ** 2) / (2.0 * sigma * sigma))
    return KernelSpec(w / w.sum())


def depthwise_conv(field: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """Convolve each channel with ``kernel`` under symmetric boundary padding.

    Accepts ``(H, W)`` or ``(H, W, C)`` arrays and returns the same shape.
    Channels are processed independently in a fixed order, so results do not
    depend on any worker configuration.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim == 2:
        return ndimage.convolve(field, kernel.weights, mode="reflect")
    if field.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D field, got shape {field.shape}")
    out = np.empty_like(field)
    for c in range(field.shape[2]):
        ndimage.convolve(field[:, :, c], kernel.weights, mode="reflect", output=out[:, :, c])
    return out


def grad(field: np.ndarray) -> VectorField:
    """Forward-difference gradient with Neumann boundary (last row/column 0)."""
    u = np.asarray(field, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError(f"expected a single-channel 2-D field, got shape {u.shape}")
    gy = np.zeros_like(u)
    gx = np.zeros_like(u)
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    return VectorField(gy, gx)


def div(v: VectorField) -> np.ndarray:
    """Discrete divergence, the exact negative adjoint of :func:`grad`.

    Backward differences with the boundary rows/columns chosen so that
    ``<grad u, v> + <u, div v> == 0`` for every ``u`` and ``v``.  Entries of
    ``v`` in the slots :func:`grad` always zeroes never contribute.
    """
    vy, vx = v.y, v.x
    out = np.zeros_like(vy)
    h, w = out.shape
    if h > 1:
        out[0, :] += vy[0, :]
        out[1:-1, :] += vy[1:-1, :] - vy[:-2, :]
        out[-1, :] -= vy[-2, :]
    if w > 1:
        out[:, 0] += vx[:, 0]
        out[:, 1:-1] += vx[:, 1:-1] - vx[:, :-2]
        out[:, -1] -= vx[:, -2]
    return out
