"""Model-based feature extraction and synthetic test instances.

Lets the solvers run end to end without any learned network: cluster the
pixel intensities, turn distances to the cluster means into per-class
scores, and feed those to a solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FeatureMap, LabelMap, Raster

__all__ = ["ClassMeans", "kmeans_init", "quadratic_features", "synth_instance"]

_SYNTH_KINDS = ("square", "star", "cshape")
_BG_LEVEL = 0.25
_FG_LEVEL = 0.75


@dataclass(frozen=True)
class ClassMeans:
    """Cluster means, one row per class, ordered ascending by first channel."""

    means: np.ndarray

    def __post_init__(self):
        m = np.array(self.means, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 2:
            raise ValueError(f"means must be (I, C) with I >= 2, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("means must be finite")
        m.flags.writeable = False
        object.__setattr__(self, "means", m)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]


def kmeans_init(image: Raster, num_classes: int, seed: int = 0) -> ClassMeans:
    """Lloyd's algorithm with deterministic quantile seeding.

    Initial means are the pixel vectors nearest to evenly spaced intensity
    quantiles, so runs are reproducible without restarts; assignment ties
    break to the lowest class index, which keeps the ``seed`` argument inert
    in practice.  Final classes are sorted ascending by first channel.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    pixels = image.data.reshape(-1, image.channels)
    uniq = np.unique(pixels, axis=0)
    if uniq.shape[0] < num_classes:
        raise ValueError(
            f"fewer distinct values than classes: {uniq.shape[0]} < {num_classes}"
        )
    intensity = pixels.mean(axis=1)
    uniq_int = np.unique(intensity)
    targets = np.quantile(intensity, (2 * np.arange(num_classes) + 1) / (2 * num_classes))
    # snap each quantile to a distinct observed intensity, then to a pixel vector
    chosen = np.unique(uniq_int[np.abs(uniq_int[:, None] - targets[None, :]).argmin(axis=0)])
    if chosen.size < num_classes:
        idx = np.round(np.linspace(0, uniq_int.size - 1, num_classes)).astype(int)
        chosen = uniq_int[idx]
    means = np.stack([pixels[np.abs(intensity - c).argmin()] for c in chosen])

    assign = None
    for _ in range(100):
        d2 = ((pixels[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for i in range(num_classes):
            sel = assign == i
            if sel.any():
                means[i] = pixels[sel].mean(axis=0)
    order = np.argsort(means[:, 0], kind="stable")
    return ClassMeans(means[order])


def quadratic_features(image: Raster, means: ClassMeans) -> FeatureMap:
    """Scores ``o_i(x) = -||v(x) - mu_i||^2 / 2`` (nearest mean wins the argmax)."""
    v = image.data
    if means.means.shape[1] != image.channels:
        raise ValueError(
            f"means have {means.means.shape[1]} channels, image has {image.channels}"
        )
    diff = v[:, :, None, :] - means.means[None, None, :, :]
    return FeatureMap.from_array(-0.5 * (diff**2).sum(axis=3))


# ---------------------------------------------------------------------------
# synthetic instances
# ---------------------------------------------------------------------------


def synth_instance(kind: str, size: int, noise_sigma: float, seed: int):
    """Deterministic noisy binary-object image with exact ground truth.

    Returns ``(image, truth, center)`` where ``center`` is the geometric
    center (centroid) of the ground-truth object in ``(y, x)`` pixel
    coordinates.  Intensities are background 0.25 / object 0.75 plus
    clamped additive Gaussian noise.
    """
    if kind not in _SYNTH_KINDS:
        raise ValueError(f"unknown kind {kind!r}, expected one of {_SYNTH_KINDS}")
    if size < 16:
        raise ValueError(f"size must be at least 16, got {size}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    mask = _object_mask(kind, size)
    clean = np.where(mask, _FG_LEVEL, _BG_LEVEL)
    rng = np.random.default_rng(seed)
    noisy = np.clip(clean + rng.normal(0.0, noise_sigma, clean.shape), 0.0, 1.0)
    ys, xs = np.nonzero(mask)
    center = (float(ys.mean()), float(xs.mean()))
    truth = LabelMap(mask.astype(np.int64), 2)
    return Raster(noisy[:, :, None]), truth, center


def _object_mask(kind: str, size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "square":
        lo, hi = round(size * 0.25), round(size * 0.75)
        mask = np.zeros((size, size), dtype=bool)
        mask[lo:hi, lo:hi] = True
        return mask
    if kind == "star":
        verts = _star_polygon(c, c, 0.42 * size, 0.225 * size, points=5)
        return _point_in_polygon(yy, xx, verts)
    # cshape: disk with a small central hole and a thin mouth slit opening right;
    # the cavity is deliberately small so the constrained fill stays cheap
    r_disk = 0.40 * size
    r_hole = max(2.5, 0.04 * size)
    half_mouth = max(1.0, 0.016 * size)
    disk = (yy - c) ** 2 + (xx - c) ** 2 <= r_disk**2
    hole = (yy - c) ** 2 + (xx - c) ** 2 <= r_hole**2
    mouth = (np.abs(yy - c) <= half_mouth) & (xx >= c)
    return disk & ~(hole | mouth)


def _star_polygon(cy, cx, r_outer, r_inner, points=5):
    verts = []
    for k in range(2 * points):
        ang = -np.pi / 2.0 + k * np.pi / points
        r = r_outer if k % 2 == 0 else r_inner
        verts.append((cy + r * np.sin(ang), cx + r * np.cos(ang)))
    return np.array(verts)


def _point_in_polygon(yy, xx, verts):
    """Even-odd rule, vectorized over the pixel grid."""
    inside = np.zeros(yy.shape, dtype=bool)
    n = len(verts)
    for k in range(n):
        y1, x1 = verts[k]
        y2, x2 = verts[(k + 1) % n]
        crosses = (y1 > yy) != (y2 > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (yy - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xx < x_at)
    return inside
