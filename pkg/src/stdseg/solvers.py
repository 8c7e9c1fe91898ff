"""Iterative segmentation solvers.

Three variants of the same linearize-then-softmax scheme:

* :func:`std_solve` — entropic smoothing plus the boundary-length
  regularizer; every iteration provably does not increase the energy.
* :func:`vp_solve` — additionally pins per-class total masses via scalar
  multipliers updated by logarithmic Sinkhorn-type ascent steps.
* :func:`ss_solve` — additionally forces one class toward a star shape
  around a given center via a projected dual field.

All solvers start from the classical softmax of the features (temperature 1,
whatever the configured epsilon) and record an energy trace per iteration.
Given identical inputs and configuration the results are bitwise
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import EnergyTrace, FeatureMap, SoftSegmentation, SolverConfig, TraceRecord
from .energy import softmax, subgradient_p, total_energy
from .kernels import KernelSpec, VectorField, div, grad

DEFAULT_OUTER_ITERS = 10
SS_DEFAULT_OUTER_ITERS = 50

__all__ = [
    "DualState",
    "SolveResult",
    "std_step",
    "std_solve",
    "vp_q_update",
    "vp_solve",
    "star_field",
    "ss_q_update",
    "ss_solve",
    "star_violations",
]


@dataclass(frozen=True)
class DualState:
    """Final multipliers: per-class volume duals and/or the star-shape field."""

    q_vp: Optional[np.ndarray] = None
    q_ss: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.q_ss is not None and np.any(np.asarray(self.q_ss) < 0):
            raise ValueError("star-shape multiplier field must be nonnegative")


@dataclass(frozen=True)
class SolveResult:
    u: SoftSegmentation
    trace: EnergyTrace
    converged: bool
    iterations_used: int
    duals: DualState

    def __post_init__(self):
        if len(self.trace) != self.iterations_used + 1:
            raise ValueError(
                f"trace has {len(self.trace)} records for {self.iterations_used} iterations"
            )


def _check_inputs(o: FeatureMap, e: Optional[np.ndarray], config: SolverConfig):
    oo = o.data
    if e is not None:
        e = np.asarray(e, dtype=np.float64)
        if e.shape != oo.shape[:2]:
            raise ValueError(f"weight field shape {e.shape} does not match image {oo.shape[:2]}")
        if np.any(e < 0):
            raise ValueError("weight field must be nonnegative")
    config.validate_for(oo.shape[0], oo.shape[1], oo.shape[2])
    return oo, e


def _std_step(u, o, kernel, e, config):
    return softmax(o - subgradient_p(u, kernel, e, config.lam), config.epsilon)


def std_step(
    u_prev: SoftSegmentation, o: FeatureMap, kernel: KernelSpec,
    e: Optional[np.ndarray], config: SolverConfig,
) -> SoftSegmentation:
    """One linearized step: softmax of the features minus the regularizer force."""
    oo, e = _check_inputs(o, e, config)
    if u_prev.data.shape != oo.shape:
        raise ValueError(f"shape mismatch: u {u_prev.data.shape} vs o {oo.shape}")
    return SoftSegmentation.from_array(_std_step(u_prev.data, oo, kernel, e, config))


def _record(it, u, o, kernel, e, config, max_delta_u=None, volume_err=None, ss_violations=None):
    parts = total_energy(u, o, kernel, e, config.epsilon, config.lam)
    return TraceRecord(
        it, parts.fidelity, parts.entropy, parts.regularizer, parts.total,
        max_delta_u=max_delta_u, volume_err=volume_err, ss_violations=ss_violations,
    )


def std_solve(
    o: FeatureMap, kernel: KernelSpec, e: Optional[np.ndarray], config: SolverConfig
) -> SolveResult:
    """Iterate :func:`std_step` from the classical softmax until ``max|du| < tol``."""
    oo, e = _check_inputs(o, e, config)
    if config.volumes is not None or config.star_center is not None:
        raise ValueError("std_solve takes no volume or star-shape constraints")

    u = softmax(oo, 1.0)
    trace = EnergyTrace()
    trace.append(_record(0, u, oo, kernel, e, config))
    converged = False
    used = 0
    for t in range(config.budget(DEFAULT_OUTER_ITERS)):
        u_next = _std_step(u, oo, kernel, e, config)
        delta = float(np.abs(u_next - u).max())
        u = u_next
        used = t + 1
        trace.append(_record(used, u, oo, kernel, e, config, max_delta_u=delta))
        if delta < config.tol:
            converged = True
            break
    return SolveResult(SoftSegmentation.from_array(u), trace, converged, used, DualState())


# ---------------------------------------------------------------------------
# volume-preserving variant
# ---------------------------------------------------------------------------


def vp_q_update(
    q: np.ndarray, o: np.ndarray, p: np.ndarray, volumes: np.ndarray, epsilon: float
) -> np.ndarray:
    """One multiplicative-ascent step on the volume dual.

    ``q_i <- q_i + eps * (ln V_i - ln m_i)`` with ``m`` the class masses of
    ``softmax((o - p + q)/eps)``.  This is one half of a Sinkhorn alternation
    (the per-pixel simplex half is solved exactly by the softmax), so the
    dual objective does not decrease.
    """
    q = np.asarray(q, dtype=np.float64)
    u = softmax(np.asarray(o) - np.asarray(p) + q, epsilon)
    masses = u.sum(axis=(0, 1))
    if np.any(masses <= 0.0):
        dead = int(np.argmin(masses))
        raise ValueError(f"class {dead} has zero mass; its volume dual update would take ln 0")
    return q + epsilon * (np.log(np.asarray(volumes, dtype=np.float64)) - np.log(masses))


def _volume_err(u, volumes):
    masses = u.sum(axis=(0, 1))
    return float(np.max(np.abs(masses - volumes) / volumes))


def vp_solve(
    o: FeatureMap, kernel: KernelSpec, e: Optional[np.ndarray], config: SolverConfig
) -> SolveResult:
    """Volume-preserving solve: dual ascent on class masses inside each outer step.

    The multipliers warm-start across outer iterations and are never reset.
    """
    oo, e = _check_inputs(o, e, config)
    if config.volumes is None:
        raise ValueError("vp_solve requires config.volumes")
    if config.star_center is not None:
        raise ValueError("vp_solve takes no star-shape constraint")
    volumes = config.volumes

    u = softmax(oo, 1.0)
    q = np.zeros(oo.shape[2])
    trace = EnergyTrace()
    trace.append(_record(0, u, oo, kernel, e, config, volume_err=_volume_err(u, volumes)))
    converged = False
    used = 0
    for t in range(config.budget(DEFAULT_OUTER_ITERS)):
        p = subgradient_p(u, kernel, e, config.lam)
        for _ in range(config.inner_iters):
            q = vp_q_update(q, oo, p, volumes, config.epsilon)
        u_next = softmax(oo - p + q, config.epsilon)
        delta = float(np.abs(u_next - u).max())
        u = u_next
        used = t + 1
        trace.append(
            _record(used, u, oo, kernel, e, config,
                    max_delta_u=delta, volume_err=_volume_err(u, volumes))
        )
        if delta < config.tol:
            converged = True
            break
    return SolveResult(
        SoftSegmentation.from_array(u), trace, converged, used, DualState(q_vp=q)
    )


# ---------------------------------------------------------------------------
# star-shape variant
# ---------------------------------------------------------------------------


def star_field(center: tuple[float, float], height: int, width: int) -> VectorField:
    """Unit vectors pointing from each pixel toward ``center`` (zero at the center)."""
    cy, cx = float(center[0]), float(center[1])
    if not (0 <= cy <= height - 1 and 0 <= cx <= width - 1):
        raise ValueError(f"center {center} outside a {height}x{width} image")
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy = cy - yy
    dx = cx - xx
    d = np.hypot(dy, dx)
    safe = np.where(d == 0.0, 1.0, d)
    return VectorField(np.where(d == 0.0, 0.0, dy / safe), np.where(d == 0.0, 0.0, dx / safe))


def ss_q_update(q: np.ndarray, u_i: np.ndarray, s: VectorField, tau_q: float) -> np.ndarray:
    """Projected dual step ``q <- max(q - tau_q * s . grad(u_i), 0)``."""
    g = grad(np.asarray(u_i, dtype=np.float64))
    return np.maximum(np.asarray(q, dtype=np.float64) - tau_q * (s.y * g.y + s.x * g.x), 0.0)


def ss_solve(
    o: FeatureMap, kernel: KernelSpec, e: Optional[np.ndarray], config: SolverConfig
) -> SolveResult:
    """Star-shape constrained solve for the configured class and center.

    Each iteration takes one projected dual step, then a softmax step in
    which the divergence of the weighted star field penalizes the chosen
    class only.  Full feasibility can need more iterations than the default
    budget; raise ``outer_iters`` when exact star shapes are required.
    """
    oo, e = _check_inputs(o, e, config)
    if config.star_center is None or config.star_class is None:
        raise ValueError("ss_solve requires config.star_center and config.star_class")
    if config.volumes is not None:
        raise ValueError("ss_solve takes no volume constraint")
    h, w, _ = oo.shape
    i_star = config.star_class
    s = star_field(config.star_center, h, w)
    tau_q = config.effective_tau_q()

    u = softmax(oo, 1.0)
    q = np.zeros((h, w))
    trace = EnergyTrace()
    trace.append(
        _record(0, u, oo, kernel, e, config, ss_violations=_u_violations(u, i_star, config.star_center))
    )
    converged = False
    used = 0
    for t in range(config.budget(SS_DEFAULT_OUTER_ITERS)):
        q = ss_q_update(q, u[:, :, i_star], s, tau_q)
        arg = oo - subgradient_p(u, kernel, e, config.lam)
        arg[:, :, i_star] -= div(VectorField(q * s.y, q * s.x))
        u_next = softmax(arg, config.epsilon)
        delta = float(np.abs(u_next - u).max())
        u = u_next
        used = t + 1
        trace.append(
            _record(used, u, oo, kernel, e, config, max_delta_u=delta,
                    ss_violations=_u_violations(u, i_star, config.star_center))
        )
        if delta < config.tol:
            converged = True
            break
    return SolveResult(
        SoftSegmentation.from_array(u), trace, converged, used, DualState(q_ss=q)
    )


def _u_violations(u, i_star, center):
    return star_violations(u[:, :, i_star] >= 0.5, center)


def star_violations(mask: np.ndarray, center: tuple[float, float]) -> int:
    """Ray-marching star-shape check: number of object pixels whose ray breaks.

    From every pixel of ``mask`` march toward ``center`` in unit steps,
    looking the mask up bilinearly; the pixel counts as a violation if any
    sample before the center falls outside the object (below 0.5).  A
    diagnostic only; the solver never calls it to steer.
    """
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    cy, cx = float(center[0]), float(center[1])
    ys, xs = np.nonzero(m >= 0.5)
    if ys.size == 0:
        return 0
    dy = cy - ys
    dx = cx - xs
    d = np.hypot(dy, dx)
    tmax = int(np.ceil(d.max()))
    if tmax < 1:
        return 0
    ts = np.arange(1, tmax + 1, dtype=np.float64)
    active = ts[None, :] < d[:, None]
    safe = np.where(d == 0.0, 1.0, d)
    sy = dy / safe
    sx = dx / safe
    py = ys[:, None] + ts[None, :] * sy[:, None]
    px = xs[:, None] + ts[None, :] * sx[:, None]
    vals = _bilinear(m, py, px)
    broken = np.any((vals < 0.5) & active, axis=1)
    return int(np.count_nonzero(broken))


def _bilinear(m: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    h, w = m.shape
    y0 = np.clip(np.floor(py).astype(np.int64), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(px).astype(np.int64), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(py - y0, 0.0, 1.0)
    fx = np.clip(px - x0, 0.0, 1.0)
    return (
        m[y0, x0] * (1 - fy) * (1 - fx)
        + m[y0, x1] * (1 - fy) * fx
        + m[y1, x0] * fy * (1 - fx)
        + m[y1, x1] * fy * fx
    )
