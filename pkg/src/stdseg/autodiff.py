"""Reverse-mode differentiation of the unrolled solver w.r.t. the features.

The solver is differentiated as a fixed-depth unrolled computation: the
iteration count comes from the configuration and there is no tolerance-based
early exit, so the map from features to output is smooth.  The reverse pass
walks the tape backwards through each softmax (per-pixel Jacobian
``diag(u) - u u^T`` scaled by ``1/epsilon``) and through the regularizer
force, whose linear part is self-adjoint up to the weight field.

:func:`fd_gradient` is the independent central-difference oracle used to
certify the hand-derived pass.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .core import FeatureMap, SoftSegmentation, SolverConfig
from .energy import softmax, subgradient_p
from .kernels import KernelSpec, depthwise_conv
from .solvers import DEFAULT_OUTER_ITERS

__all__ = ["std_forward_taped", "std_vjp", "fd_gradient"]


def std_forward_taped(
    o: FeatureMap, kernel: KernelSpec, e: Optional[np.ndarray], config: SolverConfig
):
    """Run the full configured iteration budget, keeping the iterates.

    Returns ``(u, tape)`` where ``tape`` holds the step inputs
    ``u^0 ... u^(T-1)``; with a zero-iteration budget the result is the plain
    softmax and the tape is empty.  Unlike the solver there is no early
    stopping, so the tape length depends only on the configuration.
    """
    oo = o.data
    if e is not None and np.asarray(e).shape != oo.shape[:2]:
        raise ValueError(f"weight field shape {np.asarray(e).shape} does not match image {oo.shape[:2]}")
    if config.volumes is not None or config.star_center is not None:
        raise ValueError("the taped forward takes no volume or star-shape constraints")
    u = softmax(oo, 1.0)
    tape: list[np.ndarray] = []
    for _ in range(config.budget(DEFAULT_OUTER_ITERS)):
        tape.append(u)
        u = softmax(oo - subgradient_p(u, kernel, e, config.lam), config.epsilon)
    return SoftSegmentation.from_array(u), tape


def _softmax_vjp(u_out: np.ndarray, ubar: np.ndarray, epsilon: float) -> np.ndarray:
    # rows of the per-pixel Jacobian sum to zero, so the result does too
    dot = (u_out * ubar).sum(axis=-1, keepdims=True)
    return u_out * (ubar - dot) / epsilon


def _force_adjoint(pbar, kernel, e, lam):
    # adjoint of du -> -lam * ((k*du) e + k*(e du)), using conv self-adjointness
    if e is None:
        return -2.0 * lam * depthwise_conv(pbar, kernel)
    ecol = e[:, :, None]
    return -lam * (depthwise_conv(ecol * pbar, kernel) + ecol * depthwise_conv(pbar, kernel))


def std_vjp(
    tape: list[np.ndarray],
    o: FeatureMap,
    kernel: KernelSpec,
    e: Optional[np.ndarray],
    config: SolverConfig,
    cotangent: np.ndarray,
) -> FeatureMap:
    """Pull ``cotangent`` back through the unrolled iterations onto the features."""
    oo = o.data
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != oo.shape:
        raise ValueError(f"cotangent shape {cot.shape} does not match features {oo.shape}")
    steps = config.budget(DEFAULT_OUTER_ITERS)
    if len(tape) != steps:
        raise ValueError(f"tape length {len(tape)} does not match the configured {steps} iterations")
    if steps == 0:
        u0 = softmax(oo, 1.0)
    else:
        u0 = tape[0]
        u_last = softmax(oo - subgradient_p(tape[-1], kernel, e, config.lam), config.epsilon)

    obar = np.zeros_like(oo)
    ubar = cot
    for t in range(steps - 1, -1, -1):
        u_out = tape[t + 1] if t + 1 < steps else u_last
        abar = _softmax_vjp(u_out, ubar, config.epsilon)
        obar += abar
        ubar = _force_adjoint(-abar, kernel, e, config.lam)
    obar += _softmax_vjp(u0, ubar, 1.0)
    return FeatureMap.from_array(obar)


def fd_gradient(
    probe: Callable[[FeatureMap], float], o: FeatureMap, tau: float
) -> FeatureMap:
    """Central-difference gradient of ``probe`` at ``o``, one coordinate at a time."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    oo = o.data
    g = np.zeros_like(oo)
    for idx in np.ndindex(oo.shape):
        plus = oo.copy()
        plus[idx] += tau
        minus = oo.copy()
        minus[idx] -= tau
        g[idx] = (probe(FeatureMap.from_array(plus)) - probe(FeatureMap.from_array(minus))) / (2 * tau)
    return FeatureMap.from_array(g)
