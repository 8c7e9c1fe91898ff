"""Scalar energies and the smooth-max machinery shared by the solvers.

Functions here operate on plain ``(H, W, I)`` numpy arrays so that test
oracles can evaluate them at points off the probability simplex (finite
differences need that).  The solver layer wraps the results back into
domain types.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from .kernels import KernelSpec, depthwise_conv, grad

__all__ = [
    "logsumexp",
    "softmax",
    "fidelity",
    "regularizer",
    "subgradient_p",
    "EnergyBreakdown",
    "total_energy",
    "vp_dual_objective",
    "edge_weight",
]

# Floor for u before taking ln: solver outputs are strictly positive by
# construction, but oracles may pass exact zeros (0*ln 0 := 0).
_LN_FLOOR = 1e-300


def logsumexp(scores: np.ndarray, epsilon: float) -> np.ndarray:
    """Smooth maximum ``epsilon * ln sum_i exp(scores_i / epsilon)`` over the last axis.

    Max-shifted, so large scores cannot overflow.  The result always lies in
    ``[max(scores), max(scores) + epsilon * ln I]``.
    """
    s = np.asarray(scores, dtype=np.float64)
    m = s.max(axis=-1, keepdims=True)
    with np.errstate(over="ignore"):  # s - m may hit -inf for extreme spreads
        out = m[..., 0] + epsilon * np.log(np.exp((s - m) / epsilon).sum(axis=-1))
    return out if out.ndim else float(out)


def softmax(scores: np.ndarray, epsilon: float = 1.0) -> np.ndarray:
    """Temperature softmax ``exp(s_i/eps) / sum exp(s_j/eps)`` over the last axis.

    Max-shifted and renormalized so channel sums are 1 to the last bit.
    """
    s = np.asarray(scores, dtype=np.float64)
    with np.errstate(over="ignore"):
        e = np.exp((s - s.max(axis=-1, keepdims=True)) / epsilon)
    u = e / e.sum(axis=-1, keepdims=True)
    u /= u.sum(axis=-1, keepdims=True)
    return u


def _entropy(u: np.ndarray, epsilon: float) -> float:
    uc = np.maximum(u, _LN_FLOOR)
    return float(epsilon * np.sum(u * np.log(uc)))


def fidelity(u: np.ndarray, o: np.ndarray, epsilon: float) -> float:
    """Data-plus-entropy term ``<-o, u> + epsilon <u, ln u>``."""
    u = np.asarray(u, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    return float(-np.sum(o * u)) + _entropy(u, epsilon)


def regularizer(
    u: np.ndarray, kernel: KernelSpec, e: Optional[np.ndarray], lam: float
) -> float:
    """Boundary-length surrogate ``lam * sum_i <e u_i, k*(1-u_i)>``."""
    u = np.asarray(u, dtype=np.float64)
    smoothed = depthwise_conv(1.0 - u, kernel)
    if e is None:
        return float(lam * np.sum(u * smoothed))
    return float(lam * np.sum(e[:, :, None] * u * smoothed))


def subgradient_p(
    u: np.ndarray, kernel: KernelSpec, e: Optional[np.ndarray], lam: float
) -> np.ndarray:
    """Variation of the regularizer: ``lam * ((k*(1-u)) e - k*(e u))`` per class.

    With the default unit weight this collapses to ``lam * k*(1-2u)``.
    """
    u = np.asarray(u, dtype=np.float64)
    if e is None:
        return lam * depthwise_conv(1.0 - 2.0 * u, kernel)
    ecol = e[:, :, None]
    return lam * (depthwise_conv(1.0 - u, kernel) * ecol - depthwise_conv(ecol * u, kernel))


class EnergyBreakdown(NamedTuple):
    fidelity: float  # <-o, u>, the data half of the fidelity term
    entropy: float  # epsilon <u, ln u>
    regularizer: float
    total: float


def total_energy(
    u: np.ndarray,
    o: np.ndarray,
    kernel: KernelSpec,
    e: Optional[np.ndarray],
    epsilon: float,
    lam: float,
) -> EnergyBreakdown:
    """Full model energy split into data, entropy, and regularizer parts."""
    u = np.asarray(u, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    data = float(-np.sum(o * u))
    ent = _entropy(u, epsilon)
    reg = regularizer(u, kernel, e, lam)
    return EnergyBreakdown(data, ent, reg, data + ent + reg)


def vp_dual_objective(
    q: np.ndarray, o: np.ndarray, p: np.ndarray, volumes: np.ndarray, epsilon: float
) -> float:
    """Dual of the volume-constrained inner problem at multipliers ``q``.

    ``sum_i q_i V_i - sum_x M_eps(o(x) - p(x) + q)``.  Equals the primal value
    ``fidelity(u) + <u, p>`` at the optimal pair, which is what the duality-gap
    checks rely on; adding any constant ``c`` to all ``q_i`` leaves it
    unchanged because the volumes sum to the pixel count.
    """
    q = np.asarray(q, dtype=np.float64)
    volumes = np.asarray(volumes, dtype=np.float64)
    m = logsumexp(np.asarray(o) - np.asarray(p) + q, epsilon)
    return float(np.dot(q, volumes) - np.sum(m))


def edge_weight(image: np.ndarray) -> np.ndarray:
    """Edge-stopping weight ``1 / (1 + |grad v|)`` in (0, 1].

    Multi-channel gradients combine by Euclidean norm over components and
    channels.
    """
    v = np.asarray(image, dtype=np.float64)
    if v.ndim == 2:
        v = v[:, :, None]
    sq = np.zeros(v.shape[:2])
    for c in range(v.shape[2]):
        g = grad(v[:, :, c])
        sq += g.y**2 + g.x**2
    return 1.0 / (1.0 + np.sqrt(sq))
