"""Acceptance gate: one test per release criterion, printed pass/fail lines.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one line per
criterion with the measured numbers next to the required bounds.
"""

import itertools
import json
import os
import time

import numpy as np
import pytest

from stdseg import (
    FeatureMap,
    SolverConfig,
    argmax_predict,
    fd_gradient,
    kmeans_init,
    logsumexp,
    make_gaussian,
    quadratic_features,
    regularizer,
    softmax,
    ss_solve,
    star_violations,
    std_forward_taped,
    std_solve,
    std_vjp,
    subgradient_p,
    synth_instance,
    vp_dual_objective,
    vp_q_update,
    vp_solve,
)
from stdseg.cli import iou, main
from stdseg.energy import fidelity
from stdseg.kernels import VectorField, depthwise_conv, div, grad
from conftest import grid_params, random_simplex, region_features

KERNEL = make_gaussian(7, 5.0)
N_INSTANCES = 500


def _report(num, ok, detail):
    print(f"\n[criterion {num:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def test_criterion_01_energy_descent():
    t0 = time.time()
    worst = -np.inf
    for j in range(N_INSTANCES):
        o, e = region_features(j)
        eps, lam = grid_params(j)
        res = std_solve(FeatureMap.from_array(o), KERNEL, e,
                        SolverConfig(epsilon=eps, lam=lam, outer_iters=10, tol=1e-4))
        tot = res.trace.totals()
        excess = np.diff(tot) - 1e-10 * np.maximum(np.abs(tot[:-1]), 1e-30)
        worst = max(worst, float(excess.max()))
    dt = time.time() - t0
    _report(1, worst <= 0.0 and dt < 30,
            f"energy non-increasing on {N_INSTANCES} instances; worst slack excess "
            f"{worst:.2e} (need <= 0), {dt:.1f}s (< 30s)")


def test_criterion_02_softmax_reduction():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for eps in (0.1, 0.5, 3.0):
        o = rng.normal(size=(9, 7, 3)) * 2
        res = std_solve(FeatureMap.from_array(o), KERNEL, None,
                        SolverConfig(epsilon=eps, lam=0.0, outer_iters=10, tol=1e-4))
        worst = max(worst, float(np.abs(res.u.data - softmax(o, eps)).max()))
    o = rng.normal(size=(8, 8, 2))
    res1 = std_solve(FeatureMap.from_array(o), KERNEL, None,
                     SolverConfig(epsilon=1.0, lam=0.0, outer_iters=10, tol=1e-4))
    bitwise = np.array_equal(res1.u.data, softmax(o, 1.0))
    dt = time.time() - t0
    _report(2, worst <= 1e-12 and bitwise and dt < 1,
            f"lambda=0 solve equals softmax(o/eps): max dev {worst:.2e} (<= 1e-12), "
            f"eps=1 path bitwise={bitwise}, {dt:.2f}s (< 1s)")


def test_criterion_03_fenchel_pair():
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst_eq = 0.0
    dominated = True
    for _ in range(100):
        I = int(rng.integers(2, 5))
        o = rng.normal(size=I) * 3
        eps = 10.0 ** rng.uniform(-1, 0.5)
        u_star = softmax(o, eps)
        val = float(o @ u_star - eps * np.sum(u_star * np.log(u_star)))
        worst_eq = max(worst_eq, abs(logsumexp(o, eps) - val) / max(1.0, abs(val)))
        pts = rng.exponential(1.0, size=(1000, I)) + 1e-12
        pts /= pts.sum(axis=1, keepdims=True)
        others = pts @ o - eps * np.sum(pts * np.log(pts), axis=1)
        dominated &= bool(np.all(others <= val + 1e-10))
    dt = time.time() - t0
    _report(3, worst_eq <= 1e-10 and dominated and dt < 5,
            f"smooth max equals its double conjugate at the softmax: worst rel dev "
            f"{worst_eq:.2e} (<= 1e-10), dominates 1000 simplex points per draw: "
            f"{dominated}, {dt:.1f}s (< 5s)")


def test_criterion_04_subgradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(2)
    worst = 0.0
    tau = 1e-4
    for n in range(50):
        h = int(rng.integers(4, 9))
        w = int(rng.integers(4, 9))
        I = int(rng.integers(2, 4))
        u = random_simplex(rng, (h, w), I)
        v = rng.normal(size=u.shape)
        e = None if n % 2 else 1.0 / (1.0 + rng.uniform(size=(h, w)))
        lam = float(rng.uniform(0.2, 1.25))
        fd = (regularizer(u + tau * v, KERNEL, e, lam)
              - regularizer(u - tau * v, KERNEL, e, lam)) / (2 * tau)
        inner = float(np.sum(v * subgradient_p(u, KERNEL, e, lam)))
        worst = max(worst, abs(fd - inner))
    dt = time.time() - t0
    _report(4, worst <= 1e-6 and dt < 10,
            f"directional derivatives of the regularizer match <v, p>: worst dev "
            f"{worst:.2e} (<= 1e-6, tau=1e-4, 50 instances), {dt:.1f}s (< 10s)")


def test_criterion_05_volume_preservation():
    t0 = time.time()
    worst_mass = 0.0
    for n in range(20):
        rng = np.random.default_rng(300 + n)
        h = int(rng.integers(6, 13))
        w = int(rng.integers(6, 13))
        I = int(rng.integers(2, 4))
        o = rng.normal(size=(h, w, I)) * 2
        frac = rng.dirichlet(np.full(I, 5.0))
        V = np.rint(frac * h * w)
        V = np.maximum(V, 1.0)
        V[int(np.argmax(V))] += h * w - V.sum()
        cfg = SolverConfig(epsilon=0.1, lam=0.8, outer_iters=300, tol=1e-8,
                           inner_iters=5, volumes=V)
        res = vp_solve(FeatureMap.from_array(o), KERNEL, None, cfg)
        masses = res.u.data.sum(axis=(0, 1))
        worst_mass = max(worst_mass, float(np.max(np.abs(masses - V) / V)))

    worst_gap = 0.0
    for n in range(5):
        rng = np.random.default_rng(400 + n)
        o = rng.normal(size=(4, 4, 2))
        V = np.array([9.0, 7.0])
        cfg = SolverConfig(epsilon=0.1, lam=0.6, outer_iters=2000, tol=1e-10,
                           inner_iters=5, volumes=V)
        res = vp_solve(FeatureMap.from_array(o), KERNEL, None, cfg)
        u = res.u.data
        p = subgradient_p(u, KERNEL, None, cfg.lam)
        primal = fidelity(u, o, cfg.epsilon) + float(np.sum(u * p))
        dual = vp_dual_objective(res.duals.q_vp, o, p, V, cfg.epsilon)
        worst_gap = max(worst_gap, abs(primal - dual))
    dt = time.time() - t0
    _report(5, worst_mass <= 0.005 and worst_gap <= 1e-4 and dt < 30,
            f"volume solve: worst relative mass error {worst_mass:.2e} (<= 5e-3), "
            f"worst duality gap {worst_gap:.2e} (<= 1e-4), {dt:.1f}s (< 30s)")


def test_criterion_06_star_shape_enforcement():
    t0 = time.time()
    image, truth, center = synth_instance("cshape", 64, 0.1, 0)
    feats = quadratic_features(image, kmeans_init(image, 2, 0))
    base = dict(epsilon=0.1, lam=0.1)
    res_std = std_solve(feats, KERNEL, None,
                        SolverConfig(outer_iters=200, tol=1e-6, **base))
    lab_std = argmax_predict(res_std.u)
    v_std = star_violations(lab_std.labels == 1, center)
    res_ss = ss_solve(feats, KERNEL, None,
                      SolverConfig(outer_iters=600, tol=0.0, star_center=center,
                                   star_class=1, **base))
    lab_ss = argmax_predict(res_ss.u)
    v_ss = star_violations(lab_ss.labels == 1, center)
    _, miou_std = iou(lab_std, truth, 2)
    _, miou_ss = iou(lab_ss, truth, 2)
    dt = time.time() - t0
    _report(6, v_ss == 0 and v_std >= 1 and miou_ss >= miou_std - 0.02 and dt < 20,
            f"C-shape: constrained violations {v_ss} (= 0), unconstrained {v_std} (>= 1), "
            f"IoU {miou_ss:.4f} vs {miou_std:.4f} (within 2 points), {dt:.1f}s (< 20s)")


def test_criterion_07_gradient_certification():
    t0 = time.time()
    cases = list(itertools.product([3, 4, 5, 6], [2, 3], [0.1, 1.0],
                                   [0.0, 0.5, 1.0], [1, 3, 10]))
    sel = np.random.default_rng(7).choice(len(cases), size=20, replace=False)
    worst = 0.0
    for n, idx in enumerate(sel):
        h, I, eps, lam, iters = cases[idx]
        rng = np.random.default_rng(100 + n)
        o = FeatureMap.from_array(rng.normal(size=(h, h, I)))
        cot = rng.normal(size=(h, h, I))
        cfg = SolverConfig(epsilon=eps, lam=lam, outer_iters=iters, tol=0.0)
        _, tape = std_forward_taped(o, KERNEL, None, cfg)
        g = std_vjp(tape, o, KERNEL, None, cfg, cot).data

        def probe(om, cfg=cfg, cot=cot):
            u, _ = std_forward_taped(om, KERNEL, None, cfg)
            return float(np.sum(cot * u.data))

        fd = fd_gradient(probe, o, 1e-5).data
        worst = max(worst, float(np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12)))
    dt = time.time() - t0
    _report(7, worst <= 1e-5 and dt < 60,
            f"reverse pass vs central differences over 20 unrolled configurations: "
            f"max relative error {worst:.2e} (<= 1e-5), {dt:.1f}s (< 60s)")


def test_criterion_08_operator_algebra():
    t0 = time.time()
    rng = np.random.default_rng(8)

    worst_conv = 0.0
    for n in (1, 2, 3, 5, 9, 16):
        a = rng.normal(size=(n, n))
        b = rng.normal(size=(n, n))
        lhs = float(np.sum(depthwise_conv(a, KERNEL) * b))
        rhs = float(np.sum(a * depthwise_conv(b, KERNEL)))
        worst_conv = max(worst_conv, abs(lhs - rhs) / max(1.0, abs(lhs)))

    worst_adj = 0.0
    for n in (1, 2, 4, 8, 16):
        u = rng.normal(size=(n, n))
        v = VectorField(rng.normal(size=(n, n)), rng.normal(size=(n, n)))
        g = grad(u)
        lhs = float(np.sum(g.y * v.y) + np.sum(g.x * v.x))
        rhs = float(np.sum(u * div(v)))
        worst_adj = max(worst_adj, abs(lhs + rhs) / max(1.0, abs(lhs)))

    worst_sum = 0.0
    for size in (1, 3, 5, 7, 9):
        for sigma in (0.5, 1.0, 5.0, 20.0):
            worst_sum = max(worst_sum, abs(make_gaussian(size, sigma).weights.sum() - 1.0))

    o = FeatureMap.from_array(rng.normal(size=(10, 10, 3)))
    worst_simplex = 0.0
    outs = [
        std_solve(o, KERNEL, None, SolverConfig(epsilon=0.1, lam=1.0)),
        vp_solve(o, KERNEL, None,
                 SolverConfig(epsilon=0.1, lam=1.0, outer_iters=30, volumes=[40.0, 35.0, 25.0])),
        ss_solve(o, KERNEL, None,
                 SolverConfig(epsilon=0.1, lam=1.0, outer_iters=30, star_center=(4.5, 4.5), star_class=0)),
    ]
    for res in outs:
        worst_simplex = max(worst_simplex, float(np.abs(res.u.data.sum(axis=2) - 1.0).max()))
    dt = time.time() - t0
    ok = (worst_conv <= 1e-10 and worst_adj <= 1e-12 and worst_sum <= 1e-15
          and worst_simplex <= 1e-12 and dt < 10)
    _report(8, ok,
            f"conv self-adjointness {worst_conv:.2e} (<= 1e-10), grad/div adjointness "
            f"{worst_adj:.2e} (<= 1e-12), kernel sums {worst_sum:.2e} (<= 1e-15), "
            f"solver simplex closure {worst_simplex:.2e} (<= 1e-12), {dt:.1f}s (< 10s)")


def test_criterion_09_toy_regeneration(tmp_path):
    t0 = time.time()
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["toy", "--out", str(a)]) == 0
    assert main(["toy", "--out", str(b)]) == 0
    identical = all(
        (a / name).read_bytes() == (b / name).read_bytes()
        for name in sorted(os.listdir(a))
    )
    comp = json.loads((a / "comparison.json").read_text())
    m = comp["methods"]
    iou_ok = m["std"]["miou"] >= m["softmax"]["miou"]
    edges_ok = m["std"]["boundary_edges"] < m["softmax"]["boundary_edges"]
    dt = time.time() - t0
    _report(9, identical and iou_ok and edges_ok and dt < 20,
            f"toy panel: smoothed IoU {m['std']['miou']:.4f} >= softmax "
            f"{m['softmax']['miou']:.4f}, edges {m['std']['boundary_edges']} < "
            f"{m['softmax']['boundary_edges']}, byte-identical reruns: {identical}, "
            f"{dt:.1f}s (< 20s)")


def test_criterion_10_convergence_speed():
    t0 = time.time()
    converged = 0
    for j in range(N_INSTANCES):
        o, e = region_features(j)
        res = std_solve(FeatureMap.from_array(o), KERNEL, e,
                        SolverConfig(epsilon=0.1, lam=1.0, outer_iters=10, tol=1e-4))
        converged += res.converged
    rate = converged / N_INSTANCES
    dt = time.time() - t0
    _report(10, rate >= 0.75 and dt < 30,
            f"{converged}/{N_INSTANCES} instances ({rate:.1%}) reach tol=1e-4 within 10 "
            f"iterations at eps=0.1, lambda=1.0 (pass bar 75%), {dt:.1f}s (< 30s)")
