"""Command-line frontend: segmentation runs, synthetic data, evaluation.

Subcommands
-----------
``segment``    run one solver on an image (or a feature tensor) and write
               labels.png, probs.vsg1, trace.csv, summary.json into a directory
``synth``      generate a noisy synthetic instance with ground truth
``gradcheck``  certify the solver gradient against central finite differences
``toy``        regenerate the demo panel: noisy square, softmax vs smoothed
               vs star-constrained results, plus a comparison summary
``eval``       IoU between two label maps, or a star-shape violation count

Every artifact write is atomic (temp file + rename), outputs are
deterministic given the flags, and exit codes are 0 on success, 1 on runtime
failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .autodiff import fd_gradient, std_forward_taped, std_vjp
from .core import (
    FeatureMap,
    LabelMap,
    Raster,
    SolverConfig,
    argmax_predict,
    load_image,
    read_label_map,
    read_tensor,
    tensor_bytes,
    write_label_png,
)
from .features import kmeans_init, quadratic_features, synth_instance
from .kernels import make_gaussian
from .solvers import ss_solve, star_violations, std_solve, vp_solve

METHODS = ("softmax", "std", "vp-std", "ss-std")
GRADCHECK_TOL = 1e-5


class UsageError(ValueError):
    """Bad flag combination; maps to exit code 2."""


# ---------------------------------------------------------------------------
# atomic artifact writing
# ---------------------------------------------------------------------------


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _label_png_bytes(labels: LabelMap) -> bytes:
    buf = io.BytesIO()
    write_label_png(labels, buf)
    return buf.getvalue()


def _gray_png_bytes(image: Raster) -> bytes:
    a = np.rint(image.data * 255.0).astype(np.uint8)
    if a.shape[2] == 1:
        return _png_bytes(Image.fromarray(a[:, :, 0], mode="L"))
    return _png_bytes(Image.fromarray(a, mode="RGB"))


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def iou(pred: LabelMap, truth: LabelMap, num_classes: int):
    """Per-class IoU and its mean; classes absent from both sides are skipped."""
    if pred.labels.shape != truth.labels.shape:
        raise ValueError(
            f"label maps differ in shape: {pred.labels.shape} vs {truth.labels.shape}"
        )
    per_class: list[Optional[float]] = []
    counted = []
    for c in range(num_classes):
        a = pred.labels == c
        b = truth.labels == c
        union = np.count_nonzero(a | b)
        if union == 0:
            per_class.append(None)
            continue
        v = float(np.count_nonzero(a & b) / union)
        per_class.append(v)
        counted.append(v)
    if not counted:
        raise ValueError("no class present in either label map")
    return per_class, float(np.mean(counted))


def star_check(labels: LabelMap, object_class: int, center) -> int:
    """Ray-oracle violation count for one class of a hard label map."""
    return star_violations(labels.labels == object_class, center)


def boundary_edges(labels: LabelMap) -> int:
    """Number of 4-connected pixel pairs with differing labels."""
    a = labels.labels
    return int(np.count_nonzero(a[1:, :] != a[:-1, :]) + np.count_nonzero(a[:, 1:] != a[:, :-1]))


# ---------------------------------------------------------------------------
# segment
# ---------------------------------------------------------------------------


@dataclass
class RunSpec:
    input_path: str
    outdir: str
    method: str = "std"
    epsilon: float = 0.1
    lam: float = 1.0
    iters: Optional[int] = None
    inner_iters: int = 1
    tol: float = 1e-4
    kernel_size: int = 7
    kernel_sigma: float = 5.0
    classes: int = 2
    volumes: Optional[list[float]] = None
    volumes_px: Optional[list[float]] = None
    center: Optional[tuple[float, float]] = None
    star_class: Optional[int] = None
    tau_q: Optional[float] = None
    features_path: Optional[str] = None
    seed: int = 0
    trace: bool = True


def _volumes_from_spec(spec: RunSpec, height: int, width: int, classes: int):
    if spec.volumes is not None and spec.volumes_px is not None:
        raise UsageError("give either --volumes or --volumes-px, not both")
    n = height * width
    if spec.volumes_px is not None:
        v = np.asarray(spec.volumes_px, dtype=np.float64)
    elif spec.volumes is not None:
        fr = np.asarray(spec.volumes, dtype=np.float64)
        if np.any(fr <= 0):
            raise UsageError("volume fractions must be positive")
        counts = np.rint(fr * n)
        counts[int(np.argmax(fr))] += n - counts.sum()  # repair rounding drift
        v = counts
    else:
        raise UsageError("--method vp-std requires --volumes or --volumes-px")
    if v.size != classes:
        raise UsageError(f"expected {classes} volume entries, got {v.size}")
    if np.any(v <= 0):
        raise UsageError("volume targets must stay positive after rounding")
    return v


def _features_for(spec: RunSpec, image: Raster) -> FeatureMap:
    if spec.features_path is not None:
        r = read_tensor(spec.features_path)
        if (r.height, r.width) != (image.height, image.width):
            raise UsageError(
                f"feature tensor is {r.height}x{r.width}, image is {image.height}x{image.width}"
            )
        if r.channels != spec.classes:
            raise UsageError(f"feature tensor has {r.channels} channels, expected {spec.classes}")
        return FeatureMap(r)
    means = kmeans_init(image, spec.classes, spec.seed)
    return quadratic_features(image, means)


def run_segment(spec: RunSpec) -> dict:
    """Execute one segmentation run and write all artifacts into the out dir."""
    if spec.method not in METHODS:
        raise UsageError(f"unknown method {spec.method!r}, expected one of {METHODS}")
    if spec.method == "ss-std" and (spec.center is None or spec.star_class is None):
        missing = "--center" if spec.center is None else "--star-class"
        raise UsageError(f"--method ss-std requires {missing}")

    image = load_image(spec.input_path)
    feats = _features_for(spec, image)
    h, w = image.height, image.width
    kernel = make_gaussian(spec.kernel_size, spec.kernel_sigma)

    iters = spec.iters
    volumes = None
    if spec.method == "vp-std":
        volumes = _volumes_from_spec(spec, h, w, spec.classes)
    default_iters = 50 if spec.method == "ss-std" else 10
    lam = 0.0 if spec.method == "softmax" else spec.lam
    config = SolverConfig(
        epsilon=spec.epsilon,
        lam=lam,
        outer_iters=1 if spec.method == "softmax" else (iters if iters is not None else default_iters),
        inner_iters=spec.inner_iters,
        tol=spec.tol,
        volumes=volumes,
        star_center=spec.center if spec.method == "ss-std" else None,
        star_class=spec.star_class if spec.method == "ss-std" else None,
        tau_q=spec.tau_q,
    )

    if spec.method == "vp-std":
        result = vp_solve(feats, kernel, None, config)
    elif spec.method == "ss-std":
        result = ss_solve(feats, kernel, None, config)
    else:
        result = std_solve(feats, kernel, None, config)

    labels = argmax_predict(result.u)
    os.makedirs(spec.outdir, exist_ok=True)
    _atomic_write(os.path.join(spec.outdir, "labels.png"), _label_png_bytes(labels))
    _atomic_write(os.path.join(spec.outdir, "probs.vsg1"), tensor_bytes(result.u.raster))
    if spec.trace:
        _atomic_write(os.path.join(spec.outdir, "trace.csv"), result.trace.to_csv().encode())

    last = result.trace.records[-1]
    summary = {
        "method": spec.method,
        "params": {
            "epsilon": spec.epsilon,
            "lambda": lam,
            "iters": config.outer_iters,
            "inner_iters": spec.inner_iters,
            "tol": spec.tol,
            "kernel_size": spec.kernel_size,
            "kernel_sigma": spec.kernel_sigma,
            "classes": spec.classes,
            "seed": spec.seed,
        },
        "iterations_used": result.iterations_used,
        "converged": result.converged,
        "final_energy": last.total,
    }
    if volumes is not None:
        summary["params"]["volumes_px"] = [float(v) for v in volumes]
        summary["volume_err"] = last.volume_err
    if spec.method == "ss-std":
        summary["params"]["center"] = [spec.center[0], spec.center[1]]
        summary["params"]["star_class"] = spec.star_class
        summary["params"]["tau_q"] = config.effective_tau_q()
        summary["ss_violations"] = last.ss_violations
    _atomic_write(os.path.join(spec.outdir, "summary.json"), _json_bytes(summary))
    return summary


# ---------------------------------------------------------------------------
# toy panel
# ---------------------------------------------------------------------------

TOY_SIZE = 64
TOY_NOISE = 0.15
TOY_EPSILON = 0.1
TOY_LAMBDA = 0.5
TOY_SS_ITERS = 50


def _second_center(truth: LabelMap, center):
    """A deterministic interior point away from the centroid, for contrast."""
    ys, xs = np.nonzero(truth.labels == 1)
    target = (center[0] + (ys.min() - center[0]) / 2.0, center[1] + (xs.min() - center[1]) / 2.0)
    d2 = (ys - target[0]) ** 2 + (xs - target[1]) ** 2
    k = int(np.argmin(d2))
    return (float(ys[k]), float(xs[k]))


def run_toy(outdir, seed: int = 0) -> dict:
    """Regenerate the noisy-square demo panel and its comparison summary."""
    image, truth, center = synth_instance("square", TOY_SIZE, TOY_NOISE, seed)
    means = kmeans_init(image, 2, seed)
    feats = quadratic_features(image, means)
    kernel = make_gaussian(7, 5.0)
    center_b = _second_center(truth, center)

    runs = {}
    base = dict(epsilon=TOY_EPSILON, tol=1e-4)
    runs["softmax"] = std_solve(feats, kernel, None, SolverConfig(lam=0.0, outer_iters=1, **base))
    runs["std"] = std_solve(feats, kernel, None, SolverConfig(lam=TOY_LAMBDA, outer_iters=10, **base))
    runs["ss_std_center_a"] = ss_solve(
        feats, kernel, None,
        SolverConfig(lam=TOY_LAMBDA, outer_iters=TOY_SS_ITERS, star_center=center, star_class=1, **base),
    )
    runs["ss_std_center_b"] = ss_solve(
        feats, kernel, None,
        SolverConfig(lam=TOY_LAMBDA, outer_iters=TOY_SS_ITERS, star_center=center_b, star_class=1, **base),
    )

    os.makedirs(outdir, exist_ok=True)
    _atomic_write(os.path.join(outdir, "input.png"), _gray_png_bytes(image))
    _atomic_write(os.path.join(outdir, "truth.png"), _label_png_bytes(truth))

    centers = {
        "softmax": center, "std": center,
        "ss_std_center_a": center, "ss_std_center_b": center_b,
    }
    comparison = {
        "seed": seed,
        "size": TOY_SIZE,
        "noise_sigma": TOY_NOISE,
        "epsilon": TOY_EPSILON,
        "lambda": TOY_LAMBDA,
        "center_a": [center[0], center[1]],
        "center_b": [center_b[0], center_b[1]],
        "methods": {},
    }
    for name, result in runs.items():
        labels = argmax_predict(result.u)
        _atomic_write(os.path.join(outdir, f"{name}.png"), _label_png_bytes(labels))
        per_class, miou = iou(labels, truth, 2)
        comparison["methods"][name] = {
            "miou": miou,
            "iou_per_class": per_class,
            "boundary_edges": boundary_edges(labels),
            "ss_violations": star_check(labels, 1, centers[name]),
            "iterations_used": result.iterations_used,
            "converged": result.converged,
        }
    _atomic_write(os.path.join(outdir, "comparison.json"), _json_bytes(comparison))
    return comparison


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def run_gradcheck(size, classes, epsilon, lam, iters, seed, tau=1e-5):
    rng = np.random.default_rng(seed)
    o = FeatureMap.from_array(rng.normal(size=(size, size, classes)))
    cot = rng.normal(size=(size, size, classes))
    kernel = make_gaussian(7, 5.0)
    config = SolverConfig(epsilon=epsilon, lam=lam, outer_iters=iters, tol=0.0)
    _, tape = std_forward_taped(o, kernel, None, config)
    g = std_vjp(tape, o, kernel, None, config, cot).data

    def probe(om):
        u, _ = std_forward_taped(om, kernel, None, config)
        return float(np.sum(cot * u.data))

    fd = fd_gradient(probe, o, tau).data
    rel = float(np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12))
    return rel


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _parse_pair(text, flag):
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError(f"{flag} expects 'Y,X', got {text!r}")
    try:
        return (float(parts[0]), float(parts[1]))
    except ValueError:
        raise UsageError(f"{flag} expects numbers, got {text!r}") from None


def _parse_floats(text, flag):
    try:
        return [float(t) for t in text.split(",") if t != ""]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated numbers, got {text!r}") from None


def _build_parser():
    p = argparse.ArgumentParser(prog="stdseg", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    seg = sub.add_parser("segment", help="segment one image")
    seg.add_argument("input")
    seg.add_argument("outdir", nargs="?", default=None)
    seg.add_argument("--method", default="std", choices=METHODS)
    seg.add_argument("--epsilon", type=float, default=0.1)
    seg.add_argument("--lambda", dest="lam", type=float, default=1.0)
    seg.add_argument("--iters", type=int, default=None)
    seg.add_argument("--inner-iters", type=int, default=1)
    seg.add_argument("--tol", type=float, default=1e-4)
    seg.add_argument("--kernel-size", type=int, default=7)
    seg.add_argument("--kernel-sigma", type=float, default=5.0)
    seg.add_argument("--classes", type=int, default=2)
    seg.add_argument("--volumes", default=None, help="per-class fractions, e.g. 0.75,0.25")
    seg.add_argument("--volumes-px", default=None, help="per-class pixel counts, e.g. 48,16")
    seg.add_argument("--center", default=None, help="star center as Y,X")
    seg.add_argument("--star-class", type=int, default=None)
    seg.add_argument("--tau-q", type=float, default=None)
    seg.add_argument("--features", default=None, help="VSG1 feature tensor instead of k-means")
    seg.add_argument("--seed", type=int, default=0)
    seg.add_argument("--trace", action=argparse.BooleanOptionalAction, default=True)
    seg.add_argument("--out", default=None, help="output directory (alternative to the positional)")

    syn = sub.add_parser("synth", help="generate a synthetic instance")
    syn.add_argument("--kind", default="square", choices=("square", "star", "cshape"))
    syn.add_argument("--size", type=int, default=64)
    syn.add_argument("--noise", type=float, default=0.1)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--out", required=True)

    gc = sub.add_parser("gradcheck", help="verify the solver gradient")
    gc.add_argument("--size", type=int, default=5)
    gc.add_argument("--classes", type=int, default=3)
    gc.add_argument("--epsilon", type=float, default=0.1)
    gc.add_argument("--lambda", dest="lam", type=float, default=1.0)
    gc.add_argument("--iters", type=int, default=3)
    gc.add_argument("--seed", type=int, default=0)

    toy = sub.add_parser("toy", help="regenerate the demo panel")
    toy.add_argument("--out", required=True)
    toy.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("eval", help="evaluate label maps")
    evsub = ev.add_subparsers(dest="eval_mode", required=True)
    evi = evsub.add_parser("iou", help="per-class IoU and mean IoU")
    evi.add_argument("pred")
    evi.add_argument("truth")
    evi.add_argument("--classes", type=int, default=None)
    evs = evsub.add_parser("star", help="star-shape violation count")
    evs.add_argument("labels")
    evs.add_argument("--center", required=True, help="star center as Y,X")
    evs.add_argument("--star-class", type=int, default=1)
    return p


def _check_threads_env():
    raw = os.environ.get("STDSEG_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"STDSEG_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"STDSEG_THREADS must be at least 1, got {n}")
    # execution is sequential; any cap >= 1 is honored as-is


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        _check_threads_env()
        if args.command == "segment":
            outdir = args.out if args.out is not None else args.outdir
            if outdir is None:
                raise UsageError("segment needs an output directory (positional or --out)")
            spec = RunSpec(
                input_path=args.input, outdir=outdir, method=args.method,
                epsilon=args.epsilon, lam=args.lam, iters=args.iters,
                inner_iters=args.inner_iters, tol=args.tol,
                kernel_size=args.kernel_size, kernel_sigma=args.kernel_sigma,
                classes=args.classes,
                volumes=None if args.volumes is None else _parse_floats(args.volumes, "--volumes"),
                volumes_px=None if args.volumes_px is None else _parse_floats(args.volumes_px, "--volumes-px"),
                center=None if args.center is None else _parse_pair(args.center, "--center"),
                star_class=args.star_class, tau_q=args.tau_q,
                features_path=args.features, seed=args.seed, trace=args.trace,
            )
            summary = run_segment(spec)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "synth":
            image, truth, center = synth_instance(args.kind, args.size, args.noise, args.seed)
            os.makedirs(args.out, exist_ok=True)
            _atomic_write(os.path.join(args.out, "image.png"), _gray_png_bytes(image))
            truth_raster = Raster(truth.labels[:, :, None].astype(np.float64))
            _atomic_write(os.path.join(args.out, "truth.vsg1"), tensor_bytes(truth_raster))
            sidecar = {
                "kind": args.kind, "seed": args.seed, "noise_sigma": args.noise,
                "size": args.size, "center": [center[0], center[1]],
            }
            _atomic_write(os.path.join(args.out, "instance.json"), _json_bytes(sidecar))
            print(json.dumps(sidecar, sort_keys=True))
        elif args.command == "gradcheck":
            rel = run_gradcheck(args.size, args.classes, args.epsilon, args.lam, args.iters, args.seed)
            ok = rel <= GRADCHECK_TOL
            print(f"max relative error {rel:.3e} (tolerance {GRADCHECK_TOL:.0e}): {'PASS' if ok else 'FAIL'}")
            return 0 if ok else 1
        elif args.command == "toy":
            comparison = run_toy(args.out, args.seed)
            print(json.dumps(comparison, sort_keys=True))
        elif args.command == "eval":
            if args.eval_mode == "iou":
                pred = read_label_map(args.pred, args.classes)
                truth = read_label_map(args.truth, args.classes)
                n = args.classes if args.classes is not None else max(pred.num_classes, truth.num_classes)
                per_class, miou_val = iou(LabelMap(pred.labels, n), LabelMap(truth.labels, n), n)
                print(json.dumps({"per_class": per_class, "miou": miou_val}, sort_keys=True))
            else:
                labels = read_label_map(args.labels)
                center = _parse_pair(args.center, "--center")
                count = star_check(labels, args.star_class, center)
                print(json.dumps({"violations": count}, sort_keys=True))
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
