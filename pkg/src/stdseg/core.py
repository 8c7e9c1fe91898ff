"""Domain types and file I/O shared by every solver module.

All pixel data lives in 64-bit floats laid out ``(height, width, channels)``,
row-major and channel-minor.  Types validate their invariants on construction
and freeze their arrays afterwards, so instances are safe to share read-only.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

__all__ = [
    "Raster",
    "FeatureMap",
    "SoftSegmentation",
    "LabelMap",
    "SolverConfig",
    "TraceRecord",
    "EnergyTrace",
    "load_image",
    "tensor_bytes",
    "write_tensor",
    "read_tensor",
    "argmax_predict",
    "LABEL_PALETTE",
    "write_label_png",
    "read_label_map",
]

SIMPLEX_TOL = 1e-12

# Fixed overlay palette (RGB).  Classes beyond the list cycle through it.
LABEL_PALETTE = [
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, order="C")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Raster:
    """Dense ``(height, width, channels)`` field of finite 64-bit reals."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3:
            raise ValueError(f"raster data must be 3-D (H, W, C), got shape {a.shape}")
        if min(a.shape) < 1:
            raise ValueError(f"raster dimensions must be positive, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("raster entries must be finite")
        object.__setattr__(self, "data", _freeze(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FeatureMap:
    """Per-pixel, per-class score field (the classifier output surrogate)."""

    raster: Raster

    def __post_init__(self):
        if self.raster.channels < 2:
            raise ValueError(f"feature map needs at least 2 classes, got {self.raster.channels}")

    @classmethod
    def from_array(cls, a: np.ndarray) -> "FeatureMap":
        return cls(Raster(a))

    @property
    def data(self) -> np.ndarray:
        return self.raster.data

    @property
    def num_classes(self) -> int:
        return self.raster.channels


@dataclass(frozen=True)
class SoftSegmentation:
    """Per-pixel probability field: entries in [0, 1], channel sums equal 1."""

    raster: Raster

    def __post_init__(self):
        a = self.raster.data
        if self.raster.channels < 2:
            raise ValueError(f"soft segmentation needs at least 2 classes, got {self.raster.channels}")
        if a.min() < 0.0 or a.max() > 1.0:
            raise ValueError("soft segmentation entries must lie in [0, 1]")
        sums = a.sum(axis=2)
        worst = np.abs(sums - 1.0).max()
        if worst > SIMPLEX_TOL:
            raise ValueError(f"per-pixel channel sums must equal 1 within {SIMPLEX_TOL}, off by {worst!r}")

    @classmethod
    def from_array(cls, a: np.ndarray) -> "SoftSegmentation":
        return cls(Raster(a))

    @property
    def data(self) -> np.ndarray:
        return self.raster.data

    @property
    def num_classes(self) -> int:
        return self.raster.channels


@dataclass(frozen=True)
class LabelMap:
    """Hard per-pixel class assignment with labels in ``{0, ..., num_classes-1}``."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        a = np.ascontiguousarray(np.asarray(self.labels))
        if a.ndim != 2 or min(a.shape) < 1:
            raise ValueError(f"labels must be a nonempty 2-D array, got shape {a.shape}")
        if not np.issubdtype(a.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {a.dtype}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if a.min() < 0 or a.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes - 1}]")
        a = np.array(a, dtype=np.int64)
        a.flags.writeable = False
        object.__setattr__(self, "labels", a)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class SolverConfig:
    """Solver parameters.

    ``outer_iters=None`` takes the solver's own default budget (10, or 50
    for the star-shape solver, which converges slowly); ``outer_iters=0``
    returns the plain softmax initialization.  ``tau_q=None`` means "use
    epsilon", the default dual step for the star-shape solver.  ``tol=0``
    disables early stopping so a run always spends the full budget.
    """

    epsilon: float = 0.1
    lam: float = 1.0
    outer_iters: Optional[int] = None
    inner_iters: int = 1
    tol: float = 1e-4
    volumes: Optional[np.ndarray] = None
    star_center: Optional[tuple[float, float]] = None
    star_class: Optional[int] = None
    tau_q: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.tol < 0:
            raise ValueError(f"tol must be nonnegative, got {self.tol}")
        if self.outer_iters is not None and self.outer_iters < 0:
            raise ValueError(f"outer_iters must be nonnegative, got {self.outer_iters}")
        if self.inner_iters < 1:
            raise ValueError(f"inner_iters must be positive, got {self.inner_iters}")
        if self.tau_q is not None and self.tau_q < 0:
            raise ValueError(f"tau_q must be nonnegative, got {self.tau_q}")
        if self.volumes is not None:
            v = np.array(self.volumes, dtype=np.float64)
            if v.ndim != 1 or v.size < 2:
                raise ValueError("volumes must be a 1-D array with one entry per class")
            if np.any(v <= 0):
                raise ValueError("volume targets must be positive")
            v.flags.writeable = False
            object.__setattr__(self, "volumes", v)
        if self.star_center is not None:
            if self.star_class is None:
                raise ValueError("star_center requires star_class")
            c = (float(self.star_center[0]), float(self.star_center[1]))
            object.__setattr__(self, "star_center", c)
        if self.star_class is not None and self.star_class < 0:
            raise ValueError(f"star_class must be nonnegative, got {self.star_class}")

    def effective_tau_q(self) -> float:
        return self.epsilon if self.tau_q is None else self.tau_q

    def budget(self, default: int) -> int:
        return default if self.outer_iters is None else self.outer_iters

    def validate_for(self, height: int, width: int, num_classes: int):
        """Check the shape-dependent invariants against a concrete problem."""
        if self.volumes is not None:
            if self.volumes.size != num_classes:
                raise ValueError(
                    f"volumes has {self.volumes.size} entries for {num_classes} classes"
                )
            total = float(self.volumes.sum())
            if abs(total - height * width) > 1e-9 * max(1.0, height * width):
                raise ValueError(
                    f"volume targets sum to {total}, expected {height * width} pixels"
                )
        if self.star_center is not None:
            y, x = self.star_center
            if not (0 <= y <= height - 1 and 0 <= x <= width - 1):
                raise ValueError(f"star center {self.star_center} lies outside the image")
            if self.star_class is not None and self.star_class >= num_classes:
                raise ValueError(f"star_class {self.star_class} out of range for {num_classes} classes")


@dataclass(frozen=True)
class TraceRecord:
    """One per-iteration energy snapshot."""

    iteration: int
    fidelity: float
    entropy: float
    regularizer: float
    total: float
    max_delta_u: Optional[float] = None
    volume_err: Optional[float] = None
    ss_violations: Optional[int] = None

    def __post_init__(self):
        parts = self.fidelity + self.entropy + self.regularizer
        if abs(self.total - parts) > 1e-9:
            raise ValueError(f"total {self.total!r} does not match component sum {parts!r}")


CSV_HEADER = ["iter", "fidelity", "entropy", "regularizer", "total", "max_delta_u", "volume_err", "ss_violations"]


@dataclass
class EnergyTrace:
    """Per-iteration energy records, serializable as CSV."""

    records: list[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord):
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow(
                [
                    r.iteration,
                    repr(r.fidelity),
                    repr(r.entropy),
                    repr(r.regularizer),
                    repr(r.total),
                    "" if r.max_delta_u is None else repr(r.max_delta_u),
                    "" if r.volume_err is None else repr(r.volume_err),
                    "" if r.ss_violations is None else r.ss_violations,
                ]
            )
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())


# ---------------------------------------------------------------------------
# image file I/O
# ---------------------------------------------------------------------------

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _read_pgm(raw: bytes, path) -> np.ndarray:
    pos = 2  # past "P5"

    def next_token():
        nonlocal pos
        while True:
            while pos < len(raw) and raw[pos] in b" \t\r\n":
                pos += 1
            if pos < len(raw) and raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos] not in b"\r\n":
                    pos += 1
                continue
            break
        start = pos
        while pos < len(raw) and raw[pos] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: unexpected end of file in PGM header")
        return raw[start:pos]

    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PGM header ({exc})") from None
    if width < 1 or height < 1:
        raise ValueError(f"{path}: zero image dimension in PGM header")
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: unsupported PGM maxval {maxval} (8-bit only)")
    pos += 1  # single whitespace byte after maxval
    pixels = raw[pos:pos + width * height]
    if len(pixels) < width * height:
        raise ValueError(f"{path}: unexpected end of file (PGM pixel data truncated)")
    a = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).astype(np.float64)
    return a[:, :, None] / float(maxval)


def load_image(path) -> Raster:
    """Load a PGM (P5) or 8-bit PNG image, scaled to [0, 1] reals.

    Grayscale images come back with one channel, color images with three.
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise ValueError(f"{path}: unreadable file ({exc})") from None
    if raw.startswith(b"P5"):
        return Raster(_read_pgm(raw, path))
    if raw.startswith(_PNG_MAGIC):
        try:
            img = Image.open(io.BytesIO(raw))
            img.load()
        except Exception as exc:
            raise ValueError(f"{path}: unexpected end of file or corrupt PNG ({exc})") from None
        if img.mode in ("I;16", "I", "F"):
            raise ValueError(f"{path}: unsupported PNG bit depth (mode {img.mode}, 8-bit only)")
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if ("A" in img.mode or img.mode == "P") else "L")
        a = np.asarray(img, dtype=np.float64)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"{path}: zero image dimension")
        return Raster(a / 255.0)
    raise ValueError(f"{path}: unsupported format (want PGM P5 or PNG)")


# ---------------------------------------------------------------------------
# VSG1 tensor files
# ---------------------------------------------------------------------------

_VSG_MAGIC = b"VSG1"
_DIM_CAP = 1 << 32


def tensor_bytes(raster: Raster) -> bytes:
    """Serialize a raster in the VSG1 layout."""
    a = raster.data
    header = _VSG_MAGIC + struct.pack("<IIII", 3, a.shape[0], a.shape[1], a.shape[2])
    return header + a.astype("<f8", copy=False).tobytes(order="C")


def write_tensor(raster: Raster, path):
    """Write a raster as a VSG1 tensor file (bit-exact round trip)."""
    with open(path, "wb") as f:
        f.write(tensor_bytes(raster))


def read_tensor(path) -> Raster:
    """Read a VSG1 tensor file written by :func:`write_tensor`."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: unexpected end of file (no header)")
    if raw[:4] != _VSG_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank != 3:
        raise ValueError(f"{path}: unsupported rank {rank} (expected 3)")
    if len(raw) < 8 + 4 * rank:
        raise ValueError(f"{path}: unexpected end of file (truncated dims)")
    dims = struct.unpack_from("<III", raw, 8)
    if min(dims) < 1:
        raise ValueError(f"{path}: zero dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    if count >= _DIM_CAP:
        raise ValueError(f"{path}: dimension overflow, {dims} is implausibly large")
    expected = 8 + 4 * rank + 8 * count
    if len(raw) != expected:
        raise ValueError(f"{path}: length mismatch (file has {len(raw)} bytes, header implies {expected})")
    a = np.frombuffer(raw, dtype="<f8", offset=8 + 4 * rank).reshape(dims)
    return Raster(a.astype(np.float64))


# ---------------------------------------------------------------------------
# predictions and label maps
# ---------------------------------------------------------------------------


def argmax_predict(u: SoftSegmentation) -> LabelMap:
    """Per-pixel argmax with ties broken to the lowest class index."""
    labels = np.argmax(u.data, axis=2)
    return LabelMap(labels, u.num_classes)


def write_label_png(labels: LabelMap, path):
    """Write a label map as a paletted PNG using the fixed overlay palette."""
    img = Image.fromarray(labels.labels.astype(np.uint8), mode="P")
    flat = []
    for i in range(256):
        flat.extend(LABEL_PALETTE[i % len(LABEL_PALETTE)])
    img.putpalette(flat)
    img.save(path, format="PNG")


def read_label_map(path, num_classes: Optional[int] = None) -> LabelMap:
    """Read a label map from a paletted/gray PNG or a VSG1 tensor."""
    with open(path, "rb") as f:
        head = f.read(8)
    if head[:4] == _VSG_MAGIC:
        r = read_tensor(path)
        if r.channels != 1:
            raise ValueError(f"{path}: label tensor must have one channel, got {r.channels}")
        a = np.rint(r.data[:, :, 0]).astype(np.int64)
    else:
        img = Image.open(path)
        img.load()
        if img.mode not in ("P", "L"):
            raise ValueError(f"{path}: label image must be paletted or grayscale, got mode {img.mode}")
        a = np.asarray(img, dtype=np.int64)
    n = num_classes if num_classes is not None else int(a.max()) + 1
    return LabelMap(a, max(n, 1))
