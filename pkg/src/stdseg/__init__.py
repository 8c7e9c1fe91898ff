"""Soft threshold dynamics segmentation: smooth MBO-style solvers over
per-pixel class scores, with optional volume and star-shape priors and a
certified backward pass for use as an unrolled network layer."""

from .core import (
    EnergyTrace,
    FeatureMap,
    LabelMap,
    Raster,
    SoftSegmentation,
    SolverConfig,
    TraceRecord,
    argmax_predict,
    load_image,
    read_tensor,
    write_tensor,
)
from .energy import (
    edge_weight,
    fidelity,
    logsumexp,
    regularizer,
    softmax,
    subgradient_p,
    total_energy,
    vp_dual_objective,
)
from .features import ClassMeans, kmeans_init, quadratic_features, synth_instance
from .kernels import KernelSpec, VectorField, depthwise_conv, div, grad, make_gaussian
from .solvers import (
    DualState,
    SolveResult,
    ss_q_update,
    ss_solve,
    star_field,
    star_violations,
    std_solve,
    std_step,
    vp_q_update,
    vp_solve,
)
from .autodiff import fd_gradient, std_forward_taped, std_vjp

__version__ = "0.1.0"
