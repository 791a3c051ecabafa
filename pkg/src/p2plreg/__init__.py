"""Point-to-plane rigid registration with closed-form transform gradients.

The forward path solves the classic linearized point-to-plane system and
accumulates small transforms; the backward path differentiates the solved
transform with respect to every per-pair input through the minimality
condition of the (orthogonality-penalized) energy, so gradient cost does
not grow with the number of accumulation rounds.
"""

from .cloud import PointCloud, RegistrationPair
from .correspond import (
    CorrespondenceSet,
    gumbel_hard_weights,
    load_scores_csv,
    match_matrix,
    nn_correspond,
    reliability_weights,
    soft_pointers,
    topk_keypoints,
)
from .fileio import ParseError, load, load_transform, save, save_transform
from .geometry import (
    RigidTransform,
    apply_transform,
    compose,
    from_gvector,
    log_rotation,
    rodrigues,
    skew,
    to_gvector,
)
from .gradcheck import FDConfig, GradErrorReport, compare, fd_bundle, fd_jacobian
from .gradient import (
    GradientBundle,
    SingularHessian,
    backward,
    chain_loss,
    cross_derivs,
    hessian,
    penalty,
    penalty_lambda,
    rigid_motion_loss,
)
from .metrics import MetricReport, batch_stats, chamfer, rotation_errors
from .solver import (
    DegenerateConfiguration,
    LinearizedSystem,
    SingularSystem,
    SolveReport,
    assemble,
    energy,
    icp,
    register_p2pl,
    register_procrustes,
    solve_step,
)
from .synth import InsufficientPoints, SynthConfig, estimate_normals, make_cpu_pair, synth_shape

__version__ = "0.1.0"

__all__ = [
    "PointCloud",
    "RegistrationPair",
    "CorrespondenceSet",
    "RigidTransform",
    "LinearizedSystem",
    "SolveReport",
    "GradientBundle",
    "FDConfig",
    "GradErrorReport",
    "MetricReport",
    "SynthConfig",
    "ParseError",
    "InsufficientPoints",
    "SingularSystem",
    "SingularHessian",
    "DegenerateConfiguration",
    "skew",
    "rodrigues",
    "log_rotation",
    "compose",
    "apply_transform",
    "to_gvector",
    "from_gvector",
    "load",
    "save",
    "load_transform",
    "save_transform",
    "synth_shape",
    "make_cpu_pair",
    "estimate_normals",
    "nn_correspond",
    "soft_pointers",
    "match_matrix",
    "gumbel_hard_weights",
    "reliability_weights",
    "topk_keypoints",
    "load_scores_csv",
    "energy",
    "assemble",
    "solve_step",
    "register_p2pl",
    "register_procrustes",
    "icp",
    "penalty",
    "penalty_lambda",
    "hessian",
    "cross_derivs",
    "backward",
    "chain_loss",
    "rigid_motion_loss",
    "fd_jacobian",
    "fd_bundle",
    "compare",
    "rotation_errors",
    "batch_stats",
    "chamfer",
]
