"""Dual-energy X-ray CT material decomposition toolkit.

Reconstructs two material images from low/high-energy sinograms by solving
a non-negativity constrained quadratic program whose inner-product penalty
drives the materials apart pixel-by-pixel, using a preconditioned interior
point method; includes a joint total variation baseline and an evaluation
pipeline (phantoms, simulation, segmentation, quality metrics).
"""

__version__ = "0.1.0"

from .estimators import InnerProductReconstructor, JointTVReconstructor
from .geometry import (
    Geometry,
    estimate_rho,
    estimate_sigma_max,
    gram_diagonal,
    radon_adjoint,
    radon_forward,
)
from .ipm import (
    IpmConfig,
    IpmReport,
    IpmState,
    PrecondDiagonals,
    apply_preconditioner,
    build_preconditioner,
    ipm_solve,
    kkt_residuals,
    pcg_solve,
    separation_report,
    spectrum_bound,
)
from .jtv import JtvConfig, JtvReport, diff_h, diff_v, jtv_gradient, jtv_solve, jtv_value
from .metrics import (
    MetricsReport,
    evaluate,
    l2_error,
    material_misclassification,
    misclassification,
    segment_by_fraction,
    select_regularization,
    ssim,
)
from .model import (
    AttenuationCoeffs,
    DualEnergySystem,
    ImagePair,
    PVC_IODINE,
    RegWeights,
    SinogramPair,
    data_objective,
    inner_product_penalty,
    qp_objective,
    rotate_pair,
    simulate_measurement,
    tikhonov_penalty,
)
from .phantoms import PhantomSpec, generate

__all__ = [
    "AttenuationCoeffs",
    "DualEnergySystem",
    "Geometry",
    "ImagePair",
    "InnerProductReconstructor",
    "IpmConfig",
    "IpmReport",
    "IpmState",
    "JointTVReconstructor",
    "JtvConfig",
    "JtvReport",
    "MetricsReport",
    "PVC_IODINE",
    "PhantomSpec",
    "PrecondDiagonals",
    "RegWeights",
    "SinogramPair",
    "apply_preconditioner",
    "build_preconditioner",
    "data_objective",
    "diff_h",
    "diff_v",
    "estimate_rho",
    "estimate_sigma_max",
    "evaluate",
    "generate",
    "gram_diagonal",
    "inner_product_penalty",
    "ipm_solve",
    "jtv_gradient",
    "jtv_solve",
    "jtv_value",
    "kkt_residuals",
    "l2_error",
    "material_misclassification",
    "misclassification",
    "pcg_solve",
    "qp_objective",
    "radon_adjoint",
    "radon_forward",
    "rotate_pair",
    "segment_by_fraction",
    "select_regularization",
    "separation_report",
    "simulate_measurement",
    "spectrum_bound",
    "ssim",
    "tikhonov_penalty",
]
