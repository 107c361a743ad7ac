"""Operator networks for SDE solutions through truncated Wiener-chaos expansions.

The package splits into exact basis machinery (chaos_basis), path and
benchmark-SDE simulation (sde_lab), coefficient ground truth (pce_ref),
a small neural substrate (neural), the operator model itself (model),
evaluation metrics (metrics), and a reproducible experiment driver (cli).
"""

from .chaos_basis import (
    GaussianFeatures,
    HaarIndex,
    MultiIndex,
    chaos_poly_eval,
    encode_components,
    encode_path,
    enumerate_multi_indices,
    haar_antiderivative,
    haar_eval,
    haar_tail_energy,
    hermite_eval,
    reconstruct_path,
)
from .metrics import SampleCloud, mc_l2, sinkhorn_divergence, w2_1d
from .model import (
    ErrorDecomposition,
    MetricsReport,
    SdeonetModel,
    TrainConfig,
    build_model,
    error_decomposition,
    evaluate,
    load_model,
    loss,
    model_forward,
    save_model,
    train,
)
from .neural import (
    AdamState,
    Mlp,
    adam_step,
    mlp_forward,
    mlp_grad,
    mlp_init,
    pad_depth,
    parallelise,
)
from .pce_ref import (
    AffineSdeCoeffs,
    CoefficientTable,
    analytic_table,
    gbm_coeff,
    mc_project_coeff,
    ou_coeff,
    parseval_defect,
    pce_eval,
    propagator_solve,
    truncation_energy,
)
from .sde_lab import (
    CustomSde,
    DyadicPath,
    GaussianLangevin,
    GeometricBrownianMotion,
    IntegrationBlowupError,
    OrnsteinUhlenbeck,
    Sample,
    euler_maruyama,
    exact_solution,
    exact_trajectory,
    load_dataset,
    make_dataset,
    sample_brownian,
    save_dataset,
)

__version__ = "0.1.0"
