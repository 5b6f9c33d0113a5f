"""Equilibrium propagation on convergent networks: holomorphic nudge
estimators, exact adjoint oracles, and Jacobian homeostasis."""

from .backend import HAS_NUMBA, backend_name, use_backend
from .config import ConfigError, RunConfig
from .data import (
    Dataset,
    IdxFormatError,
    idx_parse,
    idx_serialize,
    load_fashion_mnist,
    load_idx_file,
    one_hot,
    synth_teacher,
)
from .estimators import (
    ConvergenceError,
    GradientEstimate,
    IllConditionedError,
    Mode,
    NudgeProtocol,
    asymmetry_transport,
    beta_sweep,
    cauchy_first_derivative,
    classic_ep,
    estimate_gradient,
    first_order_transport,
    ground_truth_dudbeta,
    holo_ep_continuous,
    holo_ep_npoint,
    rbp_delta,
    sweep_rows_to_csv,
)
from .fixedpoint import (
    DivergenceError,
    FixedPointResult,
    SolverSettings,
    relax,
    relax_path,
    residual,
)
from .homeostasis import (
    HutchinsonConfig,
    HutchinsonEstimate,
    SymmetryReport,
    alignment_report,
    decompose,
    homeo_grad,
    homeo_grad_fd_full,
    homeo_loss_exact,
    homeo_loss_hutchinson,
    matrix_hutchinson,
    symmetry_measure,
    symmetry_report,
)
from .models import (
    CheckpointError,
    JacobianSizeError,
    ModelKind,
    ModelParams,
    Network,
    NetworkState,
    NudgeSpec,
    d2sigma,
    dsigma,
    load_checkpoint,
    save_checkpoint,
    sigma,
    softmax,
)
from .training import (
    MetricRow,
    TrainConfig,
    evaluate,
    readout_grads,
    readout_loss,
    sgd_step,
    train,
    train_epoch,
    weight_angle,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
