"""Local linear attention (LLA) on numpy: reference and blockwise forwards,
analytic backward, batched CG, baselines and synthetic-data experiments."""
from .attention import (
    DegenerateDenominatorError,
    GradientBundle,
    LLAConfig,
    LLAForwardCache,
    SingularSystemError,
    lla_backward,
    lla_forward_blockwise,
    lla_forward_interpolated,
    lla_forward_naive,
    lla_weights_naive,
)
from .baselines import (
    RecurrentState,
    global_linear_fit,
    la_recall_mse,
    local_linear_estimate,
    mesanet,
    nadaraya_watson_estimate,
    softmax_attention,
    vanilla_la,
)
from .cg import CGConfig, CGConvergenceWarning, CGResult, cg_solve, sigma_matvec
from .datagen import PiecewiseLinearTask, SequenceSample, gen_iid_regression, gen_sequence
from .estimators import GlobalLinearRegressor, LocalLinearRegressor, NadarayaWatsonRegressor
from .primitives import CenteredStats, accumulate_stats, kernel_logits, kernel_weights, relmm

__version__ = "0.1.0"
