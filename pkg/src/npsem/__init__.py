"""Nonparametric stochastic EM for state-space models.

The dynamics of ``x_t = m(x_{t-1}, z_t) + eta_t`` are learnt by local
linear regression on a catalog of smoothed analog pairs, while the noise
covariances are estimated by stochastic EM with a conditional particle
filter / backward simulation (or ensemble Kalman) smoother.
"""

from .core import (
    ObservationOperator,
    ObservationSequence,
    RandomStream,
    SsmSpec,
    Theta,
    simulate_ssm,
)
from .dynamics import (
    AffineModel,
    AffineModelParams,
    Lorenz63Config,
    Lorenz63Model,
    SinusModel,
    make_model,
)
from .errors import (
    ConfigError,
    DynamicsError,
    EmptySelection,
    InsufficientCatalog,
    IntegrationDiverged,
    NoObservations,
    NpsemError,
    SingularCovariance,
    UnsupportedGapPattern,
    WeightCollapse,
)
from .estimators import (
    EstimationAborted,
    EstimationRecord,
    EstimationTrace,
    NpSemConfig,
    complete_loglik,
    em_linear,
    intermediate_I_hat,
    m_step_gaussian,
    npsem,
    sem,
)
from .harness import (
    ALGORITHMS,
    ExperimentConfig,
    ReconstructionReport,
    coverage,
    initialize,
    load_config,
    reconstruct_validation,
    rmse,
    run_comparison,
    write_report,
)
from .llr import (
    Catalog,
    Exclusion,
    LlrConfig,
    LlrSurrogate,
    build_catalog,
    catalog_from_observations,
    cross_validate_k,
    knn_search,
    llr_predict,
    tricube_weight,
)
from .smoothers import (
    ParticleSystem,
    SmootherConfig,
    SmoothingEnsemble,
    backward_simulation,
    cpf,
    cpf_bs,
    enks,
    kalman_smoother,
    update_conditioning,
)

__version__ = "0.1.0"
