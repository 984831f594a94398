"""Survivor average causal effect estimation for cluster-randomized trials.

Survival-score (SSW) and principal-score (PSW) weighting estimators built on a
random-intercept logistic GLMM or a marginal logistic GLM, closed-form
cluster-robust sandwich variances, a cluster bootstrap, and a simulation
engine for Monte-Carlo performance studies.
"""

__version__ = "0.1.0"

from .data import (
    Cluster,
    ColumnMap,
    CrtDataset,
    DesignSpec,
    Individual,
    build_design,
    read_csv,
    validate_dataset,
    write_csv,
)
from .errors import (
    BootstrapInstabilityError,
    ConfigError,
    EstimationError,
    FitError,
    InputError,
    IntegrationError,
    RankError,
    SaceError,
    SeparationError,
    SingularMatrixError,
    StudyError,
    VarianceError,
)
from .estimators import SaceEstimate, VarianceConfig, estimate, estimate_all, estimate_psw, estimate_ssw
from .quadrature import AdaptiveCenter, GhRule, adaptive_integrate, cluster_integrals, find_center, gh_nodes
from .resampling import BootstrapConfig, cluster_bootstrap
from .simulation import (
    ScienceTable,
    SimScenario,
    StudyConfig,
    generate_science,
    icc_to_xi,
    randomize_observe,
    run_study,
    simulate_dataset,
    true_sace,
)
from .survival import (
    FitOptions,
    FittedSurvivalModel,
    ModelSpec,
    fit_glm,
    fit_glmm,
    fit_survival,
    loglik_glmm,
    predict_survival,
    score_glmm,
)
from .variance import ThetaVector, outer_matrix, m_psw, m_ssw, sandwich
