"""Treatment-effect estimation for overidentified IV designs with binary
instruments: closed-form GMM with implied-weight diagnostics, weighted-Wald
estimation on researcher-chosen simplex weights, the variance frontier, MTE
weight targeting, and a calibrated simulation harness."""

from .compliance import (
    InstrumentJoint,
    TypeTable,
    alpha_matrix,
    composite_type_weights,
    empirical_joint,
    enumerate_monotone_types,
    prd_check,
    type_weights,
    wald_from_types,
)
from .data import CenteredDataset, Dataset, center, load_dataset, validate
from .errors import (
    CapacityError,
    DegeneratePolicyError,
    InfeasibleError,
    InputError,
    IvrtError,
    NumericalError,
    RelevanceError,
    SchemaError,
)
from .gmm import (
    DiagonalDiagnostics,
    EgmmResult,
    GmmResult,
    chi2_sf,
    constrained_variance,
    diagonal_diagnostics,
    egmm,
    gmm_estimate,
    j_test,
    penalty_derivative,
    targeting_matrix,
    tsls,
)
from .moments import GammaWald, MomentSummary, OmegaMatrix, gamma_wald, omega_at, summarize
from .mte import (
    PolicyPair,
    PropensityModel,
    WeightFn,
    composite_weight,
    empirical_propensity,
    gap_lipschitz,
    gap_lp,
    gmm_mte_estimand,
    hv_weight,
    propensity_model,
    prte_target,
    prte_weight,
    staircase_policy,
)
from .rt import (
    FrontierCurve,
    RtResult,
    csw_weights,
    efficiency_decomposition,
    ew_weights,
    rt_estimate,
    rt_stratified,
    variance_frontier,
)
from .sim import (
    LatentDgpSpec,
    McReport,
    PopulationTargets,
    StarDgpSpec,
    calibrate_sigma_tau,
    latent_sample,
    latent_targets,
    monte_carlo,
    star_sample,
    star_targets,
)

__version__ = "0.1.0"
