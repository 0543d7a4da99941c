"""Noise sampling, radonified stochastic integration, and mild SPDE solving
on finite-dimensional truncations of separable Hilbert spaces, with Monte
Carlo verification of every closed-form identity the theory provides."""

from .spaces import (
    TruncatedSpace,
    HVec,
    HSOperator,
    PSDOperator,
    MeasureSpec,
    CovarianceFamily,
    NotSymmetricError,
    DimensionMismatchError,
    hs_norm,
    psd_sqrt,
    seminorm_eval,
    weighted_hs_norm_sq,
    uniform_seminorm_bound,
)
from .noise import (
    LevyAtom,
    LevyMeasureSpec,
    GaussianSurrogate,
    TimeGrid,
    JumpList,
    ImpulsiveSpec,
    MVMSpec,
    NoisePathBundle,
    sample_wiener,
    sample_jumps,
    sample_bundle,
    sample_impulsive,
    compensated_poisson_integral,
    mvm_apply,
    second_moment_oracle,
    cylindrical_levy_covariance,
    sample_mvm_ensemble,
)
from .radon import (
    CylindricalMartingalePaths,
    RadonifiedPath,
    svd_factor,
    radonify,
    radonify_adjoint_check,
)
from .integrals import (
    PathPredicate,
    ALWAYS,
    NEVER,
    SimpleTerm,
    SimpleIntegrand,
    StepIntegrand,
    IntegralPath,
    PredictabilityError,
    StoppingTimeRule,
    integrate_simple,
    simple_integral_path,
    integrate_step,
    integrate_ensemble,
    lambda2_norm_sq,
    pathwise_lambda2_process,
    isometry_report,
    push_operator,
    restrict_integrand,
    stop_integral,
    split_independent,
    fubini_check,
    localize,
    combine_integrands,
)
from .verify import (
    Ensemble,
    TestReport,
    estimate_mean,
    estimate_second_moment,
    martingale_test,
    martingale_test_arrays,
    orthogonality_test,
    calibration_pass_rate,
)
from .spde import (
    SemigroupSpec,
    SPDEProblem,
    SolutionPath,
    semigroup_apply,
    mild_step_solve,
    solve_ensemble,
    picard_solve,
    contraction_constant,
    choose_beta,
    weak_residual,
    levy_patch_solve,
)

__version__ = "0.1.0"
