"""Natural-gradient variational inference with mixture-of-Gaussians posteriors."""

from .distributions import (
    DiagGaussian,
    MixturePosterior,
    RngStream,
    gauss_entropy,
    gauss_log_pdf,
    gauss_sample,
    mog_curvature_diag,
    mog_log_pdf,
    mog_sample,
    mog_score,
    responsibilities,
)
from .estimators import (
    EstimatorReport,
    elbo_entropy_trick,
    elbo_naive,
    entropy_trick,
    score_function_grad,
    variance_bench,
)
from .models import (
    ConjugateGaussianModel,
    Dataset,
    LogisticModel,
    MinibatchSpec,
    MixtureTarget,
    TargetModel,
    load_idx,
    make_bimodal_target,
    make_conjugate_target,
    make_synthetic_classification,
)
from .natparams import (
    ExpectationParams,
    NaturalParams,
    from_expectation,
    from_natural,
    natgrad_check,
    to_expectation,
    to_natural,
)
from .optimizers import (
    OptimizerConfig,
    RunRecord,
    bbvi_step,
    fit,
    init_mixture,
    mog_ngvi_parallel_epoch,
    mog_ngvi_serial_epoch,
    ngvi_meanfield_step,
    vogn_step,
    von_step,
)
from .oracle import (
    QuadratureGrid,
    conjugate_posterior,
    finite_diff_grad,
    quad_elbo,
    quad_entropy,
    quad_expectation,
)

__version__ = "0.1.0"
