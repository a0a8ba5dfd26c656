"""Frequentist and Bayesian synthetic control on simplex weights."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    ConvergenceWarning,
    DegenerateError,
    EstimationError,
    ExperimentError,
    IngestError,
    InsufficientDataError,
    NumericalError,
    RankError,
    SamplerWarning,
    SolverError,
    SynthError,
)
from .panel import DesignPair, DesignSpec, Panel, build_design, load_panel, outcomes_design, write_panel  # noqa: E402
from .factor_lab import (  # noqa: E402
    FactorSpec,
    check_characterization,
    conditional_gaussian,
    conditional_variance,
    conditional_weights,
    predictor_convergence_experiment,
    simulate_grouped,
    simulate_single_factor,
)
from .freq import MleFit, SimplexWeights, SolverOptions, effects, fit_mle, solve_sc, wald_interval  # noqa: E402
from .bayes import BayesModelSpec, PosteriorDraws, SamplerConfig, sample, summarize  # noqa: E402
from .bvm import BvmConfig, kde, run_bvm, tv_distance, weight_recovery_report  # noqa: E402

__all__ = [name for name in dir() if not name.startswith("_")]
