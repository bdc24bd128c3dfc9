"""volsup: suprema of stochastic volatility prices and their pathologies.

Simulation of rough (Volterra) volatility models, Monte Carlo checks of
explicit bounds on the expected running maximum of the price, and a suite of
martingales whose supremum fails to be integrable.
"""

__version__ = "0.1.0"

# Import key classes for convenience
from .config import Config
from .errors import (
    ConfigError,
    DomainError,
    InputError,
    NumericError,
    UsageError,
    VolsupError,
)
from .experiment import ExperimentConfig, RunManifest, build_config, run_experiment
from .path_types import PathBatch, SamplePath, TimeGrid
from .pathology import (
    CSequence,
    QuantileModel,
    c_sequence_from_tails,
    dg_martingale_identity,
    dg_path,
    hl_maximal,
    inverse_bessel_paths,
    sample_level,
    sample_stopped_construction,
    stein_check,
    stopped_construction_report,
)
from .simulation_engine import RunOptions, SimulationParams, StreamTag
from .sup_estimators import (
    BoundReport,
    MCEstimate,
    TailSumReport,
    Verdict,
    doob_l1_check,
    estimate_sup,
    rbergomi_sup_bound,
    reverse_l1_check,
    share_measure_check,
    tail_sums,
)
from .sv_models import (
    AffineVolterraParams,
    GaussianDriver,
    RoughBergomiParams,
    rbergomi_variance,
    rl_covariance,
    sample_driver,
    simulate_affine,
    simulate_price,
    simulate_tilde_y,
)
from .volterra_kernel import (
    DriftSpec,
    PowerLawKernel,
    QuadWeights,
    continuity_report,
    euler_svie,
    kernel_eval,
    kernel_l1,
    quad_weights,
    solve_pathwise,
)

__all__ = [
    "__version__",
    "Config",
    # Errors
    "VolsupError",
    "UsageError",
    "ConfigError",
    "DomainError",
    "InputError",
    "NumericError",
    # Paths and simulation
    "TimeGrid",
    "SamplePath",
    "PathBatch",
    "RunOptions",
    "SimulationParams",
    "StreamTag",
    # Volterra kernels
    "PowerLawKernel",
    "QuadWeights",
    "DriftSpec",
    "kernel_eval",
    "kernel_l1",
    "continuity_report",
    "quad_weights",
    "solve_pathwise",
    "euler_svie",
    # Models
    "RoughBergomiParams",
    "AffineVolterraParams",
    "GaussianDriver",
    "rl_covariance",
    "sample_driver",
    "rbergomi_variance",
    "simulate_price",
    "simulate_tilde_y",
    "simulate_affine",
    # Estimators
    "MCEstimate",
    "BoundReport",
    "TailSumReport",
    "Verdict",
    "estimate_sup",
    "doob_l1_check",
    "rbergomi_sup_bound",
    "share_measure_check",
    "reverse_l1_check",
    "tail_sums",
    # Pathologies
    "QuantileModel",
    "CSequence",
    "hl_maximal",
    "stein_check",
    "dg_path",
    "dg_martingale_identity",
    "inverse_bessel_paths",
    "c_sequence_from_tails",
    "sample_level",
    "stopped_construction_report",
    "sample_stopped_construction",
    # Experiments
    "ExperimentConfig",
    "RunManifest",
    "build_config",
    "run_experiment",
]
