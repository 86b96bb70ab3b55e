"""CHSH statistics for high-brightness entangled photon pairs under loss."""

from .errors import (
    ChshError,
    DegeneracyError,
    DomainError,
    NoViolationError,
    NumericalError,
    RegimeError,
    SingularityError,
    StateError,
)
from .model import (
    TSIRELSON,
    AngleSet,
    ChannelParams,
    ChshReport,
    GModel,
    MuConvention,
    QCoefficients,
    SourceParams,
    chsh,
    correlation,
    db_to_tau,
    delta_correlation,
    g_from_gain,
    poisson_reference,
    q_coefficients,
    q_function,
    tau_to_db,
)
from .oracle import (
    CovarianceState,
    OutcomeDistribution,
    SquashedCounts,
    apply_loss,
    apply_rotation,
    build_state,
    click_distribution,
    identify_g,
    oracle_correlation,
    squash,
)
from .montecarlo import AlphaBand, CountRecord, alpha_band, chsh_from_counts, fit_alpha, run_experiment
from .calibration import (
    CalibrationResult,
    PowerPoint,
    estimate_c_gamma,
    estimate_channel,
    mu_at_power,
    power_for_mu,
)
from .optimizer import Optimum, SweepResult, optimize_mu, sweep_mu

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
