"""Closed-form CHSH model for multi-pair entangled sources under channel loss.

Correlations are assembled from the sixteen ``Q_j`` functions

    Q_j(theta) = ABCD / (ABCD + G^2 - G (AD + BC) cos^2 theta - G (AC + BD) sin^2 theta)

whose coefficients ``A, B`` (Alice) and ``C, D`` (Bob) are either 1 or
``1 - tau`` of the corresponding arm.  The correlation at basis-angle
difference ``theta`` is

    E(theta) = 2 (Q_6 - Q_7) / (Q_1 - Q_10 - Q_11 + Q_16)

and its Poisson-type uncertainty follows from ``dN = alpha sqrt(N)``.

Angles are given in degrees at every public entry point except the
low-level functions taking ``theta`` (radians), which mirror the formulas.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import DegeneracyError, DomainError, SingularityError

SQRT2 = math.sqrt(2.0)
TSIRELSON = 2.0 * SQRT2

# Below this G the correlation is replaced by its first-order limit -cos(2 theta).
SERIES_THRESHOLD = 1e-8
# |sum Q| below this (and G above the series threshold) is treated as degenerate.
DENOMINATOR_FLOOR = 1e-300


class GModel(str, enum.Enum):
    """Candidate mappings from nonlinear gain to the ``G`` of the Q-functions.

    ``TANH2_CHANNEL`` is ``tanh^2(gamma) (1 - tau_A)(1 - tau_B)``; it depends
    on the channel and is the mapping singled out by
    :func:`chshsim.oracle.identify_g`.
    """

    TANH2 = "tanh2"
    TANH = "tanh"
    SINH2 = "sinh2"
    TANH2_CHANNEL = "tanh2-channel"


class MuConvention(str, enum.Enum):
    """How ``mu = sinh^2(gamma)`` relates to the two pair-creating modes.

    PER_MODE_PAIR
        ``gamma`` is the squeezing of each of the two mode pairs
        (A_H, B_V) and (A_V, B_H); a window then holds ``2 mu`` pairs on
        average.
    TOTAL_PAIRS
        ``mu`` is the total mean pair number per window; each mode pair
        carries ``mu / 2``.
    """

    PER_MODE_PAIR = "per-mode-pair"
    TOTAL_PAIRS = "total-pairs"


DEFAULT_G_MODEL = GModel.TANH2_CHANNEL
DEFAULT_MU_CONVENTION = MuConvention.PER_MODE_PAIR


def pair_gain(gamma: float, convention: MuConvention | str) -> float:
    """Squeezing parameter of one mode pair implied by ``convention``."""
    convention = MuConvention(convention)
    if convention is MuConvention.PER_MODE_PAIR:
        return gamma
    return math.asinh(math.sinh(gamma) / SQRT2)


@dataclass(frozen=True)
class SourceParams:
    """Entangled-pair source seen during one coincidence window.

    Construct with :meth:`from_mu` or :meth:`from_gain`; ``mu`` is always
    derived from ``gamma`` so the two cannot drift apart.
    """

    gamma: float
    t_int: float = 3e-9
    g_model: GModel = DEFAULT_G_MODEL
    mu_convention: MuConvention = DEFAULT_MU_CONVENTION

    def __post_init__(self) -> None:
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise DomainError(f"gain must be finite and >= 0, got {self.gamma!r}")
        if not (self.t_int > 0 and math.isfinite(self.t_int)):
            raise DomainError(f"coincidence window must be > 0, got {self.t_int!r}")
        object.__setattr__(self, "g_model", GModel(self.g_model))
        object.__setattr__(self, "mu_convention", MuConvention(self.mu_convention))

    @classmethod
    def from_mu(cls, mu: float, **kwargs) -> "SourceParams":
        if not (mu >= 0 and math.isfinite(mu)):
            raise DomainError(f"mean photon number must be finite and >= 0, got {mu!r}")
        return cls(gamma=math.asinh(math.sqrt(mu)), **kwargs)

    @classmethod
    def from_gain(cls, gamma: float, **kwargs) -> "SourceParams":
        return cls(gamma=gamma, **kwargs)

    @property
    def mu(self) -> float:
        return math.sinh(self.gamma) ** 2

    @property
    def pair_gain(self) -> float:
        return pair_gain(self.gamma, self.mu_convention)

    def with_mu(self, mu: float) -> "SourceParams":
        return SourceParams.from_mu(
            mu, t_int=self.t_int, g_model=self.g_model, mu_convention=self.mu_convention
        )


def db_to_tau(loss_db: float) -> float:
    """Linear transmittance of a loss given in dB (sign ignored)."""
    if not math.isfinite(loss_db):
        raise DomainError(f"loss must be finite, got {loss_db!r}")
    return 10.0 ** (-abs(loss_db) / 10.0)


def tau_to_db(tau: float) -> float:
    """Signed loss in dB (``<= 0``), the inverse of :func:`db_to_tau`."""
    if not (tau > 0) or tau > 1 or not math.isfinite(tau):
        raise DomainError(f"transmittance must lie in (0, 1], got {tau!r}")
    return 10.0 * math.log10(tau)


@dataclass(frozen=True)
class ChannelParams:
    """Transmittances of the two distribution arms, each in (0, 1]."""

    tau_a: float
    tau_b: float

    def __post_init__(self) -> None:
        for name in ("tau_a", "tau_b"):
            tau = getattr(self, name)
            if not (0 < tau <= 1):
                raise DomainError(f"{name} must lie in (0, 1], got {tau!r}")

    @classmethod
    def from_db(cls, loss_a_db: float, loss_b_db: float) -> "ChannelParams":
        return cls(db_to_tau(loss_a_db), db_to_tau(loss_b_db))

    @property
    def loss_a_db(self) -> float:
        return tau_to_db(self.tau_a)

    @property
    def loss_b_db(self) -> float:
        return tau_to_db(self.tau_b)

    def swapped(self) -> "ChannelParams":
        return ChannelParams(self.tau_b, self.tau_a)


class QCoefficients(NamedTuple):
    a: float
    b: float
    c: float
    d: float


# Which of A, B, C, D carry the loss factor (1 - tau) in each Q_j.
_Q_LOSSY = {
    1: (0, 0, 0, 0),
    2: (1, 0, 0, 0),
    3: (0, 1, 0, 0),
    4: (0, 0, 1, 0),
    5: (0, 0, 0, 1),
    6: (1, 0, 1, 0),
    7: (1, 0, 0, 1),
    8: (0, 1, 1, 0),
    9: (0, 1, 0, 1),
    10: (1, 1, 0, 0),
    11: (0, 0, 1, 1),
    12: (1, 1, 1, 0),
    13: (1, 1, 0, 1),
    14: (1, 0, 1, 1),
    15: (0, 1, 1, 1),
    16: (1, 1, 1, 1),
}


def q_coefficients(j: int, channel: ChannelParams) -> QCoefficients:
    """Row ``j`` (1..16) of the loss-coefficient table."""
    try:
        mask = _Q_LOSSY[j]
    except (KeyError, TypeError):
        raise DomainError(f"Q index must be an integer in 1..16, got {j!r}") from None
    arm = (channel.tau_a, channel.tau_a, channel.tau_b, channel.tau_b)
    return QCoefficients(*(1.0 - t if lossy else 1.0 for lossy, t in zip(mask, arm)))


def _q_parts(j: int, theta: float, g: float, channel: ChannelParams):
    a, b, c, d = q_coefficients(j, channel)
    abcd = a * b * c * d
    cos2, sin2 = math.cos(theta) ** 2, math.sin(theta) ** 2
    excess = g * ((a * d + b * c) * cos2 + (a * c + b * d) * sin2) - g * g
    denominator = abcd - excess
    if not denominator > 0:
        raise SingularityError(j, theta, g, denominator)
    return abcd, excess, denominator


def q_function(j: int, theta: float, g: float, channel: ChannelParams) -> float:
    """Evaluate ``Q_j`` at basis-angle difference ``theta`` (radians)."""
    if not g >= 0:
        raise DomainError(f"G must be >= 0, got {g!r}")
    abcd, _, denominator = _q_parts(j, theta, g, channel)
    return abcd / denominator


def _q_minus_one(j: int, theta: float, g: float, channel: ChannelParams) -> float:
    # Q - 1 without the cancellation of forming Q first; O(G) for small G.
    _, excess, denominator = _q_parts(j, theta, g, channel)
    return excess / denominator


def g_from_gain(
    gamma: float,
    g_model: GModel | str = DEFAULT_G_MODEL,
    channel: Optional[ChannelParams] = None,
) -> float:
    """Map a nonlinear gain onto the Q-function parameter ``G``."""
    if not gamma >= 0:
        raise DomainError(f"gain must be >= 0, got {gamma!r}")
    g_model = GModel(g_model)
    if g_model is GModel.TANH2:
        return math.tanh(gamma) ** 2
    if g_model is GModel.TANH:
        return math.tanh(gamma)
    if g_model is GModel.SINH2:
        return math.sinh(gamma) ** 2
    if channel is None:
        raise DomainError(f"G model {g_model.value!r} needs the channel transmittances")
    return math.tanh(gamma) ** 2 * (1.0 - channel.tau_a) * (1.0 - channel.tau_b)


def source_g(source: SourceParams, channel: ChannelParams) -> float:
    return g_from_gain(source.pair_gain, source.g_model, channel)


def _use_series(g: float, source: SourceParams) -> bool:
    # The channel-dressed model can have tiny G at large gain when tau -> 1;
    # the series is only valid when the gain itself is small.
    return g < SERIES_THRESHOLD and math.tanh(source.pair_gain) ** 2 < SERIES_THRESHOLD


class _QSums(NamedTuple):
    numerator: float  # 2 (Q6 - Q7)
    total: float  # Q1 - Q10 - Q11 + Q16


def _q_sums(theta: float, g: float, channel: ChannelParams) -> _QSums:
    qm = {j: _q_minus_one(j, theta, g, channel) for j in (1, 6, 7, 10, 11, 16)}
    return _QSums(2.0 * (qm[6] - qm[7]), qm[1] - qm[10] - qm[11] + qm[16])


def correlation_series(theta: float) -> float:
    """Vanishing-brightness limit of :func:`correlation`."""
    return -math.cos(2.0 * theta)


def correlation(theta: float, source: SourceParams, channel: ChannelParams) -> float:
    """Correlation ``E(theta)`` from the Q-functions (radians in).

    The sign follows the Q-expression: ``E -> -cos(2 theta)`` as the
    brightness vanishes.
    """
    g = source_g(source, channel)
    if _use_series(g, source):
        return correlation_series(theta)
    sums = _q_sums(theta, g, channel)
    if abs(sums.total) < DENOMINATOR_FLOOR:
        raise DegeneracyError(
            f"coincidence sum {sums.total:.3e} vanishes at theta={theta:.6g}, G={g:.6g}"
        )
    return sums.numerator / sums.total


def delta_correlation(
    theta: float,
    source: SourceParams,
    channel: ChannelParams,
    alpha: float = 1.0,
    t_acq: float = 1.0,
) -> float:
    """Statistical uncertainty of :func:`correlation` for ``dN = alpha sqrt(N)``.

    Evaluates ``alpha sqrt(T_int [S^2 - 4 (Q6 - Q7)^2]) / (S^{3/2} sqrt(t_acq))``
    with ``S = Q16 - Q11 - Q10 + Q1``; ``t_acq`` is in seconds.
    """
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha!r}")
    if not t_acq > 0:
        raise DomainError(f"acquisition time must be > 0, got {t_acq!r}")
    g = source_g(source, channel)
    sums = _q_sums(theta, g, channel)
    if not sums.total > 0:
        raise DegeneracyError(f"coincidence sum {sums.total:.3e} <= 0 at G={g:.6g}")
    if _use_series(g, source):
        e = correlation_series(theta)
        spread = sums.total**2 * (1.0 - e * e)
    else:
        spread = (sums.total - sums.numerator) * (sums.total + sums.numerator)
    if spread < 0:
        if spread < -1e-12 * sums.total**2:
            raise DegeneracyError(f"|E| exceeds 1 at theta={theta:.6g}, G={g:.6g}")
        spread = 0.0
    return alpha * math.sqrt(source.t_int * spread) / (sums.total**1.5 * math.sqrt(t_acq))


def coincidence_total(theta: float, source: SourceParams, channel: ChannelParams) -> float:
    """``Q1 - Q10 - Q11 + Q16``; the coincidence weight entering ``N_tot``."""
    return _q_sums(theta, source_g(source, channel), channel).total


@dataclass(frozen=True)
class AngleSet:
    """Polarization-analyser angles in degrees."""

    phi_a1: float = 0.0
    phi_a2: float = 45.0
    phi_b1: float = 22.5
    phi_b2: float = 67.5

    @property
    def hwp(self) -> tuple[float, float, float, float]:
        """Half-wave-plate rotations realising the same bases."""
        return (self.phi_a1 / 2, self.phi_a2 / 2, self.phi_b1 / 2, self.phi_b2 / 2)

    def settings(self) -> list[tuple[float, float]]:
        """``(phi_A, phi_B)`` for E11, E12, E21, E22, in that order."""
        return [
            (self.phi_a1, self.phi_b1),
            (self.phi_a1, self.phi_b2),
            (self.phi_a2, self.phi_b1),
            (self.phi_a2, self.phi_b2),
        ]

    def shifted(self, delta: float) -> "AngleSet":
        return AngleSet(
            self.phi_a1 + delta, self.phi_a2 + delta, self.phi_b1 + delta, self.phi_b2 + delta
        )


def chsh_value(e: tuple[float, float, float, float]) -> float:
    e11, e12, e21, e22 = e
    return abs(e11 - e12 + e21 + e22)


def combine_delta_s(delta_e) -> float:
    # Variances add: every term enters with a plus sign.
    return math.sqrt(sum(float(d) ** 2 for d in delta_e))


@dataclass(frozen=True)
class ChshReport:
    e_values: tuple[float, float, float, float]
    delta_e: tuple[float, float, float, float]
    s: float
    delta_s: float
    fom: float = field(init=False)

    def __post_init__(self) -> None:
        fom = (self.s - 2.0) / self.delta_s if self.delta_s > 0 else math.copysign(
            math.inf, self.s - 2.0
        )
        object.__setattr__(self, "fom", fom)

    @classmethod
    def from_correlations(cls, e_values, delta_e) -> "ChshReport":
        e_values = tuple(float(e) for e in e_values)
        delta_e = tuple(float(d) for d in delta_e)
        return cls(e_values, delta_e, chsh_value(e_values), combine_delta_s(delta_e))

    def to_dict(self) -> dict:
        return {
            "e_values": list(self.e_values),
            "delta_e": list(self.delta_e),
            "s": self.s,
            "delta_s": self.delta_s,
            "fom": self.fom,
        }


def chsh(
    source: SourceParams,
    channel: ChannelParams,
    angles: AngleSet = AngleSet(),
    alpha: float = 1.0,
    t_acq: float = 1.0,
) -> ChshReport:
    """CHSH value, its uncertainty and ``(S - 2)/dS`` at the four settings."""
    e_values, delta_e = [], []
    for phi_a, phi_b in angles.settings():
        theta = math.radians(phi_a - phi_b)
        e_values.append(correlation(theta, source, channel))
        delta_e.append(delta_correlation(theta, source, channel, alpha, t_acq))
    return ChshReport.from_correlations(e_values, delta_e)


def poisson_reference(visibility: float, n_total: float) -> tuple[float, float]:
    """Single-photon-level reference ``(S, dS)`` for fringe visibility ``V``.

    ``S = 2 sqrt(2) V`` and ``dS = sqrt((2 - 2 V^2) / N_tot)``.
    """
    if not 0 <= visibility <= 1:
        raise DomainError(f"visibility must lie in [0, 1], got {visibility!r}")
    if not n_total > 0:
        raise DomainError(f"total counts must be > 0, got {n_total!r}")
    return TSIRELSON * visibility, math.sqrt((2.0 - 2.0 * visibility**2) / n_total)


def correlation_curve(thetas, source: SourceParams, channel: ChannelParams) -> np.ndarray:
    """:func:`correlation` over an array of angle differences (radians)."""
    return np.array([correlation(float(t), source, channel) for t in np.ravel(thetas)])
