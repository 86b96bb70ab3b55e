"""Exact click statistics of the four-mode pair state via Gaussian covariances.

Mode order is ``A_H, A_V, B_H, B_V`` with quadratures interleaved
``(x_0, p_0, x_1, p_1, ...)`` and vacuum covariance ``I/2``.  After
:func:`apply_rotation` a party's two slots hold its ``+`` and ``-``
analyser outputs, so the detector order is ``A+, A-, B+, B-``.

The state is the polarization singlet generated by two independent
two-mode squeezers on (A_H, B_V) and (A_V, B_H).  The experiment
converts it to the ``phi+`` Bell state with a half-wave plate on Bob's
side, which is a fixed 90 degree offset of Bob's analyser; with that
offset the estimator ``(N_perp - N_par)/(N_perp + N_par)`` carries the
same sign as :func:`chshsim.model.correlation`.

Threshold-detector probabilities follow from vacuum probabilities of mode
subsets, ``P(no click on M) = det(sigma_M + I/2)^{-1/2}``, combined by
inclusion-exclusion over the sixteen click patterns.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DegeneracyError, DomainError, NumericalError, StateError
from .model import (
    DEFAULT_G_MODEL,
    DEFAULT_MU_CONVENTION,
    ChannelParams,
    GModel,
    MuConvention,
    SourceParams,
    correlation,
    pair_gain,
)

N_MODES = 4
A_PLUS, A_MINUS, B_PLUS, B_MINUS = range(N_MODES)
DETECTOR_NAMES = ("A+", "A-", "B+", "B-")
PHI_PLUS_OFFSET = math.pi / 2

SYMMETRY_ATOL = 1e-12
PHYSICALITY_ATOL = 1e-9
NORMALIZATION_ATOL = 1e-10


def symplectic_form(n_modes: int = N_MODES) -> np.ndarray:
    return np.kron(np.eye(n_modes), np.array([[0.0, 1.0], [-1.0, 0.0]]))


def _mode_slice(mode: int) -> slice:
    return slice(2 * mode, 2 * mode + 2)


@dataclass(frozen=True, eq=False)
class CovarianceState:
    """Zero-mean Gaussian state given by its 8x8 quadrature covariance.

    ``excess = matrix - I/2`` is carried alongside the covariance.  Rotations
    and pure loss act linearly on it, so small photon numbers keep their full
    relative precision instead of sitting on top of the vacuum 1/2.
    """

    matrix: np.ndarray
    excess: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=float)
        if m.shape != (2 * N_MODES, 2 * N_MODES):
            raise StateError(f"covariance must be 8x8, got shape {m.shape}")
        if not np.allclose(m, m.T, rtol=0, atol=SYMMETRY_ATOL):
            raise StateError("covariance is not symmetric")
        x = m - np.eye(2 * N_MODES) / 2.0 if self.excess is None else np.array(self.excess, dtype=float)
        if x.shape != m.shape:
            raise StateError("excess must match the covariance shape")
        m.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "excess", x)

    @classmethod
    def from_excess(cls, excess: np.ndarray) -> "CovarianceState":
        excess = np.asarray(excess, dtype=float)
        return cls(excess + np.eye(2 * N_MODES) / 2.0, excess)

    def symplectic_eigenvalues(self) -> np.ndarray:
        ev = np.linalg.eigvals(1j * symplectic_form() @ self.matrix)
        return np.sort(np.abs(ev.real))[::2]

    def is_physical(self, atol: float = PHYSICALITY_ATOL) -> bool:
        return bool(np.all(self.symplectic_eigenvalues() >= 0.5 - atol))

    def mode_block(self, mode: int) -> np.ndarray:
        s = _mode_slice(mode)
        return self.matrix[s, s]

    def mean_photon(self, mode: int) -> float:
        """``<n> = (tr sigma_mode - 1) / 2`` for a zero-mean mode."""
        s = _mode_slice(mode)
        return float(np.trace(self.excess[s, s])) / 2.0


def vacuum() -> CovarianceState:
    return CovarianceState(np.eye(2 * N_MODES) / 2.0)


def _two_mode_squeeze(excess: np.ndarray, i: int, j: int, r: float, sign: float) -> None:
    n, sh = math.sinh(r) ** 2, sign * math.sinh(2 * r) / 2.0
    z = np.diag([1.0, -1.0])
    excess[_mode_slice(i), _mode_slice(i)] = n * np.eye(2)
    excess[_mode_slice(j), _mode_slice(j)] = n * np.eye(2)
    excess[_mode_slice(i), _mode_slice(j)] = sh * z
    excess[_mode_slice(j), _mode_slice(i)] = sh * z


def build_state(
    gamma: float, mu_convention: MuConvention | str = DEFAULT_MU_CONVENTION
) -> CovarianceState:
    """Singlet-type multi-pair state for gain ``gamma``.

    Each of the pairs (A_H, B_V) and (A_V, B_H) is a two-mode squeezed
    vacuum with the per-pair gain implied by ``mu_convention``; the second
    pair enters with the opposite sign.
    """
    if not gamma >= 0:
        raise DomainError(f"gain must be >= 0, got {gamma!r}")
    r = pair_gain(gamma, mu_convention)
    excess = np.zeros((2 * N_MODES, 2 * N_MODES))
    _two_mode_squeeze(excess, 0, 3, r, +1.0)
    _two_mode_squeeze(excess, 1, 2, r, -1.0)
    return CovarianceState.from_excess(excess)


def rotation_symplectic(party: str, phi: float) -> np.ndarray:
    """Orthogonal symplectic map of a polarization analyser at angle ``phi``.

    The party's slots become ``a_+ = cos(phi) a_H + sin(phi) a_V`` and
    ``a_- = -sin(phi) a_H + cos(phi) a_V``.
    """
    if party not in ("A", "B"):
        raise DomainError(f"party must be 'A' or 'B', got {party!r}")
    c, s = math.cos(phi), math.sin(phi)
    block = np.kron(np.array([[c, s], [-s, c]]), np.eye(2))
    sym = np.eye(2 * N_MODES)
    lo = 0 if party == "A" else 4
    sym[lo : lo + 4, lo : lo + 4] = block
    return sym


def apply_rotation(state: CovarianceState, party: str, phi: float) -> CovarianceState:
    sym = rotation_symplectic(party, phi)
    return CovarianceState.from_excess(sym @ state.excess @ sym.T)


def apply_loss(state: CovarianceState, mode: int, tau: float) -> CovarianceState:
    """Pure-loss channel of transmittance ``tau`` on one mode."""
    if not 0 <= tau <= 1:
        raise DomainError(f"transmittance must lie in [0, 1], got {tau!r}")
    if mode not in range(N_MODES):
        raise DomainError(f"mode index must be in 0..3, got {mode!r}")
    scale = np.ones(2 * N_MODES)
    scale[_mode_slice(mode)] = math.sqrt(tau)
    # The injected vacuum noise exactly restores the I/2 part.
    return CovarianceState.from_excess(state.excess * np.outer(scale, scale))


def pattern_bits(index: int) -> tuple[int, int, int, int]:
    """Click bits ``(A+, A-, B+, B-)`` of a pattern index (A+ is the MSB)."""
    return tuple((index >> (3 - k)) & 1 for k in range(N_MODES))


def pattern_index(bits: Sequence[int]) -> int:
    return sum(int(b) << (3 - k) for k, b in enumerate(bits))


def pattern_label(index: int) -> str:
    return "".join(str(b) for b in pattern_bits(index))


@dataclass(frozen=True, eq=False)
class OutcomeDistribution:
    """Probabilities of the sixteen click patterns, indexed by :func:`pattern_index`."""

    p: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.p, dtype=float)
        if p.shape != (16,):
            raise DomainError(f"expected 16 pattern probabilities, got shape {p.shape}")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    def check(self, atol: float = NORMALIZATION_ATOL) -> None:
        if np.any(self.p < -atol) or np.any(self.p > 1 + atol):
            raise StateError("pattern probability outside [0, 1]")
        if abs(self.p.sum() - 1.0) > atol:
            raise StateError(f"pattern probabilities sum to {self.p.sum()!r}")

    @classmethod
    def from_patterns(cls, weights: dict[str, float]) -> "OutcomeDistribution":
        """Build from ``{"1010": w, ...}`` keyed by ``A+A-B+B-`` bit strings."""
        p = np.zeros(16)
        for label, w in weights.items():
            p[int(label, 2)] = w
        return cls(p)

    def total_variation(self, other: "OutcomeDistribution") -> float:
        return 0.5 * float(np.abs(self.p - other.p).sum())

    def click_probability(self, detector: int) -> float:
        return float(sum(self.p[k] for k in range(16) if pattern_bits(k)[detector]))


def _half_log_det(state: CovarianceState, modes: Iterable[int]) -> float:
    """``log det(sigma_M + I/2) / 2`` from the excess, accurate for tiny photon numbers."""
    idx = [q for m in sorted(modes) for q in (2 * m, 2 * m + 1)]
    if not idx:
        return 0.0
    ev = np.linalg.eigvalsh(state.excess[np.ix_(idx, idx)])
    if not np.all(ev > -1.0):
        raise StateError("non-physical covariance: det(sigma_M + I/2) <= 0")
    return 0.5 * float(np.sum(np.log1p(ev)))


def vacuum_probability(state: CovarianceState, modes: Iterable[int]) -> float:
    """Probability that none of ``modes`` registers a photon."""
    return math.exp(-_half_log_det(state, modes))


def click_distribution(state: CovarianceState) -> OutcomeDistribution:
    """Threshold-detector pattern probabilities of the four detection modes."""
    # vac[mask] - 1, kept as expm1 so that coincidences of order 1e-12 are
    # not lost against vacuum probabilities close to one.
    vac_m1 = {}
    for mask in range(16):
        modes = [m for m in range(N_MODES) if (mask >> (3 - m)) & 1]
        vac_m1[mask] = math.expm1(-_half_log_det(state, modes))
    p = np.zeros(16)
    for pattern in range(16):
        # Clicking set C, silent set N: sum over S subset of C of (-1)^|S| P(vac on N u S).
        # The alternating signs sum to zero for nonempty C, so the constant 1 drops out.
        silent = ~pattern & 0xF
        total = 1.0 if pattern == 0 else 0.0
        sub = pattern
        while True:
            total += (-1) ** bin(sub).count("1") * vac_m1[silent | sub]
            if sub == 0:
                break
            sub = (sub - 1) & pattern
        p[pattern] = total
    dist = OutcomeDistribution(p)
    dist.check()
    return dist


@dataclass(frozen=True)
class SquashedCounts:
    """Coincidence bins after squashing double clicks to a single outcome."""

    n_pp: float
    n_pm: float
    n_mp: float
    n_mm: float

    @property
    def n_par(self) -> float:
        return self.n_pp + self.n_mm

    @property
    def n_perp(self) -> float:
        return self.n_pm + self.n_mp

    @property
    def total(self) -> float:
        return self.n_par + self.n_perp

    def scaled(self, factor: float) -> "SquashedCounts":
        return SquashedCounts(*(factor * v for v in astuple_counts(self)))


def astuple_counts(c: SquashedCounts) -> tuple[float, float, float, float]:
    return (c.n_pp, c.n_pm, c.n_mp, c.n_mm)


def _side_weights(plus: int, minus: int) -> tuple[float, float]:
    if plus and minus:
        return 0.5, 0.5
    return float(plus), float(minus)


def squash_weights(index: int) -> tuple[float, float, float, float]:
    """Weights of one pattern on the ``(++, +-, -+, --)`` bins.

    A double click on one side is split evenly between that side's two
    outcomes; a side with no click produces no coincidence.
    """
    ap, am, bp, bm = pattern_bits(index)
    wa, wb = _side_weights(ap, am), _side_weights(bp, bm)
    return (wa[0] * wb[0], wa[0] * wb[1], wa[1] * wb[0], wa[1] * wb[1])


SQUASH_MATRIX = np.array([squash_weights(k) for k in range(16)])


def squash(dist: OutcomeDistribution | np.ndarray) -> SquashedCounts:
    """Fold pattern probabilities (or pattern counts) into the four bins."""
    values = dist.p if isinstance(dist, OutcomeDistribution) else np.asarray(dist, dtype=float)
    return SquashedCounts(*(float(v) for v in values @ SQUASH_MATRIX))


def detected_state(
    source: SourceParams,
    channel: ChannelParams,
    phi_a: float,
    phi_b: float,
    phi_plus: bool = True,
) -> CovarianceState:
    """State at the detectors for analyser angles in radians.

    Losses act after the analysers, ``tau_A`` on both Alice outputs and
    ``tau_B`` on both Bob outputs.
    """
    state = build_state(source.gamma, source.mu_convention)
    state = apply_rotation(state, "A", phi_a)
    state = apply_rotation(state, "B", phi_b + (PHI_PLUS_OFFSET if phi_plus else 0.0))
    for mode, tau in zip(range(N_MODES), (channel.tau_a, channel.tau_a, channel.tau_b, channel.tau_b)):
        state = apply_loss(state, mode, tau)
    return state


def outcome_distribution(
    source: SourceParams,
    channel: ChannelParams,
    phi_a_deg: float,
    phi_b_deg: float,
    phi_plus: bool = True,
) -> OutcomeDistribution:
    """Click-pattern probabilities for analyser angles given in degrees."""
    state = detected_state(
        source, channel, math.radians(phi_a_deg), math.radians(phi_b_deg), phi_plus
    )
    return click_distribution(state)


def correlation_from_counts(counts: SquashedCounts) -> float:
    """``(N_perp - N_par)/(N_perp + N_par)``, the sign of the Q-model correlation."""
    if not counts.total > 0:
        raise DegeneracyError("no coincidences: correlation undefined")
    return (counts.n_perp - counts.n_par) / counts.total


def oracle_correlation(
    gamma: float,
    channel: ChannelParams,
    theta: float,
    mu_convention: MuConvention | str = DEFAULT_MU_CONVENTION,
    phi_a: float = 0.0,
) -> float:
    """Exact correlation at basis-angle difference ``theta`` (radians).

    Alice's analyser sits at ``phi_a`` and Bob's at ``phi_a - theta``.
    """
    source = SourceParams(gamma=gamma, mu_convention=mu_convention)
    state = detected_state(source, channel, phi_a, phi_a - theta)
    return correlation_from_counts(squash(click_distribution(state)))


def oracle_chsh(
    source: SourceParams,
    channel: ChannelParams,
    angles=None,
    alpha: float = 1.0,
    t_acq: float = 1.0,
):
    """CHSH report computed entirely from exact oracle probabilities.

    The uncertainty uses ``dN = alpha sqrt(N)`` with ``N`` the expected
    squashed coincidences in ``t_acq / T_int`` windows.
    """
    from .model import AngleSet, ChshReport

    angles = angles or AngleSet()
    windows = t_acq / source.t_int
    e_values, delta_e = [], []
    for phi_a, phi_b in angles.settings():
        counts = squash(outcome_distribution(source, channel, phi_a, phi_b))
        e = correlation_from_counts(counts)
        n_tot = counts.total * windows
        e_values.append(e)
        delta_e.append(alpha * math.sqrt(max(1.0 - e * e, 0.0) / n_tot))
    return ChshReport.from_correlations(e_values, delta_e)


# --- G identification ---------------------------------------------------------

DEFAULT_GAMMA_GRID = tuple(np.linspace(0.05, 0.5, 10))
DEFAULT_TAU_GRID = (0.1, 0.5, 0.9)
DEFAULT_THETA_GRID = tuple(np.linspace(0.0, math.pi / 2, 16))
IDENTIFY_TOLERANCE = 1e-3
MAX_IDENTIFY_GAMMA = 0.6


@dataclass
class CandidateFit:
    name: str
    max_deviation: float
    passed: bool
    finite_max_deviation: float = 0.0
    singular_points: int = 0
    worst_point: Optional[dict] = None
    error: Optional[str] = None


@dataclass
class FitReport:
    selected: Optional[str]
    candidates: list[CandidateFit]
    tolerance: float
    grid: dict
    mismatch: bool
    degenerate: bool
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def identify_g(
    gamma_grid: Sequence[float] = DEFAULT_GAMMA_GRID,
    channel_grid: Optional[Sequence[ChannelParams]] = None,
    theta_grid: Sequence[float] = DEFAULT_THETA_GRID,
    candidates: Sequence[GModel | str] = tuple(GModel),
    tolerance: float = IDENTIFY_TOLERANCE,
    mu_convention: MuConvention | str = DEFAULT_MU_CONVENTION,
) -> FitReport:
    """Select the G mapping whose Q-model correlation matches the oracle.

    For every candidate the maximum ``|E_model - E_oracle|`` over the grid is
    recorded.  The candidate with the smallest deviation is selected if it is
    within ``tolerance``; otherwise the report flags a model mismatch.  More
    than one passing candidate marks the grid as degenerate.
    """
    gamma_grid = [float(g) for g in gamma_grid]
    theta_grid = [float(t) for t in theta_grid]
    if channel_grid is None:
        channel_grid = [ChannelParams(a, b) for a, b in itertools.product(DEFAULT_TAU_GRID, repeat=2)]
    channel_grid = list(channel_grid)
    if not (gamma_grid and channel_grid and theta_grid):
        raise DomainError("identification grids must be nonempty")
    if any(not (0 <= g <= MAX_IDENTIFY_GAMMA) for g in gamma_grid):
        raise DomainError(f"gain grid must lie in [0, {MAX_IDENTIFY_GAMMA}]")
    mu_convention = MuConvention(mu_convention)

    points = list(itertools.product(gamma_grid, channel_grid, theta_grid))
    reference = [oracle_correlation(g, ch, th, mu_convention) for g, ch, th in points]

    fits = []
    for cand in (GModel(c) for c in candidates):
        finite_worst, worst_point, error, singular = 0.0, None, None, 0
        for (g, ch, th), e_ref in zip(points, reference):
            source = SourceParams(gamma=g, g_model=cand, mu_convention=mu_convention)
            try:
                dev = abs(correlation(th, source, ch) - e_ref)
            except NumericalError as exc:
                singular += 1
                error = error or str(exc)
                continue
            if dev > finite_worst or worst_point is None:
                finite_worst = dev
                worst_point = {"gamma": g, "tau_a": ch.tau_a, "tau_b": ch.tau_b, "theta": th}
        worst = math.inf if singular else finite_worst
        fits.append(
            CandidateFit(
                cand.value, worst, worst <= tolerance, finite_worst, singular, worst_point, error
            )
        )

    passing = [f for f in fits if f.passed]
    # Ties go to the default model.
    passing.sort(key=lambda f: (f.max_deviation, f.name != DEFAULT_G_MODEL.value))
    selected = passing[0].name if passing else None
    degenerate = len(passing) > 1
    warnings = []
    if degenerate:
        warnings.append(
            f"{len(passing)} candidates ({', '.join(f.name for f in passing)}) agree with the "
            "oracle: the grid is in the low-gain regime where G cannot be identified"
        )
    if selected is None:
        warnings.append("no candidate reproduces the oracle within tolerance")
    grid = {
        "gamma": gamma_grid,
        "channels": [[ch.tau_a, ch.tau_b] for ch in channel_grid],
        "theta": theta_grid,
        "mu_convention": mu_convention.value,
    }
    return FitReport(selected, fits, tolerance, grid, selected is None, degenerate, warnings)
