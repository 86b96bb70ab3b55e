"""Finite-statistics simulation of CHSH acquisitions and the alpha analysis.

An acquisition of length ``t_acq`` is ``floor(t_acq / T_int)`` independent
coincidence windows, each drawing one of the sixteen click patterns from
the oracle distribution.  Pattern counts are sampled as one multinomial
per shard; shards use Philox streams keyed by ``(seed, shard)`` so the
merged counts depend only on the seed and the shard count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special

from .errors import DegeneracyError, DomainError
from .model import AngleSet, ChannelParams, ChshReport, SourceParams, tau_to_db
from .oracle import OutcomeDistribution, SquashedCounts, outcome_distribution, pattern_bits, squash

RNG_ALGORITHM = "Philox4x64-10"

_ALICE_CLICK = np.array([any(pattern_bits(k)[:2]) for k in range(16)])
_BOB_CLICK = np.array([any(pattern_bits(k)[2:]) for k in range(16)])


def window_count(t_acq: float, t_int: float) -> int:
    """``floor(t_acq / t_int)``, tolerant of float round-off at exact multiples."""
    ratio = t_acq / t_int
    nearest = round(ratio)
    if abs(ratio - nearest) <= 1e-9 * max(1.0, ratio):
        return int(nearest)
    return int(math.floor(ratio))


@dataclass(eq=False)
class CountRecord:
    """Counts from one acquisition at analyser angles ``(phi_a, phi_b)`` in degrees.

    ``pattern_counts`` is the canonical form.  Records read from pairwise
    coincidence columns carry ``pairwise`` instead and are marked lossy.
    """

    phi_a: float
    phi_b: float
    t_acq: float
    t_int: float
    pattern_counts: Optional[np.ndarray] = None
    singles_a: Optional[int] = None
    singles_b: Optional[int] = None
    pairwise: Optional[SquashedCounts] = None
    power_mw: Optional[float] = None
    loss_db: Optional[float] = None
    windows: int = field(init=False)

    def __post_init__(self) -> None:
        if not self.t_int > 0:
            raise DomainError(f"coincidence window must be > 0, got {self.t_int!r}")
        if not self.t_acq >= self.t_int:
            raise DomainError(
                f"acquisition time {self.t_acq!r} s is shorter than the window {self.t_int!r} s"
            )
        self.windows = window_count(self.t_acq, self.t_int)
        if self.pattern_counts is not None:
            counts = np.asarray(self.pattern_counts)
            if counts.shape != (16,) or np.any(counts < 0):
                raise DomainError("pattern counts must be 16 nonnegative integers")
            self.pattern_counts = counts.astype(np.int64)
            if int(self.pattern_counts.sum()) != self.windows:
                raise DomainError(
                    f"pattern counts sum to {int(self.pattern_counts.sum())}, "
                    f"expected {self.windows} windows"
                )
            sa = int(self.pattern_counts[_ALICE_CLICK].sum())
            sb = int(self.pattern_counts[_BOB_CLICK].sum())
            if self.singles_a is None:
                self.singles_a = sa
            if self.singles_b is None:
                self.singles_b = sb
            if (self.singles_a, self.singles_b) != (sa, sb):
                raise DomainError("singles inconsistent with pattern counts")
        elif self.pairwise is None:
            raise DomainError("a count record needs pattern counts or pairwise coincidences")
        if self.singles_a is None or self.singles_b is None:
            raise DomainError("singles counts are required")
        if self.pairwise is not None:
            pw = self.pairwise
            if min(pw.n_pp, pw.n_pm, pw.n_mp, pw.n_mm) < 0:
                raise DomainError("coincidence counts must be nonnegative")
            if pw.total > min(self.singles_a, self.singles_b):
                raise DomainError("more coincidences than singles on one side")

    @property
    def lossy(self) -> bool:
        return self.pattern_counts is None

    @property
    def setting(self) -> tuple[float, float]:
        return (self.phi_a, self.phi_b)

    def squashed(self) -> SquashedCounts:
        if self.pattern_counts is not None:
            return squash(self.pattern_counts)
        return self.pairwise

    def coincidences(self, which: str = "total") -> float:
        c = self.squashed()
        try:
            return {"total": c.total, "par": c.n_par, "perp": c.n_perp}[which]
        except KeyError:
            raise DomainError(f"unknown coincidence bin {which!r}") from None


def shard_generator(seed: int, shard: int = 0) -> np.random.Generator:
    """Independent counter-based stream for ``(seed, shard)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(shard,))))


def _shard_sizes(windows: int, shards: int) -> list[int]:
    base, extra = divmod(windows, shards)
    return [base + (1 if k < extra else 0) for k in range(shards)]


def sample_patterns(
    dist: OutcomeDistribution, windows: int, seed: int, shards: int = 1
) -> np.ndarray:
    """Multinomial pattern counts over ``windows`` i.i.d. windows."""
    if shards < 1:
        raise DomainError("shard count must be >= 1")
    p = np.clip(dist.p, 0.0, None)
    p = p / p.sum()
    total = np.zeros(16, dtype=np.int64)
    for shard, n in enumerate(_shard_sizes(windows, shards)):
        total += shard_generator(seed, shard).multinomial(n, p)
    return total


def run_experiment(
    source: SourceParams,
    channel: ChannelParams,
    angles: tuple[float, float],
    t_acq: float,
    seed: int,
    shards: int = 1,
    dist: Optional[OutcomeDistribution] = None,
) -> CountRecord:
    """Simulate one acquisition at analyser angles ``(phi_A, phi_B)`` in degrees.

    ``dist`` may be passed to skip recomputing the oracle distribution when
    many replicates share a setting.
    """
    if not t_acq >= source.t_int:
        raise DomainError(
            f"acquisition time {t_acq!r} s is shorter than the window {source.t_int!r} s"
        )
    phi_a, phi_b = angles
    if dist is None:
        dist = outcome_distribution(source, channel, phi_a, phi_b)
    windows = window_count(t_acq, source.t_int)
    counts = sample_patterns(dist, windows, seed, shards)
    return CountRecord(
        phi_a=float(phi_a),
        phi_b=float(phi_b),
        t_acq=float(t_acq),
        t_int=source.t_int,
        pattern_counts=counts,
        loss_db=tau_to_db(channel.tau_a * channel.tau_b),
    )


def run_chsh_experiment(
    source: SourceParams,
    channel: ChannelParams,
    t_acq: float,
    seed: int,
    angles: AngleSet = AngleSet(),
    shards: int = 1,
) -> list[CountRecord]:
    """Four acquisitions, one per CHSH setting; setting ``k`` uses seed ``seed + k``."""
    return [
        run_experiment(source, channel, setting, t_acq, seed + k, shards)
        for k, setting in enumerate(angles.settings())
    ]


def _match_settings(records: Sequence[CountRecord], angles: AngleSet) -> list[CountRecord]:
    ordered = []
    for setting in angles.settings():
        found = [r for r in records if np.allclose(r.setting, setting, atol=1e-9)]
        if not found:
            raise DomainError(f"no record at setting (phi_A, phi_B) = {setting}")
        ordered.append(found[0])
    return ordered


def correlation_with_error(counts: SquashedCounts, alpha: float = 1.0) -> tuple[float, float]:
    """``E = (N_par - N_perp)/(N_par + N_perp)`` with ``dN = alpha sqrt(N)`` per bin."""
    n_par, n_perp = counts.n_par, counts.n_perp
    n = n_par + n_perp
    if not n > 0:
        raise DegeneracyError("no coincidences recorded at this setting")
    e = (n_par - n_perp) / n
    # dE/dN_par = 2 N_perp / N^2, dE/dN_perp = -2 N_par / N^2
    delta = alpha * 2.0 * math.sqrt(n_par * n_perp * n) / n**2
    return e, delta


def chsh_from_counts(
    records: Sequence[CountRecord], angles: AngleSet = AngleSet(), alpha: float = 1.0
) -> ChshReport:
    """Empirical CHSH report from the four records covering ``angles``."""
    e_values, delta_e = [], []
    for record in _match_settings(records, angles):
        e, d = correlation_with_error(record.squashed(), alpha)
        e_values.append(e)
        delta_e.append(d)
    return ChshReport.from_correlations(e_values, delta_e)


def fit_alpha(replicates: Sequence[CountRecord], which: str = "total") -> float:
    """Sample standard deviation of coincidences over the root of their mean."""
    if len(replicates) < 5:
        raise DomainError(f"need at least 5 replicates, got {len(replicates)}")
    counts = np.array([r.coincidences(which) for r in replicates], dtype=float)
    mean = counts.mean()
    if not mean > 0:
        raise DegeneracyError("mean coincidence count is zero")
    return float(counts.std(ddof=1) / math.sqrt(mean))


def chi2_quantile(p: float, dof: float) -> float:
    """Chi-square quantile by root-finding on the regularized lower incomplete gamma."""
    if not 0 < p < 1:
        raise DomainError(f"quantile level must lie in (0, 1), got {p!r}")
    if not dof > 0:
        raise DomainError(f"degrees of freedom must be > 0, got {dof!r}")

    def cdf_gap(x: float) -> float:
        return special.gammainc(dof / 2.0, x / 2.0) - p

    hi = max(1.0, dof)
    while cdf_gap(hi) < 0:
        hi *= 2.0
    return optimize.brentq(cdf_gap, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def chi_quantile(p: float, dof: float) -> float:
    return math.sqrt(chi2_quantile(p, dof))


@dataclass(frozen=True)
class AlphaBand:
    alpha_low: float
    alpha_high: float
    level: float = 0.90
    dof: int = 4

    def __post_init__(self) -> None:
        # The bounds scale as 2/sqrt(dof); rescaled, they must straddle 1.
        scale = math.sqrt(self.dof) / 2.0
        if not 0 < scale * self.alpha_low < 1 < scale * self.alpha_high:
            raise DomainError(
                f"band must straddle {1 / scale:g}, got ({self.alpha_low!r}, {self.alpha_high!r})"
            )

    def contains(self, alpha: float) -> bool:
        return self.alpha_low <= alpha <= self.alpha_high


def band_tail(level: float) -> float:
    """Lower quantile level used for a band labelled ``level``.

    ``(1 - level) / 4``: the 0.90 band uses the 0.025 and 0.975 quantiles.
    """
    return (1.0 - level) / 4.0


def alpha_band(level: float = 0.90, dof: int = 4) -> AlphaBand:
    """``(2 / chi_{1-t, dof}, 2 / chi_{t, dof})`` with ``t = band_tail(level)``."""
    if not 0 < level < 1:
        raise DomainError(f"level must lie in (0, 1), got {level!r}")
    if dof < 1:
        raise DomainError(f"degrees of freedom must be >= 1, got {dof!r}")
    tail = band_tail(level)
    return AlphaBand(2.0 / chi_quantile(1.0 - tail, dof), 2.0 / chi_quantile(tail, dof), level, dof)
