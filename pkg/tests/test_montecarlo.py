import math

import mpmath
import numpy as np
import pytest
from scipy import stats

from chshsim.errors import DegeneracyError, DomainError
from chshsim.model import TSIRELSON, AngleSet, ChannelParams, MuConvention, SourceParams
from chshsim.montecarlo import (
    AlphaBand,
    CountRecord,
    alpha_band,
    chi2_quantile,
    chsh_from_counts,
    correlation_with_error,
    fit_alpha,
    run_chsh_experiment,
    run_experiment,
    sample_patterns,
    window_count,
)
from chshsim.oracle import SquashedCounts, outcome_distribution, squash

T_INT = 3e-9


def pairwise_record(counts, phi=(0.0, 22.5), t_acq=1.0, singles=None):
    if singles is None:
        singles = (math.ceil(sum(counts)),) * 2
    return CountRecord(
        phi_a=phi[0], phi_b=phi[1], t_acq=t_acq, t_int=T_INT, pairwise=SquashedCounts(*counts),
        singles_a=singles[0], singles_b=singles[1],
    )


# --- records ------------------------------------------------------------------------


def test_window_count_exact_multiples():
    assert window_count(1e6 * T_INT, T_INT) == 1_000_000
    assert window_count(1.0, T_INT) == 333_333_333
    assert window_count(2.5 * T_INT, T_INT) == 2


def test_record_validation():
    counts = np.zeros(16, dtype=int)
    counts[0] = 10
    r = CountRecord(0, 0, 10 * T_INT, T_INT, pattern_counts=counts)
    assert r.windows == 10 and r.singles_a == 0 and not r.lossy
    with pytest.raises(DomainError):
        CountRecord(0, 0, 11 * T_INT, T_INT, pattern_counts=counts)
    with pytest.raises(DomainError):
        CountRecord(0, 0, 10 * T_INT, T_INT, pattern_counts=counts, singles_a=3)
    with pytest.raises(DomainError):
        CountRecord(0, 0, 10 * T_INT, T_INT)
    bad = counts.copy()
    bad[0], bad[1] = 11, -1
    with pytest.raises(DomainError):
        CountRecord(0, 0, 10 * T_INT, T_INT, pattern_counts=bad)


def test_singles_from_patterns():
    counts = np.zeros(16, dtype=int)
    counts[0b1000] = 3  # Alice only
    counts[0b0001] = 4  # Bob only
    counts[0b0110] = 5  # both
    counts[0] = 8
    r = CountRecord(0, 0, 20 * T_INT, T_INT, pattern_counts=counts)
    assert (r.singles_a, r.singles_b) == (8, 9)
    assert r.coincidences() == 5 and r.coincidences("perp") == 5


# --- sampling -------------------------------------------------------------------------


def test_zero_gain_never_clicks():
    r = run_experiment(SourceParams(gamma=0.0), ChannelParams(0.3, 0.3), (0, 0), 1e-3, seed=1)
    assert r.pattern_counts[0] == r.windows and r.pattern_counts[1:].sum() == 0


def test_short_acquisition_rejected():
    with pytest.raises(DomainError):
        run_experiment(SourceParams.from_mu(0.1), ChannelParams(0.3, 0.3), (0, 0), 1e-9, seed=0)


def test_seeded_determinism_is_byte_exact():
    src, ch = SourceParams.from_mu(0.1), ChannelParams(0.2, 0.3)
    a = run_experiment(src, ch, (0, 22.5), 3e-3, seed=42, shards=3)
    b = run_experiment(src, ch, (0, 22.5), 3e-3, seed=42, shards=3)
    assert a.pattern_counts.tobytes() == b.pattern_counts.tobytes()
    c = run_experiment(src, ch, (0, 22.5), 3e-3, seed=43, shards=3)
    assert a.pattern_counts.tobytes() != c.pattern_counts.tobytes()


def test_shards_partition_windows():
    dist = outcome_distribution(SourceParams.from_mu(0.2), ChannelParams(0.5, 0.5), 0, 0)
    for shards in (1, 2, 7):
        assert sample_patterns(dist, 1001, seed=5, shards=shards).sum() == 1001
    with pytest.raises(DomainError):
        sample_patterns(dist, 10, seed=0, shards=0)


def _chi_square_p(counts, p):
    expected = p * counts.sum()
    keep = expected >= 5
    obs = np.append(counts[keep], counts[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    if exp[-1] == 0:
        obs, exp = obs[:-1], exp[:-1]
    return stats.chisquare(obs, exp).pvalue


def test_frequencies_match_distribution():
    dist = outcome_distribution(SourceParams.from_mu(0.1), ChannelParams(0.1, 0.1), 0, 22.5)
    pvals = [_chi_square_p(sample_patterns(dist, 1_000_000, seed=s), dist.p) for s in range(100)]
    assert np.mean(np.array(pvals) > 1e-3) >= 0.99


def test_multinomial_variance():
    dist = outcome_distribution(SourceParams.from_mu(0.3), ChannelParams(0.5, 0.5), 0, 22.5)
    n, reps = 1_000_000, 400
    samples = np.array([sample_patterns(dist, n, seed=s) for s in range(reps)], dtype=float)
    var = samples.var(axis=0, ddof=1)
    expected = n * dist.p * (1 - dist.p)
    significant = expected > 50
    # Standard error of a sample variance of near-normal data.
    se = expected * math.sqrt(2 / (reps - 1))
    assert np.all(np.abs(var - expected)[significant] <= 4 * se[significant])


def test_published_count_rates():
    # Channel and mu inferred from the one-second low-power counts.
    src = SourceParams.from_mu(4.9546e-4, mu_convention=MuConvention.TOTAL_PAIRS)
    ch = ChannelParams(0.12544, 0.097698)
    r = run_experiment(src, ch, (0, 0), 1.0, seed=2024, shards=4)
    for observed, expected in [(r.singles_a, 20717), (r.singles_b, 16135), (r.coincidences("par"), 2024)]:
        assert abs(observed - expected) <= 5 * math.sqrt(expected)


# --- CHSH from counts ---------------------------------------------------------------------


def test_noiseless_counts_reach_tsirelson():
    src, ch = SourceParams.from_mu(1e-9), ChannelParams(0.4, 0.6)
    records = []
    for phi in AngleSet().settings():
        c = squash(outcome_distribution(src, ch, *phi)).scaled(1e15)
        records.append(pairwise_record((c.n_pp, c.n_pm, c.n_mp, c.n_mm), phi))
    assert chsh_from_counts(records).s == pytest.approx(TSIRELSON, abs=1e-6)


@pytest.mark.parametrize(
    "signs, s", [((1, -1, 1, 1), 4), ((1, 1, 1, 1), 2), ((1, 1, -1, 1), 0), ((-1, 1, -1, 1), 2)]
)
def test_extremal_correlations(signs, s):
    records = [
        pairwise_record((50, 0, 0, 50) if e > 0 else (0, 50, 50, 0), phi)
        for e, phi in zip(signs, AngleSet().settings())
    ]
    report = chsh_from_counts(records)
    assert report.e_values == tuple(float(e) for e in signs)
    assert report.s == s and report.delta_s == 0


def test_correlation_error_propagation():
    e, d = correlation_with_error(SquashedCounts(30, 10, 5, 55))
    n_par, n_perp = 85, 15
    assert e == pytest.approx((n_par - n_perp) / 100)
    # Poisson bins: dE^2 = (2 N_perp/N^2)^2 N_par + (2 N_par/N^2)^2 N_perp
    expected = math.sqrt((2 * n_perp / 100**2) ** 2 * n_par + (2 * n_par / 100**2) ** 2 * n_perp)
    assert d == pytest.approx(expected, rel=1e-14)
    assert correlation_with_error(SquashedCounts(30, 10, 5, 55), alpha=2)[1] == pytest.approx(2 * d)


def test_zero_coincidences_is_degenerate():
    records = [pairwise_record((0, 0, 0, 0), phi) for phi in AngleSet().settings()]
    with pytest.raises(DegeneracyError):
        chsh_from_counts(records)


def test_missing_setting():
    records = [pairwise_record((1, 0, 0, 1), (0, 22.5))] * 4
    with pytest.raises(DomainError):
        chsh_from_counts(records)


def test_run_chsh_experiment_close_to_model():
    from chshsim.model import chsh

    src, ch = SourceParams.from_mu(0.05), ChannelParams(0.3, 0.3)
    records = run_chsh_experiment(src, ch, t_acq=3e-3, seed=9)
    emp = chsh_from_counts(records)
    assert abs(emp.s - chsh(src, ch).s) <= 4 * emp.delta_s


# --- alpha ----------------------------------------------------------------------------------


def test_fit_alpha_poisson_regime():
    dist = outcome_distribution(SourceParams.from_mu(0.01), ChannelParams(0.1, 0.1), 0, 0)
    src = SourceParams.from_mu(0.01)
    reps = [
        run_experiment(src, ChannelParams(0.1, 0.1), (0, 0), 3e-3, seed=s, dist=dist)
        for s in range(100)
    ]
    assert fit_alpha(reps) == pytest.approx(1.0, abs=0.1)


def test_fit_alpha_constant_counts():
    reps = [pairwise_record((40, 1, 1, 40))] * 6
    assert fit_alpha(reps) == 0.0


@pytest.mark.parametrize("k", [2.0, 4.0, 9.0])
def test_fit_alpha_overdispersion(k):
    rng = np.random.default_rng(int(k))
    mean, n = 5000.0, 400
    # Negative binomial with variance k * mean.
    p = 1 / k
    r = mean * p / (1 - p)
    draws = rng.negative_binomial(r, p, size=n)
    reps = [pairwise_record((int(c), 0, 0, 0)) for c in draws]
    assert fit_alpha(reps) == pytest.approx(math.sqrt(k), rel=0.1)


def test_fit_alpha_errors():
    with pytest.raises(DomainError):
        fit_alpha([pairwise_record((1, 0, 0, 1))] * 4)
    with pytest.raises(DegeneracyError):
        fit_alpha([pairwise_record((0, 0, 0, 0))] * 5)
    with pytest.raises(DomainError):
        pairwise_record((1, 0, 0, 1)).coincidences("diagonal")


def _chi_quantile_mp(p, dof):
    with mpmath.workdps(30):
        half = mpmath.findroot(
            lambda x: mpmath.gammainc(mpmath.mpf(dof) / 2, 0, x, regularized=True) - p,
            (mpmath.mpf("1e-6"), mpmath.mpf(100)), solver="illinois",
        )
        return float(mpmath.sqrt(2 * half))


def test_alpha_band_values():
    band = alpha_band(0.90, 4)
    assert band.alpha_low == pytest.approx(2 / _chi_quantile_mp(0.975, 4), rel=1e-10)
    assert band.alpha_high == pytest.approx(2 / _chi_quantile_mp(0.025, 4), rel=1e-10)
    assert chi2_quantile(0.975, 4) == pytest.approx(11.1433, abs=1e-4)
    assert chi2_quantile(0.025, 4) == pytest.approx(0.4844, abs=1e-4)
    assert band.contains(1.0) and not band.contains(3.0)


def test_alpha_band_widens_with_level():
    widths = [alpha_band(level).alpha_high - alpha_band(level).alpha_low for level in (0.5, 0.8, 0.9, 0.99)]
    assert np.all(np.diff(widths) > 0)


def test_alpha_band_concentrates_with_dof():
    # Rescaled by sqrt(dof), the bounds bracket 2 ever more tightly.
    spread = []
    for dof in (4, 25, 100):
        band = alpha_band(0.9, dof)
        spread.append((band.alpha_high - band.alpha_low) * math.sqrt(dof) / 2)
    assert spread[0] > spread[1] > spread[2]
    assert alpha_band(0.9, 100).alpha_high * 10 / 2 == pytest.approx(1.0, abs=0.25)


@pytest.mark.parametrize("level, dof", [(0.0, 4), (1.0, 4), (-0.2, 4), (0.9, 0)])
def test_alpha_band_domain(level, dof):
    with pytest.raises(DomainError):
        alpha_band(level, dof)


def test_alpha_band_invariant():
    with pytest.raises(DomainError):
        AlphaBand(1.2, 2.0)


def test_chi2_quantile_matches_scipy():
    for p in (1e-6, 0.025, 0.5, 0.975, 1 - 1e-7):
        for dof in (1, 4, 17):
            assert chi2_quantile(p, dof) == pytest.approx(stats.chi2.ppf(p, dof), rel=1e-9)
