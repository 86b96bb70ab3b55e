import math
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chshsim.calibration import (
    CalibrationResult,
    LossyInputWarning,
    PowerPoint,
    estimate_c_gamma,
    estimate_channel,
    format_counts_csv,
    mu_at_power,
    parse_counts_csv,
    power_for_mu,
    power_points,
    read_counts_csv,
    write_counts_csv,
)
from chshsim.errors import DegeneracyError, DomainError, RegimeError
from chshsim.model import ChannelParams, MuConvention, SourceParams, db_to_tau
from chshsim.montecarlo import CountRecord, run_experiment
from chshsim.oracle import SquashedCounts, outcome_distribution

FIXTURE = Path(__file__).parent / "fixtures" / "low_power_counts.csv"
T_INT = 3e-9


def record(n_a, n_b, n_par, n_perp=0, t_acq=1.0, t_int=T_INT, power=None):
    half_par, half_perp = n_par / 2, n_perp / 2
    return CountRecord(
        phi_a=0.0, phi_b=0.0, t_acq=t_acq, t_int=t_int,
        pairwise=SquashedCounts(half_par, half_perp, half_perp, half_par),
        singles_a=n_a, singles_b=n_b, power_mw=power,
    )


def exact_point(power, c_gamma, tau_a, tau_b, t_int=T_INT):
    # Noise-free first-order rates for a pair source of mean number mu per window.
    mu = math.sinh(c_gamma * math.sqrt(power)) ** 2
    n_a, n_b = mu * tau_a / t_int, mu * tau_b / t_int
    n_par = mu * tau_a * tau_b / t_int
    return PowerPoint(power, record(n_a, n_b, n_par, t_int=t_int))


# --- estimate_channel --------------------------------------------------------------------


def test_published_counts():
    est = estimate_channel(record(20717, 16135, 2024))
    assert est.tau_a == pytest.approx(0.1254, abs=1e-4)
    assert est.tau_b == pytest.approx(0.0977, abs=1e-4)
    assert est.mu == pytest.approx(4.95e-4, rel=2e-3)
    assert est.perp_ratio == 0


def test_symmetric_toy_is_exact():
    tau_a, tau_b, mu = estimate_channel(record(1000, 1000, 100), t_int=1e-9)
    assert (tau_a, tau_b) == (0.1, 0.1)
    assert mu == pytest.approx(1e-5, rel=1e-15)


@given(
    n_a=st.floats(1.0, 1e7), n_b=st.floats(1.0, 1e7), frac=st.floats(1e-3, 1.0),
    t_int=st.floats(1e-10, 1e-7),
)
def test_mean_number_identity(n_a, n_b, frac, t_int):
    n_par = frac * min(n_a, n_b)
    est = estimate_channel(record(n_a, n_b, n_par), t_int=t_int)
    rhs = n_a / (2 * est.tau_a) + n_b / (2 * est.tau_b)
    assert est.mu / t_int == pytest.approx(rhs, rel=1e-12)


def test_regime_gate():
    with pytest.raises(RegimeError):
        estimate_channel(record(1000, 1000, 100, n_perp=3))
    est = estimate_channel(record(1000, 1000, 100, n_perp=3), threshold=0.05)
    assert est.perp_ratio == pytest.approx(0.03)


def test_zero_coincidences():
    with pytest.raises(DegeneracyError):
        estimate_channel(record(1000, 1000, 0))


def test_rates_use_acquisition_time():
    one = estimate_channel(record(2000, 2000, 200, t_acq=2.0))
    assert one.mu == pytest.approx(estimate_channel(record(1000, 1000, 100)).mu)


def test_recovery_from_sampled_counts():
    mu, tau_a, tau_b = 0.005, 0.5, 0.4
    src = SourceParams.from_mu(mu, mu_convention=MuConvention.TOTAL_PAIRS)
    ch = ChannelParams(tau_a, tau_b)
    dist = outcome_distribution(src, ch, 0, 0)
    hits = 0
    for seed in range(50):
        r = run_experiment(src, ch, (0, 0), 1e7 * T_INT, seed=seed, dist=dist)
        est = estimate_channel(r)
        hits += all(
            abs(got / want - 1) <= 0.02 for got, want in ((est.tau_a, tau_a), (est.tau_b, tau_b), (est.mu, mu))
        )
    assert hits / 50 >= 0.95


# --- C_gamma ------------------------------------------------------------------------------


def test_single_point_c_gamma():
    point = PowerPoint(0.226, record(20717, 16135, 2024))
    with pytest.raises(DomainError):
        estimate_c_gamma([point])
    result = estimate_c_gamma([point], min_points=1)
    assert result.c_gamma == pytest.approx(math.asinh(math.sqrt(4.95e-4)) / math.sqrt(0.226), rel=2e-3)
    assert result.c_gamma == pytest.approx(0.0468, abs=1e-4)


def test_noiseless_recovery():
    powers = [0.1, 0.3, 0.6, 1.0, 1.5, 2.0]
    result = estimate_c_gamma([exact_point(p, 0.0469, 0.1, 0.1202) for p in powers])
    assert result.c_gamma == pytest.approx(0.0469, rel=1e-10)
    assert result.tau_a == pytest.approx(0.1, rel=1e-10)
    assert result.tau_b == pytest.approx(0.1202, rel=1e-10)
    assert np.allclose(result.residuals, 0, atol=1e-12)
    assert result.powers == tuple(powers)


def test_noisy_recovery():
    c_gamma, channel = 0.0469, ChannelParams(0.1, 0.1202)
    points = []
    for k, power in enumerate((0.1, 0.5, 1.0, 1.5, 2.0)):
        src = SourceParams.from_mu(mu_at_power(power, c_gamma), mu_convention=MuConvention.TOTAL_PAIRS)
        points.append(PowerPoint(power, run_experiment(src, channel, (0, 0), 1.0, seed=100 + k)))
    result = estimate_c_gamma(points)
    assert result.c_gamma == pytest.approx(c_gamma, rel=0.05)


def test_gate_excludes_points():
    good = [exact_point(p, 0.0469, 0.2, 0.2) for p in (0.5, 1.0)]
    bad = PowerPoint(9.0, record(1e5, 1e5, 1e4, n_perp=1e3))
    result = estimate_c_gamma(good + [bad])
    assert result.excluded == (9.0,)
    assert result.c_gamma == pytest.approx(0.0469, rel=1e-10)
    with pytest.raises(DomainError):
        estimate_c_gamma(good[:1] + [bad])
    with pytest.raises(DomainError):
        estimate_c_gamma(good, min_points=0)


def test_result_invariants():
    with pytest.raises(DegeneracyError):
        CalibrationResult(1.2, 0.1, 0.05, ())
    with pytest.raises(DegeneracyError):
        CalibrationResult(0.1, 0.1, 0.0, ())
    with pytest.raises(DomainError):
        PowerPoint(0.0, record(1, 1, 1))


def test_result_to_dict():
    result = estimate_c_gamma([exact_point(p, 0.05, 0.1, 0.1) for p in (1.0, 2.0)])
    d = result.to_dict()
    assert d["loss_a_db"] == pytest.approx(-10.0)
    assert [p["power_mw"] for p in d["points"]] == [1.0, 2.0]


# --- mu(P) ------------------------------------------------------------------------------


def test_mu_at_power_examples():
    assert mu_at_power(0.0, 0.0469) == 0.0
    assert mu_at_power(14.0, 0.0469) == pytest.approx(0.0311, abs=1e-4)
    # The quoted 11.6 mW is loosely rounded; the exact inverse is 11.719.
    assert power_for_mu(0.026, 0.0469) == pytest.approx(11.7192, abs=1e-4)
    assert power_for_mu(0.026, 0.0469) == pytest.approx(11.6, rel=0.015)


@given(st.floats(0.0, 100.0), st.floats(1e-3, 10.0))
def test_mu_at_power_monotone_and_invertible(power, delta):
    assert mu_at_power(power + delta, 0.0469) > mu_at_power(power, 0.0469)
    if power > 1e-6:
        assert power_for_mu(mu_at_power(power, 0.0469), 0.0469) == pytest.approx(power, rel=1e-9)


@pytest.mark.parametrize("args", [(-1.0, 0.05), (1.0, 0.0), (1.0, -0.1)])
def test_mu_at_power_domain(args):
    with pytest.raises(DomainError):
        mu_at_power(*args)


# --- CSV ----------------------------------------------------------------------------------


def test_fixture_is_read_with_lossy_warning():
    with pytest.warns(LossyInputWarning):
        records = read_counts_csv(FIXTURE, T_INT)
    (r,) = records
    assert r.lossy and r.power_mw == 0.226 and r.loss_db == -19.03
    assert (r.singles_a, r.singles_b, r.coincidences("par")) == (20717, 16135, 2024)
    assert db_to_tau(r.loss_db) == pytest.approx(0.0125, abs=1e-4)


def test_pattern_round_trip(tmp_path):
    src, ch = SourceParams.from_mu(0.05), ChannelParams(0.3, 0.4)
    records = [
        run_experiment(src, ch, phi, 1e-3, seed=k) for k, phi in enumerate([(0, 22.5), (45, 67.5)])
    ]
    path = write_counts_csv(records, tmp_path / "counts.csv", comments=["seed 0", "two\nlines"])
    text = path.read_text()
    assert text.startswith("# seed 0\n# two\n# lines\n")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        back = read_counts_csv(path, T_INT)
    for a, b in zip(records, back):
        assert np.array_equal(a.pattern_counts, b.pattern_counts)
        assert (a.phi_a, a.phi_b, a.t_acq) == (b.phi_a, b.phi_b, b.t_acq)
        assert b.power_mw is None
    assert format_counts_csv(back, ["seed 0", "two\nlines"]) == text


def test_pairwise_round_trip():
    with pytest.warns(LossyInputWarning):
        (r,) = parse_counts_csv(FIXTURE.read_text(), T_INT)
    with pytest.warns(LossyInputWarning):
        (again,) = parse_counts_csv(format_counts_csv([r]), T_INT)
    assert again.squashed() == r.squashed()


def test_power_points_need_power():
    r = record(10, 10, 1)
    with pytest.raises(DomainError):
        power_points([r])


HEADER = "power_mw,loss_db,phi_a_deg,phi_b_deg,t_acq_s,n_a,n_b,n_pp,n_pm,n_mp,n_mm\n"


@pytest.mark.parametrize(
    "text",
    [
        "",
        "# only a comment\n",
        HEADER,
        "power_mw,loss_db,phi_a_deg,phi_b_deg,t_acq_s,n_a\n1,0,0,0,1,5\n",
        "power_mw,loss_db,phi_a_deg,phi_b_deg,t_acq_s,n_a,n_b\n1,0,0,0,1,5,5\n",
        HEADER + "1,0,0,0,1,20,20,1,0,0\n",
        HEADER + "1,0,0,0,1,20,20,x,0,0,1\n",
        HEADER + "1,0,0,0,1,20,20,1.5,0,0,1\n",
        HEADER + "1,0,0,0,1,-20,20,1,0,0,1\n",
        HEADER + "1,0,0,0,nan,20,20,1,0,0,1\n",
        HEADER + "1,0,0,0,1,20,20,30,0,0,1\n",
    ],
)
def test_malformed_csv(text):
    with pytest.raises(DomainError), warnings.catch_warnings():
        warnings.simplefilter("ignore", LossyInputWarning)
        parse_counts_csv(text, T_INT)


def test_csv_tolerates_blank_lines_and_spaces():
    text = "\n# note\n" + HEADER.replace(",", ", ") + "\n 0.5 , , 0, 0, 1, 20, 20, 1, 0, 0, 1\n\n"
    with pytest.warns(LossyInputWarning):
        (r,) = parse_counts_csv(text, T_INT)
    assert r.power_mw == 0.5 and r.loss_db is None
