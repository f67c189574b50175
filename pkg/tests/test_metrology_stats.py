from __future__ import annotations

import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffsqueeze import closed_form as cf
from diffsqueeze import metrology_stats as ms
from diffsqueeze import noise_sampling as ns
from diffsqueeze.errors import ConvergenceError
from diffsqueeze.spin_core import ProbeSpec

pytestmark = pytest.mark.invariant

DPHI_GRID = [math.pi / 16, math.pi / 8, math.pi / 4, 3 * math.pi / 8, math.pi / 2]


def campaign(n, tau, dphi, shots=1000, n_ell=1000, seed=2024, tau_b=None, methods=("trace",)):
    a = ProbeSpec(n, tau)
    b = ProbeSpec(n, tau if tau_b is None else tau_b)
    return ms.run_campaign(a, b, dphi, None, shots, n_ell, methods, seed)


def sigma_eff_se(st_):
    # standard error of a sample standard deviation, normal approximation
    return st_.sigma_eff / math.sqrt(2 * st_.n_valid)


# -- campaign bookkeeping -------------------------------------------------------

def test_campaign_deterministic_and_batch_independent():
    a = ProbeSpec(100, 0.02)
    r1 = ms.run_campaign(a, a, 0.5, None, 200, 30, ("trace", "one_parameter"), 11)
    r2 = ms.run_campaign(a, a, 0.5, None, 200, 30, ("trace", "one_parameter"), 11, batch=7)
    for m in ("trace", "one_parameter"):
        assert np.array_equal(r1.estimates[m], r2.estimates[m])
    assert r1.to_json() == r2.to_json()
    r3 = ms.run_campaign(a, a, 0.5, None, 200, 30, ("trace",), 12)
    assert not np.array_equal(r1.estimates["trace"], r3.estimates["trace"])


def test_campaign_report_definitions():
    rep = campaign(100, 0.0, 0.7, shots=300, n_ell=50, methods=("trace", "geometric"))
    for name, s in rep.methods.items():
        est = rep.estimates[name]
        v = est[np.isfinite(est)]
        assert s.std == pytest.approx(v.std(), rel=1e-12)
        assert s.bias_se == s.std / math.sqrt(s.n_valid)
        assert s.sigma_eff == pytest.approx(math.sqrt(300) * s.std, rel=1e-12)
        assert s.gain == pytest.approx(rep.sql / s.std, rel=1e-12) and s.gain > 0
        assert s.n_valid + s.n_rejected == 50
    rows = rep.csv_rows()
    assert len(rows) == 2 and all(tuple(r) == ms.CSV_FIELDS for r in rows)
    d = json.loads(rep.to_json())
    assert d["digest"] == ms.config_digest(d["config"])
    assert d["config"]["seed"] == 2024


def test_failed_method_marked():
    s = ms.summarize("trace", np.full(10, np.nan), np.zeros(10, bool), 0.5, 100, 0.1)
    assert s.failed and s.n_rejected == 10 and math.isnan(s.sigma_eff)
    rep = ms.CampaignReport({"n_atoms": [1, 1], "tau": [0, 0], "dphi": 0.5, "shots": 100, "n_ellipses": 10},
                            "x", {"trace": s}, 0.1)
    assert rep.csv_rows()[0]["status"] == "failed"


def test_campaign_preconditions():
    a = ProbeSpec(20)
    with pytest.raises(ValueError):
        ms.run_campaign(a, a, 0.5, None, 100, 1)
    with pytest.raises(ValueError):
        ms.run_campaign(a, a, 0.5, None, 4, 10)
    with pytest.raises(ValueError):
        ms.run_campaign(a, a, 0.5, None, 100, 10, ("bayes",))


def test_differential_sql():
    assert ms.differential_sql(500, 500, 1) == pytest.approx(math.sqrt(2 / 500))
    assert ms.differential_sql(100, 300, 4) == pytest.approx(math.sqrt((1 / 100 + 1 / 300) / 4))


# -- campaign examples ----------------------------------------------------------

def test_coherent_bias_smallest_at_quadrature():
    bias = [abs(campaign(500, 0.0, d, n_ell=200).methods["trace"].bias) for d in DPHI_GRID]
    assert int(np.argmin(bias)) == len(DPHI_GRID) - 1


def test_sigma_eff_flat_in_dphi_at_tau_star():
    t = cf.tau_star(500)
    s = [campaign(500, t, d, n_ell=200).methods["trace"].sigma_eff for d in DPHI_GRID]
    assert max(s) / min(s) < 1.3


def test_coherent_above_sql():
    for d in (math.pi / 8, math.pi / 2):
        r = campaign(500, 0.0, d, n_ell=400).methods["trace"]
        floor = ms.differential_sql(500, 500, 1)
        assert r.sigma_eff >= floor * (1 - 3 / math.sqrt(2 * r.n_valid))


# -- Fisher information ---------------------------------------------------------

def test_cramer_rao_examples():
    assert ms.cramer_rao_bound(4.0) == 0.5
    assert ms.cramer_rao_bound(4.0, 4) == pytest.approx(0.25)
    assert ms.cramer_rao_bound(ms.FisherResult(9.0, 0.0, 256), 1) == pytest.approx(1 / 3)
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            ms.cramer_rao_bound(bad)
    with pytest.raises(ValueError):
        ms.cramer_rao_bound(1.0, 0)


@pytest.mark.parametrize("n,tau,dphi", [(30, 0.0, 0.4), (40, 0.03, 1.0), (60, 0.0, 2.5), (50, 0.02, 0.05)])
def test_fisher_analytic_matches_finite_difference(n, tau, dphi):
    a = ProbeSpec(n, tau)
    f = ms.fisher_information(a, a, dphi, check=True)
    assert f.value > 0 and f.check_residual < 1e-6
    fd = ms.fisher_information(a, a, dphi, method="finite_difference")
    assert fd.value == pytest.approx(f.value, rel=1e-6)


def test_fisher_check_raises_on_bad_step():
    a = ProbeSpec(40, 0.02)
    with pytest.raises(ConvergenceError):
        ms.fisher_information(a, a, 0.7, check=True, step=0.5)


def test_fisher_rejects_gaussian_and_unknown():
    with pytest.raises(ValueError):
        ms.fisher_information(ProbeSpec(40, mode="gaussian"), ProbeSpec(40), 0.5)
    with pytest.raises(ValueError):
        ms.fisher_information(ProbeSpec(40), ProbeSpec(40), 0.5, method="other")


@given(st.integers(2, 40), st.floats(0.0, 0.1), st.floats(-3.0, 3.0))
def test_fisher_nonnegative_and_even(n, tau, dphi):
    a = ProbeSpec(n, tau)
    f = ms.fisher_information(a, a, dphi).value
    assert f >= 0.0
    assert ms.fisher_information(a, a, -dphi).value == pytest.approx(f, rel=1e-8, abs=1e-12)


def test_fisher_joint_normalized():
    a = ProbeSpec(50, 0.02)
    p, dp, _ = ms.joint_with_derivative(a, a, 0.6)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert abs(dp.sum()) < 1e-12


# -- power-law fits -------------------------------------------------------------

def test_power_law_exact():
    pts = [(n, 7.0 * n ** (-2 / 3)) for n in (100, 200, 300, 500, 700, 1000)]
    f = ms.power_law_fit(pts)
    assert abs(f.beta - 2 / 3) < 1e-12 and f.alpha == pytest.approx(math.log10(7.0))
    f = ms.power_law_fit(pts, (300, 1000))
    assert f.n_points == 4 and abs(f.beta - 2 / 3) < 1e-12


def test_power_law_rejects():
    pts = [(100, 1.0), (200, -0.5), (300, 0.3), (400, 0.2)]
    with pytest.warns(UserWarning):
        f = ms.power_law_fit(pts)
    assert f.n_points == 3
    with pytest.raises(ValueError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ms.power_law_fit(pts, (100, 300))


@given(st.floats(-3, 3), st.floats(-2, 2), st.lists(st.integers(10, 10**5), min_size=3, max_size=8, unique=True))
def test_power_law_recovers(alpha, beta, ns_):
    f = ms.power_law_fit([(n, 10 ** (alpha - beta * math.log10(n))) for n in ns_])
    assert f.beta == pytest.approx(beta, abs=1e-9) and f.alpha == pytest.approx(alpha, abs=1e-8)


# -- one-parameter analytics ----------------------------------------------------

@pytest.mark.parametrize("dphi", [0.2, math.pi / 4, 1.0, 2.0, 2.9])
def test_one_param_infinite_n(dphi):
    g = cf.g_infinite(dphi)
    assert ms.one_param_estimate(g) == pytest.approx(dphi, abs=1e-12)
    h = math.cos(dphi)
    expected = [-4 / math.sqrt(1 - h * h) / (1 + 2 * h * h) * h**l for l in range(4)]
    assert np.allclose(ms.one_param_gradient(g), expected, atol=1e-6)


def test_one_param_bias_vs_approximation():
    a = ProbeSpec(500, 0.0)
    mean, var = ms.one_param_analytic_stats(cf.g_moments_numeric(a, a, math.pi / 4), 1000)
    approx = cf.bias_approximation(500, "coherent", math.pi / 4)
    assert (mean - math.pi / 4) == pytest.approx(approx, rel=0.10)
    assert var > 0
    with pytest.raises(ValueError):
        ms.one_param_analytic_stats(cf.g_moments_numeric(a, a, math.pi / 4), 0)


# -- campaign invariants --------------------------------------------------------

@pytest.mark.parametrize("n", [300, 500])
@pytest.mark.parametrize("dphi", [math.pi / 16, math.pi / 8], ids=["pi/16", "pi/8"])
def test_unbiased_at_tau_star(n, dphi):
    r = campaign(n, cf.tau_star(n), dphi).methods["trace"]
    assert abs(r.bias) <= 3 * r.bias_se, f"bias {r.bias:.3g} is {r.bias / r.bias_se:.2f} standard errors"


def test_ordering_two_one_coherent():
    t = cf.tau_star(500)
    d = math.pi / 4
    two = campaign(500, t, d).methods["trace"]
    one = campaign(500, t, d, tau_b=0.0).methods["trace"]
    coh = campaign(500, 0.0, d).methods["trace"]
    assert one.sigma_eff - two.sigma_eff >= 3 * math.hypot(sigma_eff_se(one), sigma_eff_se(two))
    assert coh.sigma_eff - one.sigma_eff >= 3 * math.hypot(sigma_eff_se(coh), sigma_eff_se(one))


def test_crb_consistency():
    n, d, shots = 500, math.pi / 16, 1000
    a = ProbeSpec(n, cf.tau_star(n))
    r = campaign(n, a.tau, d, shots=shots).methods["trace"]
    crb = ms.cramer_rao_bound(ms.fisher_information(a, a, d), shots)
    assert r.std >= crb * (1 - 3 / math.sqrt(2 * r.n_valid))


def test_shots_scaling_and_bias_plateau():
    shots = [250, 500, 1000, 2000, 4000]
    reps = [campaign(500, 0.0, math.pi / 16, shots=s, n_ell=300).methods["trace"] for s in shots]
    f = ms.power_law_fit([(s, r.std) for s, r in zip(shots, reps)])
    assert abs(f.beta - 0.5) < 0.05
    b2, b4 = reps[-2], reps[-1]
    assert abs(b4.bias - b2.bias) <= 3 * math.hypot(b4.bias_se, b2.bias_se)


@pytest.mark.parametrize("n", [100, 300, 500, 1000])
def test_single_squeezed_ceiling(n):
    r = campaign(n, cf.tau_star(n), math.pi / 4, n_ell=400, tau_b=0.0).methods["trace"]
    assert r.gain <= math.sqrt(2) * (1 + 3 / math.sqrt(2 * r.n_valid))
