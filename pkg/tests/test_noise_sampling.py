from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from diffsqueeze import closed_form as cf
from diffsqueeze import conic_estimators as ce
from diffsqueeze import noise_sampling as ns
from diffsqueeze import spin_core as sc
from diffsqueeze.errors import SizingError
from diffsqueeze.spin_core import ProbeSpec

pytestmark = pytest.mark.invariant


def test_joint_normalized_and_point_symmetric():
    a, b = ProbeSpec(30, 0.05), ProbeSpec(30, 0.05)
    j = ns.joint_distribution(a, b, 0.7)
    assert abs(j.grid.sum() - 1) < 1e-9
    assert np.max(np.abs(j.grid - j.grid[::-1, ::-1])) < 1e-10


def test_joint_matches_dense_integration_small_n():
    a, b = ProbeSpec(4, 0.3), ProbeSpec(4, 0.3)
    d = 0.9
    j = ns.joint_distribution(a, b, d).grid

    def cell(i, k):
        f = lambda phi: (sc.outcome_distribution(a, phi + d / 2).probabilities[i]
                         * sc.outcome_distribution(b, phi - d / 2).probabilities[k])
        return integrate.quad(f, 0, 2 * math.pi, limit=200, epsabs=1e-13)[0] / (2 * math.pi)

    brute = np.array([[cell(i, k) for k in range(5)] for i in range(5)])
    assert np.allclose(j, brute, atol=1e-11)
    assert np.allclose(brute, brute[::-1, ::-1], atol=1e-11)


def test_joint_marginal_independent_of_dphi():
    a, b = ProbeSpec(40, 0.0), ProbeSpec(40, 0.04)
    phases = np.linspace(0, 2 * math.pi, 512, endpoint=False)
    avg_b = sc.outcome_table(b, phases).mean(axis=0)
    for d in (0.2, 1.4):
        j = ns.joint_distribution(a, b, d)
        assert np.allclose(j.marginal_b(), avg_b, atol=1e-12)


@given(st.floats(-4, 4), st.floats(0, 3))
def test_joint_depends_only_on_dphi(offset, d):
    a, b = ProbeSpec(24, 0.06), ProbeSpec(24, 0.0)
    base = ns.joint_distribution(a, b, d).grid
    shifted = ns.joint_distribution(a, b, d, common_offset=offset).grid
    assert np.allclose(base, shifted, atol=1e-12)


def test_joint_unequal_sizes():
    j = ns.joint_distribution(ProbeSpec(10, 0.0), ProbeSpec(16, 0.1), 0.5)
    assert j.grid.shape == (11, 17)
    assert abs(j.grid.sum() - 1) < 1e-9


def test_sample_shot_examples():
    a = ProbeSpec(2000, 0.0)
    rng = np.random.default_rng(3)
    za = [ns.sample_shot(a, a, 0.0, ns.NoiseModel("fixed", phase=0.0), rng)[0] for _ in range(400)]
    assert abs(np.mean(za)) < 4 / math.sqrt(2000 * 400)
    s1 = ns.sample_shot(a, a, 0.3, ns.NoiseModel(), ns.stream(5, 0))
    s2 = ns.sample_shot(a, a, 0.3, ns.NoiseModel(), ns.stream(5, 0))
    assert s1 == s2


def _grid_moments(j, na, nb):
    za = np.linspace(-1, 1, na + 1)[:, None]
    zb = np.linspace(-1, 1, nb + 1)[None, :]
    p = j.grid
    ma, mb = (p * za).sum(), (p * zb).sum()
    cov = (p * (za - ma) * (zb - mb)).sum()
    va, vb = (p * (za - ma) ** 2).sum(), (p * (zb - mb) ** 2).sum()
    return ma, mb, cov, va, vb


def _check_cov(za, zb, j, n):
    ma, mb, cov, va, vb = _grid_moments(j, n, n)
    m = za.size
    prod = (za - ma) * (zb - mb)
    se = prod.std() / math.sqrt(m)
    assert abs(prod.mean() - cov) < 5 * se
    assert abs(za.mean() - ma) < 5 * math.sqrt(va / m)


def test_sampled_covariance_matches_grid():
    n, d = 100, math.pi / 4
    a = ProbeSpec(n, 0.0)
    j = ns.joint_distribution(a, a, d)
    s = ns.sample_ellipse(a, a, d, ns.NoiseModel(), 100_000, 17)
    _check_cov(s.points[:, 0], s.points[:, 1], j, n)
    # slow exact path, fewer shots
    rng = ns.stream(18)
    pts = np.array([ns.sample_shot(a, a, d, ns.NoiseModel(), rng)[:2] for _ in range(3000)])
    _check_cov(pts[:, 0], pts[:, 1], j, n)


def test_chi_square_goodness_of_fit():
    n, d = 20, 0.8
    a, b = ProbeSpec(n, 0.15), ProbeSpec(n, 0.0)
    j = ns.joint_distribution(a, b, d).grid
    s = ns.sample_ellipse(a, b, d, ns.NoiseModel(), 1_000_000, 99)
    ia = np.rint((s.points[:, 0] + 1) * n / 2).astype(int)
    ib = np.rint((s.points[:, 1] + 1) * n / 2).astype(int)
    obs = np.bincount(ia * (n + 1) + ib, minlength=(n + 1) ** 2).astype(float)
    exp = j.ravel() * obs.sum()
    keep = exp >= 5
    o = np.append(obs[keep], obs[~keep].sum())
    e = np.append(exp[keep], exp[~keep].sum())
    if e[-1] < 5:
        o, e = o[:-1], e[:-1] * o[:-1].sum() / e[:-1].sum()
    _, p = stats.chisquare(o, e * o.sum() / e.sum())
    assert p > 1e-3


def test_sample_ellipse_determinism():
    a = ProbeSpec(60, 0.03)
    s1 = ns.sample_ellipse(a, a, 0.5, ns.NoiseModel(), 200, 42, 3)
    s2 = ns.sample_ellipse(a, a, 0.5, ns.NoiseModel(), 200, 42, 3)
    s3 = ns.sample_ellipse(a, a, 0.5, ns.NoiseModel(), 200, 43, 3)
    s4 = ns.sample_ellipse(a, a, 0.5, ns.NoiseModel(), 200, 42, 4)
    assert np.array_equal(s1.points, s2.points)
    assert not np.array_equal(s1.points, s3.points)
    assert not np.array_equal(s1.points, s4.points)


def _draw(args):
    seed, idx = args
    a = ProbeSpec(60, 0.03)
    return ns.sample_ellipse(a, a, 0.5, ns.NoiseModel(), 150, seed, idx).points


def test_determinism_across_processes():
    jobs = [(7, i) for i in range(6)]
    serial = [_draw(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=3) as pool:
        parallel = list(pool.map(_draw, jobs))
    for a, b in zip(serial, parallel):
        assert np.array_equal(a, b)


def test_points_near_average_ellipse():
    n, d = 500, math.pi / 4
    t = cf.tau_star(n)
    a = ProbeSpec(n, t)
    s = ns.sample_ellipse(a, a, d, ns.NoiseModel(), 1000, 5)
    c = a.contrast
    v = np.array([1 / c**2, -2 * math.cos(d) / c**2, 1 / c**2, 0, 0, -math.sin(d) ** 2])
    params = ce.conic_to_params(ce.ConicCoefficients(v, "unconstrained"))
    dist = np.abs(ce.geometric_distances(s.points, params))
    sigma = math.sqrt(max(cf.var_mid_fringe(n, t), cf.var_quadrature(n, t)))
    assert np.mean(dist <= 4 * sigma) >= 0.99


def test_sampler_tables():
    spec = ProbeSpec(50, 0.04)
    tab = ns.sampling_inverse_cdf_tables(spec, 256)
    assert np.allclose(tab.cdf[:, -1], 1.0, atol=1e-9)
    assert np.all(np.diff(tab.cdf, axis=1) >= -1e-15)
    for bad in (100, 128, 300):
        with pytest.raises(SizingError):
            ns.sampling_inverse_cdf_tables(spec, bad)
    with pytest.raises(SizingError):
        ns.sampling_inverse_cdf_tables(ProbeSpec(500, 0.0), 4096, memory_budget=1000)


@given(st.floats(-20, 20))
def test_nearest_node_error(phi):
    tab = ns.sampling_inverse_cdf_tables(ProbeSpec(8, 0.0), 4096)
    k = int(tab.nearest_node(np.array([phi]))[0])
    node = tab.offset + 2 * math.pi * k / 4096
    err = abs(math.remainder(phi - node, 2 * math.pi))
    assert err <= math.pi / 4096 + 1e-12


def test_nearest_node_mean_error_bound():
    n = 500
    c = cf.contrast(n, cf.tau_star(n))
    # Lipschitz bound of the fringe over half a node spacing
    assert c * math.pi / 4096 < 1e-3


def test_phase_grid_doubling_self_consistent():
    from diffsqueeze import metrology_stats as ms

    a = ProbeSpec(200, 0.0)
    r1 = ms.run_campaign(a, a, 0.4, None, 500, 200, ("trace",), 1, 4096).methods["trace"]
    r2 = ms.run_campaign(a, a, 0.4, None, 500, 200, ("trace",), 1, 8192).methods["trace"]
    assert abs(r1.bias - r2.bias) < 3 * math.hypot(r1.bias_se, r2.bias_se)


def test_fixed_and_recorded_noise():
    a = ProbeSpec(40, 0.0)
    s = ns.sample_ellipse(a, a, 0.0, ns.NoiseModel("fixed", phase=math.pi / 2), 50, 1)
    assert np.all(s.points == -1.0)
    rec = ns.NoiseModel("recorded", record=tuple(np.linspace(0, 6, 50)), readout=True)
    s = ns.sample_ellipse(a, a, 0.2, rec, 50, 1)
    assert np.allclose(s.phase_record, np.linspace(0, 6, 50))
    with pytest.raises(ValueError):
        ns.sample_ellipse(a, a, 0.2, rec, 60, 1)
    with pytest.raises(ValueError):
        ns.NoiseModel("recorded")
    with pytest.raises(ValueError):
        ns.NoiseModel("pink")


def test_correlation_error_only_on_readout():
    a = ProbeSpec(80, 0.02)
    s0 = ns.sample_ellipse(a, a, 0.0, ns.NoiseModel(readout=True), 300, 8)
    s1 = ns.sample_ellipse(a, a, 0.0, ns.NoiseModel(correlation_error_sigma=0.3), 300, 8)
    assert np.array_equal(s0.points, s1.points)
    err = s1.phase_record - s0.phase_record
    assert 0.2 < err.std() < 0.4
    assert ns.sample_ellipse(a, a, 0.0, ns.NoiseModel(), 300, 8).phase_record is None


def test_serialization_round_trip():
    a = ProbeSpec(60, 0.03)
    s = ns.sample_ellipse(a, ProbeSpec(40, 0.0), 0.5, ns.NoiseModel(correlation_error_sigma=0.1), 77, 2**63 + 5, 9)
    back = ns.EllipseSample.from_json(s.to_json())
    assert np.array_equal(back.points, s.points)
    assert np.array_equal(back.phase_record, s.phase_record)
    assert (back.seed, back.true_dphi, back.n_atoms, back.ellipse_index) == (s.seed, s.true_dphi, s.n_atoms, s.ellipse_index)
    csv_text = s.to_csv()
    assert csv_text.splitlines()[0] == "shot_index,z_A,z_B,phi_cn_readout"
    back = ns.EllipseSample.from_csv(csv_text, s.true_dphi, s.seed, s.n_atoms, s.ellipse_index)
    assert np.array_equal(back.points, s.points) and np.array_equal(back.phase_record, s.phase_record)
    assert back.to_csv() == csv_text
    plain = ns.sample_ellipse(a, a, 0.5, ns.NoiseModel(), 10, 1)
    assert plain.to_csv().splitlines()[0] == "shot_index,z_A,z_B"


def test_sample_validation():
    with pytest.raises(ValueError):
        ns.EllipseSample(np.zeros((4, 2)), 0.1, 1)
    with pytest.raises(ValueError):
        ns.EllipseSample(np.full((6, 2), 0.123), 0.1, 1, n_atoms=(10, 10))
    with pytest.raises(ValueError):
        ns.sample_ellipse(ProbeSpec(10, 0.0), ProbeSpec(10, 0.0), 0.1, ns.NoiseModel(), 4, 1)


@given(st.integers(5, 300), st.integers(0, 2**64 - 1))
def test_samples_on_outcome_grid(n, seed):
    a = ProbeSpec(n, 0.0)
    s = ns.sample_ellipse(a, a, 0.7, ns.NoiseModel(), 20, seed, phase_grid_size=1024)
    k = (s.points + 1) * n / 2
    assert np.allclose(k, np.rint(k), atol=1e-9) and np.all(np.abs(s.points) <= 1)
