"""Iterative Markovian fitting on 1-D Gaussian instances.

The Gaussian Schrödinger bridge is available in closed form through
gaussian_bridge, which provides the drift oracle, the marginal score for
the consistency identity, and the exact endpoint coupling used for the
fixed-point check.
"""

import math

import numpy as np
import pytest

from bridgekit.entropic_ot import gaussian_eot_closed_form
from bridgekit.gaussian_bridge import (GaussianMarginal, LinearReferenceSde,
                                       bridge_drift, bridge_moments,
                                       compute_schedule, make_bridge_path)
from bridgekit.imf import (DriftModel, ImfConfig, RegressionDataset,
                           drift_model_from_json, drift_model_to_json,
                           drift_rmse, energy_distance, imf_run,
                           make_regression_dataset, markov_projection_fit,
                           report_to_csv)
from bridgekit.path_sim import EndpointSampler

MU0, S0 = 0.0, 1.0
MUT, ST = 1.5, 0.5

SCHED = compute_schedule(LinearReferenceSde(lambda t: 0.0, None,
                                            lambda t: 1.0, 1.0))
PATH = make_bridge_path(SCHED, GaussianMarginal([MU0], [[S0]]),
                        GaussianMarginal([MUT], [[ST]]))


def oracle(x, t):
    return bridge_drift(PATH, np.asarray(x, dtype=float).reshape(-1, 1),
                        float(t)).ravel()


def pi0(rng, n):
    return MU0 + math.sqrt(S0) * rng.standard_normal((n, 1))


def piT(rng, n):
    return MUT + math.sqrt(ST) * rng.standard_normal((n, 1))


def small_config(**kw):
    defaults = dict(sigma=1.0, T=1.0, n_centers=16, n_time_bins=8, ridge=1.0,
                    n_samples=4000, n_sim_steps=50)
    defaults.update(kw)
    return ImfConfig(**defaults)


def test_dataset_targets_are_bridge_drifts():
    x0 = np.array([0.0, 1.0, -2.0])
    xT = np.array([1.0, 0.5, 0.0])
    ds = make_regression_dataset((x0, xT), sigma=2.0, T=1.0, n_t_per_pair=3,
                                 seed=0)
    assert ds.t.shape == (9,)
    assert ds.t.max() <= 1.0 - 0.01
    aT = np.repeat(xT, 3)
    np.testing.assert_allclose(ds.target, (aT - ds.x) / (2.0 * (1.0 - ds.t)),
                               atol=1e-12)
    rev = make_regression_dataset((x0, xT), 2.0, 1.0, 3, 0, direction="reverse")
    a0 = np.repeat(x0, 3)   # reversed time: x0 plays the terminal role
    np.testing.assert_allclose(rev.target, (a0 - rev.x) / (2.0 * (1.0 - rev.t)),
                               atol=1e-12)
    with pytest.raises(ValueError):
        make_regression_dataset((x0, xT), 2.0, 1.0, 3, 0, direction="sideways")


def test_projection_recovers_affine_targets_exactly():
    # rbf-only penalty: an exactly affine conditional mean survives any ridge
    rng = np.random.default_rng(0)
    x = rng.normal(size=2000)
    t = rng.uniform(0, 0.99, size=2000)
    ds = RegressionDataset(t=t, x=x, target=2.0 * x + 1.0, T=1.0, sigma=1.0)
    model = markov_projection_fit(ds, small_config(ridge=100.0))
    xs = np.linspace(-2, 2, 9)
    for tc in (0.1, 0.6):
        np.testing.assert_allclose(model(xs, tc), 2.0 * xs + 1.0, atol=1e-6)
    assert model.flags == []


def test_projection_faults_on_thin_bins():
    ds = RegressionDataset(t=np.full(100, 0.05), x=np.zeros(100),
                           target=np.zeros(100), T=1.0, sigma=1.0)
    with pytest.raises(ValueError, match="empty time bin"):
        markov_projection_fit(ds, small_config())
    ds2 = RegressionDataset(t=np.linspace(0, 0.99, 40), x=np.zeros(40),
                            target=np.zeros(40), T=1.0, sigma=1.0)
    with pytest.raises(ValueError, match="< 10 samples"):
        markov_projection_fit(ds2, small_config())


def test_zero_iterations_returns_initialization():
    state, report = imf_run(pi0, piT, 1.0, 1.0, 0, small_config(), seed=3)
    assert state.iteration == 0
    assert state.forward_model is None and state.reverse_model is None
    assert report.iterations == [] and not report.warning
    assert state.coupling_x0.shape == (4000,)


def test_run_is_deterministic():
    a, _ = imf_run(pi0, piT, 1.0, 1.0, 1, small_config(), seed=5)
    b, _ = imf_run(pi0, piT, 1.0, 1.0, 1, small_config(), seed=5)
    np.testing.assert_array_equal(a.coupling_xT, b.coupling_xT)


def test_fixed_point_of_the_exact_coupling():
    """Starting from the exact SB endpoint coupling, one Markovian projection
    reproduces the closed-form bridge drift up to regression noise."""
    joint = gaussian_eot_closed_form(MU0, S0, MUT, ST, 1.0)
    sampler = EndpointSampler.from_gaussian_joint(joint)
    x0, xT = sampler.draw(np.random.default_rng(11), 20_000)
    ds = make_regression_dataset((x0.ravel(), xT.ravel()), 1.0, 1.0, 4, 7)
    model = markov_projection_fit(ds, small_config(n_samples=20_000))
    rmse = drift_rmse(model, oracle, lambda tc: np.linspace(-1.5, 2.5, 33), 1.0)
    assert rmse <= 0.08


def test_monotone_kl_and_marginal_preservation():
    cfg = small_config(oracle_drift=oracle)
    state, report = imf_run(pi0, piT, 1.0, 1.0, 5, cfg, seed=9)
    kls = [r["kl_estimate"] for r in report.iterations]
    ses = [r["kl_se"] for r in report.iterations]
    for i in range(len(kls) - 1):
        assert kls[i + 1] <= kls[i] + 3 * math.hypot(ses[i], ses[i + 1])
    assert not report.warning
    assert report.iterations[-1]["drift_rmse"] <= 0.1

    # terminal marginal matches piT: observed energy distance within the
    # permutation null of same-law samples
    obs = report.iterations[-1]["marginal_energy_xT"]
    rng = np.random.default_rng(123)
    null = [energy_distance(MUT + math.sqrt(ST) * rng.standard_normal(4000),
                            MUT + math.sqrt(ST) * rng.standard_normal(4000))
            for _ in range(19)]
    assert obs <= max(null) * 1.5


def test_consistency_identity():
    """forward + reverse drift - sigma^2 score ~ 0 on the bulk (converged run)."""
    state, _ = imf_run(pi0, piT, 1.0, 1.0, 5, small_config(), seed=2)
    fwd, rev = state.forward_model, state.reverse_model
    sq = []
    for tc in (0.15, 0.35, 0.55, 0.75):
        m, S = bridge_moments(SCHED, [MU0], [[S0]], [MUT], [[ST]], tc)
        m, S = float(m[0]), float(S[0, 0])
        xs = np.linspace(m - 2 * math.sqrt(S), m + 2 * math.sqrt(S), 41)
        score = -(xs - m) / S
        resid = fwd(xs, tc) + rev(xs, 1.0 - tc) - score
        sq.append(np.mean(resid ** 2))
    assert math.sqrt(np.mean(sq)) <= 0.08


def test_energy_distance_against_bruteforce():
    rng = np.random.default_rng(4)
    x = rng.normal(size=150)
    y = rng.normal(loc=0.4, size=120)
    brute = (2 * np.mean(np.abs(x[:, None] - y[None, :]))
             - np.mean(np.abs(x[:, None] - x[None, :]))
             - np.mean(np.abs(y[:, None] - y[None, :])))
    assert energy_distance(x, y) == pytest.approx(brute, abs=1e-10)
    assert energy_distance(x, x) == pytest.approx(0.0, abs=1e-10)
    assert energy_distance(x, y) > 0


def test_drift_model_json_roundtrip(tmp_path):
    model = DriftModel(bin_edges=np.linspace(0, 1, 4),
                       centers=np.array([-1.0, 0.0, 1.0]), bandwidth=0.7,
                       weights=np.arange(15, dtype=float).reshape(3, 5),
                       flags=["bin 1: ridge escalated to 1.0"])
    p = tmp_path / "model.json"
    drift_model_to_json(model, p)
    back = drift_model_from_json(p)
    np.testing.assert_array_equal(back.weights, model.weights)
    np.testing.assert_array_equal(back.bin_edges, model.bin_edges)
    assert back.bandwidth == 0.7 and back.flags == model.flags
    xs = np.linspace(-2, 2, 7)
    np.testing.assert_allclose(back(xs, 0.5), model(xs, 0.5), atol=1e-15)


def test_report_csv(tmp_path):
    state, report = imf_run(pi0, piT, 1.0, 1.0, 2, small_config(), seed=1)
    p = tmp_path / "report.csv"
    report_to_csv(report, p)
    lines = p.read_text().strip().splitlines()
    assert lines[0].split(",")[:3] == ["iteration", "kl_estimate", "kl_se"]
    assert len(lines) == 3
