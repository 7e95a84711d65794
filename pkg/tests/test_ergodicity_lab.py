import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from mhdlab.ergodicity_lab import (
    ExperimentPlan,
    ProbeReport,
    clopper_pearson,
    cutoff,
    default_kappa,
    digest,
    e_property_probe,
    injection_rate,
    integrated_autocorr_time,
    invariant_measure_compare,
    irreducibility_probe,
    ks_compare,
    malliavin_positivity,
    mean_se,
    moment_experiment,
    observable,
    positivity_sample,
    stationary_scale,
)
from mhdlab.fourier_core import BASIS_NORM_SQ, SpectralField
from mhdlab.levy_noise import SubordinatorPath

from conftest import make_solver

# statistics helpers


def test_mean_se():
    m, se = mean_se(np.array([[1.0, 2.0], [3.0, 6.0]]))
    assert np.allclose(m, [2.0, 4.0])
    assert np.allclose(se, [1.0, 2.0])


def test_clopper_pearson():
    assert clopper_pearson(0, 50)[0] == 0.0
    assert clopper_pearson(50, 50)[1] == 1.0
    lo, hi = clopper_pearson(5, 10)
    # exact interval from the beta quantiles
    assert lo == pytest.approx(stats.beta.ppf(0.025, 5, 6), rel=1e-9)
    assert hi == pytest.approx(stats.beta.ppf(0.975, 6, 5), rel=1e-9)


def test_autocorrelation_time_of_ar1():
    rng = np.random.default_rng(0)
    phi = 0.5
    x = np.empty((50, 4000))
    x[:, 0] = rng.standard_normal(50)
    for i in range(1, x.shape[1]):
        x[:, i] = phi * x[:, i - 1] + math.sqrt(1 - phi**2) * rng.standard_normal(50)
    assert integrated_autocorr_time(x) == pytest.approx((1 + phi) / (1 - phi), rel=0.1)
    assert integrated_autocorr_time(rng.standard_normal((50, 4000))) == pytest.approx(1.0, abs=0.1)


def test_ks_compare():
    x = np.random.default_rng(1).standard_normal(400)
    same = ks_compare(x, x)
    assert same["distance"] == 0.0 and same["p_value"] == 1.0
    assert same["critical"] == pytest.approx(1.3581 * math.sqrt(2 / 400), rel=1e-4)
    far = ks_compare(x, x + 1.0)
    assert far["distance"] > far["critical"]


def test_digest_is_canonical():
    assert digest({"a": 1, "b": [1.0, 2.0]}) == digest({"b": np.array([1.0, 2.0]), "a": np.int64(1)})
    assert len(digest({})) == 16


# observables


@settings(max_examples=100, deadline=None)
@given(r=st.floats(0.0, 5.0))
def test_cutoff_shape(r):
    chi, dchi = cutoff(r)
    assert 0.0 <= chi <= 1.0
    if r <= 1:
        assert chi == 1.0 and dchi == 0.0
    if r >= 2:
        assert chi == 0.0 and dchi == 0.0
    h = 1e-6
    if 1 + h < r < 2 - h:
        fd = (cutoff(r + h)[0] - cutoff(r - h)[0]) / (2 * h)
        assert dchi == pytest.approx(fd, rel=1e-5, abs=1e-8)


@pytest.mark.parametrize("name", ["energy", "h1_energy", "mode:magnetic:0,1:0", "mode:velocity:1,2:1"])
def test_observable_gradients(name):
    rng = np.random.default_rng(2)
    obs = observable(name, 3, R=1.5)
    U = np.stack([SpectralField.random(3, rng, norm=r).coeffs for r in (0.5, 1.7, 3.5)])
    X = rng.standard_normal(U.shape)
    h = 1e-6
    fd = (obs.value(U + h * X) - obs.value(U - h * X)) / (2 * h)
    assert np.allclose(np.sum(obs.gradient(U) * X, axis=1), fd, rtol=1e-5, atol=1e-8)
    # bounded: zero beyond twice the truncation radius
    assert obs.value(U)[2] == 0.0


def test_observable_names():
    U = SpectralField.basis((0, 1), 0, "magnetic", 3, amplitude=2.0).coeffs
    assert observable("energy", 3).raw(U)[0] == pytest.approx(4 * BASIS_NORM_SQ)
    assert observable("mode:magnetic:0,1:0", 3).raw(U)[0] == 2.0
    with pytest.raises(ValueError, match="unknown observable"):
        observable("enstrophy", 3)
    with pytest.raises(ValueError, match="bad mode observable"):
        observable("mode:magnetic:9,9:0", 3)


# plans and reports


def test_plan_validation(solver):
    with pytest.raises(ValueError, match="at least 1"):
        ExperimentPlan("x", solver, M=0)
    with pytest.raises(ValueError, match="burn-in"):
        ExperimentPlan("x", solver, T=1.0, burn_in=1.0)
    a = ExperimentPlan("x", solver, threads=1)
    assert a.config_hash == ExperimentPlan("x", solver, threads=4).config_hash
    assert a.config_hash != ExperimentPlan("x", solver, seed=1).config_hash


def test_model_constants(solver):
    assert injection_rate(solver) == pytest.approx(BASIS_NORM_SQ * solver.noise.B0 * solver.subordinator.mean_rate)
    assert stationary_scale(solver) == pytest.approx(math.sqrt(injection_rate(solver) / 2))
    assert default_kappa(solver) == pytest.approx(0.1 / solver.noise.B0)
    assert stationary_scale(make_solver(c=0)) == 1.0


def test_injection_rate_against_independent_integral():
    # int |Q_b z|^2 nu_L(dz) with nu_L the law of N(0, u I) mixed over nu_S(du):
    # u nu_S(du) is proportional to a Gamma(1 - rho, lam) density
    cfg = make_solver(amp=0.3)
    p = cfg.subordinator.params
    mass = integrate.quad(lambda u: u * cfg.subordinator.density(u), 0, np.inf)[0]
    rng = np.random.default_rng(3)
    u = rng.gamma(1 - p["rho"], 1 / p["lam"], 200_000)
    z = np.sqrt(u)[:, None] * rng.standard_normal((len(u), cfg.noise.d))
    samples = BASIS_NORM_SQ * np.sum((z @ cfg.Q.T) ** 2, axis=1) / u * mass
    m, se = mean_se(samples)
    assert abs(m - injection_rate(cfg)) <= 3 * se


# moments


def test_zero_noise_moments_decay():
    cfg = make_solver(c=0)
    U0 = SpectralField.random(4, np.random.default_rng(4), norm=2.0)
    plan = ExperimentPlan("moments", cfg, M=3, T=1.0, initial_conditions=(U0,), record_every=5)
    rep = moment_experiment(plan)
    E, _ = rep.series["energy"]
    assert np.all(E <= np.exp(-2 * rep.times) * 4.0 * (1 + 1e-12))
    assert rep.passed and "plateau" not in rep.checks


def test_noisy_moments(solver):
    plan = ExperimentPlan("moments", solver, M=300, T=4.0, burn_in=2.0, record_every=10)
    rep = moment_experiment(plan)
    assert rep.checks["plateau"]["passed"]
    assert rep.checks["injection_rate"]["passed"]
    assert rep.checks["energy_bound"]["passed"] and rep.checks["dissipation_bound"]["passed"]
    assert rep.metadata["C_model"] == pytest.approx(injection_rate(solver))


def test_moment_bound_monotone_in_start(solver):
    bounds = []
    for r in (0.5, 1.0, 2.0):
        U0 = SpectralField.random(4, np.random.default_rng(5), norm=r)
        rep = moment_experiment(ExperimentPlan("m", solver, M=20, T=0.5, initial_conditions=(U0,)))
        bounds.append(rep.series["energy_bound"][0])
    assert np.all(bounds[0] <= bounds[1]) and np.all(bounds[1] <= bounds[2])


def test_moment_report_flags_small_ensembles(solver):
    rep = moment_experiment(ExperimentPlan("m", solver, M=3, T=1.0, burn_in=0.5))
    assert rep.inconclusive


def test_reports_reproduce_bitwise(solver):
    plan = ExperimentPlan("m", solver, M=30, T=1.0, burn_in=0.5, seed=9)
    a, b = moment_experiment(plan), moment_experiment(plan)
    assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()
    data = json.loads(a.to_json())
    assert data["metadata"]["config_hash"] == plan.config_hash and data["metadata"]["seed"] == 9
    assert a.to_csv().startswith(f"# tag=m config_hash={plan.config_hash} seed=9\nt,")


# e-property


def test_e_property_at_zero_offset(solver):
    U0 = SpectralField.random(4, np.random.default_rng(6), norm=1.0)
    rep = e_property_probe(U0, [0.0], "energy", 0.5, ExperimentPlan("e", solver, M=20, T=0.5))
    assert rep.series["coupling"][0][0] == 0.0
    assert rep.series["tangent_times_delta"][0][0] == 0.0


def test_e_property_trend_and_taylor(solver):
    U0 = SpectralField.random(4, np.random.default_rng(7), norm=1.0)
    plan = ExperimentPlan("e", solver, M=100, T=1.0)
    rep = e_property_probe(U0, [0.08, 0.04, 0.02, 0.01, 0.005], "energy", 1.0, plan)
    assert rep.checks["monotone_trend"]["spearman"] >= 0.9
    assert rep.checks["taylor_agreement"]["passed"]
    coupling = rep.series["coupling"][0]
    assert np.all(np.diff(coupling) < 0)


# irreducibility


def test_irreducibility_without_noise_is_certain():
    cfg = make_solver(c=0)
    radius, gamma = 2.0, 0.5
    T = math.log(radius / gamma) / cfg.dissipation.nu + 0.1
    rep = irreducibility_probe(radius, gamma, T, ExperimentPlan("irr", cfg, M=50, T=T), candidates=3, pilot=5)
    assert rep.checks["positive_lower_bound"]["estimate"] == 1.0
    assert rep.passed


def test_irreducibility_with_noise(solver):
    rep = irreducibility_probe(2.0, 0.5, 3.0, ExperimentPlan("irr", solver, M=200, T=3.0), candidates=3, pilot=20)
    assert rep.checks["positive_lower_bound"]["ci_low"] > 0
    assert rep.checks["monotone_in_gamma"]["passed"]
    prob = rep.series["probability"][0]
    assert np.all(np.diff(prob) >= 0)
    meta = rep.metadata
    assert meta["small_noise"] == 0.5 and meta["small_noise_events"] > 0
    assert 0 <= meta["conditional_frequency"] <= 1


# invariant measure


def test_identical_starts_and_seeds_give_zero_distance(solver):
    U0 = SpectralField.random(4, np.random.default_rng(8), norm=1.0)
    plan = ExperimentPlan("inv", solver, M=10, T=2.0, burn_in=1.0, observables=("energy", "mode:magnetic:0,1:0"))
    rep = invariant_measure_compare(U0, U0, plan, shared_seeds=True)
    for name in plan.observables:
        assert rep.checks[f"ks_{name}"]["distance"] == 0.0
        assert rep.checks[f"time_average_{name}"]["passed"]


def test_far_apart_starts_forget_their_origin(solver):
    far = SpectralField.random(4, np.random.default_rng(9), norm=5.0)
    plan = ExperimentPlan("inv", solver, M=40, T=12.0, burn_in=4.0, observables=("energy",))
    rep = invariant_measure_compare(np.zeros(solver.n), far, plan)
    assert rep.passed, rep.checks


# Malliavin positivity


def test_positivity_without_jumps_is_zero():
    cfg = make_solver(N=3, nu=0.5)
    path = SubordinatorPath(50.0, [], [])
    s = positivity_sample(np.zeros(cfg.n), path, cfg, 0.5, 2)
    assert s.eta == pytest.approx(2.0)
    assert s.X == 0.0 and s.determined
    assert all(s.X < eps for eps in (1e-4, 1e-10))


def test_positivity_undetermined_beyond_horizon():
    cfg = make_solver(N=3, nu=0.5)
    s = positivity_sample(np.zeros(cfg.n), SubordinatorPath(1.0, [], []), cfg, 0.5, 2)
    assert not s.determined and math.isinf(s.eta)


def test_positivity_rates_nonincreasing():
    cfg = make_solver(N=3, amp=1.0, nu=0.2, dt=0.01)
    plan = ExperimentPlan("pos", cfg, M=8, T=200.0, seed=3)
    rep = malliavin_positivity(plan, 0.5, 2, [1e-2, 1e-6, 1e-10, 1e-4], 2.0)
    assert list(rep.times) == [1e-2, 1e-4, 1e-6, 1e-10]
    assert rep.checks["nonincreasing"]["passed"]
    assert rep.metadata["undetermined"] == 0
    assert len(rep.metadata["X"]) == 8
    again = malliavin_positivity(plan, 0.5, 2, [1e-2, 1e-6, 1e-10, 1e-4], 2.0)
    assert again.to_json() == rep.to_json()


def test_positivity_rejects_bad_truncation(solver):
    with pytest.raises(ValueError, match="exceeds"):
        malliavin_positivity(ExperimentPlan("pos", solver, M=1), 0.5, 5, [1e-4], 2.0)


def test_report_csv_layout():
    rep = ProbeReport("t", np.array([0.0, 1.0]), {"x": (np.array([1.0, 2.0]), np.array([0.1, 0.2]))}, {}, False,
                      {"config_hash": "abc", "seed": 4})
    lines = rep.to_csv().splitlines()
    assert lines == ["# tag=t config_hash=abc seed=4", "t,x_mean,x_se", "0.0,1.0,0.1", "1.0,2.0,0.2"]
    assert rep.passed
