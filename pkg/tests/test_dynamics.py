import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhdlab.dynamics import (
    StepFailure,
    accumulated_noise,
    energy_ledger,
    evolve,
    forced_flow,
    integral_residual,
    ledger_csv,
    PiecewiseField,
    replay,
    run_ensemble,
    step,
    step_error,
    time_grid,
    trajectory_seeds,
)
from mhdlab.fourier_core import (
    BASIS_NORM_SQ,
    MAGNETIC,
    VELOCITY,
    SpectralField,
    dissipation_rates,
    galerkin_space,
    inner_product,
    sobolev_norm,
)
from mhdlab.levy_noise import SubordinatorPath, q_b_apply

from conftest import make_solver


def _dist(a, b):
    d = np.asarray(a) - np.asarray(b)
    return float(np.sqrt(BASIS_NORM_SQ * np.sum(d * d, axis=-1)).max())


def quiet_path(T):
    """A path with no jumps and no drift: the noise vanishes identically."""
    return SubordinatorPath(T, [], [])


# single steps


def test_zero_state_stays_zero(solver):
    assert step(SpectralField.zeros(4), 0.01, None, solver) == SpectralField.zeros(4)
    assert step(SpectralField.zeros(4), 0.01, np.zeros(solver.noise.d), solver) == SpectralField.zeros(4)


@pytest.mark.parametrize("slot,k", [(VELOCITY, (0, 1)), (VELOCITY, (2, 1)), (MAGNETIC, (3, 0))])
def test_linear_flow_is_exact(slot, k):
    cfg = make_solver(nu=0.7, alpha=1.25, nonlinear=False)
    dt = 0.013
    U = SpectralField.basis(k, 1, slot, 4, amplitude=1.5)
    out = step(U, dt, None, cfg)
    rate = 0.7 * (k[0] ** 2 + k[1] ** 2) ** 1.25
    assert out[next(m for m, c in U.items() if c)] == pytest.approx(1.5 * np.exp(-rate * dt), rel=1e-14)
    assert np.count_nonzero(out.coeffs) == 1


@pytest.mark.parametrize("integrator", ["exponential-euler", "exponential-rk2"])
def test_step_halving_order(integrator):
    cfg = make_solver(N=6, integrator=integrator)
    U = SpectralField.random(6, np.random.default_rng(3), norm=2.0)
    errs = []
    for dt in (1e-2, 5e-3, 2.5e-3):
        one = step(U, dt, None, cfg)
        two = step(step(U, dt / 2, None, cfg), dt / 2, None, cfg)
        errs.append(np.sqrt(inner_product(one - two, one - two)))
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(orders >= 0.9), orders


def test_step_noise_goes_to_forced_magnetic_modes(solver):
    z = np.arange(1.0, solver.noise.d + 1)
    out = step(SpectralField.zeros(4), 0.01, z, solver)
    assert out == q_b_apply(z, solver.noise, 4)


def test_step_failure_on_overflow(solver):
    U = SpectralField(4, np.full(galerkin_space(4).n, 1e200))
    with pytest.raises(StepFailure):
        step(U, 0.01, None, solver)
    with pytest.raises(ValueError):
        step(U, 0.0, None, solver)


def test_time_grid():
    g = time_grid(1.0, 0.3, [0.5, 1.0, 2.0])
    assert g[0] == 0 and g[-1] == 1.0 and 0.5 in g
    assert np.all(np.diff(g) > 0) and np.diff(g).max() <= 0.3 + 1e-12


# trajectories


def test_zero_noise_energy_decay():
    cfg = make_solver(N=4, dt=0.01)
    U0 = SpectralField.random(4, np.random.default_rng(1), norm=3.0)
    traj = evolve(U0, quiet_path(2.0), 2.0, cfg, seed=0)
    E = BASIS_NORM_SQ * np.sum(traj.states**2, axis=1)
    tol = 10 * step_error(traj) * 2 * np.sqrt(E[0])
    assert np.all(E <= np.exp(-2 * cfg.dissipation.nu * traj.times) * E[0] + tol)
    # and between any two grid times
    ratio = E[1:] / E[:-1]
    assert np.all(ratio <= np.exp(-2 * np.diff(traj.times)) * (1 + 1e-6))


def test_replay_is_bitwise(solver):
    U0 = SpectralField.random(4, np.random.default_rng(2), norm=1.0)
    a = evolve(U0, None, 1.0, solver, seed=11)
    b = evolve(U0, None, 1.0, solver, seed=11)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.times, b.times)
    assert np.array_equal(replay(a).states, a.states)
    c = evolve(U0, None, 1.0, solver, seed=12)
    assert not np.array_equal(a.states, c.states)


def test_jump_adapted_grid_contains_jumps(solver):
    traj = evolve(np.zeros(solver.n), None, 1.0, solver, seed=3)
    assert np.all(np.isin(traj.path.jump_times, traj.times))
    assert len(traj.states) == len(traj.times)
    assert traj.ell[-1] == pytest.approx(traj.path.value(1.0), rel=1e-12)


def test_noise_only_touches_forced_magnetic_modes(solver):
    traj = evolve(np.zeros(solver.n), None, 1.0, solver, seed=4)
    touched = np.flatnonzero(np.any(traj.noise != 0, axis=0))
    assert set(touched) <= set(solver.noise.flat_indices(4))
    assert len(touched) == solver.noise.d


@pytest.mark.parametrize("integrator", ["exponential-euler", "exponential-rk2"])
def test_decomposition_into_shifted_flow_plus_noise(integrator):
    cfg = make_solver(N=4, amp=0.5, integrator=integrator)
    U0 = SpectralField.random(4, np.random.default_rng(5), norm=1.0)
    traj = evolve(U0, None, 1.0, cfg, seed=6)
    q = accumulated_noise(traj)
    flow = forced_flow(U0, q, 1.0, cfg, grid=traj.times)
    recon = flow.states + q.values
    assert _dist(recon, traj.states) <= 10 * step_error(traj)


def test_forced_flow_without_forcing_is_unforced_solve(solver):
    U0 = SpectralField.random(4, np.random.default_rng(7), norm=2.0)
    flow = forced_flow(U0, PiecewiseField.constant(np.zeros(solver.n)), 1.0, solver)
    traj = evolve(U0, quiet_path(1.0), 1.0, solver, seed=0)
    assert np.array_equal(flow.times, traj.times)
    assert _dist(flow.states, traj.states) == 0.0


def test_forced_flow_integral_residual():
    cfg = make_solver(N=4, dt=0.005)
    f = q_b_apply(np.array([1.0, -0.5, 0.3, 0.8]), cfg.noise, 4)
    f_path = PiecewiseField.constant(f)
    flow = forced_flow(SpectralField.zeros(4), f_path, 1.0, cfg)
    fine = forced_flow(SpectralField.zeros(4), f_path, 1.0, replace(cfg, dt=cfg.dt / 2))
    err = _dist(fine.states[-1], flow.states[-1])
    assert err > 0
    assert integral_residual(flow) <= 10 * err


def test_step_refinement_converges():
    cfg = make_solver(N=4, amp=0.3)
    U0 = SpectralField.random(4, np.random.default_rng(8), norm=2.0)
    errs = [step_error(evolve(U0, quiet_path(1.0), 1.0, replace(cfg, dt=dt), seed=0)) for dt in (0.02, 0.01, 0.005)]
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(orders >= 0.9), orders


def test_trajectory_exports(solver):
    traj = evolve(np.zeros(solver.n), None, 0.1, solver, seed=9)
    rows = traj.to_csv().splitlines()
    assert len(rows) == len(traj.times) + 1
    assert rows[0].startswith("t,") and len(rows[0].split(",")) == solver.n + 1
    meta = json.loads(traj.to_json())
    assert meta["seed"] == 9 and meta["grid_points"] == len(traj.times)
    assert meta["config"]["noise"]["modes"] == [[0, 1], [1, 1]]


# energy ledger


def test_ledger_balance_without_noise():
    cfg = make_solver(N=4, dt=0.005)
    U0 = SpectralField.random(4, np.random.default_rng(10), norm=2.0)
    traj = evolve(U0, quiet_path(1.0), 1.0, cfg, seed=0)
    led = energy_ledger(traj)
    balance = led["energy"] + 2 * led["dissipation_integral"] - led["energy"][0]
    err = step_error(traj)
    assert np.abs(balance).max() <= 10 * err * 2 * np.sqrt(led["energy"][0])
    assert np.all(np.diff(led["dissipation_integral"]) >= 0)


def test_ledger_closes_with_noise(solver):
    traj = evolve(SpectralField.random(4, np.random.default_rng(11), norm=1.0), None, 1.0, solver, seed=12)
    led = energy_ledger(traj)
    closure = led["energy"] - led["energy"][0] + 2 * led["scheme_dissipation"] - led["noise_work"]
    assert np.abs(closure).max() <= 1e-12 * led["energy"].max()
    assert np.all(np.diff(led["injected_qv"]) >= 0)
    assert np.all(np.diff(led["dissipation_integral"]) >= 0)
    assert led["h1_energy"][0] == pytest.approx(sobolev_norm(traj.state(0), 1) ** 2)
    assert ledger_csv(led).splitlines()[0] == "t,energy,h1_energy,dissipation_integral,injected_qv,noise_work,scheme_dissipation"


def test_linear_noise_energy_matches_recursion():
    # without the nonlinearity each coefficient follows u' = e^{-lam h} u + q dW
    cfg = make_solver(N=3, amp=0.4, dt=0.02, nonlinear=False)
    U0 = SpectralField.random(3, np.random.default_rng(13), norm=1.0).coeffs
    T = 2.0
    res = run_ensemble(U0, T, cfg, trajectory_seeds(14, 1000), record_every=25)
    h = cfg.dt
    decay = np.exp(-2 * dissipation_rates(cfg.dissipation, 3) * h)
    q2 = np.sum(cfg.Q**2, axis=1)
    m = U0**2
    expected = [BASIS_NORM_SQ * m.sum()]
    for _ in range(len(res.times) - 1):
        m = decay * m + q2 * cfg.subordinator.mean_rate * h
        expected.append(BASIS_NORM_SQ * m.sum())
    expected = np.array(expected)[res.record_index]
    E = BASIS_NORM_SQ * np.sum(res.states**2, axis=2)
    mean, se = E.mean(axis=0), E.std(axis=0, ddof=1) / np.sqrt(len(E))
    assert np.all(np.abs(mean[1:] - expected[1:]) <= 3 * se[1:] + 1e-12)


# ensembles


def test_ensemble_independent_of_threads_and_chunks(solver):
    seeds = trajectory_seeds(15, 7)
    a = run_ensemble(np.zeros(solver.n), 0.3, solver, seeds, record_every=5)
    b = run_ensemble(np.zeros(solver.n), 0.3, solver, seeds, record_every=5, threads=3, chunk=2)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.noise_work, b.noise_work)


def test_ensemble_rows_match_single_solves():
    cfg = make_solver(jump_adapted=False)
    seeds = trajectory_seeds(16, 3)
    U0 = SpectralField.random(4, np.random.default_rng(17), norm=1.0).coeffs
    res = run_ensemble(U0, 0.5, cfg, seeds)
    for i, s in enumerate(seeds):
        traj = evolve(U0, None, 0.5, cfg, seed=s)
        assert np.allclose(res.states[i], traj.states, rtol=1e-12, atol=1e-14)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_ensemble_ledger_identity(seed):
    cfg = make_solver(N=3, amp=0.5)
    res = run_ensemble(np.zeros(cfg.n), 0.2, cfg, trajectory_seeds(seed, 4))
    closure = res.energy - res.energy[:, :1] + 2 * res.scheme_dissipation - res.noise_work
    assert np.abs(closure).max() <= 1e-12 * (1 + res.energy.max())
    assert np.all(np.diff(res.ell, axis=1) >= 0)
