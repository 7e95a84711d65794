"""Time integration of the Galerkin-truncated stochastic MHD system.

The linear part ``A^{alpha,beta}`` is diagonal in the basis and is integrated
exactly; the bilinear term is explicit.  Two exponential integrators are
available:

* ``exponential-euler``:  ``U' = E U + phi1 N(U)``
* ``exponential-rk2``:    ``a = E U + phi1 N(U)``, ``U' = a + phi2 (N(a) - N(U))``

with ``E = exp(-lam h)``, ``phi1 = (1 - E)/lam``, ``phi2 = (E - 1 + lam h)/(lam^2 h)``
and ``N(U) = -B(U, U)``.  The noise increment ``Q_b dW`` of a cell is added
after its deterministic substep, so a subordinator jump at ``t_{n+1}`` acts
on the state at ``t_{n+1}``.

A cell whose result is not finite is recomputed with 2, 4, ... equal
substeps, up to ``2**max_halvings``; the noise is still added once at the end.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .fourier_core import BASIS_NORM_SQ, DissipationParams, SpectralField, dissipation_rates, galerkin_space
from .levy_noise import NoiseConfig, SubordinatorModel, SubordinatorPath, sample_path, subordinated_increments

INTEGRATORS = ("exponential-euler", "exponential-rk2")
OVERFLOW = 1e150


class StepFailure(RuntimeError):
    """A step produced a non-finite or overflowing state."""


@dataclass(frozen=True)
class SolverConfig:
    N: int
    dissipation: DissipationParams
    noise: NoiseConfig
    dt: float = 1e-3
    integrator: str = "exponential-euler"
    jump_adapted: bool = True
    nonlinear: bool = True
    max_halvings: int = 6
    subordinator: SubordinatorModel | None = None
    eps_cut: float = 1e-4

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("time step dt must be positive")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}, got {self.integrator!r}")
        if self.N < math.ceil(self.noise.max_wavenumber - 1e-12):
            raise ValueError(f"truncation N={self.N} must cover every forced mode (max |k| = {self.noise.max_wavenumber:.4g})")
        if self.max_halvings < 0:
            raise ValueError("max_halvings must be nonnegative")

    @property
    def n(self) -> int:
        return galerkin_space(self.N).n

    @property
    def Q(self) -> np.ndarray:
        return self.noise.matrix(self.N)

    def describe(self) -> dict:
        return {
            "N": self.N,
            "dt": self.dt,
            "integrator": self.integrator,
            "jump_adapted": self.jump_adapted,
            "nonlinear": self.nonlinear,
            "max_halvings": self.max_halvings,
            "eps_cut": self.eps_cut,
            "dissipation": {"nu1": self.dissipation.nu1, "nu2": self.dissipation.nu2,
                            "alpha": self.dissipation.alpha, "beta": self.dissipation.beta},
            "noise": {"modes": [list(k) for k in self.noise.modes],
                      "amplitudes": self.noise.amplitudes.tolist()},
            "subordinator": self.subordinator.describe() if self.subordinator else None,
        }


def _phi_functions(lam: np.ndarray, h: float):
    x = lam * h
    E = np.exp(-x)
    em1 = -np.expm1(-x)
    small = x < 1e-4
    xs = np.where(small, 1.0, x)
    phi1 = np.where(small, h * (1 - x / 2 + x * x / 6), em1 / np.where(small, 1.0, lam))
    phi2 = np.where(small, h * (0.5 - x / 6 + x * x / 24), h * (x - em1) / xs**2)
    return E, phi1, phi2


class Scheme:
    """Deterministic cell map of a solver configuration and its derivatives.

    All methods accept batched coefficient arrays with the coefficient axis last.
    """

    def __init__(self, cfg: SolverConfig):
        self.cfg = cfg
        self.space = galerkin_space(cfg.N)
        self.lam = dissipation_rates(cfg.dissipation, cfg.N)
        self.rk2 = cfg.integrator == "exponential-rk2"
        self._cache: dict[float, tuple] = {}

    def coefficients(self, h: float):
        c = self._cache.get(h)
        if c is None:
            if len(self._cache) > 4096:
                self._cache.clear()
            c = self._cache[h] = _phi_functions(self.lam, h)
        return c

    # nonlinearity and its derivatives

    def N(self, U):
        if not self.cfg.nonlinear:
            return np.zeros_like(U)
        return -self.space.bilinear(U, U)

    def dN(self, U, X):
        if not self.cfg.nonlinear:
            return np.zeros(np.broadcast_shapes(np.shape(U), np.shape(X)))
        return -(self.space.bilinear(U, X) + self.space.bilinear(X, U))

    def dN_matrix(self, U):
        if not self.cfg.nonlinear:
            return np.zeros((self.space.n, self.space.n))
        return -self.space.linearized(U)

    # one substep

    def substep(self, U, h):
        E, p1, p2 = self.coefficients(h)
        NU = self.N(U)
        a = E * U + p1 * NU
        if not self.rk2:
            return a
        return a + p2 * (self.N(a) - NU)

    def substep_tangent(self, U, X, h):
        """Return ``(Phi(U), DPhi(U) X)``."""
        E, p1, p2 = self.coefficients(h)
        NU = self.N(U)
        a = E * U + p1 * NU
        Xa = E * X + p1 * self.dN(U, X)
        if not self.rk2:
            return a, Xa
        out = a + p2 * (self.N(a) - NU)
        Xout = Xa + p2 * (self.dN(a, Xa) - self.dN(U, X))
        return out, Xout

    def substep_matrix(self, U, h):
        """Dense Jacobian of one substep at a single state ``U``."""
        E, p1, p2 = self.coefficients(h)
        Ju = self.dN_matrix(U)
        Sa = np.diag(E) + p1[:, None] * Ju
        if not self.rk2:
            return Sa
        a = E * U + p1 * self.N(U)
        return Sa + p2[:, None] * (self.dN_matrix(a) @ Sa - Ju)

    def substep_second(self, U, h, X, Y):
        """Second derivative ``D^2 Phi(U)[X, Y]`` of one substep."""
        E, p1, p2 = self.coefficients(h)
        # N is quadratic, so its second derivative is the symmetric form dN
        d2N = self.dN
        a2 = p1 * d2N(X, Y)
        if not self.rk2:
            return a2
        a = E * U + p1 * self.N(U)
        Xa = E * X + p1 * self.dN(U, X)
        Ya = E * Y + p1 * self.dN(U, Y)
        return a2 + p2 * (d2N(Xa, Ya) + self.dN(a, a2) - d2N(X, Y))

    # whole cells (possibly with substeps)

    def cell(self, U, h, sub: int = 1):
        hs = h / sub
        for _ in range(sub):
            U = self.substep(U, hs)
        return U

    def cell_states(self, U, h, sub: int):
        """Substep entry states of a cell (length ``sub``)."""
        hs = h / sub
        out = [U]
        for _ in range(sub - 1):
            out.append(self.substep(out[-1], hs))
        return out, hs

    def cell_matrix(self, U, h, sub: int = 1):
        states, hs = self.cell_states(U, h, sub)
        S = self.substep_matrix(states[0], hs)
        for V in states[1:]:
            S = self.substep_matrix(V, hs) @ S
        return S

    def cell_tangent(self, U, X, h, sub: int = 1):
        hs = h / sub
        for _ in range(sub):
            U, X = self.substep_tangent(U, X, hs)
        return U, X

    def cell_second(self, U, h, sub, X, Y, R):
        """Propagate ``(X, Y, R)`` with ``R' = DPhi R + D^2Phi[X, Y]`` through a cell."""
        states, hs = self.cell_states(U, h, sub)
        for V in states:
            R = self.substep_tangent(V, R, hs)[1] + self.substep_second(V, hs, X, Y)
            X = self.substep_tangent(V, X, hs)[1]
            Y = self.substep_tangent(V, Y, hs)[1]
        return X, Y, R


def _finite(U) -> np.ndarray:
    U = np.atleast_2d(U)
    return np.all(np.isfinite(U), axis=-1) & np.all(np.abs(U) < OVERFLOW, axis=-1)


def advance_cell(scheme: Scheme, U: np.ndarray, h: float):
    """Deterministic cell map with automatic step halving.

    ``U`` may be batched; returns ``(U_new, substeps)`` with one substep count per row.
    """
    U = np.asarray(U, dtype=float)
    batch = U.reshape(-1, U.shape[-1])
    out = scheme.cell(batch, h, 1)
    subs = np.ones(len(batch), dtype=np.int64)
    bad = ~_finite(out)
    sub = 1
    for _ in range(scheme.cfg.max_halvings):
        if not bad.any():
            break
        sub *= 2
        idx = np.flatnonzero(bad)
        with np.errstate(over="ignore", invalid="ignore"):
            out[idx] = scheme.cell(batch[idx], h, sub)
        subs[idx] = sub
        bad[idx] = ~_finite(out[idx])
    if bad.any():
        raise StepFailure(f"non-finite state after {scheme.cfg.max_halvings} halvings of h={h:g}")
    return out.reshape(U.shape), subs.reshape(U.shape[:-1])


def step(U, dt: float, noise_increment, cfg: SolverConfig) -> SpectralField:
    """One cell: exponential-integrator substep, then the additive noise increment.

    ``noise_increment`` is a field (already ``Q_b dW``), a ``d``-vector ``dW``,
    or ``None``.  Raises :class:`StepFailure` if the result is not finite; the
    caller decides whether to halve ``dt``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    coeffs = U.coeffs if isinstance(U, SpectralField) else np.asarray(U, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = Scheme(cfg).substep(coeffs, dt)
    if noise_increment is not None:
        if isinstance(noise_increment, SpectralField):
            out = out + noise_increment.coeffs
        else:
            z = np.asarray(noise_increment, dtype=float)
            out = out + (cfg.Q @ z if z.shape == (cfg.noise.d,) else z)
    if not _finite(out).all():
        raise StepFailure(f"non-finite state at dt={dt:g}")
    return SpectralField(cfg.N, out)


def time_grid(T: float, dt: float, jump_times=()) -> np.ndarray:
    """Uniform grid on ``[0, T]`` (step at most ``dt``) united with jump times in ``(0, T]``."""
    if T <= 0:
        raise ValueError("horizon T must be positive")
    cells = max(1, int(math.ceil(T / dt - 1e-9)))
    grid = np.linspace(0.0, T, cells + 1)
    jt = np.asarray(jump_times, dtype=float)
    jt = jt[(jt > 0) & (jt <= T)]
    if len(jt):
        grid = np.union1d(grid, jt)
    return grid


def _seed_streams(seed):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    # derived without spawn() so reusing a SeedSequence replays the same streams
    path_ss, noise_ss = (np.random.SeedSequence(ss.entropy, spawn_key=ss.spawn_key + (i,),
                                                pool_size=ss.pool_size) for i in range(2))
    return np.random.default_rng(path_ss), np.random.default_rng(noise_ss)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Replayable record of a solve on a fixed grid.

    ``states[i]`` is the state at ``times[i]``; cell ``i`` spans
    ``[times[i], times[i+1]]``, used ``substeps[i]`` substeps and ended with
    the increment ``Q_b dW[i]`` whose variance is ``dl[i]`` per component.
    """

    times: np.ndarray
    states: np.ndarray
    dW: np.ndarray
    dl: np.ndarray
    substeps: np.ndarray
    cfg: SolverConfig
    path: SubordinatorPath | None = None
    seed: int | None = None

    def __post_init__(self):
        for name in ("times", "states", "dW", "dl", "substeps"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory grid must be strictly increasing")
        if len(self.states) != len(self.times):
            raise ValueError("state count must equal grid count")

    @property
    def N(self) -> int:
        return self.cfg.N

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def noise(self) -> np.ndarray:
        """Applied increments ``Q_b dW`` as coefficient rows."""
        return self.dW @ self.cfg.Q.T

    @property
    def pre_noise(self) -> np.ndarray:
        """States at the end of each cell before the noise is added."""
        return self.states[1:] - self.noise

    @property
    def ell(self) -> np.ndarray:
        """``l_t - l_0`` at grid times, as used by the solve."""
        return np.concatenate([[0.0], np.cumsum(self.dl)])

    def state(self, i: int) -> SpectralField:
        return SpectralField(self.N, self.states[i])

    def index_of(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t))
        tol = 1e-9 * max(1.0, self.horizon)
        for j in (i - 1, i):
            if 0 <= j < len(self.times) and abs(self.times[j] - t) <= tol:
                return j
        raise ValueError(f"time {t} is not a grid time of the trajectory on [0, {self.horizon}]")

    def at(self, t: float) -> SpectralField:
        return self.state(self.index_of(t))

    def manifest(self) -> dict:
        return {
            "grid_points": len(self.times),
            "horizon": self.horizon,
            "seed": self.seed,
            "max_substeps": int(self.substeps.max()) if len(self.substeps) else 1,
            "jumps": 0 if self.path is None else len(self.path.jump_times),
            "config": self.cfg.describe(),
        }

    def to_json(self) -> str:
        return json.dumps(self.manifest(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        space = galerkin_space(self.N)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = []
        for i in range(space.n):
            m = space.describe(i)
            cols.append(f"{m.slot[0]}_{m.k[0]}_{m.k[1]}_{m.parity}")
        w.writerow(["t"] + cols)
        for t, row in zip(self.times, self.states):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])
        return buf.getvalue()


def _integrate(U0: np.ndarray, times, dW, cfg: SolverConfig, scheme: Scheme | None = None, substeps=None):
    scheme = scheme or Scheme(cfg)
    Q = cfg.Q
    G = len(times) - 1
    states = np.empty((G + 1, cfg.n))
    states[0] = U0
    subs = np.ones(G, dtype=np.int64)
    for i in range(G):
        h = times[i + 1] - times[i]
        if substeps is None:
            det, s = advance_cell(scheme, states[i], h)
            subs[i] = int(s)
        else:
            det = scheme.cell(states[i], h, int(substeps[i]))
            subs[i] = int(substeps[i])
        states[i + 1] = det + Q @ dW[i]
        if not _finite(states[i + 1]).all():
            raise StepFailure(f"non-finite state at t={times[i + 1]:g}")
    return states, subs


def _as_coeffs(U0, N):
    if isinstance(U0, SpectralField):
        if U0.N != N:
            raise ValueError(f"initial state has N={U0.N}, solver uses N={N}")
        return U0.coeffs.copy()
    return np.array(U0, dtype=float).reshape(galerkin_space(N).n)


def evolve(U0, path: SubordinatorPath | None, T: float, cfg: SolverConfig, seed=None) -> Trajectory:
    """Solve on ``[0, T]``.  Deterministic given ``(U0, path, seed)``.

    If ``path`` is ``None`` it is sampled from ``cfg.subordinator`` with the
    path stream of ``seed``.  Noise increments come from the noise stream.
    """
    path_rng, noise_rng = _seed_streams(seed)
    if path is None:
        if cfg.subordinator is None:
            raise ValueError("no path given and no subordinator model in the solver config")
        path = sample_path(cfg.subordinator, T, cfg.eps_cut, path_rng)
        path = replace(path, seed=seed if isinstance(seed, (int, np.integer)) else None)
    if path.horizon < T - 1e-12:
        raise ValueError(f"subordinator path horizon {path.horizon} is shorter than T={T}")
    times = time_grid(T, cfg.dt, path.jump_times if cfg.jump_adapted else ())
    dW = subordinated_increments(path, times, cfg.noise.d, noise_rng)
    dl = np.diff(path.value(times))
    states, subs = _integrate(_as_coeffs(U0, cfg.N), times, dW, cfg)
    return Trajectory(times, states, dW, dl, subs, cfg, path, seed if isinstance(seed, (int, np.integer)) else None)


def replay(traj: Trajectory, U0=None, dW=None, cfg: SolverConfig | None = None, keep_substeps: bool = False) -> Trajectory:
    """Re-run a trajectory on its grid, optionally with a new start, increments or config."""
    cfg = cfg or traj.cfg
    U0 = traj.states[0] if U0 is None else _as_coeffs(U0, cfg.N)
    dW = traj.dW if dW is None else np.asarray(dW, dtype=float)
    states, subs = _integrate(U0, traj.times, dW, cfg, substeps=traj.substeps if keep_substeps else None)
    return Trajectory(traj.times, states, dW, traj.dl, subs, cfg, traj.path, traj.seed)


def refine(traj: Trajectory, factor: int = 2) -> Trajectory:
    """Same noise, every cell split into ``factor`` times as many substeps."""
    states, subs = _integrate(traj.states[0], traj.times, traj.dW, traj.cfg, substeps=traj.substeps * factor)
    return Trajectory(traj.times, states, traj.dW, traj.dl, subs, traj.cfg, traj.path, traj.seed)


def step_error(traj: Trajectory) -> float:
    """Step-doubling error estimate: max L2 distance to the refined solve on the same noise."""
    fine = refine(traj, 2)
    diff = fine.states - traj.states
    return float(np.sqrt(BASIS_NORM_SQ * np.max(np.sum(diff**2, axis=1))))


@dataclass(frozen=True, eq=False)
class PiecewiseField:
    """Right-continuous piecewise-constant field path: ``values[i]`` on ``[times[i], times[i+1])``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        v = np.array(self.values, dtype=float)
        if t.ndim != 1 or v.ndim != 2 or len(t) != len(v):
            raise ValueError("times and values must have matching lengths")
        if t[0] != 0 or np.any(np.diff(t) <= 0):
            raise ValueError("breakpoints must start at 0 and increase strictly")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, F) -> "PiecewiseField":
        c = F.coeffs if isinstance(F, SpectralField) else np.asarray(F, dtype=float)
        return cls(np.zeros(1), c[None, :])

    def value(self, t) -> np.ndarray:
        return self.values[np.searchsorted(self.times, t, side="right") - 1]


@dataclass(frozen=True, eq=False)
class ForcedFlow:
    times: np.ndarray
    states: np.ndarray
    forcing: PiecewiseField
    cfg: SolverConfig

    def state(self, i: int) -> SpectralField:
        return SpectralField(self.cfg.N, self.states[i])


def forced_flow(U0, f: PiecewiseField, T: float, cfg: SolverConfig, grid=None) -> ForcedFlow:
    """Solve ``V' = -A(V + f) - B(V + f, V + f)`` with ``f`` frozen on each cell.

    The grid contains every breakpoint of ``f``; cell ``i`` uses ``f(t_i)``.
    With the exponential-Euler scheme this reproduces ``U = V + q`` exactly,
    where ``q`` is the accumulated noise of a trajectory on the same grid.
    """
    if grid is None:
        grid = time_grid(T, cfg.dt, f.times[1:])
    grid = np.asarray(grid, dtype=float)
    scheme = Scheme(cfg)
    lam = scheme.lam
    V = np.empty((len(grid), cfg.n))
    V[0] = _as_coeffs(U0, cfg.N)
    for i in range(len(grid) - 1):
        h = grid[i + 1] - grid[i]
        fi = f.value(grid[i])
        # shift the nonlinearity and the linear forcing -A f
        E, p1, p2 = scheme.coefficients(h)
        nonlin = lambda W: scheme.N(W + fi) - lam * fi
        N0 = nonlin(V[i])
        a = E * V[i] + p1 * N0
        V[i + 1] = a + p2 * (nonlin(a) - N0) if scheme.rk2 else a
        if not _finite(V[i + 1]).all():
            raise StepFailure(f"non-finite forced-flow state at t={grid[i + 1]:g}")
    return ForcedFlow(grid, V, f, cfg)


def accumulated_noise(traj: Trajectory) -> PiecewiseField:
    """``q_t = Q_b (W_{l_t} - W_{l_0})`` as a right-continuous piecewise-constant path."""
    q = np.concatenate([np.zeros((1, traj.cfg.n)), np.cumsum(traj.noise, axis=0)])
    return PiecewiseField(traj.times, q)


def integral_residual(flow: ForcedFlow) -> float:
    """L2 norm at the final time of ``V_T - [V_0 - int A(V+f) - int B(V+f, V+f)]`` (trapezoid rule).

    The forcing is evaluated cell by cell from the left, matching its
    right-continuous definition on the grid.
    """
    scheme = Scheme(flow.cfg)
    acc = np.zeros(flow.cfg.n)
    for i in range(len(flow.times) - 1):
        h = flow.times[i + 1] - flow.times[i]
        fi = flow.forcing.value(flow.times[i])
        rhs = lambda W: -scheme.lam * (W + fi) + scheme.N(W + fi)
        acc += 0.5 * h * (rhs(flow.states[i]) + rhs(flow.states[i + 1]))
    res = flow.states[-1] - (flow.states[0] + acc)
    return float(np.sqrt(BASIS_NORM_SQ * res @ res))


LEDGER_COLUMNS = ("t", "energy", "h1_energy", "dissipation_integral", "injected_qv",
                  "noise_work", "scheme_dissipation")


def energy_ledger(traj: Trajectory) -> dict:
    """Pathwise energy bookkeeping on the trajectory grid.

    * ``energy``: ``||U_t||^2``;  ``h1_energy``: ``||U_t||_1^2``
    * ``dissipation_integral``: trapezoid rule for ``int_0^t <A U, U> ds``
    * ``injected_qv``: ``sum ||Q_b dW||^2`` (quadratic variation of the noise)
    * ``noise_work``: ``sum (2 <Phi(U_n), Q_b dW_n> + ||Q_b dW_n||^2)``
    * ``scheme_dissipation``: ``sum (||U_n||^2 - ||Phi(U_n)||^2) / 2``

    The last two satisfy ``energy = energy_0 - 2 scheme_dissipation + noise_work``
    to round-off.
    """
    U = traj.states
    lam = dissipation_rates(traj.cfg.dissipation, traj.N)
    k2 = galerkin_space(traj.N).wavenumber_sq
    energy = BASIS_NORM_SQ * np.sum(U**2, axis=1)
    h1 = BASIS_NORM_SQ * np.sum(k2 * U**2, axis=1)
    diss_rate = BASIS_NORM_SQ * np.sum(lam * U**2, axis=1)
    h = np.diff(traj.times)
    diss = np.concatenate([[0.0], np.cumsum(0.5 * h * (diss_rate[1:] + diss_rate[:-1]))])
    noise = traj.noise
    pre = traj.pre_noise
    qv = BASIS_NORM_SQ * np.sum(noise**2, axis=1)
    work = 2 * BASIS_NORM_SQ * np.sum(pre * noise, axis=1) + qv
    scheme_diss = 0.5 * (energy[:-1] - BASIS_NORM_SQ * np.sum(pre**2, axis=1))
    cum = lambda x: np.concatenate([[0.0], np.cumsum(x)])
    return {
        "t": traj.times.copy(),
        "energy": energy,
        "h1_energy": h1,
        "dissipation_integral": diss,
        "injected_qv": cum(qv),
        "noise_work": cum(work),
        "scheme_dissipation": cum(scheme_diss),
    }


def ledger_csv(ledger: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LEDGER_COLUMNS)
    for row in zip(*(ledger[c] for c in LEDGER_COLUMNS)):
        w.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


# ensembles


def trajectory_seeds(master_seed: int, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(master_seed).spawn(count)


@dataclass
class EnsembleResult:
    """Batched solve on a common uniform grid.

    ``record_times`` are the grid times at which ``states`` (shape ``(M, R, n)``)
    were stored; ``tangents`` has the same layout when requested.  Per-trajectory
    running sums of the ledger quantities are kept for every grid time.
    """

    times: np.ndarray
    record_index: np.ndarray
    states: np.ndarray
    tangents: np.ndarray | None
    energy: np.ndarray
    h1_integral: np.ndarray
    injected_qv: np.ndarray
    noise_work: np.ndarray
    scheme_dissipation: np.ndarray
    ell: np.ndarray

    @property
    def record_times(self) -> np.ndarray:
        return self.times[self.record_index]

    @property
    def final(self) -> np.ndarray:
        return self.states[:, -1]


def _noise_for(seed_seq, cfg: SolverConfig, times: np.ndarray):
    path_rng, noise_rng = _seed_streams(seed_seq)
    path = sample_path(cfg.subordinator, float(times[-1]), cfg.eps_cut, path_rng)
    dW = subordinated_increments(path, times, cfg.noise.d, noise_rng)
    return dW, np.diff(path.value(times))


def _run_chunk(U0, seeds, cfg, times, record_index, tangent0):
    M = len(seeds)
    G = len(times) - 1
    scheme = Scheme(cfg)
    Q = cfg.Q
    if cfg.subordinator is not None and cfg.noise.B0 > 0:
        noise = [_noise_for(s, cfg, times) for s in seeds]
        dW = np.stack([x[0] for x in noise])
        dl = np.stack([x[1] for x in noise])
    else:
        dW = np.zeros((M, G, cfg.noise.d))
        dl = np.zeros((M, G))
    U = np.array(U0, dtype=float)
    X = None if tangent0 is None else np.array(tangent0, dtype=float)
    k2 = galerkin_space(cfg.N).wavenumber_sq
    R = len(record_index)
    states = np.empty((M, R, cfg.n))
    tangents = None if X is None else np.empty((M, R, cfg.n))
    energy = np.empty((M, G + 1))
    h1_rate = np.empty((M, G + 1))
    qv = np.zeros((M, G + 1))
    work = np.zeros((M, G + 1))
    sdiss = np.zeros((M, G + 1))
    rec = {int(i): r for r, i in enumerate(record_index)}

    def store(i):
        energy[:, i] = BASIS_NORM_SQ * np.sum(U**2, axis=1)
        h1_rate[:, i] = BASIS_NORM_SQ * np.sum(k2 * U**2, axis=1)
        if i in rec:
            states[:, rec[i]] = U
            if X is not None:
                tangents[:, rec[i]] = X

    store(0)
    for i in range(G):
        h = times[i + 1] - times[i]
        if X is None:
            det, _ = advance_cell(scheme, U, h)
        else:
            det, X = scheme.cell_tangent(U, X, h)
            if not _finite(det).all() or not _finite(X).all():
                raise StepFailure(f"non-finite ensemble state at t={times[i + 1]:g}")
        inc = dW[:, i] @ Q.T
        q = BASIS_NORM_SQ * np.sum(inc**2, axis=1)
        qv[:, i + 1] = qv[:, i] + q
        work[:, i + 1] = work[:, i] + 2 * BASIS_NORM_SQ * np.sum(det * inc, axis=1) + q
        sdiss[:, i + 1] = sdiss[:, i] + 0.5 * (energy[:, i] - BASIS_NORM_SQ * np.sum(det**2, axis=1))
        U = det + inc
        store(i + 1)
    h = np.diff(times)
    h1_int = np.concatenate([np.zeros((M, 1)), np.cumsum(0.5 * h * (h1_rate[:, 1:] + h1_rate[:, :-1]), axis=1)], axis=1)
    ell = np.concatenate([np.zeros((M, 1)), np.cumsum(dl, axis=1)], axis=1)
    return states, tangents, energy, h1_int, qv, work, sdiss, ell


def run_ensemble(U0, T: float, cfg: SolverConfig, seeds, record_every: int = 1, tangent=None,
                 threads: int = 1, chunk: int = 256) -> EnsembleResult:
    """Solve ``M = len(seeds)`` independent trajectories on a uniform grid.

    Each trajectory draws its own subordinator path and increments from its
    seed, so results do not depend on ``threads`` or ``chunk``.  ``U0`` is one
    state or an ``(M, n)`` array; ``tangent`` optionally propagates
    ``J_{0,t} xi`` alongside (one ``xi`` or an ``(M, n)`` array).
    """
    seeds = list(seeds)
    M = len(seeds)
    n = cfg.n
    U0 = np.broadcast_to(_as_coeffs(U0, cfg.N) if isinstance(U0, SpectralField) else np.asarray(U0, float), (M, n))
    if tangent is not None:
        tangent = tangent.coeffs if isinstance(tangent, SpectralField) else np.asarray(tangent, float)
        tangent = np.broadcast_to(tangent, (M, n))
    times = time_grid(T, cfg.dt)
    G = len(times) - 1
    record_index = np.unique(np.concatenate([np.arange(0, G + 1, max(1, record_every)), [G]]))
    bounds = list(range(0, M, chunk)) + [M]
    jobs = [(U0[a:b], seeds[a:b], cfg, times, record_index, None if tangent is None else tangent[a:b])
            for a, b in zip(bounds[:-1], bounds[1:])]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda j: _run_chunk(*j), jobs))
    else:
        parts = [_run_chunk(*j) for j in jobs]
    cat = lambda k: None if parts[0][k] is None else np.concatenate([p[k] for p in parts])
    return EnsembleResult(times, record_index, cat(0), cat(1), cat(2), cat(3), cat(4), cat(5), cat(6), cat(7))
