"""Variational solves along a frozen trajectory.

Everything here differentiates the discrete solver itself: the Jacobian is
the product of cell Jacobians ``S_n = DPhi_n(U_n)``, the adjoint is its
transpose (the inner product is ``2 pi^2`` times the Euclidean one, so the
adjoint in coefficient space is the plain transpose), and the second
variation is the exact second derivative of the composed cell maps.
Finite differences of the solver therefore converge at first order and the
forward/adjoint duality gap is round-off.

The noise increment of cell ``n`` is added at ``t_{n+1}``, which is the
discrete ``gamma_u`` for every ``u`` in the ell-cell ``(l_{t_n}, l_{t_{n+1}}]``.
Hence

    A_{s,t} v = sum_n J_{t_{n+1}, t} Q_b V_n,     V_n = int_{cell n} v du,

and the Malliavin matrix is ``sum_n dl_n C_n C_n^T`` with ``C_n = J_{t_{n+1},t} Q_b``.
"""

from __future__ import annotations

import json
import math
import weakref
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .dynamics import Scheme, Trajectory
from .fourier_core import BASIS_NORM_SQ, SpectralField, galerkin_space
from .levy_noise import SubordinatorPath

_matrix_cache: "weakref.WeakKeyDictionary[Trajectory, dict]" = weakref.WeakKeyDictionary()


def _coeffs(F, n):
    c = F.coeffs if isinstance(F, SpectralField) else np.asarray(F, dtype=float)
    if c.shape[-1] != n:
        raise ValueError(f"expected {n} coefficients, got {c.shape[-1]}")
    return c


def _span(traj: Trajectory, s: float, t: float) -> tuple[int, int]:
    if s > t + 1e-12:
        raise ValueError(f"interval [{s}, {t}] is reversed")
    if s < traj.times[0] - 1e-12 or t > traj.horizon + 1e-12:
        raise ValueError(f"interval [{s}, {t}] lies outside the trajectory [0, {traj.horizon}]")
    return traj.index_of(s), traj.index_of(t)


def cell_matrix(traj: Trajectory, n: int) -> np.ndarray:
    """Jacobian ``S_n`` of the deterministic map of cell ``n`` (cached per trajectory)."""
    cache = _matrix_cache.setdefault(traj, {})
    S = cache.get(n)
    if S is None:
        scheme = cache.get("scheme")
        if scheme is None:
            scheme = cache["scheme"] = Scheme(traj.cfg)
        h = traj.times[n + 1] - traj.times[n]
        S = cache[n] = scheme.cell_matrix(traj.states[n], h, int(traj.substeps[n]))
    return S


def jacobian_matrix(traj: Trajectory, s: float, t: float) -> np.ndarray:
    i, j = _span(traj, s, t)
    J = np.eye(traj.cfg.n)
    for n in range(i, j):
        J = cell_matrix(traj, n) @ J
    return J


def jacobian(traj: Trajectory, s: float, t: float, xi) -> SpectralField:
    """``J_{s,t} xi``; ``J_{s,s}`` is the identity."""
    i, j = _span(traj, s, t)
    x = _coeffs(xi, traj.cfg.n).astype(float)
    for n in range(i, j):
        x = cell_matrix(traj, n) @ x
    return SpectralField(traj.N, x)


@dataclass(frozen=True, eq=False)
class AdjointPath:
    """``K_{r,T} phi`` at every grid time ``r`` in ``[t, T]``."""

    times: np.ndarray
    values: np.ndarray
    N: int

    def at(self, r: float) -> SpectralField:
        i = int(np.argmin(np.abs(self.times - r)))
        if abs(self.times[i] - r) > 1e-9 * max(1.0, abs(r)):
            raise ValueError(f"time {r} is not on the adjoint grid")
        return SpectralField(self.N, self.values[i])


def adjoint(traj: Trajectory, t: float, T: float, phi) -> AdjointPath:
    """Backward solve ``K_{r,T} phi = S_r^T ... S_{T-1}^T phi`` stored on the grid of ``[t, T]``.

    The grid contains every jump time of the subordinator above the cutoff
    when the trajectory is jump-adapted.
    """
    i, j = _span(traj, t, T)
    vals = np.empty((j - i + 1, traj.cfg.n))
    vals[-1] = _coeffs(phi, traj.cfg.n)
    for n in range(j - 1, i - 1, -1):
        vals[n - i] = cell_matrix(traj, n).T @ vals[n - i + 1]
    return AdjointPath(traj.times[i:j + 1].copy(), vals, traj.N)


def second_variation(traj: Trajectory, s: float, t: float, xi, xi2) -> SpectralField:
    """``J^{(2)}_{s,t}(xi, xi')``: second derivative of ``U_t`` in the directions ``xi, xi'`` at time ``s``."""
    i, j = _span(traj, s, t)
    n_ = traj.cfg.n
    X = _coeffs(xi, n_).astype(float)
    Y = _coeffs(xi2, n_).astype(float)
    R = np.zeros(n_)
    scheme = Scheme(traj.cfg)
    for n in range(i, j):
        h = traj.times[n + 1] - traj.times[n]
        X, Y, R = scheme.cell_second(traj.states[n], h, int(traj.substeps[n]), X, Y, R)
    return SpectralField(traj.N, R)


@dataclass(frozen=True, eq=False)
class ControlFunction:
    """Piecewise-constant ``v: [u_0, u_m] -> R^d``, ``values[i]`` on ``[breakpoints[i], breakpoints[i+1])``."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        b = np.array(self.breakpoints, dtype=float).reshape(-1)
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or len(b) != len(v) + 1:
            raise ValueError("need one value row per breakpoint interval")
        if np.any(np.diff(b) < 0):
            raise ValueError("control breakpoints must be nondecreasing")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @classmethod
    def constant(cls, start: float, stop: float, value) -> "ControlFunction":
        return cls(np.array([start, stop]), np.asarray(value, dtype=float)[None, :])

    @classmethod
    def zero(cls, start: float, stop: float, d: int) -> "ControlFunction":
        return cls.constant(start, stop, np.zeros(d))

    def integrate_cells(self, edges) -> np.ndarray:
        """``int v du`` over each interval ``[edges[n], edges[n+1]]``."""
        edges = np.asarray(edges, dtype=float)
        # cumulative integral at the breakpoints, then linear interpolation
        widths = np.diff(self.breakpoints)
        cum = np.concatenate([np.zeros((1, self.d)), np.cumsum(widths[:, None] * self.values, axis=0)])
        at = np.stack([np.interp(edges, self.breakpoints, cum[:, c]) for c in range(self.d)], axis=1)
        return np.diff(at, axis=0)

    def l2_norm(self) -> float:
        return float(math.sqrt(np.sum(np.diff(self.breakpoints)[:, None] * self.values**2)))


def _path_check(traj: Trajectory, path: SubordinatorPath | None):
    if path is not None and traj.path is not None and path is not traj.path:
        ell = path.value(traj.times) - path.value(traj.times[0])
        if not np.allclose(ell, traj.ell, rtol=1e-12, atol=1e-12):
            raise ValueError("subordinator path does not match the one used by the trajectory")


def _control_cells(traj: Trajectory, i: int, j: int, v: ControlFunction) -> np.ndarray:
    ell = traj.ell
    lo, hi = ell[i], ell[j]
    tol = 1e-9 * max(1.0, hi)
    if v.d != traj.cfg.noise.d:
        raise ValueError(f"control has dimension {v.d}, noise has d={traj.cfg.noise.d}")
    if abs(v.breakpoints[0] - lo) > tol or abs(v.breakpoints[-1] - hi) > tol:
        raise ValueError(
            f"control grid [{v.breakpoints[0]:.6g}, {v.breakpoints[-1]:.6g}] does not match "
            f"the ell-interval [{lo:.6g}, {hi:.6g}]"
        )
    return v.integrate_cells(ell[i:j + 1])


def a_apply(traj: Trajectory, path: SubordinatorPath | None, s: float, t: float, v: ControlFunction) -> SpectralField:
    """``A_{s,t} v = int_{l_s}^{l_t} J_{gamma_u, t} Q_b v_u du``."""
    _path_check(traj, path)
    i, j = _span(traj, s, t)
    V = _control_cells(traj, i, j, v)
    Q = traj.cfg.Q
    R = np.zeros(traj.cfg.n)
    for n in range(i, j):
        R = cell_matrix(traj, n) @ R + Q @ V[n - i]
    return SpectralField(traj.N, R)


def _noise_columns(traj: Trajectory, i: int, j: int) -> np.ndarray:
    """``C_n = J_{t_{n+1}, t_j} Q_b`` for ``n = i..j-1``, shape ``(j-i, n, d)``."""
    Q = traj.cfg.Q
    G = np.eye(traj.cfg.n)
    cols = np.empty((j - i, traj.cfg.n, Q.shape[1]))
    for n in range(j - 1, i - 1, -1):
        cols[n - i] = G @ Q
        G = G @ cell_matrix(traj, n)
    return cols


def a_star_apply(traj: Trajectory, s: float, t: float, phi) -> ControlFunction:
    """``A*_{s,t} phi`` as a control on the ell-cells of ``[l_s, l_t]``."""
    i, j = _span(traj, s, t)
    cols = _noise_columns(traj, i, j)
    vals = BASIS_NORM_SQ * np.einsum("cnd,n->cd", cols, _coeffs(phi, traj.cfg.n))
    return ControlFunction(traj.ell[i:j + 1], vals)


def malliavin_gram(traj: Trajectory, s: float, t: float) -> np.ndarray:
    """Full matrix ``G_{ij} = <M phi_i, phi_j>`` over the unnormalized basis of the simulation space."""
    i, j = _span(traj, s, t)
    cols = _noise_columns(traj, i, j)
    w = traj.dl[i:j]
    G = BASIS_NORM_SQ**2 * np.einsum("c,cnd,cmd->nm", w, cols, cols)
    return 0.5 * (G + G.T)


def malliavin_operator(traj: Trajectory, s: float, t: float) -> np.ndarray:
    """Coefficient matrix of the operator ``M = A A*`` (self-adjoint for the ``2 pi^2``-weighted product)."""
    return malliavin_gram(traj, s, t) / BASIS_NORM_SQ


def malliavin_form(traj: Trajectory, path: SubordinatorPath | None, s: float, t: float, phi) -> float:
    """``sum_{k,l} (alpha_k^l)^2 int_s^t <K_{r,t} phi, sigma_k^l>^2 dl_r`` from the adjoint path."""
    _path_check(traj, path)
    i, j = _span(traj, s, t)
    K = adjoint(traj, s, t, phi)
    idx = traj.cfg.noise.flat_indices(traj.N)
    amps = traj.cfg.noise.amplitudes.reshape(-1)
    proj = BASIS_NORM_SQ * K.values[1:, idx]
    return float(np.sum(traj.dl[i:j] * np.sum((amps * proj) ** 2, axis=1)))


@dataclass(frozen=True, eq=False)
class MalliavinMatrix:
    N: int
    basis: tuple
    entries: np.ndarray
    eigenvalues: np.ndarray
    interval: tuple
    seed: int | None = None

    @property
    def operator(self) -> np.ndarray:
        return self.entries / BASIS_NORM_SQ

    @property
    def trace(self) -> float:
        return float(np.trace(self.entries))

    def to_json(self) -> str:
        return json.dumps({
            "N": self.N,
            "basis": [list(b) for b in self.basis],
            "entries": self.entries.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "interval": list(self.interval),
            "seed": self.seed,
        }, indent=1)


def malliavin_matrix(traj: Trajectory, path: SubordinatorPath | None, s: float, t: float, N: int | None = None) -> MalliavinMatrix:
    """Gram entries ``<M phi_i, phi_j>`` over the basis of ``H_N`` with eigenvalues attached."""
    _path_check(traj, path)
    N = traj.N if N is None else int(N)
    if N > traj.N:
        raise ValueError(f"H_N with N={N} exceeds the simulation truncation {traj.N}")
    space = galerkin_space(traj.N)
    keep = np.flatnonzero(space.low_mode_mask(N))
    G = malliavin_gram(traj, s, t)[np.ix_(keep, keep)]
    basis = tuple((m.slot, m.k[0], m.k[1], m.parity) for m in map(space.describe, keep))
    return MalliavinMatrix(N, basis, G, np.sort(linalg.eigvalsh(G)), (float(s), float(t)), traj.seed)


@dataclass(frozen=True)
class ResidualReport:
    rho: SpectralField
    recursion_gap: float
    integral_residual: float


def control_residual(traj: Trajectory, path: SubordinatorPath | None, xi, v: ControlFunction, t: float) -> ResidualReport:
    """``rho_t = J_{0,t} xi - A_{0,t} v`` checked against the linear equation it solves.

    ``recursion_gap`` compares with the direct recursion ``rho_{n+1} = S_n rho_n - Q_b V_n``;
    ``integral_residual`` is the residual of the mild form
    ``rho_t = e^{-tA} xi + int e^{-(t-s)A} DB(U_s) rho_s ds - sum e^{-(t-t_{n+1})A} Q_b V_n``
    with the trapezoid rule on each cell, so the stiff dissipation is integrated exactly.
    """
    _path_check(traj, path)
    i, j = _span(traj, 0.0, t)
    rho = jacobian(traj, 0.0, t, xi) - a_apply(traj, path, 0.0, t, v)
    V = _control_cells(traj, i, j, v)
    Q = traj.cfg.Q
    scheme = Scheme(traj.cfg)
    r = np.empty((j - i + 1, traj.cfg.n))
    r[0] = _coeffs(xi, traj.cfg.n)
    for n in range(i, j):
        r[n - i + 1] = cell_matrix(traj, n) @ r[n - i] - Q @ V[n - i]
    gap = r[-1] - rho.coeffs
    coupling = lambda n, x: scheme.dN(traj.states[n], x)
    lam, tj = scheme.lam, traj.times[j]
    acc = np.exp(-lam * (tj - traj.times[i])) * r[0]
    for n in range(i, j):
        a, b = traj.times[n], traj.times[n + 1]
        # the control acts at the right end of a cell, so the state entering that end is pre-control
        left = np.exp(-lam * (tj - a)) * coupling(n, r[n - i])
        right = np.exp(-lam * (tj - b)) * coupling(n + 1, r[n - i + 1] + Q @ V[n - i])
        acc += 0.5 * (b - a) * (left + right) - np.exp(-lam * (tj - b)) * (Q @ V[n - i])
    res = r[-1] - acc
    norm = lambda x: float(math.sqrt(BASIS_NORM_SQ * x @ x))
    return ResidualReport(rho, norm(gap), norm(res))


@dataclass(frozen=True, eq=False)
class TikhonovControl:
    v: ControlFunction
    kappa: float
    rho: SpectralField
    target: SpectralField


def tikhonov_control(traj: Trajectory, xi, t: float, kappa: float | None = None) -> TikhonovControl:
    """``v = A*(M + kappa)^{-1} J_{0,t} xi`` so that ``rho_t = kappa (M + kappa)^{-1} J_{0,t} xi``.

    The default ``kappa`` is ``1e-6 * trace(M) / dim``.
    """
    M = malliavin_operator(traj, 0.0, t)
    if kappa is None:
        kappa = 1e-6 * float(np.trace(M)) / len(M)
    if kappa <= 0:
        raise ValueError("regularization kappa must be positive (is M zero?)")
    target = jacobian(traj, 0.0, t, xi)
    y = linalg.solve(M + kappa * np.eye(len(M)), target.coeffs, assume_a="pos")
    v = a_star_apply(traj, 0.0, t, y)
    rho = control_residual(traj, None, xi, v, t).rho
    return TikhonovControl(v, float(kappa), rho, target)


def _h_norm(x) -> float:
    return float(math.sqrt(BASIS_NORM_SQ * np.dot(x, x)))


def whitening_bounds(traj: Trajectory, t: float, kappa: float, probes: int = 100, rng=None) -> dict:
    """Ratios of the three whitening bounds on random probes (each should be ``<= 1``).

    * ``||A*(M+k)^{-1/2} phi|| / ||phi||``
    * ``||(M+k)^{-1/2} A v|| / ||v||``
    * ``sqrt(k) ||(M+k)^{-1/2} phi|| / ||phi||``
    """
    rng = np.random.default_rng(rng)
    M = malliavin_operator(traj, 0.0, t)
    w, V = linalg.eigh(M)
    inv_sqrt = (V / np.sqrt(np.maximum(w, 0) + kappa)) @ V.T
    j = traj.index_of(t)
    edges = traj.ell[:j + 1]
    cols = _noise_columns(traj, 0, j)
    r1, r2, r3 = [], [], []
    for _ in range(probes):
        phi = rng.standard_normal(len(M))
        # A* applied with the columns built once
        a_star = ControlFunction(edges, BASIS_NORM_SQ * np.einsum("cnd,n->cd", cols, inv_sqrt @ phi))
        r1.append(a_star.l2_norm() / _h_norm(phi))
        r3.append(math.sqrt(kappa) * _h_norm(inv_sqrt @ phi) / _h_norm(phi))
        v = ControlFunction(edges, rng.standard_normal((j, traj.cfg.noise.d)))
        if v.l2_norm() > 0:
            r2.append(_h_norm(inv_sqrt @ a_apply(traj, None, 0.0, t, v).coeffs) / v.l2_norm())
    return {"a_star_whitened": max(r1), "whitened_a": max(r2, default=0.0), "resolvent": max(r3)}


def malliavin_derivative_jacobian(traj: Trajectory, s: float, t: float, cell: int, j: int, xi) -> SpectralField:
    """``D_u^j J_{s,t} xi = J^{(2)}_{gamma_u, t}(Q_b e_j, J_{s, gamma_u} xi)`` for ``u`` in ell-cell ``cell``.

    ``gamma_u`` is the right end ``t_{cell+1}`` of that cell, which must lie in ``(s, t]``.
    """
    i0, i1 = _span(traj, s, t)
    if not i0 <= cell < i1:
        raise ValueError(f"cell {cell} is not inside the interval [{s}, {t}]")
    g = traj.times[cell + 1]
    e = np.zeros(traj.cfg.noise.d)
    e[j] = 1.0
    return second_variation(traj, g, t, traj.cfg.Q @ e, jacobian(traj, s, g, xi))


@dataclass(frozen=True)
class ConeMinimum:
    """Minimum of ``<M y, y>`` over unit ``y`` with ``||P_N y|| >= kappa``.

    ``lower`` is a certified dual bound, ``upper`` the value at a feasible point.
    """

    lower: float
    upper: float
    multiplier: float
    low_mode_eigenvalue: float


def cone_minimum(operator: np.ndarray, low_mask: np.ndarray, kappa: float, iterations: int = 200) -> ConeMinimum:
    """Exact infimum of the quadratic form of ``operator`` over ``S_{kappa,N}``.

    Uses the S-lemma: the infimum equals ``max_{mu >= 0} lambda_min(M - mu P) + mu kappa^2``,
    a concave scalar problem (two quadratic forms on a sphere have a convex joint
    range for dimension >= 3).  Any ``mu`` gives a valid lower bound.  The
    derivative is ``kappa^2 - |P y_mu|^2`` with ``y_mu`` the bottom eigenvector,
    so the maximizer is found by bisection on a logarithmic scale.
    Norms are the weighted L2 norms; for a coefficient operator of the
    ``2 pi^2``-weighted product the unit sphere is the Euclidean one.
    """
    if not 0 <= kappa <= 1:
        raise ValueError("cone parameter kappa must lie in [0, 1]")
    M = 0.5 * (operator + operator.T)
    mask = np.asarray(low_mask, dtype=bool)
    low = np.flatnonzero(mask)
    low_eig = float(linalg.eigvalsh(M[np.ix_(low, low)])[0]) if len(low) else math.inf
    p = mask.astype(float)

    def bottom(mu):
        w, Y = linalg.eigh(M - mu * np.diag(p), subset_by_index=[0, 0])
        y = Y[:, 0]
        return float(w[0]) + mu * kappa**2, y, float(y @ (p * y))

    if kappa**2 >= 1 - 1e-12 and len(low):
        # the cone is the low-mode subspace itself
        return ConeMinimum(low_eig, low_eig, math.inf, low_eig)
    value, y, mass = bottom(0.0)
    if mask.all() or kappa == 0 or mass >= kappa**2:
        return ConeMinimum(value, float(y @ M @ y) if mass >= kappa**2 else value, 0.0, low_eig)
    top = float(linalg.eigvalsh(M, subset_by_index=[len(M) - 1, len(M) - 1])[0])
    if top <= 0:
        return ConeMinimum(value, value, 0.0, low_eig)
    # g'(mu) > 0 while the bottom eigenvector has too little low-mode mass
    hi = top / max(1.0 - kappa**2, 1e-12)
    lo = hi * 1e-40
    best = (value, 0.0, y)
    lo_l, hi_l = math.log(lo), math.log(hi)
    for _ in range(iterations):
        mid = 0.5 * (lo_l + hi_l)
        mu = math.exp(mid)
        g, y, mass = bottom(mu)
        if g > best[0]:
            best = (g, mu, y)
        if mass < kappa**2:
            lo_l = mid
        else:
            hi_l = mid
        if hi_l - lo_l < 1e-13:
            break
    lower, mu, y = best
    # feasible point: rotate the dual minimizer towards the best low-mode direction
    z = np.zeros(len(M))
    z[low] = linalg.eigh(M[np.ix_(low, low)], subset_by_index=[0, 0])[1][:, 0]
    upper = math.inf
    for th in np.linspace(0.0, math.pi, 1441):
        c = math.cos(th) * y + math.sin(th) * z
        nc = np.linalg.norm(c)
        if nc == 0:
            continue
        c /= nc
        if c @ (p * c) >= kappa**2 - 1e-12:
            upper = min(upper, float(c @ M @ c))
    # eigenvalues of M - mu P carry an absolute error of order eps (|M| + mu)
    slack = 64 * np.finfo(float).eps * len(M) * (top + mu)
    if upper < lower <= upper + slack:
        lower = upper
    return ConeMinimum(float(lower), float(upper), float(mu), low_eig)
