"""Monte-Carlo probes of moment bounds, the e-property, weak irreducibility,
invariant-measure uniqueness and positivity of the Malliavin matrix.

Every probe takes an :class:`ExperimentPlan` and returns a :class:`ProbeReport`
carrying per-time statistics, named checks and the plan hash.  All randomness
is derived from ``plan.seed`` so a report is reproduced bitwise by re-running
the same plan.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .dynamics import (
    SolverConfig,
    StepFailure,
    _noise_for,
    evolve,
    run_ensemble,
    time_grid,
    trajectory_seeds,
)
from .fourier_core import BASIS_NORM_SQ, Mode, SpectralField, galerkin_space
from .levy_noise import SubordinatorPath, eta_times, sample_path
from .variational import cone_minimum, malliavin_operator

# stream labels keep the independent random streams of one plan apart
_CANDIDATES, _PILOT, _SECOND_START, _POSITIVITY, _DIRECTION = 1, 2, 3, 4, 5


def digest(obj) -> str:
    """Short SHA-256 of the canonical JSON form of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _clean(x):
    # strict JSON: non-finite floats become null
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _stream(seed: int, label: int, count: int | None = None):
    ss = np.random.SeedSequence([int(seed), label])
    return ss.spawn(count) if count is not None else np.random.default_rng(ss)


# ---------------------------------------------------------------- statistics

def mean_se(x, axis: int = 0):
    """Mean and standard error over independent replicates along ``axis``."""
    x = np.asarray(x, dtype=float)
    m = x.shape[axis]
    mean = np.mean(x, axis=axis)
    se = np.std(x, axis=axis, ddof=1) / math.sqrt(m) if m > 1 else np.zeros_like(mean)
    return mean, se


def clopper_pearson(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Exact binomial confidence interval for ``k`` successes in ``n`` trials."""
    if n == 0:
        return 0.0, 1.0
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=confidence, method="exact")
    return float(ci.low), float(ci.high)


def integrated_autocorr_time(x, window: float = 5.0) -> float:
    """Integrated autocorrelation time of the rows of ``x`` (in samples).

    The autocorrelation is averaged over rows (independent chains) and summed
    up to the first lag ``L >= window * tau(L)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x = x - x.mean(axis=1, keepdims=True)
    n = x.shape[1]
    if n < 2:
        return 1.0
    f = np.fft.rfft(x, n=2 * n, axis=1)
    acf = np.fft.irfft(f * np.conj(f), axis=1)[:, :n].mean(axis=0)
    if acf[0] <= 0:
        return 1.0
    rho = acf / acf[0]
    tau = 2.0 * np.cumsum(rho) - 1.0
    for lag in range(1, n):
        if lag >= window * tau[lag]:
            return float(max(tau[lag], 1.0))
    return float(max(tau[-1], 1.0))


def ks_compare(a, b, alpha: float = 0.05) -> dict:
    """Two-sample Kolmogorov-Smirnov distance against the asymptotic ``alpha`` critical value."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    res = stats.ks_2samp(a, b)
    n, m = len(a), len(b)
    crit = math.sqrt(-0.5 * math.log(alpha / 2)) * math.sqrt((n + m) / (n * m))
    return {"distance": float(res.statistic), "p_value": float(res.pvalue), "critical": crit,
            "n_a": n, "n_b": m}


# ---------------------------------------------------------------- observables

def _bump(x):
    return np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)


def cutoff(r):
    """Smooth cutoff: 1 on ``[0, 1]``, 0 on ``[2, inf)``, and its derivative."""
    r = np.asarray(r, dtype=float)
    x, y = 2.0 - r, r - 1.0
    a, b = _bump(x), _bump(y)
    chi = a / (a + b)
    da = np.where(x > 0, a / np.where(x > 0, x, 1.0) ** 2, 0.0)
    db = np.where(y > 0, b / np.where(y > 0, y, 1.0) ** 2, 0.0)
    dchi = (-da * b - a * db) / (a + b) ** 2
    return chi, dchi


@dataclass(frozen=True)
class Observable:
    """A functional ``f`` of the flat coefficients, truncated as ``chi(|U| / R) f(U)``.

    ``R = inf`` switches the truncation off.  ``value`` and ``gradient`` act on
    batches of shape ``(M, n)``; the gradient is with respect to coefficients,
    so ``gradient(U) @ X`` is the directional derivative along ``X``.
    """

    name: str
    f: Callable
    grad_f: Callable
    R: float = math.inf

    def raw(self, U) -> np.ndarray:
        return self.f(np.atleast_2d(U))

    def value(self, U) -> np.ndarray:
        U = np.atleast_2d(U)
        if not math.isfinite(self.R):
            return self.f(U)
        chi, _ = cutoff(_norms(U) / self.R)
        return chi * self.f(U)

    def gradient(self, U) -> np.ndarray:
        U = np.atleast_2d(U)
        if not math.isfinite(self.R):
            return self.grad_f(U)
        norm = _norms(U)
        chi, dchi = cutoff(norm / self.R)
        dnorm = BASIS_NORM_SQ * U / np.maximum(norm, 1e-300)[:, None]
        return chi[:, None] * self.grad_f(U) + (dchi * self.f(U) / self.R)[:, None] * dnorm

    def truncated(self, R: float) -> "Observable":
        return Observable(self.name, self.f, self.grad_f, float(R))


def _norms(U):
    return np.sqrt(BASIS_NORM_SQ * np.sum(U**2, axis=1))


def observable(name: str, N: int, R: float = math.inf) -> Observable:
    """Named functional on ``H_N``.

    ``"energy"`` is ``|U|^2``, ``"h1_energy"`` is ``|U|_1^2`` and
    ``"mode:<slot>:<k1>,<k2>:<parity>"`` is one basis coefficient, e.g.
    ``"mode:magnetic:0,1:0"``.
    """
    space = galerkin_space(N)
    if name == "energy":
        return Observable(name, lambda U: BASIS_NORM_SQ * np.sum(U**2, axis=1),
                          lambda U: 2 * BASIS_NORM_SQ * U, R)
    if name == "h1_energy":
        k2 = space.wavenumber_sq
        return Observable(name, lambda U: BASIS_NORM_SQ * np.sum(k2 * U**2, axis=1),
                          lambda U: 2 * BASIS_NORM_SQ * k2 * U, R)
    if name.startswith("mode:"):
        try:
            _, slot, k, parity = name.split(":")
            k1, k2_ = (int(v) for v in k.split(","))
            i = space.flat_index((k1, k2_), int(parity), slot)
        except (ValueError, KeyError) as exc:
            raise ValueError(f"bad mode observable {name!r}: {exc}") from None
        e = np.zeros(space.n)
        e[i] = 1.0
        return Observable(name, lambda U: U[:, i], lambda U: np.broadcast_to(e, U.shape), R)
    raise ValueError(f"unknown observable {name!r}; use energy, h1_energy or mode:<slot>:<k1>,<k2>:<parity>")


# ---------------------------------------------------------------- plans and reports

@dataclass(frozen=True)
class TolerancePolicy:
    z: float = 3.0
    max_relative_se: float = 0.2
    confidence: float = 0.95
    spearman: float = 0.9
    ks_alpha: float = 0.05
    max_failure_rate: float = 0.01


@dataclass(frozen=True)
class ExperimentPlan:
    tag: str
    solver: SolverConfig
    M: int = 100
    T: float = 5.0
    burn_in: float = 0.0
    initial_conditions: tuple = ()
    observables: tuple = ("energy",)
    seed: int = 0
    tolerance: TolerancePolicy = field(default_factory=TolerancePolicy)
    record_every: int = 10
    threads: int = 1

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("ensemble size M must be at least 1")
        if not 0 <= self.burn_in < self.T:
            raise ValueError(f"burn-in {self.burn_in} must lie in [0, T={self.T})")
        ics = tuple(np.array(_coeffs(u, self.solver.N), dtype=float) for u in self.initial_conditions)
        for u in ics:
            u.setflags(write=False)
        object.__setattr__(self, "initial_conditions", ics)
        object.__setattr__(self, "observables", tuple(self.observables))

    def initial(self, i: int = 0) -> np.ndarray:
        if i < len(self.initial_conditions):
            return self.initial_conditions[i]
        return np.zeros(self.solver.n)

    def describe(self) -> dict:
        # threads is excluded: results do not depend on it
        return {
            "tag": self.tag, "M": self.M, "T": self.T, "burn_in": self.burn_in,
            "initial_conditions": [u.tolist() for u in self.initial_conditions],
            "observables": list(self.observables), "seed": self.seed,
            "tolerance": vars(self.tolerance), "record_every": self.record_every,
            "solver": self.solver.describe(),
        }

    @property
    def config_hash(self) -> str:
        return digest(self.describe())


def _coeffs(u, N):
    return u.coeffs if isinstance(u, SpectralField) else np.asarray(u, dtype=float)


@dataclass
class ProbeReport:
    """Result of one probe: time series (mean, s.e.), named checks and metadata."""

    tag: str
    times: np.ndarray
    series: dict
    checks: dict
    inconclusive: bool
    metadata: dict

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())

    def to_dict(self) -> dict:
        return _clean({
            "tag": self.tag,
            "passed": self.passed,
            "inconclusive": self.inconclusive,
            "checks": self.checks,
            "metadata": self.metadata,
            "times": self.times,
            "series": {k: {"mean": m, "se": s} for k, (m, s) in self.series.items()},
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        buf.write(f"# tag={self.tag} config_hash={self.metadata.get('config_hash')} seed={self.metadata.get('seed')}\n")
        names = sorted(self.series)
        w.writerow([self.metadata.get("abscissa", "t")] + [f"{n}_{s}" for n in names for s in ("mean", "se")])
        for i, t in enumerate(self.times):
            row = [repr(float(t))]
            for n in names:
                m, s = self.series[n]
                row += [repr(float(m[i])), repr(float(s[i]))]
            w.writerow(row)
        return buf.getvalue()


def _check(passed, **values) -> dict:
    return {"passed": bool(passed), **values}


def _metadata(plan: ExperimentPlan, **extra) -> dict:
    return {"config_hash": plan.config_hash, "seed": plan.seed, "M": plan.M, **extra}


def injection_rate(cfg: SolverConfig) -> float:
    """``C = E|Q_b dL|^2 / dt = 2 pi^2 B0 E[l_1]``: mean energy injected per unit time."""
    if cfg.subordinator is None:
        return 0.0
    return BASIS_NORM_SQ * cfg.noise.B0 * cfg.subordinator.mean_rate


def stationary_scale(cfg: SolverConfig) -> float:
    """Norm scale ``sqrt(C / 2 nu)`` of the stationary energy bound (1 without noise)."""
    c1 = injection_rate(cfg) / (2 * cfg.dissipation.nu)
    return math.sqrt(c1) if c1 > 0 else 1.0


def default_kappa(cfg: SolverConfig) -> float:
    """Heuristic ``kappa = 0.1 nu / B0`` for the stopping times (the admissible range is not computable)."""
    return 0.1 * cfg.dissipation.nu / cfg.noise.B0


# ---------------------------------------------------------------- moments

def moment_experiment(plan: ExperimentPlan) -> ProbeReport:
    """Ensemble energy against ``e^{-2 nu t}|U_0|^2 + C_1`` and the dissipation integral against ``|U_0|^2 + C_2 t``.

    ``C`` is fitted from the noise work recorded in each trajectory's energy
    ledger (``C_1 = C / 2 nu``, ``C_2 = C / 2``) and compared with the model
    value ``2 pi^2 B0 E[l_1]``.
    """
    cfg, tol = plan.solver, plan.tolerance
    nu = cfg.dissipation.nu
    U0 = plan.initial(0)
    E0 = BASIS_NORM_SQ * float(U0 @ U0)
    res = run_ensemble(U0, plan.T, cfg, trajectory_seeds(plan.seed, plan.M),
                       record_every=plan.record_every, threads=plan.threads)
    idx = res.record_index
    t = res.times[idx]
    E_mean, E_se = mean_se(res.energy[:, idx])
    D_mean, D_se = mean_se(nu * res.h1_integral[:, idx])

    C_model = injection_rate(cfg)
    C_fit, C_se = mean_se(res.noise_work[:, -1] / plan.T)
    C_fit, C_se = float(C_fit), float(C_se)
    noisy = C_model > 0
    C1, C2 = C_fit / (2 * nu), C_fit / 2
    decay = np.exp(-2 * nu * t)
    bound = decay * E0 + (1 - decay) * C1
    slack = tol.z * E_se + 1e-12 * max(E0, 1.0)
    checks = {"energy_bound": _check(np.all(E_mean <= bound + slack),
                                     max_excess=float(np.max(E_mean - bound)))}
    checks["dissipation_bound"] = _check(
        D_mean[-1] <= E0 + C2 * plan.T + tol.z * D_se[-1],
        value=float(D_mean[-1]), bound=E0 + C2 * plan.T)
    inconclusive = False
    if noisy:
        late = res.times >= plan.burn_in
        plateau, plateau_se = mean_se(np.mean(res.energy[:, late], axis=1))
        plateau, plateau_se = float(plateau), float(plateau_se)
        checks["plateau"] = _check(plateau <= C1, value=plateau, se=plateau_se, C1=C1)
        checks["injection_rate"] = _check(abs(C_fit - C_model) <= tol.z * C_se,
                                          fitted=C_fit, se=C_se, model=C_model)
        inconclusive = C_se > tol.max_relative_se * abs(C_fit) or plateau_se > tol.max_relative_se * plateau
    series = {"energy": (E_mean, E_se), "dissipation": (D_mean, D_se),
              "energy_bound": (bound, np.zeros_like(bound))}
    return ProbeReport(plan.tag, t, series, checks, bool(inconclusive),
                       _metadata(plan, C_fit=C_fit, C_se=C_se, C_model=C_model, C1=C1, C2=C2, nu=nu))


# ---------------------------------------------------------------- e-property

def e_property_probe(U0, deltas: Sequence[float], phi: Observable | str, t: float, plan: ExperimentPlan,
                     direction=None) -> ProbeReport:
    """Synchronous coupling versus the tangent-flow estimator of ``grad P_t Phi . xi``.

    (a) ``E|Phi(U_t(U_0 + delta xi)) - Phi(U_t(U_0))|`` with common noise;
    (b) ``E[grad Phi(U_t) . J_{0,t} xi]`` (signed, and its absolute-value
    version, which is the small-``delta`` limit of (a) / delta).
    ``xi`` is a unit vector; random unless given.
    """
    cfg, tol = plan.solver, plan.tolerance
    U0 = _coeffs(U0, cfg.N)
    if isinstance(phi, str):
        phi = observable(phi, cfg.N).truncated(10 * stationary_scale(cfg))
    if direction is None:
        direction = SpectralField.random(cfg.N, _stream(plan.seed, _DIRECTION), norm=1.0).coeffs
    xi = _coeffs(direction, cfg.N)
    xi = xi / math.sqrt(BASIS_NORM_SQ * float(xi @ xi))
    seeds = trajectory_seeds(plan.seed, plan.M)
    run = lambda start, tangent=None: run_ensemble(start, t, cfg, seeds, record_every=1 << 60,
                                                   tangent=tangent, threads=plan.threads)
    base = run(U0, xi)
    phi0 = phi.value(base.final)
    g = np.sum(phi.gradient(base.final) * base.tangents[:, -1], axis=1)
    b_abs, b_abs_se = (float(v) for v in mean_se(np.abs(g)))
    b, b_se = (float(v) for v in mean_se(g))

    deltas = np.asarray(deltas, dtype=float)
    a, a_se, signed, signed_se = (np.zeros(len(deltas)) for _ in range(4))
    for i, d in enumerate(deltas):
        if d == 0:
            continue
        diff = phi.value(run(U0 + d * xi).final) - phi0
        a[i], a_se[i] = mean_se(np.abs(diff))
        signed[i], signed_se[i] = mean_se(diff / d)

    checks = {}
    if len(deltas) >= 2:
        rho = float(stats.spearmanr(deltas, a).statistic)
        checks["monotone_trend"] = _check(rho >= tol.spearman, spearman=rho)
    pos = np.flatnonzero(deltas > 0)
    if len(pos):
        j = pos[np.argmin(deltas[pos])]
        d = deltas[j]
        gap = abs(a[j] / d - b_abs)
        se = math.hypot(a_se[j] / d, b_abs_se)
        checks["taylor_agreement"] = _check(gap <= tol.z * se, delta=float(d), coupling=float(a[j] / d),
                                            tangent=b_abs, gap=gap, se=se)
    inconclusive = b_abs_se > tol.max_relative_se * b_abs if b_abs > 0 else False
    series = {"coupling": (a, a_se), "coupling_signed_slope": (signed, signed_se),
              "tangent_times_delta": (deltas * b_abs, deltas * b_abs_se)}
    return ProbeReport(plan.tag, deltas, series, checks, bool(inconclusive),
                       _metadata(plan, observable=phi.name, R=phi.R, t=t, gradient=b, gradient_se=b_se,
                                 gradient_abs=b_abs, gradient_abs_se=b_abs_se, abscissa="delta"))


# ---------------------------------------------------------------- irreducibility

def _sup_noise_h1(seed, cfg: SolverConfig, T: float) -> float:
    """``sup_{s <= T} |zeta_s|_1`` for the accumulated noise of one ensemble member."""
    times = time_grid(T, cfg.dt)
    dW, _ = _noise_for(seed, cfg, times)
    zeta = np.cumsum(dW, axis=0) @ cfg.Q.T
    k2 = galerkin_space(cfg.N).wavenumber_sq
    return float(np.sqrt(BASIS_NORM_SQ * np.max(np.sum(k2 * zeta**2, axis=1), initial=0.0)))


def irreducibility_probe(radius: float, gamma: float, T: float, plan: ExperimentPlan, candidates: int = 8,
                         pilot: int = 200, small_noise: float | None = None) -> ProbeReport:
    """Estimate ``P(|U_T| <= gamma)`` from the worst of several starts on ``|U_0| = radius``.

    Candidate starts (random directions plus any plan initial conditions
    rescaled to the sphere) are screened with ``pilot`` trajectories each; the
    start with the lowest success frequency is then run with ``plan.M``
    trajectories.  Also reported: the success frequency conditioned on the
    small-noise event ``sup_s |zeta_s|_1 <= small_noise`` (default ``gamma``).
    """
    cfg, tol = plan.solver, plan.tolerance
    rng = _stream(plan.seed, _CANDIDATES)
    starts = [SpectralField.random(cfg.N, rng, norm=radius).coeffs for _ in range(candidates)]
    for u in plan.initial_conditions:
        nu_ = math.sqrt(BASIS_NORM_SQ * float(u @ u))
        if nu_ > 0:
            starts.append(u * (radius / nu_))
    pilot_seeds = _stream(plan.seed, _PILOT, pilot)
    freq = []
    for u in starts:
        res = run_ensemble(u, T, cfg, pilot_seeds, record_every=1 << 60, threads=plan.threads)
        freq.append(float(np.mean(_norms(res.final) <= gamma)))
    worst = int(np.argmin(freq))
    seeds = trajectory_seeds(plan.seed, plan.M)
    res = run_ensemble(starts[worst], T, cfg, seeds, record_every=1 << 60, threads=plan.threads)
    final = _norms(res.final)
    k = int(np.sum(final <= gamma))
    p = k / plan.M
    lo, hi = clopper_pearson(k, plan.M, tol.confidence)

    gammas = gamma * np.array([0.5, 0.75, 1.0, 1.5, 2.0])
    curve = np.array([np.mean(final <= g) for g in gammas])
    delta = gamma if small_noise is None else small_noise
    if cfg.subordinator is not None and cfg.noise.B0 > 0:
        sup = np.array([_sup_noise_h1(s, cfg, T) for s in seeds])
    else:
        sup = np.zeros(plan.M)
    event = sup <= delta
    n_event = int(event.sum())
    k_event = int(np.sum(event & (final <= gamma)))
    cond = k_event / n_event if n_event else math.nan
    checks = {
        "positive_lower_bound": _check(lo > 0, estimate=p, ci_low=lo, ci_high=hi, successes=k),
        "monotone_in_gamma": _check(bool(np.all(np.diff(curve) >= 0))),
    }
    curve_se = np.sqrt(curve * (1 - curve) / plan.M)
    return ProbeReport(plan.tag, gammas, {"probability": (curve, curve_se)}, checks, False,
                       _metadata(plan, radius=radius, gamma=gamma, T=T, pilot_frequencies=freq, worst_start=worst,
                                 start=starts[worst], small_noise=delta, small_noise_events=n_event,
                                 small_noise_successes=k_event, conditional_frequency=cond,
                                 conditional_ci=list(clopper_pearson(k_event, n_event, tol.confidence)),
                                 abscissa="gamma"))


# ---------------------------------------------------------------- invariant measure

def invariant_measure_compare(U0a, U0b, plan: ExperimentPlan, shared_seeds: bool = False) -> ProbeReport:
    """Compare post-burn-in statistics of two ensembles started at ``U0a`` and ``U0b``.

    For each observable: a two-sample KS test on samples thinned at twice the
    integrated autocorrelation time, and agreement of the per-trajectory time
    averages within ``z`` combined standard errors.  ``shared_seeds`` reuses
    the same noise for both starts.
    """
    cfg, tol = plan.solver, plan.tolerance
    seeds_a = trajectory_seeds(plan.seed, plan.M)
    seeds_b = seeds_a if shared_seeds else _stream(plan.seed, _SECOND_START, plan.M)
    runs = [run_ensemble(_coeffs(u, cfg.N), plan.T, cfg, s, record_every=plan.record_every, threads=plan.threads)
            for u, s in ((U0a, seeds_a), (U0b, seeds_b))]
    t = runs[0].record_times
    late = t >= plan.burn_in
    checks, series, meta = {}, {}, {}
    for name in plan.observables:
        obs = observable(name, cfg.N)
        vals = [obs.raw(r.states.reshape(-1, cfg.n)).reshape(plan.M, -1) for r in runs]
        for lab, v in zip("ab", vals):
            series[f"{name}_{lab}"] = mean_se(v)
        post = [v[:, late] for v in vals]
        tau = max(integrated_autocorr_time(p) for p in post)
        step = max(1, int(math.ceil(2 * tau)))
        ks = ks_compare(post[0][:, ::step], post[1][:, ::step], tol.ks_alpha)
        checks[f"ks_{name}"] = _check(ks["distance"] < ks["critical"], **ks)
        (ma, sa), (mb, sb) = (mean_se(np.mean(p, axis=1)) for p in post)
        se = math.hypot(sa, sb)
        checks[f"time_average_{name}"] = _check(abs(ma - mb) <= tol.z * se or ma == mb,
                                                a=float(ma), b=float(mb), se=se)
        meta[f"tau_{name}"] = tau
        meta[f"thinning_{name}"] = step
    return ProbeReport(plan.tag, t, series, checks, False, _metadata(plan, shared_seeds=shared_seeds, **meta))


# ---------------------------------------------------------------- Malliavin positivity

@dataclass(frozen=True)
class PositivitySample:
    """Cone minimum ``X`` of the Malliavin matrix on ``[0, eta]`` for one (start, path) pair.

    ``X`` is the certified lower bound; ``upper`` comes from a feasible point.
    ``resolution`` is the float64 eigenvalue floor ``n eps lambda_max``; values
    of ``X`` below it are not resolved.
    """

    X: float
    upper: float
    eta: float
    ell_eta: float
    lambda_max: float
    resolution: float
    determined: bool = True


def positivity_sample(U0, path: SubordinatorPath, cfg: SolverConfig, cone: float, N: int,
                      kappa: float | None = None, seed=None) -> PositivitySample:
    """Evolve to the first stopping time ``eta`` of ``path`` and minimize over the cone ``S_{cone,N}``."""
    kappa = default_kappa(cfg) if kappa is None else kappa
    eta = eta_times(path, cfg.dissipation.nu, kappa, cfg.noise.B0, 1)[0]
    if not math.isfinite(eta):
        return PositivitySample(0.0, 0.0, eta, math.nan, 0.0, 0.0, determined=False)
    traj = evolve(U0, path, eta, cfg, seed=seed)
    M = malliavin_operator(traj, 0.0, eta)
    top = float(np.linalg.eigvalsh(M)[-1])
    cm = cone_minimum(M, galerkin_space(cfg.N).low_mode_mask(N), cone)
    return PositivitySample(cm.lower, cm.upper, eta, float(path.value(eta)), top,
                            cfg.n * np.finfo(float).eps * max(top, 0.0))


def malliavin_positivity(plan: ExperimentPlan, cone: float, N: int, eps_list: Sequence[float],
                         radius: float, kappa: float | None = None) -> ProbeReport:
    """Fraction ``r(eps)`` of sampled ``(U_0, path)`` pairs with cone minimum below ``eps``.

    ``U_0`` is uniform in norm on ``[0, radius]`` with a random direction;
    paths are sampled on ``[0, plan.T]``, and a pair whose stopping time
    exceeds ``plan.T`` is counted as a failure at every ``eps``.
    """
    cfg, tol = plan.solver, plan.tolerance
    if N > cfg.N:
        raise ValueError(f"cone truncation N={N} exceeds the simulation truncation N={cfg.N}")
    if cfg.subordinator is None:
        raise ValueError("positivity statistics need a subordinator model")
    kappa = default_kappa(cfg) if kappa is None else kappa

    def one(ss):
        path_ss, start_ss, noise_ss = ss.spawn(3)
        rng = np.random.default_rng(start_ss)
        U0 = SpectralField.random(cfg.N, rng, norm=radius * rng.random())
        path = sample_path(cfg.subordinator, plan.T, cfg.eps_cut, np.random.default_rng(path_ss))
        try:
            return positivity_sample(U0, path, cfg, cone, N, kappa, noise_ss)
        except StepFailure:
            return PositivitySample(0.0, 0.0, math.nan, math.nan, math.nan, math.nan, determined=False)

    seqs = _stream(plan.seed, _POSITIVITY, plan.M)
    if plan.threads > 1:
        with ThreadPoolExecutor(max_workers=plan.threads) as pool:
            samples = list(pool.map(one, seqs))
    else:
        samples = [one(s) for s in seqs]
    X = np.array([s.X if s.determined else -math.inf for s in samples])
    eps = np.sort(np.asarray(eps_list, dtype=float))[::-1]
    counts = np.array([int(np.sum(X < e)) for e in eps])
    rates = counts / plan.M
    ci = [clopper_pearson(k, plan.M, tol.confidence) for k in counts]
    checks = {
        "nonincreasing": _check(bool(np.all(np.diff(rates) <= 0))),
        "rate_at_smallest_eps": _check(rates[-1] <= tol.max_failure_rate, eps=float(eps[-1]),
                                       rate=float(rates[-1]), target=tol.max_failure_rate,
                                       ci_low=ci[-1][0], ci_high=ci[-1][1]),
    }
    det = [s for s in samples if s.determined]
    unresolved = sum(1 for s in det if s.X < s.resolution)
    se = np.sqrt(rates * (1 - rates) / plan.M)
    meta = _metadata(plan, cone=cone, N=N, radius=radius, kappa=kappa, kappa_heuristic=True,
                     undetermined=plan.M - len(det), unresolved=unresolved,
                     X=[s.X for s in samples], X_upper=[s.upper for s in samples],
                     eta=[s.eta for s in samples], lambda_max=[s.lambda_max for s in samples],
                     ci=[list(c) for c in ci], abscissa="eps")
    return ProbeReport(plan.tag, eps, {"rate": (rates, se)}, checks, False, meta)
