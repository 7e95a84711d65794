"""Subordinators, subordinated Brownian increments, the forcing map Q_b and the
dissipation-versus-noise stopping times.

Two infinite-activity families are supported, both with exponential moments:

* tempered-stable: ``nu_S(du) = c u^{-1-rho} exp(-lam u) du`` with ``0 < rho < 1``
* gamma: ``nu_S(du) = a u^{-1} exp(-b u) du``

A finite-activity ``compound-poisson`` family (exponential jump sizes) exists
only so that configurations using it can be recognised and refused.

Paths keep the jumps above a cutoff ``eps_cut`` explicitly and replace the
small jumps by their mean, a deterministic drift ``delta_eps * t``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import special
from scipy.interpolate import PchipInterpolator

from .fourier_core import BASIS_NORM_SQ, MAGNETIC, SpectralField, fold_mode, galerkin_space, in_half_lattice

FAMILIES = ("tempered-stable", "gamma", "compound-poisson")
UNDETERMINED = math.inf
MAX_EXPECTED_JUMPS = 5_000_000
TABLE_KNOTS = 2**14


@dataclass(frozen=True)
class SubordinatorModel:
    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown subordinator family {self.family!r}; expected one of {FAMILIES}")
        required = {
            "tempered-stable": ("c", "rho", "lam"),
            "gamma": ("a", "b"),
            "compound-poisson": ("rate", "mean_jump"),
        }[self.family]
        missing = [k for k in required if k not in self.params]
        if missing:
            raise ValueError(f"{self.family} subordinator needs parameters {missing}")
        p = {k: float(self.params[k]) for k in required}
        object.__setattr__(self, "params", p)
        if any(v <= 0 for v in p.values()):
            raise ValueError(f"{self.family} parameters must be positive, got {p}")
        if self.family == "tempered-stable" and not p["rho"] < 1:
            raise ValueError("tempered-stable index rho must lie in (0, 1)")

    @classmethod
    def tempered_stable(cls, c: float, rho: float, lam: float) -> "SubordinatorModel":
        return cls("tempered-stable", {"c": c, "rho": rho, "lam": lam})

    @classmethod
    def gamma(cls, a: float, b: float) -> "SubordinatorModel":
        return cls("gamma", {"a": a, "b": b})

    @classmethod
    def compound_poisson(cls, rate: float, mean_jump: float) -> "SubordinatorModel":
        return cls("compound-poisson", {"rate": rate, "mean_jump": mean_jump})

    def density(self, u):
        """Levy density ``nu_S(du)/du``."""
        u = np.asarray(u, dtype=float)
        p = self.params
        if self.family == "tempered-stable":
            return p["c"] * u ** (-1 - p["rho"]) * np.exp(-p["lam"] * u)
        if self.family == "gamma":
            return p["a"] / u * np.exp(-p["b"] * u)
        return p["rate"] / p["mean_jump"] * np.exp(-u / p["mean_jump"])

    def tail_mass(self, eps):
        """``nu_S((eps, inf))``."""
        eps = np.asarray(eps, dtype=float)
        p = self.params
        if self.family == "tempered-stable":
            c, rho, lam = p["c"], p["rho"], p["lam"]
            x = lam * eps
            # Gamma(-rho, x) = (x^{-rho} e^{-x} - Gamma(1-rho, x)) / rho
            upper = special.gammaincc(1 - rho, x) * special.gamma(1 - rho)
            return c * lam**rho * (x ** (-rho) * np.exp(-x) - upper) / rho
        if self.family == "gamma":
            return p["a"] * special.exp1(p["b"] * eps)
        return p["rate"] * np.exp(-eps / p["mean_jump"])

    def small_jump_mean(self, eps) -> float:
        """``int_0^eps u nu_S(du)``, the drift replacing jumps below ``eps``."""
        p = self.params
        if self.family == "tempered-stable":
            c, rho, lam = p["c"], p["rho"], p["lam"]
            return float(c * lam ** (rho - 1) * special.gamma(1 - rho) * special.gammainc(1 - rho, lam * eps))
        if self.family == "gamma":
            return float(p["a"] * -np.expm1(-p["b"] * eps) / p["b"])
        m = p["mean_jump"]
        return float(p["rate"] * (m - (eps + m) * math.exp(-eps / m)))

    @property
    def mean_rate(self) -> float:
        """``int_0^inf u nu_S(du)``, so that ``E l_t = mean_rate * t``."""
        p = self.params
        if self.family == "tempered-stable":
            return p["c"] * special.gamma(1 - p["rho"]) * p["lam"] ** (p["rho"] - 1)
        if self.family == "gamma":
            return p["a"] / p["b"]
        return p["rate"] * p["mean_jump"]

    @property
    def exponential_moment_bound(self) -> float:
        """Supremum of ``zeta`` with ``int (e^{zeta u} - 1) nu_S(du) < inf``."""
        p = self.params
        return {"tempered-stable": p.get("lam"), "gamma": p.get("b"),
                "compound-poisson": 1.0 / p.get("mean_jump", 1.0)}[self.family]

    def describe(self) -> dict:
        return {"family": self.family, **self.params}


@dataclass(frozen=True)
class AdmissibilityReport:
    infinite_activity: bool
    max_zeta: float
    mean_rate: float

    @property
    def accepted(self) -> bool:
        return self.infinite_activity and self.max_zeta > 0


def check_admissibility(model: SubordinatorModel) -> AdmissibilityReport:
    """Infinite activity and exponential moments of the Levy measure, analytically."""
    if model.family not in FAMILIES:
        raise ValueError(f"unknown subordinator family {model.family!r}")
    infinite = model.family in ("tempered-stable", "gamma")
    # the exponential moment is finite for every zeta strictly below the bound
    zeta = float(np.nextafter(model.exponential_moment_bound, 0.0))
    return AdmissibilityReport(infinite_activity=infinite, max_zeta=zeta, mean_rate=float(model.mean_rate))


# name used by the interface description of this module
check_condition22 = check_admissibility


@dataclass(frozen=True, eq=False)
class SubordinatorPath:
    """Nondecreasing path ``l_t = drift * t + sum_{t_i <= t} s_i`` on ``[0, horizon]``."""

    horizon: float
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    drift: float = 0.0
    model: SubordinatorModel | None = None
    eps_cut: float | None = None
    seed: int | None = None

    def __post_init__(self):
        t = np.array(self.jump_times, dtype=float).reshape(-1)
        s = np.array(self.jump_sizes, dtype=float).reshape(-1)
        if t.shape != s.shape:
            raise ValueError("jump_times and jump_sizes must have equal length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("jump times must be strictly increasing")
        if np.any(s <= 0) or self.drift < 0:
            raise ValueError("subordinator jumps and drift must be nonnegative")
        if len(t) and (t[0] <= 0 or t[-1] > self.horizon):
            raise ValueError("jump times must lie in (0, horizon]")
        t.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "jump_sizes", s)
        cums = np.concatenate([[0.0], np.cumsum(s)])
        cums.setflags(write=False)
        object.__setattr__(self, "_cumsum", cums)

    def value(self, t):
        """Right-continuous value ``l_t``."""
        t = np.asarray(t, dtype=float)
        return self.drift * t + self._cumsum[np.searchsorted(self.jump_times, t, side="right")]

    def left_value(self, t):
        t = np.asarray(t, dtype=float)
        return self.drift * t + self._cumsum[np.searchsorted(self.jump_times, t, side="left")]

    def first_passage(self, u):
        """Right-continuous inverse ``gamma_u = inf{t >= 0 : l_t >= u}``; ``inf`` past the horizon."""
        u = float(u)
        if u <= 0:
            return 0.0
        after_jump = self.drift * self.jump_times + self._cumsum[1:]
        i = int(np.searchsorted(after_jump, u, side="left"))
        start = self.jump_times[i - 1] if i > 0 else 0.0
        end = self.jump_times[i] if i < len(self.jump_times) else self.horizon
        if self.drift > 0:
            t = max((u - self._cumsum[i]) / self.drift, start)
            if t < end:
                return float(t)
            if i == len(self.jump_times) and u <= float(self.value(end)) * (1 + 4 * np.finfo(float).eps):
                # u = l_T can land a hair past the horizon after dividing by a small drift
                return float(end)
        if i < len(self.jump_times):
            return float(end)
        return math.inf

    def to_csv(self) -> str:
        buf = io.StringIO()
        model = self.model.describe() if self.model else {}
        buf.write(f"# family={model.get('family', 'manual')}\n")
        buf.write(f"# params={ {k: v for k, v in model.items() if k != 'family'} }\n")
        buf.write(f"# eps_cut={self.eps_cut!r}\n# drift={self.drift!r}\n# seed={self.seed!r}\n# horizon={self.horizon!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_jump", "size"])
        for t, s in zip(self.jump_times, self.jump_sizes):
            w.writerow([repr(float(t)), repr(float(s))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SubordinatorPath":
        header, rows = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                header[key] = val
            elif line and not line.startswith("t_jump"):
                t, s = line.split(",")
                rows.append((float(t), float(s)))

        def num(key):
            v = header.get(key, "None")
            return None if v == "None" else float(v)

        seed = header.get("seed", "None")
        arr = np.array(rows, dtype=float).reshape(-1, 2)
        return cls(
            horizon=num("horizon"),
            jump_times=arr[:, 0],
            jump_sizes=arr[:, 1],
            drift=num("drift") or 0.0,
            eps_cut=num("eps_cut"),
            seed=None if seed == "None" else int(seed),
        )


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@lru_cache(maxsize=64)
def _inverse_cdf_table(family: str, params: tuple, eps: float):
    """Monotone interpolant of ``log u`` against ``F(u) = 1 - tail(u)/tail(eps)``."""
    model = SubordinatorModel(family, dict(params))
    total = float(model.tail_mass(eps))
    decay = model.exponential_moment_bound
    upper = eps + 60.0 / decay
    knots = np.geomspace(eps, upper, TABLE_KNOTS)
    F = 1.0 - model.tail_mass(knots) / total
    F[0] = 0.0
    F, keep = np.unique(F, return_index=True)
    logu = np.log(knots[keep])
    return PchipInterpolator(F, logu, extrapolate=True), float(F[-1])


def sample_path(model: SubordinatorModel, T: float, eps_cut: float = 1e-4, rng_seed=None) -> SubordinatorPath:
    """Jumps above ``eps_cut`` as a Poisson random measure, small jumps as drift.

    Jump sizes come from an inverse-CDF table with ``2**14`` log-spaced knots
    and monotone (PCHIP) interpolation of the restricted, normalized measure.
    """
    if T <= 0 or eps_cut <= 0:
        raise ValueError("horizon T and cutoff eps_cut must be positive")
    rng = _as_rng(rng_seed)
    rate = float(model.tail_mass(eps_cut))
    if not np.isfinite(rate) or rate * T > MAX_EXPECTED_JUMPS:
        raise ValueError(
            f"expected {rate * T:.3g} jumps above eps_cut={eps_cut:g}; raise the cutoff "
            f"(cap is {MAX_EXPECTED_JUMPS})"
        )
    drift = model.small_jump_mean(eps_cut)
    count = rng.poisson(rate * T)
    # T * (1 - U) with U in [0, 1) lands in (0, T]
    times = np.sort(T * (1.0 - rng.random(count)))
    if count:
        inv, top = _inverse_cdf_table(model.family, tuple(sorted(model.params.items())), eps_cut)
        sizes = np.maximum(np.exp(inv(rng.uniform(0.0, top, size=count))), eps_cut)
    else:
        sizes = np.zeros(0)
    if count > 1 and np.any(np.diff(times) <= 0):
        # ties have probability zero but are merged rather than rejected
        times, inverse = np.unique(times, return_inverse=True)
        sizes = np.bincount(inverse, weights=sizes)
    seed = rng_seed if isinstance(rng_seed, (int, np.integer)) else None
    return SubordinatorPath(T, times, sizes, drift, model, eps_cut, seed)


def subordinated_increments(path: SubordinatorPath, grid, d: int, rng_seed=None) -> np.ndarray:
    """Increments of ``W_{l_t}`` over ``grid``: Gaussian with variance ``l_{t_{i+1}} - l_{t_i}``."""
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise ValueError("time grid must be sorted")
    rng = _as_rng(rng_seed)
    dl = np.diff(path.value(grid))
    return np.sqrt(dl)[:, None] * rng.standard_normal((len(dl), d))


@dataclass(frozen=True, eq=False)
class NoiseConfig:
    """Forced directions ``Z0`` (half-lattice) with amplitudes ``alpha_k^m``.

    ``amplitudes[i, m]`` multiplies ``sigma_{modes[i]}^m``.  Noise component
    ``j = 2 i + m`` drives that direction, so ``d = 2 |Z0|``.
    """

    modes: tuple
    amplitudes: np.ndarray

    def __post_init__(self):
        modes = tuple((int(k[0]), int(k[1])) for k in self.modes)
        amps = np.array(self.amplitudes, dtype=float).reshape(len(modes), 2)
        for k in modes:
            if not in_half_lattice(k):
                raise ValueError(f"forced mode {k} is not on the half-lattice; use NoiseConfig.from_symmetric")
        if len(set(modes)) != len(modes):
            raise ValueError("forced modes must be distinct")
        if np.any(amps == 0):
            raise ValueError("all noise amplitudes must be nonzero")
        amps.setflags(write=False)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def from_symmetric(cls, Z0, amplitudes: dict) -> "NoiseConfig":
        """Fold a (possibly symmetric) wavevector set; ``amplitudes`` maps half-lattice ``k`` to ``(a0, a1)``."""
        modes = []
        for k in Z0:
            kh, _, _ = fold_mode(k)
            if kh not in modes:
                modes.append(kh)
        missing = [k for k in modes if k not in amplitudes]
        if missing:
            raise ValueError(f"missing amplitude for forced mode {missing[0]}")
        return cls(tuple(modes), np.array([amplitudes[k] for k in modes], dtype=float))

    @property
    def d(self) -> int:
        return 2 * len(self.modes)

    @property
    def B0(self) -> float:
        return float(np.sum(self.amplitudes**2))

    @property
    def max_wavenumber(self) -> float:
        return max(math.hypot(*k) for k in self.modes)

    def flat_indices(self, N: int) -> np.ndarray:
        space = galerkin_space(N)
        return np.array([space.flat_index(k, m, MAGNETIC) for k in self.modes for m in (0, 1)])

    def matrix(self, N: int) -> np.ndarray:
        """Coefficient matrix of ``Q_b``, shape ``(n, d)``."""
        space = galerkin_space(N)
        Q = np.zeros((space.n, self.d))
        Q[self.flat_indices(N), np.arange(self.d)] = self.amplitudes.reshape(-1)
        return Q


def q_b_apply(z, cfg: NoiseConfig, N: int) -> SpectralField:
    z = np.asarray(z, dtype=float)
    if z.shape != (cfg.d,):
        raise ValueError(f"noise vector must have dimension d={cfg.d}, got shape {z.shape}")
    return SpectralField(N, cfg.matrix(N) @ z)


def hilbert_schmidt_sq(cfg: NoiseConfig, N: int) -> float:
    """``sum_j ||Q_b e_j||^2 / (2 pi^2)``, which equals ``B0``."""
    total = 0.0
    for j in range(cfg.d):
        e = np.zeros(cfg.d)
        e[j] = 1.0
        F = q_b_apply(e, cfg, N)
        total += BASIS_NORM_SQ * float(F.coeffs @ F.coeffs)
    return total / BASIS_NORM_SQ


def eta_times(path: SubordinatorPath, nu: float, kappa: float, B0: float, count: int = 1) -> list[float]:
    """Stopping times ``eta_n``: first time after ``eta_{n-1}`` that
    ``nu (t - eta_{n-1}) - 8 B0 kappa (l_t - l_{eta_{n-1}}) > 1``.

    Entries not reached within the path horizon are ``UNDETERMINED`` (``inf``).
    """
    if nu <= 0 or kappa <= 0:
        raise ValueError("nu and kappa must be positive")
    weight = 8.0 * B0 * kappa
    slope = nu - weight * path.drift
    times = path.jump_times
    out: list[float] = []
    start = 0.0
    for _ in range(count):
        if start == UNDETERMINED:
            out.append(UNDETERMINED)
            continue
        level = 0.0
        a = start
        j = np.searchsorted(times, start, side="right")
        found = UNDETERMINED
        while True:
            b = times[j] if j < len(times) else path.horizon
            if slope > 0:
                t_cross = a + (1.0 - level) / slope
                if t_cross < b or (j >= len(times) and t_cross <= b):
                    found = float(t_cross)
                    break
            if j >= len(times):
                break
            level += slope * (b - a) - weight * path.jump_sizes[j]
            a = b
            j += 1
        out.append(found)
        start = found
    return out
