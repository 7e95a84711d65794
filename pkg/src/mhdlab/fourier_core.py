"""Trigonometric Galerkin representation of divergence-free field pairs on the 2-torus.

A state ``U = (u, b)`` is stored as real coefficients of the unnormalized
basis fields

    e_k^0 = (k2, -k1)/|k| cos(k.x),    e_k^1 = (-k2, k1)/|k| sin(k.x),

placed either in the velocity slot (psi_k^m) or the magnetic slot (sigma_k^m),
for wavevectors ``k`` on the half-lattice with ``0 < |k| <= N``.  Every basis
field has squared L2 norm ``2 pi^2``; that factor lives in the inner product,
so coefficients match the bracket identities term for term.

Flat coefficient layout: ``slot * 2K + 2 * mode_index + parity`` where ``K`` is
the number of half-lattice modes and slot 0 is velocity, slot 1 magnetic.

The bilinear term is evaluated by an exact sparse tensor derived from the
product-to-sum rules, so Galerkin truncation is the only approximation.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping

import numba
import numpy as np

VELOCITY = "velocity"
MAGNETIC = "magnetic"
SLOTS = (VELOCITY, MAGNETIC)
BASIS_NORM_SQ = 2.0 * np.pi**2


def in_half_lattice(k) -> bool:
    k1, k2 = int(k[0]), int(k[1])
    return k1 > 0 or (k1 == 0 and k2 > 0)


def fold_mode(k) -> tuple[tuple[int, int], float, float]:
    """Map a nonzero wavevector to the half-lattice.

    Returns ``(k_half, s0, s1)`` with ``e_k^0 = s0 e_{k_half}^0`` and
    ``e_k^1 = s1 e_{k_half}^1``.
    """
    k1, k2 = int(k[0]), int(k[1])
    if k1 == 0 and k2 == 0:
        raise ValueError("the mean mode (0, 0) is not part of the phase space")
    if in_half_lattice((k1, k2)):
        return (k1, k2), 1.0, 1.0
    # cos is even and sin odd, while the direction (k2, -k1) flips sign
    return (-k1, -k2), -1.0, 1.0


@dataclass(frozen=True)
class Mode:
    """A basis direction: wavevector on the half-lattice, parity, slot."""

    k: tuple[int, int]
    parity: int
    slot: str = MAGNETIC

    def __post_init__(self):
        k = (int(self.k[0]), int(self.k[1]))
        object.__setattr__(self, "k", k)
        if not in_half_lattice(k):
            raise ValueError(f"mode {k} is not on the half-lattice Z^2_+")
        if self.parity not in (0, 1):
            raise ValueError(f"parity must be 0 (cos) or 1 (sin), got {self.parity}")
        if self.slot not in SLOTS:
            raise ValueError(f"slot must be one of {SLOTS}, got {self.slot!r}")

    @property
    def norm(self) -> float:
        return math.hypot(*self.k)


@dataclass(frozen=True)
class DissipationParams:
    nu1: float
    nu2: float
    alpha: float
    beta: float

    def __post_init__(self):
        if self.nu1 <= 0 or self.nu2 <= 0:
            raise ValueError("viscosities nu1, nu2 must be positive")
        if self.alpha <= 1 or self.beta <= 1:
            raise ValueError("fractional exponent must exceed 1")

    @property
    def nu(self) -> float:
        return min(self.nu1, self.nu2)


def eval_basis(mode: Mode, x) -> np.ndarray:
    """Pointwise value ``(u1, u2, b1, b2)`` of psi_k^m or sigma_k^m at ``x``."""
    k1, k2 = mode.k
    nk = mode.norm
    theta = k1 * x[0] + k2 * x[1]
    if mode.parity == 0:
        vec = np.array([k2 / nk, -k1 / nk]) * np.cos(theta)
    else:
        vec = np.array([-k2 / nk, k1 / nk]) * np.sin(theta)
    out = np.zeros(4)
    if mode.slot == VELOCITY:
        out[:2] = vec
    else:
        out[2:] = vec
    return out


@numba.njit(cache=True, nogil=True)
def _contract(U, V, out_idx, a_idx, b_idx, w, out):
    for m in range(U.shape[0]):
        for e in range(w.shape[0]):
            out[m, out_idx[e]] += w[e] * U[m, a_idx[e]] * V[m, b_idx[e]]


def _pair_terms():
    # f_m(A) * f'_{m'}(B) with f_0 = cos, f_1 = sin, f'_0 = -sin, f'_1 = cos,
    # split into (trig of A+B, trig of A-B); trig 0 = cos, 1 = sin.
    return {
        (0, 0): ((1, -0.5), (1, 0.5)),
        (0, 1): ((0, 0.5), (0, 0.5)),
        (1, 0): ((0, 0.5), (0, -0.5)),
        (1, 1): ((1, 0.5), (1, 0.5)),
    }


class GalerkinSpace:
    """Mode table and exact bilinear tensor for truncation radius ``N``."""

    def __init__(self, N: int):
        if N < 1:
            raise ValueError("truncation radius must be at least 1")
        self.N = int(N)
        pts = [
            (k1, k2)
            for k1 in range(0, N + 1)
            for k2 in range(-N, N + 1)
            if in_half_lattice((k1, k2)) and k1 * k1 + k2 * k2 <= N * N
        ]
        pts.sort(key=lambda k: (k[0] ** 2 + k[1] ** 2, k[0], k[1]))
        self.modes = np.array(pts, dtype=np.int64)
        self.K = len(pts)
        self.n = 4 * self.K
        self.index = {k: i for i, k in enumerate(pts)}
        k2 = (self.modes**2).sum(axis=1).astype(float)
        per_slot = np.repeat(k2, 2)
        self.wavenumber_sq = np.concatenate([per_slot, per_slot])
        self._build_tensor()

    def flat_index(self, k, parity: int, slot: str) -> int:
        s = SLOTS.index(slot)
        return s * 2 * self.K + 2 * self.index[tuple(k)] + parity

    def describe(self, i: int) -> Mode:
        s, r = divmod(int(i), 2 * self.K)
        m, p = divmod(r, 2)
        return Mode(tuple(self.modes[m]), p, SLOTS[s])

    def low_mode_mask(self, radius: float) -> np.ndarray:
        return self.wavenumber_sq <= radius**2 + 1e-9

    def _advection_entries(self):
        """Entries ``(out, a, b, w)`` of ``Pi[(f . grad) g]`` on one slot."""
        K, modes = self.K, self.modes.astype(float)
        norms = np.sqrt((modes**2).sum(axis=1))
        P, M, Q, Mp = (
            g.ravel() for g in np.meshgrid(np.arange(K), [0, 1], np.arange(K), [0, 1], indexing="ij")
        )
        p, q = modes[P], modes[Q]
        sign = np.where(M == 0, -1.0, 1.0) * np.where(Mp == 0, -1.0, 1.0)
        cross = -p[:, 1] * q[:, 0] + p[:, 0] * q[:, 1]
        base = sign * cross / (norms[P] * norms[Q])
        terms = _pair_terms()
        outs, a_idx, b_idx, ws = [], [], [], []
        for branch, direction in ((0, 1.0), (1, -1.0)):
            k = self.modes[P] + int(direction) * self.modes[Q]
            trig = np.empty(len(P), dtype=np.int64)
            coef = np.empty(len(P))
            for (m, mp), pair in terms.items():
                sel = (M == m) & (Mp == mp)
                trig[sel] = pair[branch][0]
                coef[sel] = pair[branch][1]
            kk = (k**2).sum(axis=1)
            keep = (kk > 0) & (kk <= self.N**2) & (cross != 0)
            kf = k.astype(float)
            knorm = np.sqrt(np.maximum(kk, 1))
            amp = base * coef * (q * kf).sum(axis=1) / knorm
            # (k^perp/|k|) cos = -e_k^0 ; (k^perp/|k|) sin = e_k^1
            val = np.where(trig == 0, -amp, amp)
            flip = ~((k[:, 0] > 0) | ((k[:, 0] == 0) & (k[:, 1] > 0)))
            kh = np.where(flip[:, None], -k, k)
            val = np.where(flip & (trig == 0), -val, val)
            keep &= val != 0
            idx = np.array([self.index.get((int(x), int(y)), -1) for x, y in kh[keep]], dtype=np.int64)
            outs.append(2 * idx + trig[keep])
            a_idx.append(2 * P[keep] + M[keep])
            b_idx.append(2 * Q[keep] + Mp[keep])
            ws.append(val[keep])
        return (np.concatenate(outs), np.concatenate(a_idx), np.concatenate(b_idx), np.concatenate(ws))

    def _build_tensor(self):
        o, a, b, w = self._advection_entries()
        h = 2 * self.K
        # velocity: Pi[u.grad u~ - b.grad b~]; magnetic: Pi[u.grad b~ - b.grad u~]
        blocks = [(0, 0, 0, 1.0), (0, 1, 1, -1.0), (1, 0, 1, 1.0), (1, 1, 0, -1.0)]
        O = np.concatenate([o + so * h for so, sa, sb, _ in blocks])
        A = np.concatenate([a + sa * h for so, sa, sb, _ in blocks])
        Bi = np.concatenate([b + sb * h for so, sa, sb, _ in blocks])
        W = np.concatenate([w * sg for *_, sg in blocks])
        n = self.n
        key = (O * n + A) * n + Bi
        uniq, inv = np.unique(key, return_inverse=True)
        wsum = np.bincount(inv, weights=W)
        nz = wsum != 0
        uniq, wsum = uniq[nz], wsum[nz]
        self._out = uniq // (n * n)
        self._a = (uniq // n) % n
        self._b = uniq % n
        self._w = wsum

    @property
    def nnz(self) -> int:
        return len(self._w)

    def _pair_table(self):
        # tensor entries grouped by input pair (a, b), for sparse arguments
        if not hasattr(self, "_pair_order"):
            key = self._a * self.n + self._b
            order = np.argsort(key, kind="stable")
            self._pair_order = order
            self._pair_keys = key[order]
        return self._pair_order, self._pair_keys

    def _bilinear_sparse(self, U, V, iu, iv):
        order, keys = self._pair_table()
        out = np.zeros(self.n)
        for i in iu:
            for j in iv:
                key = i * self.n + j
                lo, hi = np.searchsorted(keys, [key, key + 1])
                if hi > lo:
                    sel = order[lo:hi]
                    np.add.at(out, self._out[sel], U[i] * V[j] * self._w[sel])
        return out

    def bilinear(self, U: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Galerkin-projected ``B(U, V)`` on flat coefficient arrays (batched)."""
        U = np.asarray(U, dtype=float)
        V = np.asarray(V, dtype=float)
        if U.ndim == 1 and V.ndim == 1:
            iu, iv = np.flatnonzero(U), np.flatnonzero(V)
            if len(iu) * len(iv) <= 16:
                return self._bilinear_sparse(U, V, iu, iv)
        shape = np.broadcast_shapes(U.shape, V.shape)
        U2 = np.ascontiguousarray(np.broadcast_to(U, shape).reshape(-1, self.n))
        V2 = np.ascontiguousarray(np.broadcast_to(V, shape).reshape(-1, self.n))
        out = np.zeros_like(U2)
        _contract(U2, V2, self._out, self._a, self._b, self._w, out)
        return out.reshape(shape)

    def linearized(self, U: np.ndarray) -> np.ndarray:
        """Dense matrix of ``xi -> B(U, xi) + B(xi, U)``."""
        U = np.asarray(U, dtype=float)
        n = self.n
        flat = np.bincount(self._out * n + self._b, weights=self._w * U[self._a], minlength=n * n)
        flat += np.bincount(self._out * n + self._a, weights=self._w * U[self._b], minlength=n * n)
        return flat.reshape(n, n)


@lru_cache(maxsize=None)
def galerkin_space(N: int) -> GalerkinSpace:
    return GalerkinSpace(int(N))


class SpectralField:
    """Immutable divergence-free pair ``(u, b)`` truncated at radius ``N``."""

    __slots__ = ("N", "_c")

    def __init__(self, N: int, coeffs=None):
        space = galerkin_space(N)
        c = np.zeros(space.n) if coeffs is None else np.array(coeffs, dtype=float).reshape(-1)
        if c.shape != (space.n,):
            raise ValueError(f"expected {space.n} coefficients for N={N}, got {c.size}")
        c.setflags(write=False)
        self.N = int(N)
        self._c = c

    @property
    def coeffs(self) -> np.ndarray:
        return self._c

    @property
    def space(self) -> GalerkinSpace:
        return galerkin_space(self.N)

    @classmethod
    def zeros(cls, N: int) -> "SpectralField":
        return cls(N)

    @classmethod
    def basis(cls, k, parity: int, slot: str, N: int, amplitude: float = 1.0) -> "SpectralField":
        """``amplitude * psi_k^m`` or ``sigma_k^m`` for any nonzero ``k`` with ``|k| <= N``."""
        kh, s0, s1 = fold_mode(k)
        space = galerkin_space(N)
        if kh not in space.index:
            raise ValueError(f"mode {tuple(k)} lies outside the truncation |k| <= {N}")
        c = np.zeros(space.n)
        c[space.flat_index(kh, parity, slot)] = amplitude * (s0 if parity == 0 else s1)
        return cls(N, c)

    @classmethod
    def from_mapping(cls, N: int, values: Mapping[Mode, float]) -> "SpectralField":
        space = galerkin_space(N)
        c = np.zeros(space.n)
        for mode, v in values.items():
            if tuple(mode.k) not in space.index:
                raise ValueError(f"mode {mode.k} lies outside the truncation |k| <= {N}")
            c[space.flat_index(mode.k, mode.parity, mode.slot)] = v
        return cls(N, c)

    @classmethod
    def random(cls, N: int, rng, decay: float = 1.0, norm: float | None = None) -> "SpectralField":
        """Gaussian coefficients damped by ``|k|^-decay``; optionally rescaled to an L2 norm."""
        space = galerkin_space(N)
        c = rng.standard_normal(space.n) * space.wavenumber_sq ** (-decay / 2)
        F = cls(N, c)
        if norm is not None:
            F = F * (norm / math.sqrt(inner_product(F, F)))
        return F

    def __getitem__(self, mode: Mode) -> float:
        return float(self._c[self.space.flat_index(mode.k, mode.parity, mode.slot)])

    def items(self):
        space = self.space
        for i, v in enumerate(self._c):
            yield space.describe(i), float(v)

    def slot(self, slot: str) -> np.ndarray:
        h = 2 * self.space.K
        s = SLOTS.index(slot)
        return self._c[s * h:(s + 1) * h]

    def _check(self, other):
        if not isinstance(other, SpectralField):
            return NotImplemented
        if other.N != self.N:
            raise ValueError(f"mismatched truncations N={self.N} and N={other.N}")
        return other

    def __add__(self, other):
        other = self._check(other)
        if other is NotImplemented:
            return other
        return SpectralField(self.N, self._c + other._c)

    def __sub__(self, other):
        other = self._check(other)
        if other is NotImplemented:
            return other
        return SpectralField(self.N, self._c - other._c)

    def __mul__(self, a):
        return SpectralField(self.N, self._c * float(a))

    __rmul__ = __mul__

    def __truediv__(self, a):
        return SpectralField(self.N, self._c / float(a))

    def __neg__(self):
        return SpectralField(self.N, -self._c)

    def __eq__(self, other):
        return isinstance(other, SpectralField) and other.N == self.N and np.array_equal(other._c, self._c)

    def __hash__(self):
        return hash((self.N, self._c.tobytes()))

    def __repr__(self):
        return f"SpectralField(N={self.N}, nonzero={int(np.count_nonzero(self._c))})"

    # serialization: flat records (k1, k2, parity, slot, coeff)

    def to_records(self) -> list[dict]:
        return [
            {"k1": m.k[0], "k2": m.k[1], "parity": m.parity, "slot": m.slot, "coeff": v}
            for m, v in self.items()
        ]

    @classmethod
    def from_records(cls, records: Iterable[Mapping], N: int | None = None) -> "SpectralField":
        records = list(records)
        if N is None:
            N = max(int(round(math.hypot(int(r["k1"]), int(r["k2"])))) for r in records)
        values = {
            Mode((int(r["k1"]), int(r["k2"])), int(r["parity"]), str(r["slot"])): float(r["coeff"])
            for r in records
        }
        return cls.from_mapping(N, values)

    def to_json(self) -> str:
        return json.dumps(self.to_records())

    @classmethod
    def from_json(cls, text: str, N: int | None = None) -> "SpectralField":
        return cls.from_records(json.loads(text), N)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k1", "k2", "parity", "slot", "coeff"])
        for r in self.to_records():
            w.writerow([r["k1"], r["k2"], r["parity"], r["slot"], repr(r["coeff"])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, N: int | None = None) -> "SpectralField":
        return cls.from_records(csv.DictReader(io.StringIO(text)), N)


def evaluate(F: SpectralField, X, Y) -> np.ndarray:
    """Point values ``(u1, u2, b1, b2)`` of ``F`` on arrays ``X, Y``."""
    space = F.space
    X = np.asarray(X, dtype=float)
    out = np.zeros((4,) + X.shape)
    for i in np.flatnonzero(F.coeffs):
        m = space.describe(i)
        k1, k2 = m.k
        nk = m.norm
        theta = k1 * X + k2 * Y
        if m.parity == 0:
            f, d = np.cos(theta), (k2 / nk, -k1 / nk)
        else:
            f, d = np.sin(theta), (-k2 / nk, k1 / nk)
        off = 0 if m.slot == VELOCITY else 2
        out[off] += F.coeffs[i] * d[0] * f
        out[off + 1] += F.coeffs[i] * d[1] * f
    return out


def inner_product(F: SpectralField, G: SpectralField) -> float:
    if F.N != G.N:
        raise ValueError(f"mismatched truncations N={F.N} and N={G.N}")
    return float(BASIS_NORM_SQ * np.dot(F.coeffs, G.coeffs))


def dissipation_rates(params: DissipationParams, N: int) -> np.ndarray:
    """Per-coefficient eigenvalues of ``A^{alpha,beta}``."""
    space = galerkin_space(N)
    h = 2 * space.K
    k2 = space.wavenumber_sq
    rates = np.empty(space.n)
    rates[:h] = params.nu1 * k2[:h] ** params.alpha
    rates[h:] = params.nu2 * k2[h:] ** params.beta
    return rates


def apply_dissipation(F: SpectralField, p: DissipationParams) -> SpectralField:
    return SpectralField(F.N, F.coeffs * dissipation_rates(p, F.N))


def sobolev_norm(F: SpectralField, s: float) -> float:
    if s < 0:
        raise ValueError("Sobolev index must be nonnegative")
    k2 = F.space.wavenumber_sq
    return float(np.sqrt(BASIS_NORM_SQ * np.sum(k2**s * F.coeffs**2)))


def bilinear_B(U: SpectralField, V: SpectralField) -> SpectralField:
    """Galerkin projection of ``B(U, V)`` (advection plus Lorentz/induction terms)."""
    if U.N != V.N:
        raise ValueError(f"mismatched truncations N={U.N} and N={V.N}")
    return SpectralField(U.N, U.space.bilinear(U.coeffs, V.coeffs))


def advect(u: SpectralField, v: SpectralField) -> SpectralField:
    """``Pi[(u . grad) v]`` for two single-slot fields stored in the velocity slot.

    This is the ``B~(u, v)`` form: with ``U = (u, 0)`` and ``V = (v, 0)`` the
    velocity component of ``B(U, V)`` is exactly ``Pi[u . grad v]``.
    """
    if u.N != v.N:
        raise ValueError(f"mismatched truncations N={u.N} and N={v.N}")
    h = 2 * u.space.K
    if np.any(u.coeffs[h:]) or np.any(v.coeffs[h:]):
        raise ValueError("advect expects fields stored in the velocity slot")
    return bilinear_B(u, v)
