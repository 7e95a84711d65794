"""Lie-bracket algebra over the trigonometric basis and the direction cascade.

For constant vector fields ``sigma`` the brackets with the drift
``F(U) = -A U - B(U, U)`` reduce to

    Y_k^m(U)         = [F, sigma_k^m](U)   = A sigma_k^m + B(sigma_k^m, U) + B(U, sigma_k^m)
    J_{k,l}^{m,m'}   = -[Y_k^m, sigma_l^m'] = B(sigma_k^m, sigma_l^m') + B(sigma_l^m', sigma_k^m)
    Z_{k,l}^{m,m'}   = -[Y~_k^m, sigma_l^m'] = B(psi_k^m, sigma_l^m') + B(sigma_l^m', psi_k^m)

Symmetric and antisymmetric combinations of ``J`` (resp. ``Z``) land on a
single velocity (resp. magnetic) basis field at ``k + l`` or ``k - l`` with
coefficient ``a c f(k, l)``, ``a = <k, l^perp>/(|k||l|)``.  The sign attached
to each line is measured here, not assumed: with the line signs in
``LINE_SIGNS`` one constant ``c`` serves all pairs of a family.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable, Iterable

import numpy as np

from .fourier_core import (
    MAGNETIC,
    VELOCITY,
    DissipationParams,
    SpectralField,
    apply_dissipation,
    bilinear_B,
    fold_mode,
    in_half_lattice,
)

VELOCITY_FAMILY = "velocity"
MAGNETIC_FAMILY = "magnetic"
FAMILIES = (VELOCITY_FAMILY, MAGNETIC_FAMILY)

# Line signs under which one constant c fits every pair.  The conventional
# display of these identities has all signs +1; lines with -1 carry the
# opposite sign in the exact computation.
LINE_SIGNS = {VELOCITY_FAMILY: (1, 1, -1, 1), MAGNETIC_FAMILY: (1, -1, 1, -1)}
DISPLAYED_SIGNS = {VELOCITY_FAMILY: (1, 1, 1, 1), MAGNETIC_FAMILY: (1, 1, 1, 1)}


def _norm(k) -> float:
    return math.hypot(k[0], k[1])


def _add(k, l, s: int = 1) -> tuple[int, int]:
    return (int(k[0]) + s * int(l[0]), int(k[1]) + s * int(l[1]))


def perp(l) -> tuple[int, int]:
    """``l^perp = (-l2, l1)``."""
    return (-int(l[1]), int(l[0]))


def cross_coefficient(k, l) -> float:
    """``a = <k, l^perp> / (|k| |l|)``."""
    p = perp(l)
    return (k[0] * p[0] + k[1] * p[1]) / (_norm(k) * _norm(l))


def _radius_for(*ks) -> int:
    return max(1, int(math.ceil(sum(_norm(k) for k in ks) - 1e-12)))


def bracket_JY(k, l, m: int, mp: int, N: int | None = None) -> SpectralField:
    """``J_{k,l}^{m,m'} = B(sigma_k^m, sigma_l^m') + B(sigma_l^m', sigma_k^m)``."""
    N = N or _radius_for(k, l)
    s1 = SpectralField.basis(k, m, MAGNETIC, N)
    s2 = SpectralField.basis(l, mp, MAGNETIC, N)
    return bilinear_B(s1, s2) + bilinear_B(s2, s1)


def bracket_Z(k, l, m: int, mp: int, N: int | None = None) -> SpectralField:
    """``Z_{k,l}^{m,m'} = B(psi_k^m, sigma_l^m') + B(sigma_l^m', psi_k^m)``."""
    N = N or _radius_for(k, l)
    p = SpectralField.basis(k, m, VELOCITY, N)
    s = SpectralField.basis(l, mp, MAGNETIC, N)
    return bilinear_B(p, s) + bilinear_B(s, p)


@dataclass(frozen=True)
class BracketResult:
    family: str
    line: int
    k: tuple
    l: tuple
    output: SpectralField | None
    target: tuple | None  # (wavevector, parity, slot)
    predicted_factor: float  # a * f(k, l) * sign, so coefficient = c * predicted_factor
    coefficient: float
    residual: float
    skipped: bool = False
    reason: str = ""

    @property
    def constant(self) -> float:
        """Extracted ``c``; ``nan`` when the identity is trivially zero or skipped."""
        if self.skipped or abs(self.predicted_factor) < 1e-14:
            return math.nan
        return self.coefficient / self.predicted_factor

    @property
    def label(self) -> str:
        return f"{self.family}.{self.line}"


def _lines(family: str, k, l, N: int):
    """``(combination, target wavevector, parity, f(k, l))`` for the four lines of a family."""
    dk = _norm(l) ** 2 - _norm(k) ** 2
    plus, minus = _add(k, l, 1), _add(k, l, -1)
    inv = lambda v: 1.0 / _norm(v) if v != (0, 0) else math.nan
    if family == VELOCITY_FAMILY:
        J = lambda a, b, m, mp: bracket_JY(a, b, m, mp, N)
        return [
            (lambda: J(k, l, 0, 1) + J(l, k, 0, 1), plus, 0, dk * inv(plus)),
            (lambda: J(k, l, 0, 1) - J(l, k, 0, 1), minus, 0, -dk * inv(minus)),
            (lambda: J(k, l, 1, 1) + J(l, k, 0, 0), minus, 1, dk * inv(minus)),
            (lambda: J(k, l, 1, 1) - J(l, k, 0, 0), plus, 1, dk * inv(plus)),
        ]
    if family == MAGNETIC_FAMILY:
        Z = lambda a, b, m, mp: bracket_Z(a, b, m, mp, N)
        return [
            (lambda: Z(k, l, 0, 1) + Z(l, k, 0, 1), minus, 0, _norm(minus)),
            (lambda: Z(k, l, 0, 1) - Z(l, k, 0, 1), plus, 0, _norm(plus)),
            (lambda: Z(k, l, 1, 1) + Z(k, l, 0, 0), minus, 1, _norm(minus)),
            (lambda: Z(k, l, 1, 1) - Z(k, l, 0, 0), plus, 1, _norm(plus)),
        ]
    raise ValueError(f"unknown identity family {family!r}; expected one of {FAMILIES}")


def verify_lemma(k, l, which: str, signs: str = "measured") -> list[BracketResult]:
    """Evaluate the four identities of a family for the pair ``(k, l)``.

    ``signs="measured"`` uses ``LINE_SIGNS``; ``signs="displayed"`` uses all
    ``+1`` so that the per-line constants expose the sign differences.
    A line whose target wavevector is ``(0, 0)`` is skipped with a marker.
    """
    k = (int(k[0]), int(k[1]))
    l = (int(l[0]), int(l[1]))
    for v in (k, l):
        if not in_half_lattice(v):
            raise ValueError(f"{v} is not on the half-lattice")
    which = str(which)
    if which not in FAMILIES:
        raise ValueError(f"unknown identity family {which!r}; expected one of {FAMILIES}")
    if signs not in ("measured", "displayed"):
        raise ValueError(f"signs must be 'measured' or 'displayed', got {signs!r}")
    sign_table = {"measured": LINE_SIGNS, "displayed": DISPLAYED_SIGNS}[signs][which]
    slot = VELOCITY if which == VELOCITY_FAMILY else MAGNETIC
    N = _radius_for(k, l)
    a = cross_coefficient(k, l)
    out = []
    for i, (combo, target, parity, f) in enumerate(_lines(which, k, l, N), start=1):
        if target == (0, 0):
            out.append(BracketResult(which, i, k, l, None, None, math.nan, math.nan, 0.0, True,
                                     "target wavevector is (0, 0)"))
            continue
        F = combo()
        basis = SpectralField.basis(target, parity, slot, N)
        t = basis.coeffs
        coef = float(F.coeffs @ t / (t @ t))
        resid = float(np.linalg.norm(F.coeffs - coef * t))
        out.append(BracketResult(which, i, k, l, F, (fold_mode(target)[0], parity, slot),
                                 a * f * sign_table[i - 1], coef, resid))
    return out


def half_lattice_ball(radius: float) -> list[tuple[int, int]]:
    R = int(math.floor(radius))
    return [(a, b) for a in range(0, R + 1) for b in range(-R, R + 1)
            if in_half_lattice((a, b)) and a * a + b * b <= radius * radius + 1e-9]


def nonparallel_pairs(radius: float = 5) -> list[tuple]:
    ball = half_lattice_ball(radius)
    return [(k, l) for k in ball for l in ball if k[0] * l[1] - k[1] * l[0] != 0]


@dataclass(frozen=True)
class LemmaSuite:
    family: str
    constant: float
    max_relative_residual: float
    max_constant_deviation: float
    results: tuple = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.max_relative_residual <= 1e-10 and self.max_constant_deviation <= 1e-9


CANONICAL_PAIR = ((1, 1), (0, 1))


def measure_constant(which: str) -> float:
    """``c`` from the canonical pair ``((1,1), (0,1))``, first line of the family."""
    return verify_lemma(*CANONICAL_PAIR, which)[0].constant


def lemma_suite(which: str, radius: float = 5, signs: str = "measured") -> LemmaSuite:
    """All non-parallel half-lattice pairs with ``|k|, |l| <= radius``, checked against one ``c``.

    Relative residuals are measured against ``output norm + 1``; constant
    deviations are relative to the canonical ``c``.
    """
    c = measure_constant(which)
    results = []
    worst_res = 0.0
    worst_dev = 0.0
    for k, l in nonparallel_pairs(radius):
        for r in verify_lemma(k, l, which, signs):
            results.append(r)
            if r.skipped:
                continue
            worst_res = max(worst_res, r.residual / (np.linalg.norm(r.output.coeffs) + 1.0))
            expected = c * r.predicted_factor
            worst_dev = max(worst_dev, abs(r.coefficient - expected) / (abs(c) * max(abs(r.predicted_factor), 1.0)))
    return LemmaSuite(which, c, worst_res, worst_dev, tuple(results))


def bracket_report_csv(radius: float = 5, signs: str = "measured", suites=None) -> str:
    """One row per identity check; ``suites`` reuses already computed :class:`LemmaSuite` objects."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k1", "k2", "l1", "l2", "identity", "extracted_c", "residual", "skipped"])
    suites = suites or [lemma_suite(fam, radius, signs) for fam in FAMILIES]
    for suite in suites:
        for r in suite.results:
            c = r.constant
            w.writerow([r.k[0], r.k[1], r.l[0], r.l[1], r.label,
                        "" if math.isnan(c) else repr(c), repr(r.residual), int(r.skipped)])
    return buf.getvalue()


# direction cascade


@dataclass(frozen=True)
class DirectionSet:
    """Half-lattice wavevectors (both parities implied) of one cascade generation."""

    modes: frozenset
    generation: int = 0

    def __post_init__(self):
        modes = frozenset((int(k[0]), int(k[1])) for k in self.modes)
        if (0, 0) in modes:
            raise ValueError("direction sets exclude (0, 0)")
        object.__setattr__(self, "modes", modes)

    @classmethod
    def from_vectors(cls, vectors: Iterable, generation: int = 0) -> "DirectionSet":
        return cls(frozenset(fold_mode(v)[0] for v in vectors), generation)

    def symmetric(self) -> frozenset:
        return self.modes | frozenset((-a, -b) for a, b in self.modes)

    def __contains__(self, k) -> bool:
        return fold_mode(k)[0] in self.modes

    def __len__(self) -> int:
        return len(self.modes)

    def sorted(self) -> list:
        return sorted(self.modes, key=lambda k: (k[0] ** 2 + k[1] ** 2, k))


def _symmetrize(vectors) -> frozenset:
    vs = {(int(v[0]), int(v[1])) for v in vectors}
    return frozenset(vs | {(-a, -b) for a, b in vs})


def cascade(Z0, n_max: int) -> list[DirectionSet]:
    """``Z_n = {k + l : k in Z_{n-1}, l in Z_0, <k, l^perp> != 0, |k| != |l|}`` for ``n = 1..n_max``.

    ``Z0`` may be given as a symmetric list or on the half-lattice; the
    iteration runs on the symmetric sets with exact integers and results are
    folded to the half-lattice.
    """
    base = Z0.symmetric() if isinstance(Z0, DirectionSet) else _symmetrize(Z0)
    if (0, 0) in base:
        raise ValueError("Z0 must not contain (0, 0)")
    out = []
    prev = base
    for n in range(1, n_max + 1):
        nxt = set()
        for k in prev:
            nk = k[0] ** 2 + k[1] ** 2
            for l in base:
                # <k, l^perp> = 0 or |k| = |l| kills the bracket
                if -k[0] * l[1] + k[1] * l[0] == 0 or nk == l[0] ** 2 + l[1] ** 2:
                    continue
                s = (k[0] + l[0], k[1] + l[1])
                if s != (0, 0):
                    nxt.add(s)
        prev = frozenset(nxt)
        out.append(DirectionSet(frozenset(fold_mode(v)[0] for v in prev), n))
    return out


def coverage_report(Z0, n_max: int = 8, radius: float = 4) -> dict:
    """Per-generation new modes and cumulative coverage of the half-lattice ball of ``radius``."""
    target = set(half_lattice_ball(radius))
    seen: set = set()
    gens = []
    first_full = None
    for Zn in cascade(Z0, n_max):
        new = sorted(Zn.modes - seen, key=lambda k: (k[0] ** 2 + k[1] ** 2, k))
        seen |= Zn.modes
        covered = len(target & seen)
        gens.append({
            "generation": Zn.generation,
            "size": len(Zn),
            "new_modes": [list(k) for k in new],
            "covered_within_radius": covered,
        })
        if first_full is None and covered == len(target):
            first_full = Zn.generation
    return {
        "Z0": sorted([list(k) for k in _symmetrize(Z0.symmetric() if isinstance(Z0, DirectionSet) else Z0)]),
        "radius": radius,
        "modes_within_radius": len(target),
        "generations": gens,
        "full_coverage_generation": first_full,
        "missing": [list(k) for k in sorted(target - seen)],
    }


def coverage_json(Z0, n_max: int = 8, radius: float = 4) -> str:
    return json.dumps(coverage_report(Z0, n_max, radius), indent=1, sort_keys=True)


@dataclass(frozen=True)
class GeneratorReport:
    symmetric: bool
    generator: bool
    nonparallel_distinct_norms: bool

    @property
    def ok(self) -> bool:
        return self.symmetric and self.generator and self.nonparallel_distinct_norms


def generator_check(Z0) -> GeneratorReport:
    """Symmetry, integer-span (gcd of 2x2 minors equals 1), and a non-parallel pair of distinct norms."""
    vs = [(int(v[0]), int(v[1])) for v in Z0]
    sset = set(vs)
    symmetric = all((-a, -b) in sset for a, b in sset)
    minors = [a[0] * b[1] - a[1] * b[0] for i, a in enumerate(vs) for b in vs[i + 1:]]
    generator = reduce(math.gcd, (abs(m) for m in minors), 0) == 1
    distinct = any(
        a[0] * b[1] - a[1] * b[0] != 0 and a[0] ** 2 + a[1] ** 2 != b[0] ** 2 + b[1] ** 2
        for i, a in enumerate(vs) for b in vs[i + 1:]
    )
    return GeneratorReport(symmetric, generator, distinct)


# finite-difference Lie brackets


def drift(U: SpectralField, params: DissipationParams) -> SpectralField:
    """``F(U) = -A U - B(U, U)``."""
    return -apply_dissipation(U, params) - bilinear_B(U, U)


def directional_derivative(E: Callable, U: SpectralField, V: SpectralField, eps: float) -> SpectralField:
    return (E(U + eps * V) - E(U - eps * V)) / (2 * eps)


def lie_bracket_fd(E1: Callable, E2: Callable, U: SpectralField, eps: float = 1e-4) -> SpectralField:
    """``[E1, E2](U) = DE2(U) E1(U) - DE1(U) E2(U)`` by central differences."""
    return directional_derivative(E2, U, E1(U), eps) - directional_derivative(E1, U, E2(U), eps)


def Y_field(k, m: int, params: DissipationParams, N: int) -> Callable:
    """``U -> Y_k^m(U) = A sigma_k^m + B(sigma_k^m, U) + B(U, sigma_k^m)``."""
    s = SpectralField.basis(k, m, MAGNETIC, N)
    As = apply_dissipation(s, params)
    return lambda U: As + bilinear_B(s, U) + bilinear_B(U, s)


def constant_field(F: SpectralField) -> Callable:
    return lambda U: F
