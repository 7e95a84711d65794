import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import FOUR_MODES
from test_fourier_core import _grid_bilinear
from mhdlab.fourier_core import MAGNETIC, VELOCITY, DissipationParams, SpectralField, galerkin_space
from mhdlab.hoermander import (
    FAMILIES,
    MAGNETIC_FAMILY,
    VELOCITY_FAMILY,
    DirectionSet,
    Y_field,
    bracket_JY,
    bracket_Z,
    bracket_report_csv,
    cascade,
    constant_field,
    coverage_json,
    coverage_report,
    cross_coefficient,
    drift,
    generator_check,
    half_lattice_ball,
    lemma_suite,
    lie_bracket_fd,
    measure_constant,
    nonparallel_pairs,
    verify_lemma,
)


@pytest.fixture(scope="module")
def suites():
    return {fam: lemma_suite(fam) for fam in FAMILIES}


def _slot_part(F, slot):
    space = galerkin_space(F.N)
    mask = np.array([space.describe(i).slot == slot for i in range(space.n)])
    return F.coeffs[mask]


def _support(F, tol=1e-12):
    space = galerkin_space(F.N)
    return [space.describe(i) for i in np.flatnonzero(np.abs(F.coeffs) > tol)]


def test_canonical_velocity_combination_on_grid():
    # J^{0,1}_{k,l} + J^{0,1}_{l,k} for k=(1,1), l=(0,1), rebuilt from pointwise products
    k, l, N = (1, 1), (0, 1), 3
    sk0, sk1 = (SpectralField.basis(k, m, MAGNETIC, N) for m in (0, 1))
    sl0, sl1 = (SpectralField.basis(l, m, MAGNETIC, N) for m in (0, 1))
    grid = sum(_grid_bilinear(a, b) for a, b in [(sk0, sl1), (sl1, sk0), (sl0, sk1), (sk1, sl0)])
    exact = bracket_JY(k, l, 0, 1, N) + bracket_JY(l, k, 0, 1, N)
    np.testing.assert_allclose(exact.coeffs, grid, atol=1e-10)
    (m,) = _support(exact)
    assert (m.k, m.parity, m.slot) == ((1, 2), 0, VELOCITY)
    c = measure_constant(VELOCITY_FAMILY)
    assert exact.coeffs[np.abs(exact.coeffs) > 1e-12][0] == pytest.approx(c / math.sqrt(10), rel=1e-12)


def test_canonical_magnetic_combination_on_grid():
    k, l, N = (1, 1), (0, 1), 3
    p0, s1 = SpectralField.basis(k, 0, VELOCITY, N), SpectralField.basis(l, 1, MAGNETIC, N)
    q0, t1 = SpectralField.basis(l, 0, VELOCITY, N), SpectralField.basis(k, 1, MAGNETIC, N)
    grid = sum(_grid_bilinear(a, b) for a, b in [(p0, s1), (s1, p0), (q0, t1), (t1, q0)])
    exact = bracket_Z(k, l, 0, 1, N) + bracket_Z(l, k, 0, 1, N)
    np.testing.assert_allclose(exact.coeffs, grid, atol=1e-10)
    (m,) = _support(exact)
    assert (m.k, m.parity, m.slot) == ((1, 0), 0, MAGNETIC)
    # a * |k - l| with a = -1/sqrt(2), |k - l| = 1
    a = cross_coefficient(k, l)
    c = measure_constant(MAGNETIC_FAMILY)
    assert exact.coeffs[np.abs(exact.coeffs) > 1e-12][0] == pytest.approx(c * a * 1.0, rel=1e-12)


def test_bracket_families_live_in_one_slot():
    for k, l in nonparallel_pairs(5)[::7]:
        for m in (0, 1):
            for mp in (0, 1):
                assert np.abs(_slot_part(bracket_JY(k, l, m, mp), MAGNETIC)).max() == 0.0
                assert np.abs(_slot_part(bracket_Z(k, l, m, mp), VELOCITY)).max() == 0.0


def test_parallel_pairs_vanish():
    for k, l in [((0, 1), (0, 2)), ((1, 1), (2, 2)), ((1, -1), (3, -3))]:
        assert cross_coefficient(k, l) == 0.0
        for fam in FAMILIES:
            for r in verify_lemma(k, l, fam):
                if not r.skipped:
                    assert abs(r.coefficient) < 1e-12 and r.residual < 1e-12


def test_equal_norms_kill_velocity_lines():
    for r in verify_lemma((1, 0), (0, 1), VELOCITY_FAMILY):
        assert r.predicted_factor == 0.0
        assert abs(r.coefficient) < 1e-12
        assert math.isnan(r.constant)


def test_constants_agree_per_family_and_are_reported_separately(suites):
    for fam in FAMILIES:
        cs = [r.constant for r in suites[fam].results if not math.isnan(r.constant)]
        assert len(cs) > 100
        np.testing.assert_allclose(cs, suites[fam].constant, rtol=1e-9)
    assert suites[VELOCITY_FAMILY].family != suites[MAGNETIC_FAMILY].family


def test_lemma_suites_pass_with_measured_signs(suites):
    for fam in FAMILIES:
        s = suites[fam]
        assert s.passed, (fam, s.max_relative_residual, s.max_constant_deviation)
        assert s.max_relative_residual <= 1e-10


def test_displayed_signs_expose_sign_flips():
    for fam in FAMILIES:
        s = lemma_suite(fam, radius=3, signs="displayed")
        assert not s.passed
        flipped = {r.line for r in s.results if not math.isnan(r.constant) and r.constant < 0}
        assert flipped


def test_zero_target_is_skipped_with_marker():
    rs = verify_lemma((1, 0), (1, 0), MAGNETIC_FAMILY)
    skipped = [r for r in rs if r.skipped]
    assert skipped and all("(0, 0)" in r.reason and r.output is None for r in skipped)


def test_off_lattice_input_rejected():
    with pytest.raises(ValueError, match="half-lattice"):
        verify_lemma((-1, 0), (0, 1), VELOCITY_FAMILY)
    with pytest.raises(ValueError, match="unknown identity family"):
        verify_lemma((1, 0), (0, 1), "kinetic")


def test_bracket_csv(suites):
    text = bracket_report_csv(suites=list(suites.values()))
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 4 * len(FAMILIES) * len(nonparallel_pairs(5))
    assert {r["identity"] for r in rows} == {f"{f}.{i}" for f in FAMILIES for i in range(1, 5)}
    assert max(float(r["residual"]) for r in rows) <= 1e-10


# cascade


def test_first_generation_of_four_modes():
    Z1 = cascade(FOUR_MODES, 1)[0]
    assert (1, 2) in Z1
    assert Z1.generation == 1


def test_parallel_seed_set_dies():
    (Z1,) = cascade([(0, 1), (0, 2), (0, -1), (0, -2)], 1)
    assert len(Z1) == 0


def test_cascade_covers_ball():
    rep = coverage_report(FOUR_MODES, n_max=8, radius=4)
    assert rep["missing"] == []
    assert rep["full_coverage_generation"] is not None and rep["full_coverage_generation"] <= 8
    assert rep["modes_within_radius"] == len(half_lattice_ball(4))
    covered = [g["covered_within_radius"] for g in rep["generations"]]
    assert covered == sorted(covered)


def test_coverage_json_roundtrip():
    d = json.loads(coverage_json(FOUR_MODES))
    assert [1, 2] in d["generations"][0]["new_modes"]


@settings(max_examples=25, deadline=None)
@given(st.randoms(use_true_random=False))
def test_cascade_independent_of_order(rnd):
    base = [(0, 1), (0, -1), (1, 1), (-1, -1), (2, 1), (-2, -1)]
    shuffled = list(base)
    rnd.shuffle(shuffled)
    assert [z.modes for z in cascade(base, 4)] == [z.modes for z in cascade(shuffled, 4)]


def test_direction_set_folding():
    D = DirectionSet.from_vectors([(0, -1), (-1, -1)])
    assert D.modes == {(0, 1), (1, 1)}
    assert (-1, -1) in D and len(D) == 2
    with pytest.raises(ValueError):
        DirectionSet(frozenset({(0, 0)}))


def test_generator_check():
    sym = lambda vs: vs + [(-a, -b) for a, b in vs]
    assert generator_check(sym([(0, 1), (1, 1)])).generator
    assert not generator_check(sym([(0, 2), (2, 0)])).generator
    assert generator_check(FOUR_MODES).ok
    assert not generator_check([(0, 1), (1, 1)]).symmetric


# finite-difference brackets


def _random_field(rng, N, scale=0.3):
    return SpectralField(N, rng.normal(scale=scale, size=galerkin_space(N).n))


@pytest.mark.parametrize("eps", [1e-3, 1e-4, 1e-5])
def test_drift_bracket_with_constant_field_is_Y(eps):
    rng = np.random.default_rng(3)
    N, p = 4, DissipationParams(0.7, 0.4, 1.5, 1.25)
    U = _random_field(rng, N)
    s = SpectralField.basis((1, 1), 0, MAGNETIC, N)
    fd = lie_bracket_fd(lambda V: drift(V, p), constant_field(s), U, eps)
    ref = Y_field((1, 1), 0, p, N)(U)
    assert np.abs(fd.coeffs - ref.coeffs).max() < 1e-6 * (1 + np.abs(ref.coeffs).max())


@pytest.mark.parametrize("eps", [1e-2, 1e-3, 1e-4])
def test_second_bracket_is_minus_J(eps):
    rng = np.random.default_rng(4)
    N, p = 4, DissipationParams(1.0, 1.0, 1.25, 1.25)
    U = _random_field(rng, N)
    Y = Y_field((1, 1), 0, p, N)
    s = SpectralField.basis((0, 1), 1, MAGNETIC, N)
    fd = lie_bracket_fd(Y, constant_field(s), U, eps)
    ref = -bracket_JY((1, 1), (0, 1), 0, 1, N)
    # Y is affine in U so central differences are exact up to rounding
    assert np.abs(fd.coeffs - ref.coeffs).max() < 1e-9 / eps
