from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from spatialcrn.errors import LogicError, NumericError, ValidationError
from spatialcrn.geometry import (DomainSpec, KernelSpec, MotionSpec, diffuse_step, kernel_eval,
                                 kernel_norm_const, reflect_into_box, sample_reaction_location,
                                 support_integral)

UNIT = DomainSpec((0.0,), (1.0,))


def _radial_oracle(dim, profile):
    """Normalising constant from a 1-d radial integral (independent of the library formula)."""
    surface = {1: 2.0, 2: 2.0 * math.pi, 3: 4.0 * math.pi}[dim]
    val, _ = integrate.quad(lambda r: profile(r) * r ** (dim - 1), 0.0, 1.0, epsabs=1e-14)
    return 1.0 / (surface * val)


# -- domain and reflection -------------------------------------------------

def test_domain_validation():
    with pytest.raises(ValidationError):
        DomainSpec((1.0,), (0.0,))
    with pytest.raises(ValidationError):
        DomainSpec((0.0,) * 4, (1.0,) * 4)
    assert DomainSpec((0.0, -1.0), (2.0, 1.0)).volume == pytest.approx(4.0)


@pytest.mark.parametrize("x, expected", [(1.2, 0.8), (-0.3, 0.3)])
def test_reflect_single_fold(x, expected):
    assert reflect_into_box([x], UNIT)[0] == pytest.approx(expected, abs=1e-15)


def test_reflect_triangle_wave():
    t = 2.4 % 2.0
    oracle = t if t <= 1.0 else 2.0 - t
    assert reflect_into_box([2.4], UNIT)[0] == pytest.approx(oracle, abs=1e-14)


def test_reflect_rejects_non_finite():
    with pytest.raises(ValidationError):
        reflect_into_box([np.nan], UNIT)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2))
def test_reflect_properties(p):
    box = DomainSpec((-1.0, 0.0), (2.0, 0.5))
    out = reflect_into_box(p, box)
    assert np.all(box.contains(out))
    assert np.array_equal(reflect_into_box(out, box), out)
    shifted = np.asarray(p) + 2.0 * box.lengths
    assert np.allclose(reflect_into_box(shifted, box), out, atol=1e-9)


# -- kernel ----------------------------------------------------------------

def test_kernel_examples():
    k = KernelSpec(1.0, "epanechnikov", 1)
    assert kernel_eval(k, [1.0]) == 0.0
    assert kernel_eval(k, [2.0]) == 0.0
    oracle = 1.0 / integrate.quad(lambda u: 1 - u * u, -1, 1)[0]
    assert kernel_eval(k, [0.0]) == pytest.approx(oracle, abs=1e-14)
    assert oracle == pytest.approx(0.75)


def test_norm_const_examples():
    assert kernel_norm_const(1, 1.0, "epanechnikov") == pytest.approx(0.75, abs=1e-14)
    assert kernel_norm_const(1, 1.0, "uniform_ball") == pytest.approx(0.5, abs=1e-14)
    assert kernel_norm_const(2, 1.0, "epanechnikov") == pytest.approx(2 / math.pi, abs=1e-14)
    with pytest.raises(ValidationError):
        kernel_norm_const(4, 1.0)


@pytest.mark.parametrize("dim", [1, 2, 3])
@pytest.mark.parametrize("family, profile", [("epanechnikov", lambda r: 1 - r * r),
                                             ("uniform_ball", lambda r: 1.0)])
def test_norm_const_against_radial_quadrature(dim, family, profile):
    eps = 0.37
    got = kernel_norm_const(dim, eps, family) * eps**dim
    assert got == pytest.approx(_radial_oracle(dim, profile), rel=1e-10)


def test_kernel_midpoint_quadrature_1d_and_2d():
    eps = 0.5
    k1 = KernelSpec(eps, "epanechnikov", 1)
    n = 10_000
    y = -eps + (np.arange(n) + 0.5) * (2 * eps / n)
    assert abs(np.sum(kernel_eval(k1, y[:, None])) * (2 * eps / n) - 1) <= 1e-6
    k2 = KernelSpec(eps, "epanechnikov", 2)
    n = 4000
    h = 2 * eps / n
    c = -eps + (np.arange(n) + 0.5) * h
    total = 0.0
    for start in range(0, n, 500):
        X, Y = np.meshgrid(c[start:start + 500], c, indexing="ij")
        total += kernel_eval(k2, np.stack([X, Y], axis=-1)).sum()
    assert abs(total * h * h - 1) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 3.0), st.lists(st.floats(-5, 5), min_size=2, max_size=2),
       st.sampled_from(["epanechnikov", "uniform_ball"]))
def test_kernel_bounds(eps, y, family):
    k = KernelSpec(eps, family, 2)
    v = float(kernel_eval(k, y))
    assert 0.0 <= v <= k.sup
    if np.hypot(*y) > eps:
        assert v == 0.0
    assert kernel_eval(k, [0.0, 0.0]) == k.sup


# -- diffusion -------------------------------------------------------------

def test_diffuse_static_is_identity(rng):
    p = np.array([[0.3], [0.9]])
    assert np.array_equal(diffuse_step(p, MotionSpec((0.0,), 0.0), 0.1, rng, UNIT), p)


def test_diffuse_moments(rng):
    n = 100_000
    pos = np.full((n, 1), 0.5)
    out = diffuse_step(pos, MotionSpec((0.5,), 0.01), 0.01, rng, UNIT)
    inc = out[:, 0] - 0.5
    se = math.sqrt(0.01 * 0.01) / math.sqrt(n)
    assert abs(inc.mean() - 0.005) < 3 * se
    # variance of a normal sample: se = var * sqrt(2/(n-1))
    assert abs(inc.var(ddof=1) - 1e-4) < 3 * 1e-4 * math.sqrt(2 / (n - 1))


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([0.0, 1.0]), st.floats(1e-4, 10.0), st.integers(0, 2**32 - 1))
def test_diffuse_from_boundary_stays_inside(p, dt, seed):
    rng = np.random.default_rng(seed)
    out = diffuse_step(np.full((64, 1), p), MotionSpec((3.0,), 2.0), dt, rng, UNIT)
    assert np.all(UNIT.contains(out))


# -- support integrals -----------------------------------------------------

def test_support_integral_unary_interior_and_boundary():
    k = KernelSpec(0.1, "epanechnikov", 1)
    vals = support_integral(np.array([[[0.5]], [[0.0]], [[0.03]]]), k, UNIT, rtol=1e-10)
    oracle = [integrate.quad(lambda y, c=c: float(kernel_eval(k, [c - y])), 0, 1,
                             points=[c - 0.1, c, c + 0.1], epsabs=1e-13)[0] for c in (0.5, 0.0, 0.03)]
    assert np.allclose(vals, oracle, atol=1e-9)
    assert vals[0] == pytest.approx(1.0, abs=1e-9)
    assert vals[1] == pytest.approx(0.5, abs=1e-9)


def test_support_integral_pairs_1d():
    k = KernelSpec(0.2, "epanechnikov", 1)
    centers = np.array([[[0.3], [0.45]], [[0.05], [0.2]], [[0.1], [0.55]]])
    got = support_integral(centers, k, UNIT, rtol=1e-10)
    for (a, b), g in zip(centers[:, :, 0], got):
        lo, hi = max(a, b) - 0.2, min(a, b) + 0.2
        if lo >= hi:
            assert g == 0.0
            continue
        f = lambda y: float(kernel_eval(k, [a - y]) * kernel_eval(k, [b - y]))
        oracle = integrate.quad(f, max(lo, 0.0), min(hi, 1.0), epsabs=1e-13)[0]
        assert g == pytest.approx(oracle, rel=1e-7, abs=1e-12)


def test_support_integral_pair_2d_with_weight():
    box = DomainSpec((0.0, 0.0), (1.0, 1.0))
    k = KernelSpec(0.25, "epanechnikov", 2)
    a, b = np.array([0.2, 0.15]), np.array([0.35, 0.3])
    got = support_integral(np.array([[a, b]]), k, box, lambda t, p: 1.0 + p[:, 0], rtol=1e-9)[0]

    def f(y, x):
        p = np.array([x, y])
        return (1 + x) * float(kernel_eval(k, a - p) * kernel_eval(k, b - p))

    oracle = integrate.dblquad(f, 0.1, 0.45, lambda x: 0.0, lambda x: 0.4, epsabs=1e-12)[0]
    assert got == pytest.approx(oracle, rel=1e-5)


def _lens_area(r1, r2, dist):
    a1 = r1 * r1 * math.acos((dist * dist + r1 * r1 - r2 * r2) / (2 * dist * r1))
    a2 = r2 * r2 * math.acos((dist * dist + r2 * r2 - r1 * r1) / (2 * dist * r2))
    return a1 + a2 - 0.5 * math.sqrt((-dist + r1 + r2) * (dist + r1 - r2)
                                     * (dist - r1 + r2) * (dist + r1 + r2))


def test_support_integral_curved_discontinuity():
    # weight jumps along a circle: the last digits converge slowly
    box = DomainSpec((0.0, 0.0), (1.0, 1.0))
    k = KernelSpec(0.2, "uniform_ball", 2)
    c, other, r = np.array([0.5, 0.5]), np.array([0.62, 0.55]), 0.15

    def inside(t, p):
        return (np.sum((p - other) ** 2, axis=1) < r * r).astype(float)

    oracle = _lens_area(0.2, r, float(np.hypot(*(c - other)))) / (math.pi * 0.04)
    got = support_integral(np.array([[c]]), k, box, inside, rtol=1e-4)[0]
    assert got == pytest.approx(oracle, rel=1e-4)
    with pytest.raises(NumericError):
        support_integral(np.array([[c]]), k, box, inside, rtol=1e-6, max_level=2)

def test_support_integral_budget_near_miss(caplog):
    # an unreachable tolerance ends on the work budget with a warning
    box = DomainSpec((0.0, 0.0), (1.0, 1.0))
    k = KernelSpec(0.2, "uniform_ball", 2)
    c, other, r = np.array([0.5, 0.5]), np.array([0.62, 0.55]), 0.15

    def inside(t, p):
        return (np.sum((p - other) ** 2, axis=1) < r * r).astype(float)

    oracle = _lens_area(0.2, r, float(np.hypot(*(c - other)))) / (math.pi * 0.04)
    with caplog.at_level("WARNING", logger="spatialcrn.geometry"):
        got = support_integral(np.array([[c]]), k, box, inside, rtol=1e-10)[0]
    assert "point budget" in caplog.text
    assert got == pytest.approx(oracle, rel=1e-3)


def test_support_integral_3d_interior_unit_mass():
    box = DomainSpec((0.0,) * 3, (1.0,) * 3)
    k = KernelSpec(0.2, "epanechnikov", 3)
    got = support_integral(np.array([[[0.5, 0.5, 0.5]]]), k, box, rtol=1e-9)[0]
    assert got == pytest.approx(1.0, abs=1e-6)


# -- location sampling -----------------------------------------------------

def test_location_localized_exact(rng):
    k = KernelSpec(0.1, "epanechnikov", 1)
    out = sample_reaction_location([[0.2]], k, UNIT, rng, localized_at=(0.0,))
    assert out.tolist() == [0.0]


def test_location_unary_matches_kernel_cdf(rng):
    eps = 0.1
    k = KernelSpec(eps, "epanechnikov", 1)
    ys = np.array([sample_reaction_location([[0.5]], k, UNIT, rng)[0] for _ in range(10_000)])
    grid = np.linspace(0.5 - eps, 0.5 + eps, 4001)
    dens = kernel_eval(k, (0.5 - grid)[:, None])
    cdf = integrate.cumulative_trapezoid(dens, grid, initial=0.0)
    res = stats.kstest(ys, lambda x: np.interp(x, grid, cdf / cdf[-1]))
    assert res.pvalue > 0.01


def test_location_disjoint_supports_raise(rng):
    k = KernelSpec(0.1, "epanechnikov", 1)
    with pytest.raises(LogicError):
        sample_reaction_location([[0.2], [0.45]], k, UNIT, rng)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=3), st.integers(0, 2**32 - 1))
def test_location_within_eps_of_reactants(xs, seed):
    eps = 0.15
    xs = [xs[0] + 0.25 * (x - 0.5) * eps for x in xs]  # keep supports overlapping
    xs = [min(max(x, 0.0), 1.0) for x in xs]
    k = KernelSpec(eps, "epanechnikov", 1)
    y = sample_reaction_location(np.array(xs)[:, None], k, UNIT, np.random.default_rng(seed))
    assert UNIT.contains(y)
    assert np.all(np.abs(np.array(xs) - y[0]) <= eps + 1e-12)
