import numpy as np
import pytest
from math import factorial

from kmono.hermite import (
    HermiteData,
    IllConditionedError,
    chebyshev_best_poly,
    complete_interpolant,
    error_monospline,
    hermite_interpolant,
    perfect_spline,
    sup_error,
)
from kmono.piecewise import PiecewisePoly


def random_sites(rng, k, lo=0.0, hi=1.0):
    # keep the sites reasonably separated: the interpolation problem itself
    # becomes ill conditioned for clustered geometry
    while True:
        interior = np.sort(rng.uniform(lo, hi, size=2 * k - 4))
        sites = np.concatenate([[lo], interior, [hi]])
        if np.min(np.diff(sites)) >= 0.04 * (hi - lo):
            return sites


def poly_pp(coeffs, interval):
    return PiecewisePoly.from_polynomial(coeffs, interval, center=0.0)


class TestHermiteInterpolant:
    @pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
    def test_polynomial_reproduction(self, k):
        rng = np.random.default_rng(k)
        sites = random_sites(rng, k)
        coeffs = rng.standard_normal(2 * k)  # degree 2k-1
        f = poly_pp(coeffs, (sites[0], sites[-1]))
        interp = hermite_interpolant(HermiteData.from_function(k, sites, f))
        err, _ = sup_error(f, interp, grid_per_interval=256)
        scale = max(1.0, np.max(np.abs(f.eval(np.linspace(0, 1, 50)))))
        assert err <= 1e-9 * scale

    def test_two_point_remainder_k2(self):
        # f = t^4/24 on sites {0, 1}: sup error is 1/384 at t = 1/2
        f = poly_pp([0, 0, 0, 0, 1.0 / 24.0], (0.0, 1.0))
        interp = hermite_interpolant(HermiteData.from_function(2, [0.0, 1.0], f))
        err, arg = sup_error(f, interp)
        assert err == pytest.approx(1.0 / 384.0, abs=1e-12)
        assert arg == pytest.approx(0.5, abs=1e-6)

    def test_sin_interpolation_conditions(self):
        sites = np.array([0.0, 0.3, 0.55, 0.8])
        data = HermiteData.from_function(3, sites, np.sin, np.cos)
        interp = hermite_interpolant(data)
        np.testing.assert_allclose(interp.eval(sites), np.sin(sites), atol=1e-11)
        np.testing.assert_allclose(interp.eval(sites, deriv=1), np.cos(sites),
                                   atol=1e-10)

    def test_linearity(self):
        rng = np.random.default_rng(5)
        k = 4
        sites = random_sites(rng, k)
        f = poly_pp(rng.standard_normal(2 * k + 2), (0.0, 1.0))
        g = poly_pp(rng.standard_normal(2 * k + 2), (0.0, 1.0))
        a, b = 0.7, -1.3
        hf = hermite_interpolant(HermiteData.from_function(k, sites, f))
        hg = hermite_interpolant(HermiteData.from_function(k, sites, g))
        comb = a * f + b * g
        hcomb = hermite_interpolant(HermiteData.from_function(k, sites, comb))
        x = np.linspace(0, 1, 200)
        scale = max(1.0, np.max(np.abs(hcomb.eval(x))))
        np.testing.assert_allclose(hcomb.eval(x), a * hf.eval(x) + b * hg.eval(x),
                                   atol=1e-9 * scale)

    def test_near_coincident_sites_rejected(self):
        with pytest.raises(ValueError):
            HermiteData(3, [0.0, 0.5, 0.5 + 1e-13, 1.0], np.zeros(4), np.zeros(4))

    def test_clustered_sites_ill_conditioned(self):
        sites = np.array([0.0, 0.5, 0.5 + 2e-10, 1.0])
        data = HermiteData(3, sites, np.zeros(4), np.ones(4))
        with pytest.raises(IllConditionedError) as exc:
            hermite_interpolant(data)
        assert exc.value.condition > 1e12


class TestCompleteInterpolant:
    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_polynomial_reproduction(self, k):
        rng = np.random.default_rng(10 + k)
        knots = np.concatenate([[0.0], np.sort(rng.uniform(0.1, 0.9, 3)), [1.0]])
        f = poly_pp(rng.standard_normal(2 * k), (0.0, 1.0))
        interp = complete_interpolant(
            k, knots, f.eval(knots[1:-1]),
            [f.eval(0.0, deriv=d) for d in range(k)],
            [f.eval(1.0, deriv=d) for d in range(k)],
        )
        err, _ = sup_error(f, interp, grid_per_interval=256)
        assert err <= 1e-9

    def test_condition_residuals_t4(self):
        # k = 2, f = t^4 on [0,1], one interior knot at 0.5
        f = poly_pp([0, 0, 0, 0, 1.0], (0.0, 1.0))
        interp = complete_interpolant(2, [0.0, 0.5, 1.0], [f.eval(0.5)],
                                      [0.0, 0.0], [1.0, 4.0])
        assert interp.eval(0.5) == pytest.approx(0.5**4, abs=1e-9)
        assert interp.eval(0.0) == pytest.approx(0.0, abs=1e-9)
        assert interp.eval(1.0, deriv=1) == pytest.approx(4.0, abs=1e-9)

    def test_least_squares_property(self):
        # (Cf)^{(k)} is the L2 projection of f^{(k)} onto splines of degree k-1
        from numpy.polynomial.legendre import leggauss

        k, rng = 2, np.random.default_rng(42)
        knots = np.array([0.0, 0.35, 0.6, 1.0])
        f = poly_pp([0.3, -1.0, 0.0, 2.0, 0.7, -0.4, 0.05], (0.0, 1.0))
        interp = complete_interpolant(
            k, knots, f.eval(knots[1:-1]),
            [f.eval(0.0, deriv=d) for d in range(k)],
            [f.eval(1.0, deriv=d) for d in range(k)],
        )
        nodes, wts = leggauss(12)

        def l2_err(spline_k):
            total = 0.0
            grid = np.linspace(0, 1, 257)
            for a, b in zip(grid[:-1], grid[1:]):
                x = 0.5 * (b - a) * nodes + 0.5 * (a + b)
                total += 0.5 * (b - a) * np.sum(
                    wts * (spline_k(x) - f.eval(x, deriv=k)) ** 2)
            return total

        proj_err = l2_err(lambda x: interp.eval(x, deriv=k))

        # direct quadratic program: projection onto S_k(knots) via a hat basis
        from scipy.interpolate import BSpline
        degree = k - 1
        t = np.concatenate([np.full(degree + 1, 0.0), knots[1:-1],
                            np.full(degree + 1, 1.0)])
        nb = t.size - degree - 1
        basis = [BSpline(t, np.eye(nb)[j], degree, extrapolate=True)
                 for j in range(nb)]
        grid = np.linspace(0, 1, 257)
        G = np.zeros((nb, nb))
        c = np.zeros(nb)
        for a, b in zip(grid[:-1], grid[1:]):
            x = 0.5 * (b - a) * nodes + 0.5 * (a + b)
            w = 0.5 * (b - a) * wts
            B = np.array([bj(x) for bj in basis])
            G += (B * w) @ B.T
            c += B @ (w * f.eval(x, deriv=k))
        coef = np.linalg.solve(G, c)
        direct = BSpline(t, coef, degree, extrapolate=True)
        direct_err = l2_err(lambda x: direct(x))
        assert proj_err == pytest.approx(direct_err, rel=1e-7, abs=1e-10)


class TestErrorMonospline:
    @pytest.mark.parametrize("k", [2, 3, 4, 5])
    def test_double_zeros_at_knots(self, k):
        rng = np.random.default_rng(20 + k)
        knots = random_sites(rng, max(k, 2)) if k > 2 else np.array([0.0, 1.0])
        knots = random_sites(rng, k) if k >= 3 else np.array([0.0, 1.0])
        e = error_monospline(k, knots)
        scale = max(1.0, np.max(np.abs(e.eval(np.linspace(knots[0], knots[-1], 200)))))
        np.testing.assert_allclose(e.eval(knots), 0.0, atol=1e-9 * scale)
        np.testing.assert_allclose(e.eval(knots, deriv=1), 0.0, atol=1e-9 * scale)

    @pytest.mark.parametrize("k", [3, 4, 5])
    def test_sign_property_equispaced(self, k):
        # (-1)^k e_k >= 0 holds for equally spaced knots
        knots = np.linspace(0.0, 1.0, 2 * k - 2)
        e = error_monospline(k, knots)
        x = np.linspace(knots[0], knots[-1], 2000)
        assert np.min((-1) ** k * e.eval(x)) >= -1e-12

    def test_sign_fails_for_asymmetric_knots(self):
        # the one-sign claim is false in general: for k = 3 the error changes
        # sign once the knot spacing is uneven enough.  Pinned counterexample,
        # cross-checked against an exact rational-arithmetic solve.
        e = error_monospline(3, [0.0, 1.0 / 3.0, 0.6, 1.0])
        assert e.eval(0.5) == pytest.approx(-1.8870772946859904e-08, rel=1e-6)
        assert e.eval(0.8) == pytest.approx(3.521202361782072e-08, rel=1e-6)

    @pytest.mark.parametrize("k", [3, 4, 5])
    def test_chebyshev_lower_bound_equispaced(self, k):
        knots = np.linspace(0.0, 1.0, 2 * k - 2)
        e = error_monospline(k, knots)
        h = knots[1] - knots[0]
        x = np.linspace(knots[0], knots[1], 4000)
        sup = np.max((-1) ** k * e.eval(x))
        assert sup >= h ** (2 * k) / (2 ** (4 * k - 1) * factorial(2 * k)) * (1 - 1e-9)

    @pytest.mark.parametrize("k", [3, 4, 5])
    def test_chebyshev_lower_bound_unsigned(self, k):
        # sup |e_k| over the largest knot-free interval always dominates the
        # rescaled Chebyshev error, since the interpolant is a single
        # polynomial of degree 2k-1 there
        rng = np.random.default_rng(40 + k)
        for _ in range(20):
            knots = random_sites(rng, k)
            e = error_monospline(k, knots)
            gaps = np.diff(knots)
            j0 = int(np.argmax(gaps))
            h = gaps[j0]
            x = np.linspace(knots[j0], knots[j0 + 1], 4000)
            sup = np.max(np.abs(e.eval(x)))
            bound = h ** (2 * k) / (2 ** (4 * k - 1) * factorial(2 * k))
            assert sup >= bound * (1 - 1e-9)

    def test_shift_identity(self):
        # H[(x - tau)^{2k}/(2k)!](tau) = -e_k(tau) off the knots
        k = 3
        rng = np.random.default_rng(77)
        knots = random_sites(rng, k)
        e = error_monospline(k, knots)
        tau = 0.5 * (knots[1] + knots[2])
        shifted = poly_pp(
            np.array([(-tau) ** (2 * k - j) * _binom(2 * k, j) / factorial(2 * k)
                      for j in range(2 * k + 1)]),
            (knots[0], knots[-1]),
        )
        interp = hermite_interpolant(HermiteData.from_function(k, knots, shifted))
        assert interp.eval(tau) == pytest.approx(-e.eval(tau), abs=1e-10)


def _binom(n, j):
    from math import comb
    return comb(n, j)


class TestPerfectSpline:
    def test_k2_is_monomial(self):
        s = perfect_spline(2, [])
        x = np.linspace(0, 1, 50)
        np.testing.assert_allclose(s.eval(x), x**4 / 24, atol=1e-14)

    @pytest.mark.parametrize("k", [3, 4, 5])
    def test_top_derivative_alternates(self, k):
        rng = np.random.default_rng(k)
        tau = np.sort(rng.uniform(0.1, 0.9, size=2 * k - 4))
        s = perfect_spline(k, tau)
        mids = 0.5 * (s.breakpoints[:-1] + s.breakpoints[1:])
        top = s.eval(mids, deriv=2 * k)
        np.testing.assert_allclose(np.abs(top), 1.0, atol=1e-6)
        signs = np.sign(top)
        np.testing.assert_allclose(signs, (-1.0) ** np.arange(signs.size))


class TestChebyshevBestPoly:
    def test_sup_error_unit_interval(self):
        # x^4 on [-1, 1]: best cubic approx error 1/8
        p = chebyshev_best_poly(2, (-1.0, 1.0))
        f = poly_pp([0, 0, 0, 0, 1.0], (-1.0, 1.0))
        err, _ = sup_error(f, p)
        assert err == pytest.approx(1.0 / 8.0, abs=1e-12)

    def test_scaled_interval(self):
        h = 0.37
        k = 3
        p = chebyshev_best_poly(k, (0.0, h))
        f = poly_pp([0.0] * (2 * k) + [1.0], (0.0, h))
        err, _ = sup_error(f, p)
        assert err == pytest.approx(h ** (2 * k) / 2 ** (4 * k - 1), rel=1e-10)

    def test_equioscillation(self):
        k = 2
        p = chebyshev_best_poly(k, (-1.0, 1.0))
        f = poly_pp([0, 0, 0, 0, 1.0], (-1.0, 1.0))
        x = np.linspace(-1, 1, 100_001)
        e = f.eval(x) - p.eval(x)
        m = 1.0 / 8.0
        hits = np.flatnonzero(np.abs(np.abs(e) - m) < 1e-6 * m)
        groups = np.split(hits, np.flatnonzero(np.diff(hits) > 5) + 1)
        signs = [np.sign(e[g[0]]) for g in groups]
        assert len(groups) == 2 * k + 1
        assert all(signs[i] != signs[i + 1] for i in range(len(signs) - 1))
