import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kmono import (
    MixingMeasure,
    Sample,
    beta_kernel,
    kernel_gram,
    mixture_density,
    mixture_to_piecewise,
)


def random_measure(rng, m, unit=False):
    atoms = np.sort(rng.uniform(0.2, 3.0, size=m))
    while m > 1 and np.min(np.diff(atoms)) < 1e-3:
        atoms = np.sort(rng.uniform(0.2, 3.0, size=m))
    w = rng.uniform(0.1, 1.0, size=m)
    if unit:
        w /= w.sum()
    return MixingMeasure(atoms, w, "unit" if unit else "free")


class TestBetaKernel:
    def test_uniform_case(self):
        assert beta_kernel(1, 2.0, 0.5) == pytest.approx(0.5)

    def test_support_boundary(self):
        assert beta_kernel(3, 1.0, 1.0) == 0.0

    def test_direct_substitution(self):
        assert beta_kernel(2, 2.0, 1.0) == pytest.approx(0.5)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            beta_kernel(2, -1.0, 0.5)
        with pytest.raises(ValueError):
            beta_kernel(0, 1.0, 0.5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.floats(0.1, 10.0))
    def test_normalization(self, k, y):
        # exact antiderivative of the kernel over [0, y]
        x = np.linspace(0, y, 4097)
        vals = beta_kernel(k, y, x)
        integral = np.trapezoid(vals, x) if k > 1 else 1.0
        if k == 1:
            assert beta_kernel(1, y, 0.0) * y == pytest.approx(1.0)
        else:
            assert integral == pytest.approx(1.0, abs=1e-5)

    def test_normalization_exact(self):
        # (y - x)^k / y^k antiderivative: value 1 exactly
        for k in range(1, 9):
            y = 1.7
            mm = MixingMeasure([y], [1.0])
            pp = mixture_to_piecewise(mm, k)
            assert pp.integral() == pytest.approx(1.0, abs=1e-10)


class TestMixtureDensity:
    def test_two_atoms_k1(self):
        mm = MixingMeasure([1.0, 2.0], [0.5, 0.5])
        assert mixture_density(mm, 1, 0.5) == pytest.approx(0.75)

    def test_single_atom_k2_at_zero(self):
        mm = MixingMeasure([1.0], [1.0])
        assert mixture_density(mm, 2, 0.0) == pytest.approx(2.0)

    def test_empty_measure(self):
        mm = MixingMeasure([], [])
        assert mixture_density(mm, 3, 0.7) == 0.0


class TestMixtureToPiecewise:
    def test_single_atom_k2_hat(self):
        mm = MixingMeasure([1.5], [1.0])
        pp = mixture_to_piecewise(mm, 2)
        assert pp.eval(0.5, deriv=1) == pytest.approx(-2 / 1.5**2)
        assert pp.eval(1.5) == pytest.approx(0.0, abs=1e-12)

    def test_k1_step(self):
        mm = MixingMeasure([1.0, 2.0], [0.3, 0.7])
        pp = mixture_to_piecewise(mm, 1)
        assert pp.degree == 0
        assert pp.eval(0.5) == pytest.approx(0.3 / 1.0 + 0.7 / 2.0)
        assert pp.eval(1.5) == pytest.approx(0.7 / 2.0)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(7)
        mm = random_measure(rng, 5)
        pp = mixture_to_piecewise(mm, 4)
        x = rng.uniform(0, mm.atoms[-1], size=100)
        np.testing.assert_allclose(
            pp.eval(x), mixture_density(mm, 4, x), rtol=1e-12, atol=1e-12
        )

    @pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
    def test_k_monotonicity_certificate(self, k):
        rng = np.random.default_rng(k)
        mm = random_measure(rng, 4)
        pp = mixture_to_piecewise(mm, k)
        x = np.linspace(0, mm.atoms[-1] * 0.999, 400)
        for j in range(k - 1):
            assert np.min((-1) ** j * pp.eval(x, deriv=j)) >= -1e-10
        # (-1)^(k-1) (k-1)st derivative nonincreasing across breakpoints
        top = (-1) ** (k - 1) * pp.eval(pp.breakpoints[:-1], deriv=k - 1)
        assert np.all(np.diff(top) <= 1e-10)

    def test_smoothness_declared(self):
        rng = np.random.default_rng(11)
        mm = random_measure(rng, 3)
        pp = mixture_to_piecewise(mm, 5)
        assert pp.smoothness == 3
        assert pp.smoothness_defect(3) <= 1e-9


class TestKernelGram:
    def test_symmetric_and_matches_quadrature(self):
        rng = np.random.default_rng(3)
        for k in (1, 2, 3, 5, 8):
            s, t = rng.uniform(0.3, 2.5, size=2)
            x = np.linspace(0, min(s, t), 200_001)
            quad = np.trapezoid(beta_kernel(k, s, x) * beta_kernel(k, t, x), x)
            assert kernel_gram(k, s, t) == pytest.approx(quad, rel=1e-5)
            assert kernel_gram(k, s, t) == pytest.approx(kernel_gram(k, t, s), rel=1e-14)

    def test_broadcasting(self):
        s = np.array([1.0, 2.0, 3.0])
        out = kernel_gram(2, s[:, None], s[None, :])
        assert out.shape == (3, 3)
        np.testing.assert_allclose(out, out.T)


class TestTypes:
    def test_mixing_measure_validation(self):
        with pytest.raises(ValueError):
            MixingMeasure([1.0, 0.5], [0.5, 0.5])
        with pytest.raises(ValueError):
            MixingMeasure([-1.0], [1.0])
        with pytest.raises(ValueError):
            MixingMeasure([1.0], [0.9], "unit")
        mm = MixingMeasure([1.0, 2.0], [0.25, 0.75], "unit")
        assert mm.mass == pytest.approx(1.0)

    def test_mixing_cdf(self):
        mm = MixingMeasure([1.0, 2.0], [0.25, 0.75])
        assert mm.cdf(0.5) == 0.0
        assert mm.cdf(1.5) == pytest.approx(0.25)
        assert mm.cdf(2.5) == pytest.approx(1.0)

    def test_sample(self):
        s = Sample.from_data([3.0, 1.0, 2.0])
        assert s.n == 3
        np.testing.assert_allclose(s.values, [1.0, 2.0, 3.0])
        assert s.ecdf(2.5) == pytest.approx(2 / 3)
        with pytest.raises(ValueError):
            Sample.from_data([-1.0, 2.0])
        with pytest.raises(ValueError):
            Sample.from_data([])
