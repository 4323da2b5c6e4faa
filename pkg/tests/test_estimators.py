from math import factorial

import numpy as np
import pytest

from kmono.estimators import (
    CharacterizationReport,
    FitOptions,
    StepFunction,
    certify,
    empirical_Y,
    fit_lse,
    fit_mle,
    grenander,
    hhat_values,
    invert_hampel,
    invert_mixing,
    process_Hhat,
    process_Htilde,
    process_Yn,
)
from kmono.kernels import MixingMeasure, Sample, beta_kernel, mixture_density


def exp_sample(n, seed):
    rng = np.random.default_rng(seed)
    return Sample.from_data(rng.exponential(size=n))


class TestStepFunction:
    def test_left_continuous_eval(self):
        f = StepFunction(np.array([1.0, 2.0, 4.0]), np.array([3.0, 2.0, 0.5]))
        assert f.eval(0.5) == 3.0
        assert f.eval(1.0) == 3.0  # value on (0, 1] is the first height
        assert f.eval(1.5) == 2.0
        assert f.eval(4.0) == 0.5
        assert f.eval(4.1) == 0.0

    def test_integral(self):
        f = StepFunction(np.array([1.0, 3.0]), np.array([2.0, 1.0]))
        assert f.integral() == pytest.approx(2.0 + 2.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            StepFunction(np.array([2.0, 1.0]), np.array([1.0, 1.0]))
        with pytest.raises(ValueError):
            StepFunction(np.array([0.0, 1.0]), np.array([1.0, 1.0]))


class TestGrenander:
    def test_three_point_oracle(self):
        # data {1, 2, 4}: slopes (1/3, 1/3, 1/6) are already antitonic
        f = grenander(Sample.from_data([1.0, 2.0, 4.0]))
        np.testing.assert_allclose(f.eval([0.5, 1.5, 3.0]),
                                   [1 / 3, 1 / 3, 1 / 6])

    def test_pooling(self):
        # data {1, 1.1, 4}: raw slopes violate monotonicity and get pooled
        f = grenander(Sample.from_data([1.0, 1.1, 4.0]))
        vals = f.eval(np.array([0.5, 1.05, 2.0]))
        assert vals[0] >= vals[1] >= vals[2]
        assert f.integral() == pytest.approx(1.0)

    def test_unit_mass_always(self):
        s = exp_sample(200, 0)
        assert grenander(s).integral() == pytest.approx(1.0, abs=1e-12)

    def test_decreasing(self):
        s = exp_sample(100, 1)
        f = grenander(s)
        assert np.all(np.diff(f.values) <= 1e-12)


class TestEmpiricalProcesses:
    def test_Y_matches_bruteforce(self):
        s = exp_sample(37, 2)
        k = 3
        x = np.linspace(0.1, 5.0, 11)
        brute = np.array([
            np.mean(np.clip(xi - s.values, 0, None) ** 2) / 2 for xi in x
        ])
        np.testing.assert_allclose(empirical_Y(s, k, x), brute, rtol=1e-13)

    def test_Y_deriv_consistent(self):
        s = exp_sample(20, 3)
        k, h = 4, 1e-6
        x = 2.0
        num = (empirical_Y(s, k, x + h) - empirical_Y(s, k, x - h)) / (2 * h)
        assert empirical_Y(s, k, x, deriv=1) == pytest.approx(num, rel=1e-6)

    def test_Y_k1_is_ecdf(self):
        s = exp_sample(25, 4)
        x = np.array([0.1, 0.5, 1.0, 3.0])
        np.testing.assert_allclose(empirical_Y(s, 1, x), s.ecdf(x))

    def test_hhat_bruteforce(self):
        s = exp_sample(15, 5)
        k = 3
        mm = MixingMeasure(np.array([2.0, 6.0]), np.array([0.5, 0.5]), "unit")
        gX = mixture_density(mm, k, s.values)
        x = 4.0
        brute = np.mean([
            k * max(x - xi, 0.0) ** (k - 1) / x**k / gi
            for xi, gi in zip(s.values, gX)
        ])
        assert hhat_values(s, mm, k, x) == pytest.approx(brute, rel=1e-13)

    def test_hhat_deriv_matches_fd(self):
        s = exp_sample(15, 6)
        k = 3
        mm = MixingMeasure(np.array([2.0, 6.0]), np.array([0.5, 0.5]), "unit")
        x, h = 3.0, 1e-6
        num = (hhat_values(s, mm, k, x + h) - hhat_values(s, mm, k, x - h)) / (2 * h)
        assert hhat_values(s, mm, k, x, deriv=1) == pytest.approx(num, rel=1e-5)

    def test_process_traces(self):
        s = exp_sample(30, 7)
        grid = np.linspace(0.1, 3.0, 50)
        tr = process_Yn(s, 2, grid)
        assert tr.values.shape == grid.shape
        assert np.all(np.diff(tr.values) >= 0)


class TestSinglePointFits:
    @pytest.mark.parametrize("k,mass", [(2, 1.0), (3, 16.0 / 15.0)])
    def test_lse_closed_form(self, k, mass):
        # n = 1 at x = 1: single atom at 2k-1 with known mass
        fit = fit_lse(Sample.from_data([1.0]), k)
        assert fit.mixing.atoms.size == 1
        assert fit.mixing.atoms[0] == pytest.approx(2 * k - 1, rel=1e-6)
        assert fit.mixing.mass == pytest.approx(mass, rel=1e-6)
        assert fit.certificate.passed

    def test_mle_n1_mass_one(self):
        fit = fit_mle(Sample.from_data([1.0]), 3)
        assert fit.mixing.mass == pytest.approx(1.0, abs=1e-12)
        assert fit.certificate.passed


class TestGrenanderEquivalence:
    # for k = 1 both estimators coincide with the Grenander estimator
    def test_lse_k1(self):
        s = exp_sample(60, 8)
        fit = fit_lse(s, 1)
        f = grenander(s)
        x = (s.values[:-1] + s.values[1:]) / 2.0
        np.testing.assert_allclose(
            mixture_density(fit.mixing, 1, x), f.eval(x), atol=1e-7)

    def test_mle_k1(self):
        s = exp_sample(60, 9)
        fit = fit_mle(s, 1)
        f = grenander(s)
        x = (s.values[:-1] + s.values[1:]) / 2.0
        np.testing.assert_allclose(
            mixture_density(fit.mixing, 1, x), f.eval(x), atol=1e-6)
        assert fit.mixing.mass == pytest.approx(1.0, abs=1e-12)


class TestCertificates:
    @pytest.mark.parametrize("k", [2, 3])
    def test_lse_exp_sample(self, k):
        fit = fit_lse(exp_sample(200, 10 + k), k)
        cert = fit.certificate
        assert cert.passed, (cert.min_slack, cert.max_knot_residual)

    @pytest.mark.parametrize("k", [2, 3])
    def test_mle_exp_sample(self, k):
        fit = fit_mle(exp_sample(200, 20 + k), k)
        cert = fit.certificate
        assert cert.passed, (cert.min_slack, cert.max_knot_residual)

    def test_broken_fit_fails(self):
        # negative control: a perturbed fit must not certify
        import dataclasses

        s = exp_sample(200, 30)
        fit = fit_lse(s, 3)
        bad_w = fit.mixing.weights * np.linspace(0.8, 1.2, fit.mixing.atoms.size)
        bad = dataclasses.replace(
            fit, mixing=MixingMeasure(fit.mixing.atoms, bad_w))
        rep = certify(bad, s, 3, "lse")
        assert not rep.passed

    def test_report_dict(self):
        fit = fit_lse(exp_sample(50, 31), 2)
        d = fit.certificate.to_dict()
        assert set(d) >= {"min_slack", "max_knot_residual", "passed"}


class TestObjective:
    def test_lse_trace_monotone(self):
        fit = fit_lse(exp_sample(150, 40), 3)
        tol = 1e-10 * (1.0 + np.abs(fit.trace).max())
        assert np.all(np.diff(fit.trace) <= tol)

    def test_mle_beats_random_mixtures(self):
        s = exp_sample(120, 41)
        k = 3
        fit = fit_mle(s, k)
        ll_hat = np.mean(np.log(mixture_density(fit.mixing, k, s.values)))
        rng = np.random.default_rng(42)
        for _ in range(10):
            m = rng.integers(1, 6)
            atoms = np.sort(rng.uniform(s.values[-1] * 0.5,
                                        s.values[-1] * 3.0, size=m))
            w = rng.dirichlet(np.ones(m))
            mm = MixingMeasure(atoms, w, "unit")
            gX = mixture_density(mm, k, s.values)
            if np.any(gX <= 0):
                continue
            assert ll_hat >= np.mean(np.log(gX)) - 1e-10

    def test_lse_beats_truth(self):
        # the LSE criterion value is below that of the true mixture
        s = exp_sample(150, 43)
        k = 2
        fit = fit_lse(s, k)
        # crude competitor: single atom at the sample maximum times 2
        mm = MixingMeasure(np.array([2.0 * s.values[-1]]), np.array([1.0]))
        from kmono.kernels import kernel_gram

        G = kernel_gram(k, mm.atoms[:, None], mm.atoms[None, :])
        c = beta_kernel(k, mm.atoms[:, None], s.values[None, :]).mean(axis=1)
        phi = 0.5 * mm.weights @ G @ mm.weights - c @ mm.weights
        assert fit.objective <= phi + 1e-12


class TestEquivariance:
    def test_lse_scale(self):
        s = exp_sample(80, 50)
        k = 3
        c = 2.5
        fit1 = fit_lse(s, k)
        fit2 = fit_lse(Sample(s.values * c), k)
        assert fit1.mixing.atoms.size == fit2.mixing.atoms.size
        np.testing.assert_allclose(fit2.mixing.atoms, c * fit1.mixing.atoms,
                                   rtol=1e-5)
        np.testing.assert_allclose(fit2.mixing.weights, fit1.mixing.weights,
                                   rtol=1e-5)


class TestInversion:
    def test_mixing_cdf_exact(self):
        k = 3
        mm = MixingMeasure(np.array([1.0, 2.5]), np.array([0.4, 0.9]))
        t = np.array([0.5, 1.7, 2.2, 3.0])
        expect = np.array([0.0, 0.4, 0.4, 1.3])
        np.testing.assert_allclose(invert_mixing(mm, k, t), expect, atol=1e-9)

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_mixing_cdf_random(self, k):
        rng = np.random.default_rng(60 + k)
        atoms = np.sort(rng.uniform(0.5, 5.0, size=4))
        w = rng.dirichlet(np.ones(4))
        mm = MixingMeasure(atoms, w, "unit")
        t = np.setdiff1d(np.linspace(0.2, 6.0, 40), atoms)
        np.testing.assert_allclose(invert_mixing(mm, k, t), mm.cdf(t),
                                   atol=1e-9)

    def test_hampel_reweighted(self):
        k = 2
        mm = MixingMeasure(np.array([1.0, 3.0]), np.array([0.5, 0.5]), "unit")
        # top-derivative ratio weights the atoms by w_i / t_i^k
        rw = mm.weights / mm.atoms**k
        rw = rw / rw.sum()
        t = np.array([0.5, 2.0, 4.0])
        expect = np.array([0.0, rw[0], 1.0])
        np.testing.assert_allclose(invert_hampel(mm, k, t), expect, atol=1e-12)

    def test_hampel_from_fit(self):
        s = exp_sample(100, 70)
        fit = fit_lse(s, 2)
        t = np.linspace(0.1, fit.mixing.atoms[-1] * 1.1, 25)
        vals = invert_hampel(fit, 2, t)
        assert np.all(np.diff(vals) >= -1e-12)
        assert vals[-1] == pytest.approx(1.0)

    def test_invert_validation(self):
        mm = MixingMeasure(np.array([1.0]), np.array([1.0]))
        with pytest.raises(ValueError):
            invert_mixing(mm, 2, -1.0)
        with pytest.raises(TypeError):
            invert_mixing("nope", 2, 1.0)

    def test_fit_roundtrip(self):
        # invert the fitted density and compare with its own mixing CDF
        s = exp_sample(150, 71)
        fit = fit_lse(s, 3)
        atoms = fit.mixing.atoms
        mids = (atoms[:-1] + atoms[1:]) / 2.0 if atoms.size > 1 else np.array([atoms[0] / 2])
        np.testing.assert_allclose(invert_mixing(fit, 3, mids),
                                   fit.mixing.cdf(mids), atol=1e-8)


class TestProcessAgainstFit:
    def test_htilde_dominates_yn(self):
        s = exp_sample(100, 80)
        k = 2
        fit = fit_lse(s, k)
        grid = np.linspace(0.01, s.values[-1], 200)
        H = process_Htilde(fit, k, grid).values
        Y = process_Yn(s, k, grid).values
        assert np.min(H - Y) >= -1e-7 * (1 + np.max(np.abs(H)))

    def test_hhat_below_one(self):
        s = exp_sample(100, 81)
        k = 3
        fit = fit_mle(s, k)
        grid = np.linspace(0.01, fit.mixing.atoms[-1] * 1.02, 300)
        H = process_Hhat(s, fit, k, grid).values
        assert np.max(H) <= 1.0 + 1e-7
