"""Scikit-learn style front end for the k-monotone density estimators."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_is_fitted

from .estimators import FitOptions, fit_lse, fit_mle, invert_mixing
from .kernels import Sample

__all__ = ["KMonotoneDensity"]


class KMonotoneDensity(DensityMixin, BaseEstimator):
    """Nonparametric density estimator under a k-monotonicity shape constraint.

    The fitted density is a mixture of scaled Beta(1, k) kernels, equivalently
    a spline of degree k - 1 whose derivatives alternate in sign.  ``k = 1``
    gives the classical monotone (Grenander-type) estimator, ``k = 2`` the
    convex decreasing one.

    Parameters
    ----------
    k : int, default=2
        Order of the shape constraint, between 1 and 8.
    method : {"lse", "mle"}, default="lse"
        Fitting criterion: least squares or maximum likelihood.
    max_iter : int, default=400
        Cap on support-modification iterations of the active-set solver.
    tol : float, default=1e-9
        Relative improvement threshold used by the solver.
    certify_grid : int, default=2000
        Density of the grid used to verify the optimality conditions after
        fitting; the report is stored in ``certificate_``.

    Attributes
    ----------
    mixing_ : MixingMeasure
        Fitted mixing measure (atoms and weights of the kernel mixture).
    density_ : PiecewisePoly
        The fitted density as an exact piecewise polynomial.
    knots_ : ndarray
        Jump locations of the (k-1)st derivative of the fit.
    objective_ : float
        Final value of the fitting criterion.
    certificate_ : CharacterizationReport or None
        Grid certificate of the optimality conditions, if requested.
    result_ : FitResult
        Full solver output.
    """

    def __init__(self, k=2, method="lse", max_iter=400, tol=1e-9,
                 certify_grid=2000):
        self.k = k
        self.method = method
        self.max_iter = max_iter
        self.tol = tol
        self.certify_grid = certify_grid

    def _as_sample(self, X) -> Sample:
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            if X.shape[1] != 1:
                raise ValueError("X must be one-dimensional or of shape (n, 1)")
            X = X[:, 0]
        elif X.ndim != 1:
            raise ValueError("X must be one-dimensional or of shape (n, 1)")
        return Sample.from_data(X)

    def fit(self, X, y=None):
        """Fit the shape-constrained density to positive observations.

        Parameters
        ----------
        X : array-like of shape (n_samples,) or (n_samples, 1)
            Positive observations.
        y : Ignored
            Present for API consistency.

        Returns
        -------
        self : object
        """
        if self.method not in ("lse", "mle"):
            raise ValueError("method must be 'lse' or 'mle'")
        sample = self._as_sample(X)
        opts = FitOptions(max_iter=self.max_iter, tol=self.tol,
                          certify_grid=self.certify_grid)
        fitter = fit_lse if self.method == "lse" else fit_mle
        result = fitter(sample, int(self.k), opts)
        self.result_ = result
        self.mixing_ = result.mixing
        self.density_ = result.estimate
        self.knots_ = result.knots
        self.objective_ = result.objective
        self.certificate_ = result.certificate
        self.n_features_in_ = 1
        return self

    def pdf(self, X, deriv=0):
        """Evaluate the fitted density (or one of its derivatives).

        Parameters
        ----------
        X : array-like
            Evaluation points, nonnegative.
        deriv : int, default=0
            Derivative order, at most k - 1.

        Returns
        -------
        ndarray of the same shape as ``X``.
        """
        check_is_fitted(self, "density_")
        if not 0 <= deriv <= self.k - 1:
            raise ValueError("deriv must be in 0..k-1")
        X = np.asarray(X, dtype=float)
        flat = np.atleast_1d(X).ravel()
        if np.any(flat < 0):
            raise ValueError("evaluation points must be nonnegative")
        upper = self.density_.breakpoints[-1]
        out = np.zeros(flat.size)
        inside = flat < upper
        if np.any(inside):
            out[inside] = self.density_.eval(flat[inside], deriv=deriv)
        return out.reshape(np.shape(X)) if X.ndim else float(out[0])

    def score_samples(self, X):
        """Log density at each point (``-inf`` off the support)."""
        dens = self.pdf(np.asarray(X, dtype=float))
        with np.errstate(divide="ignore"):
            return np.log(np.atleast_1d(dens))

    def score(self, X, y=None):
        """Mean log density over ``X``."""
        return float(np.mean(self.score_samples(self._as_sample(X).values)))

    def mixing_cdf(self, t):
        """CDF of the mixing measure recovered from the fitted density."""
        check_is_fitted(self, "result_")
        return invert_mixing(self.result_, int(self.k), t)
