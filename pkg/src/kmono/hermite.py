"""Odd-degree spline interpolation operators.

Two collocation operators are provided for degree 2k-1 splines:

* the two-point-data operator matching values and first derivatives at 2k-2
  sites whose interior points double as the spline knots;
* the complete-spline operator matching values at interior knots and
  derivatives 0..k-1 at both endpoints.

Both are solved in a B-spline basis with stacked boundary knots; the
Schoenberg-Whitney conditions make the collocation matrices nonsingular for
distinct sites.  Also here: the error monospline of x^{2k}/(2k)!, perfect
splines, and the rescaled Chebyshev best approximation used to lower-bound the
monospline.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np
from numpy.polynomial import chebyshev as ncheb
from scipy.interpolate import BSpline, PPoly

from .piecewise import PiecewisePoly

__all__ = [
    "HermiteData",
    "IllConditionedError",
    "hermite_interpolant",
    "complete_interpolant",
    "error_monospline",
    "perfect_spline",
    "chebyshev_best_poly",
    "sup_error",
]


class IllConditionedError(RuntimeError):
    """Collocation system too ill conditioned to trust the solution."""

    def __init__(self, condition: float):
        super().__init__(f"collocation system condition estimate {condition:.3e}")
        self.condition = condition


CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class HermiteData:
    """Values and slopes of a function at 2k-2 increasing sites."""

    k: int
    sites: np.ndarray
    values: np.ndarray
    slopes: np.ndarray

    def __post_init__(self):
        if not 2 <= self.k <= 8:
            raise ValueError("k must be in 2..8")
        sites = np.asarray(self.sites, dtype=float)
        values = np.asarray(self.values, dtype=float)
        slopes = np.asarray(self.slopes, dtype=float)
        if sites.size != 2 * self.k - 2:
            raise ValueError(f"need exactly {2 * self.k - 2} sites for k = {self.k}")
        if values.shape != sites.shape or slopes.shape != sites.shape:
            raise ValueError("values and slopes must match the sites")
        span = sites[-1] - sites[0]
        if np.min(np.diff(sites)) < 1e-10 * span:
            raise ValueError("sites too close relative to their span")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "slopes", slopes)

    @classmethod
    def from_function(cls, k: int, sites, f, fprime=None) -> "HermiteData":
        """Sample ``f`` (PiecewisePoly or callable) and its slope at the sites."""
        sites = np.asarray(sites, dtype=float)
        if isinstance(f, PiecewisePoly):
            values = f.eval(sites)
            slopes = f.eval(sites, deriv=1)
        elif fprime is not None:
            values = np.array([f(s) for s in sites], dtype=float)
            slopes = np.array([fprime(s) for s in sites], dtype=float)
        else:
            values = np.array([f(s) for s in sites], dtype=float)
            h = 1e-6 * max(1.0, sites[-1] - sites[0])
            slopes = np.array([(f(s + h) - f(s - h)) / (2 * h) for s in sites])
        return cls(k, sites, values, slopes)


def _basis_matrices(knots: np.ndarray, degree: int, sites: np.ndarray,
                    max_deriv: int) -> list[np.ndarray]:
    """Rows of B-spline basis derivatives 0..max_deriv evaluated at sites."""
    nbasis = knots.size - degree - 1
    mats = [np.zeros((sites.size, nbasis)) for _ in range(max_deriv + 1)]
    eye = np.eye(nbasis)
    for j in range(nbasis):
        bj = BSpline(knots, eye[j], degree, extrapolate=True)
        for d in range(max_deriv + 1):
            mats[d][:, j] = bj(sites, nu=d)
    return mats


def _solve_collocation(knots: np.ndarray, degree: int, rows: np.ndarray,
                       rhs: np.ndarray, smoothness: int) -> PiecewisePoly:
    # equilibrate rows: value and slope rows live on very different scales,
    # so the raw matrix looks far worse conditioned than the problem is
    scale = np.max(np.abs(rows), axis=1)
    scale[scale == 0.0] = 1.0
    rows = rows / scale[:, None]
    rhs = np.asarray(rhs, dtype=float) / scale
    cond = np.linalg.cond(rows)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise IllConditionedError(cond)
    coef = np.linalg.solve(rows, rhs)
    spline = BSpline(knots, coef, degree, extrapolate=False)
    pp = PPoly.from_spline(spline, extrapolate=False)
    try:
        return PiecewisePoly.from_scipy_ppoly(pp, smoothness=smoothness)
    except ValueError:
        # near-degenerate knot geometry: keep the spline, drop the declared
        # smoothness rather than reject the solution
        return PiecewisePoly.from_scipy_ppoly(pp, smoothness=-1)


def hermite_interpolant(data: HermiteData) -> PiecewisePoly:
    """Degree 2k-1 spline matching values and slopes at the 2k-2 sites.

    The interior sites are the (simple) knots of the spline.
    """
    k = data.k
    degree = 2 * k - 1
    sites = data.sites
    knots = np.concatenate([
        np.full(degree + 1, sites[0]),
        sites[1:-1],
        np.full(degree + 1, sites[-1]),
    ])
    vals, ders = _basis_matrices(knots, degree, sites, 1)
    rows = np.vstack([vals, ders])
    rhs = np.concatenate([data.values, data.slopes])
    # smoothness is 2k-2 at interior knots by construction
    return _solve_collocation(knots, degree, rows, rhs, smoothness=degree - 1)


def complete_interpolant(k: int, knots, interior_values, left_derivs,
                         right_derivs) -> PiecewisePoly:
    """Complete spline of degree 2k-1.

    ``knots`` are the full breakpoints y_0 < ... < y_{m+1} (m >= 1 interior);
    the spline matches ``interior_values`` at y_1..y_m and derivatives of
    orders 0..k-1 at y_0 (``left_derivs``) and y_{m+1} (``right_derivs``).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    knots = np.asarray(knots, dtype=float)
    interior = knots[1:-1]
    if interior.size < 1:
        raise ValueError("need at least one interior knot")
    if not np.all(np.diff(knots) > 0):
        raise ValueError("knots must be strictly increasing")
    left_derivs = np.asarray(left_derivs, dtype=float)
    right_derivs = np.asarray(right_derivs, dtype=float)
    if left_derivs.size != k or right_derivs.size != k:
        raise ValueError("endpoint derivative vectors must have length k")
    degree = 2 * k - 1
    tknots = np.concatenate([
        np.full(degree + 1, knots[0]),
        interior,
        np.full(degree + 1, knots[-1]),
    ])
    mats = _basis_matrices(tknots, degree, knots, k - 1)
    rows = [mats[0][1:-1]]
    rhs = [np.asarray(interior_values, dtype=float)]
    for d in range(k):
        rows.append(mats[d][[0]])
        rhs.append(left_derivs[[d]])
        rows.append(mats[d][[-1]])
        rhs.append(right_derivs[[d]])
    return _solve_collocation(tknots, degree, np.vstack(rows),
                              np.concatenate(rhs), smoothness=degree - 1)


def _monomial_over(power: int, interval, scale: float = 1.0) -> PiecewisePoly:
    coeffs = np.zeros(power + 1)
    coeffs[power] = scale
    return PiecewisePoly.from_polynomial(coeffs, interval, center=0.0)


def error_monospline(k: int, knots) -> PiecewisePoly:
    """Interpolation error of x^{2k}/(2k)! at the 2k-2 given knots.

    The result is a monospline of degree 2k with double zeros at every knot.
    """
    knots = np.asarray(knots, dtype=float)
    target = _monomial_over(2 * k, (knots[0], knots[-1]),
                            scale=1.0 / factorial(2 * k))
    data = HermiteData.from_function(k, knots, target)
    interp = hermite_interpolant(data)
    return target - interp


def perfect_spline(k: int, interior_knots) -> PiecewisePoly:
    """Perfect spline with top derivative of modulus 1 alternating across knots.

    S(t) = (1/(2k)!) (t^{2k} + 2 sum_i (-1)^i (t - tau_i)_+^{2k}) on [0, 1],
    with the 2k-4 interior knots tau_i in (0, 1).
    """
    tau = np.asarray(interior_knots, dtype=float)
    if tau.size != 2 * k - 4:
        raise ValueError(f"need exactly {2 * k - 4} interior knots for k = {k}")
    if tau.size and (np.min(tau) <= 0.0 or np.max(tau) >= 1.0
                     or np.any(np.diff(tau) <= 0)):
        raise ValueError("interior knots must be strictly increasing in (0, 1)")
    bp = np.concatenate([[0.0], tau, [1.0]])
    deg = 2 * k
    scale = 1.0 / factorial(deg)
    cf = np.zeros((bp.size - 1, deg + 1))
    for i, left in enumerate(bp[:-1]):
        # t^{2k} recentered about the piece's left breakpoint
        cf[i] = scale * _shift_monomial(deg, left)
        for j, t in enumerate(tau):
            if t <= left:
                cf[i] += 2 * (-1.0) ** (j + 1) * scale * _shift_monomial(deg, left - t)
    return PiecewisePoly(bp, cf, smoothness=deg - 1)


def _shift_monomial(power: int, offset: float) -> np.ndarray:
    """Ascending coefficients of (x + offset)^power."""
    from math import comb

    return np.array([comb(power, j) * offset ** (power - j) for j in range(power + 1)])


def chebyshev_best_poly(k: int, interval) -> PiecewisePoly:
    """Best uniform degree <= 2k-1 approximation to x^{2k} on [a, b].

    Sup error is ((b-a)/2)^{2k} * 2^{1-2k}, attained with equioscillation by
    the rescaled Chebyshev polynomial of degree 2k.
    """
    a, b = float(interval[0]), float(interval[1])
    if a >= b:
        raise ValueError("need a < b")
    deg = 2 * k
    half = (b - a) / 2.0
    mid = (a + b) / 2.0
    # T_{2k}((x - mid)/half) in the power basis of u = (x - mid)/half
    t_coefs = ncheb.cheb2poly(np.eye(deg + 1)[deg])
    # convert to global power basis in x
    poly_u = np.polynomial.Polynomial(t_coefs)
    poly_x = poly_u(np.polynomial.Polynomial([-mid / half, 1.0 / half]))
    cheb_global = np.zeros(deg + 1)
    cheb_global[: len(poly_x.coef)] = poly_x.coef
    best = -(half**deg) * 2.0 ** (1 - deg) * cheb_global
    # leading terms cancel exactly: x^{2k} minus monic rescaled T_{2k}
    best = best[:deg]
    return PiecewisePoly.from_polynomial(best, (a, b), center=0.0)


def sup_error(f: PiecewisePoly, g: PiecewisePoly, grid_per_interval: int = 2048,
              refine: bool = True) -> tuple[float, float]:
    """Sup norm of f - g and its argmax (grid scan plus local refinement)."""
    from scipy.optimize import minimize_scalar

    diff = f - g
    bp = diff.breakpoints
    xs = np.concatenate([
        np.linspace(bp[i], bp[i + 1], grid_per_interval, endpoint=False)
        for i in range(bp.size - 1)
    ] + [bp[[-1]]])
    vals = np.abs(diff.eval(xs))
    i = int(np.argmax(vals))
    best, arg = float(vals[i]), float(xs[i])
    if refine:
        lo = xs[max(i - 1, 0)]
        hi = xs[min(i + 1, xs.size - 1)]
        if hi > lo:
            res = minimize_scalar(lambda t: -abs(diff.eval(t)), bounds=(lo, hi),
                                  method="bounded",
                                  options={"xatol": 1e-13 * (bp[-1] - bp[0])})
            if -res.fun > best:
                best, arg = float(-res.fun), float(res.x)
    return best, arg
