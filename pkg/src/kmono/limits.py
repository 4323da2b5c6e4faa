"""Limit-process laboratory: driving process simulation and invelopes.

This module simulates the canonical limit process Y_k (a (k-1)-fold
integrated two-sided Brownian motion plus a polynomial drift), computes a
discrete invelope approximation H_k via a cone-constrained quadratic
program, evaluates the pointwise scaling constants of the limit
distribution, and runs the knot-gap and pointwise-rate Monte Carlo
experiments together with the localized Fenchel diagnostics of the fitted
estimators.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.signal import fftconvolve
from scipy.stats import ks_2samp

from .estimators import (
    FitOptions,
    FitResult,
    NonConvergenceError,
    empirical_Y,
    fit_lse,
    fit_mle,
    grenander,
    hhat_values,
    invert_mixing,
    _extended_density,
)
from .kernels import MixingMeasure, Sample, mixture_to_piecewise
from .piecewise import MAX_K

__all__ = [
    "LimitPath",
    "InvelopeResult",
    "InvelopeError",
    "ScalingConstants",
    "LocalDiagnostics",
    "ExponentialTruth",
    "MixtureTruth",
    "GapResult",
    "RateResult",
    "simulate_Yk",
    "invelope_Hk",
    "scaling_constants",
    "scaling_identity_check",
    "localized_processes",
    "gap_experiment",
    "rate_experiment",
]


def _check_k(k: int) -> int:
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= MAX_K:
        raise ValueError(f"k must be an integer in 1..{MAX_K}")
    return int(k)


# ---------------------------------------------------------------------------
# driving process


@dataclass(frozen=True)
class LimitPath:
    """Discretized two-sided driving process on a symmetric window.

    ``grid`` holds 2N+1 equispaced nodes on [-c, c], ``W`` the two-sided
    Brownian path (W(0) = 0, both halves built outward from the origin) and
    ``Yk`` the process

        Y_k(t) = sigma * int (t-s)^{k-1}/(k-1)! dW(s)  (outward from 0)
                 + a * (-1)^k k!/(2k)! t^{2k}.
    """

    grid: np.ndarray
    W: np.ndarray
    Yk: np.ndarray
    k: int
    step: float
    half_width: float
    drift_a: float = 1.0
    noise_sigma: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        if self.grid.shape != self.W.shape or self.grid.shape != self.Yk.shape:
            raise ValueError("grid, W and Yk must have equal length")
        n = self.grid.size
        if n % 2 != 1:
            raise ValueError("grid must hold an odd number of nodes")
        mid = n // 2
        if self.W[mid] != 0.0 or self.Yk[mid] != 0.0:
            raise ValueError("W and Yk must vanish at the origin")


def _conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if min(a.size, b.size) >= 128:
        return fftconvolve(a, b)
    return np.convolve(a, b)


def simulate_Yk(
    k: int,
    half_width: float = 2.0,
    step: float | None = None,
    seed=None,
    drift_a: float = 1.0,
    noise_sigma: float = 1.0,
) -> LimitPath:
    """Simulate the driving process Y_k on [-c, c] with c = ``half_width``.

    Brownian increments are N(0, step) over uniform cells; the stochastic
    integral uses the kernel evaluated at the cell endpoint nearer the
    origin (first-order outward quadrature).  ``step`` defaults to
    2^-10 * half_width and must satisfy step <= half_width/64.  Given the
    same seed the output is reproducible bit for bit: the positive-side
    increments are drawn first, then the negative-side increments.
    """
    k = _check_k(k)
    c = float(half_width)
    if c <= 0:
        raise ValueError("half_width must be positive")
    delta = c * 2.0**-10 if step is None else float(step)
    if delta <= 0 or delta > c / 64:
        raise ValueError("step must lie in (0, half_width/64]")
    nside = int(round(c / delta))
    delta = c / nside  # snap so the grid ends exactly at +-c
    rng = np.random.default_rng(seed)
    dw_pos = rng.normal(0.0, np.sqrt(delta), nside)
    dw_neg = rng.normal(0.0, np.sqrt(delta), nside)

    t_pos = delta * np.arange(1, nside + 1)
    w = t_pos ** (k - 1) / factorial(k - 1)
    stoch_pos = _conv(dw_pos, w)[:nside]
    stoch_neg = (-1.0) ** k * _conv(dw_neg, w)[:nside]

    grid = delta * np.arange(-nside, nside + 1)
    W = np.concatenate([np.cumsum(dw_neg)[::-1], [0.0], np.cumsum(dw_pos)])
    stoch = np.concatenate([stoch_neg[::-1], [0.0], stoch_pos])
    drift = drift_a * (-1.0) ** k * factorial(k) / factorial(2 * k) * grid ** (2 * k)
    return LimitPath(
        grid=grid,
        W=W,
        Yk=noise_sigma * stoch + drift,
        k=k,
        step=delta,
        half_width=c,
        drift_a=float(drift_a),
        noise_sigma=float(noise_sigma),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# invelope


class InvelopeError(RuntimeError):
    """QP solver failed; carries the worst KKT residuals seen."""

    def __init__(self, message: str, min_gradient: float, iterations: int):
        super().__init__(message)
        self.min_gradient = min_gradient
        self.iterations = iterations


@dataclass(frozen=True)
class InvelopeResult:
    """Discrete invelope H of the driving process on the simulation grid.

    ``Y`` is the grid representation of the driving process rebuilt by
    k-fold discrete integration of the derivative data ``z`` (it differs
    from the simulated path by a polynomial of degree < k fixed by the
    anchoring at the left window edge, which leaves ``slack = H - Y``
    invariant).  ``phi`` is the k-th derivative of H on the cells and
    ``mu`` the multipliers; contact points are nodes where ``mu`` > 0.
    """

    t: np.ndarray
    H: np.ndarray
    Y: np.ndarray
    slack: np.ndarray
    phi: np.ndarray
    z: np.ndarray
    mu: np.ndarray
    knots: np.ndarray
    k: int
    step: float
    min_slack: float
    min_slack_central: float
    comp_residual: float
    scale: float
    passed: bool
    iterations: int

    def derivative(self, order: int):
        """(abscissas, values) of H^(order) for order in 0..2k-1.

        Orders below k are iterated discrete integrals of ``phi`` (anchored
        at the left edge); orders k and above are forward divided
        differences of ``phi`` attached to cell left endpoints.
        """
        k, d = self.k, self.step
        if not 0 <= order <= 2 * k - 1:
            raise ValueError("order must be in 0..2k-1")
        left = self.t[0]
        if order < k:
            vals = _icumsum(self.phi, d, k - order)[: self.t.size]
            return self.t[: vals.size], vals
        vals = self.phi.copy()
        for _ in range(order - k):
            vals = np.diff(vals) / d
        return left + d * np.arange(vals.size), vals


def _icumsum(v: np.ndarray, delta: float, times: int) -> np.ndarray:
    """Iterated left-point cumulative integral, growing by one per pass."""
    for _ in range(times):
        v = delta * np.concatenate([[0.0], np.cumsum(v)])
    return v


def _stencil(k: int) -> np.ndarray:
    # rows of the cone operator A = (-1)^k * (k-th forward difference)
    return np.array([(-1.0) ** j * comb(k, j) for j in range(k + 1)])


def _trunc_power(m: int, k: int, kappa: int) -> np.ndarray:
    """Discrete truncated power C(i - kappa - 1, k - 1) * 1{i > kappa}.

    For a knot index kappa inside 0..m-k-1 the k-th forward difference of
    this sequence is the unit vector at kappa; for kappa < 0 it is a plain
    polynomial of degree k-1 in i, for kappa >= m - 1 it vanishes.
    """
    i = np.arange(m, dtype=float)
    n = i - kappa - 1.0
    col = np.ones(m)
    for j in range(k - 1):
        col *= n - j
    col /= factorial(k - 1)
    col[i <= kappa] = 0.0
    return col


def _spline_basis(m: int, k: int, knots: list[int]) -> np.ndarray:
    """Discrete B-spline basis of {phi : k-th difference zero off knots}.

    Columns are k-th divided differences (over the knot index) of the
    discrete truncated power, padded with k virtual knots at each window
    edge; this local basis stays well conditioned however the interior
    knots cluster, unlike the raw truncated powers.  Columns are scaled to
    unit norm.
    """
    ext = list(range(-k, 0)) + sorted(knots) + list(range(m, m + k))
    cols = np.empty((m, len(ext) - k))
    for j in range(len(ext) - k):
        nodes = np.array(ext[j:j + k + 1], dtype=float)
        col = np.zeros(m)
        for l, x in enumerate(nodes):
            wgt = 1.0
            for i, xi in enumerate(nodes):
                if i != l:
                    wgt *= x - xi
            col += _trunc_power(m, k, int(x)) / wgt
        nrm = np.linalg.norm(col)
        cols[:, j] = col / nrm if nrm > 0 else col
    return cols


def _knot_insertion_qp(z: np.ndarray, k: int, max_iter: int):
    """Project z onto {phi : A phi >= 0} by primal knot insertion.

    Off the active knots the cone constraint holds with equality, so phi
    is a discrete spline of degree < k with free jumps of the k-th
    difference only at the knots; each iterate is the least-squares fit of
    z in the B-spline space of the current knots, with the jump signs
    (-1)^k (k-th difference of phi) >= 0 enforced Lawson-Hanson style.
    The residual is orthogonal to the spline space, which forces the
    k-fold integral of phi - z (the slack, Delta^k times the multiplier)
    to vanish exactly at every knot; the next knot enters at the most
    negative slack (ties toward the smaller index) until the slack is
    nonnegative.  Returns (phi, mu, knot indices, iterations).
    """
    m = z.size
    ncon = m - k
    sten_rev = _stencil(k)[::-1]

    def slack_of(phi):
        return _icumsum(phi - z, 1.0, k)[:m + 1]

    def fit(knots):
        design = _spline_basis(m, k, knots)
        coef = np.linalg.lstsq(design, z, rcond=None)[0]
        return design @ coef

    def jumps_at(phi, knots):
        alljumps = np.convolve(phi, sten_rev, mode="valid")
        return alljumps[np.asarray(knots, dtype=int)]

    knots: list[int] = []
    phi = fit(knots)
    sl = slack_of(phi)
    stop = 1e-11 * max(1.0, float(np.max(np.abs(_icumsum(z, 1.0, k)[:m + 1]))))
    worst = 0.0
    for it in range(max_iter):
        inner = sl[k:k + ncon]
        enter = int(np.argmin(inner))
        worst = float(inner[enter])
        if worst >= -stop or enter in knots:
            mu = inner.copy()
            return phi, mu, np.array(sorted(knots)), it
        gamma_old = jumps_at(phi, knots)
        trial = sorted(knots + [enter])
        gamma_old = np.insert(gamma_old, trial.index(enter), 0.0)
        knots = trial
        # inner loop: refit, then clip back to nonnegative jumps
        for _ in range(len(knots) + 1):
            phi_new = fit(knots)
            gamma_new = jumps_at(phi_new, knots)
            jtol = 1e-12 * max(1.0, float(np.max(np.abs(gamma_new), initial=0.0)))
            if gamma_new.size == 0 or np.min(gamma_new) >= -jtol:
                phi = phi_new
                break
            bad = gamma_new < -jtol
            ratios = np.where(
                bad, gamma_old / np.maximum(gamma_old - gamma_new, 1e-300), np.inf
            )
            alpha = min(1.0, float(np.min(ratios)))
            if alpha <= 0.0:
                # degenerate insertion: the entering jump cannot turn
                # positive; keep the current iterate and stop
                mu = sl[k:k + ncon].copy()
                return phi, mu, np.array(sorted(set(knots) - {enter})), it
            phi_mix = phi + alpha * (phi_new - phi)
            gamma_mix = gamma_old + alpha * (gamma_new - gamma_old)
            keep = gamma_mix > jtol
            knots = [kn for kn, kp in zip(knots, keep) if kp]
            gamma_old = gamma_mix[keep]
            phi = phi_mix
        sl = slack_of(phi)
    raise InvelopeError(
        f"knot-insertion QP did not converge in {max_iter} iterations",
        min_gradient=worst,
        iterations=max_iter,
    )


def invelope_Hk(
    path: LimitPath,
    tol_ineq: float = 1e-8,
    tol_eq: float = 1e-6,
    max_iter: int = 5000,
) -> InvelopeResult:
    """Discrete invelope of the driving process.

    Solves  minimize (1/2) sum (phi_i - z_i)^2 * step  subject to
    (-1)^k (k-th divided difference of phi) >= 0, where z holds the k-th
    derivative data of the path (signed white-noise increments plus the
    drift derivative a (-1)^k t^k), then integrates phi back k times.  The
    construction pins H - Y together with its first k-1 discrete
    derivatives to zero at both window edges, and guarantees H >= Y with
    complementary slackness against the jumps of H^(2k-1); both conditions
    are certified on the central half of the window.
    """
    k = path.k
    d = path.step
    grid = path.grid
    m = grid.size - 1  # cells
    t_left = grid[:-1]
    dw = np.diff(path.W)
    # left of the origin the (k-1)-derivative of the stochastic part is
    # -W, so the derivative data carries a sign flip there
    sgn = np.where(t_left < 0.0, -1.0, 1.0)
    z = path.noise_sigma * sgn * dw / d + path.drift_a * (-1.0) ** k * t_left**k

    phi, mu, knot_idx, iters = _knot_insertion_qp(z, k, max_iter)

    ygrid = _icumsum(z, d, k)[: grid.size]
    h = _icumsum(phi, d, k)[: grid.size]
    slack = h - ygrid

    central = np.abs(grid) <= path.half_width / 2.0
    scale = max(1.0, float(np.max(np.abs(ygrid[central]))))
    min_slack = float(np.min(slack))
    min_slack_central = float(np.min(slack[central]))
    # complementary slackness: H^(2k-1) is piecewise constant with jumps
    # only at the knots of phi, so the integral of (H - Y) dH^(2k-1)
    # reduces to the contact nodes
    alljumps = np.convolve(phi, _stencil(k)[::-1], mode="valid") / d ** (k - 1)
    comp = 0.0
    for i in knot_idx:
        if central[i + k]:
            comp += slack[i + k] * alljumps[i]
    comp = float(abs(comp))
    passed = min_slack_central >= -tol_ineq * scale and comp <= tol_eq * scale
    return InvelopeResult(
        t=grid,
        H=h,
        Y=ygrid,
        slack=slack,
        phi=phi,
        z=z,
        mu=mu,
        knots=grid[knot_idx + k] if knot_idx.size else np.array([]),
        k=k,
        step=d,
        min_slack=min_slack,
        min_slack_central=min_slack_central,
        comp_residual=comp,
        scale=scale,
        passed=bool(passed),
        iterations=iters,
    )


# ---------------------------------------------------------------------------
# scaling constants and the scaling identity


@dataclass(frozen=True)
class ScalingConstants:
    """Pointwise constants of the limit distribution at x0.

    ``c[j]`` multiplies the limit of the j-th derivative error; ``s1`` and
    ``s2`` reduce the general drift/noise process to the canonical one via
    Y_{a,sigma}(t) =d (1/s1) Y_{1,1}(t / s2).
    """

    k: int
    c: np.ndarray
    s1: float
    s2: float


def _s1_s2(a: float, sigma: float, k: int) -> tuple[float, float]:
    s1 = (1.0 / sigma) * (a / sigma) ** ((2 * k - 1) / (2 * k + 1))
    s2 = (sigma / a) ** (2.0 / (2 * k + 1))
    return s1, s2


def scaling_constants(g0_at_x0: float, gk_at_x0_signed: float, k: int) -> ScalingConstants:
    """Constants from the density value and its signed k-th derivative at x0.

    Requires g0(x0) > 0 and (-1)^k g0^(k)(x0) > 0.
    """
    k = _check_k(k)
    g = float(g0_at_x0)
    alpha = (-1.0) ** k * float(gk_at_x0_signed) / factorial(k)
    if g <= 0.0:
        raise ValueError("g0(x0) must be positive")
    if alpha <= 0.0:
        raise ValueError("(-1)^k g0^(k)(x0) must be positive")
    j = np.arange(k)
    c = (g ** (k - j) * alpha ** (2 * j + 1)) ** (1.0 / (2 * k + 1))
    s1, s2 = _s1_s2(alpha, np.sqrt(g), k)
    return ScalingConstants(k=k, c=c, s1=float(s1), s2=float(s2))


def _yk_cov(s, t, k: int):
    """Closed-form covariance of the mean-zero part of Y_{1,1} at (s, t)."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    p = np.abs(s)
    q = np.abs(t)
    mval = np.minimum(p, q)
    acc = np.zeros(np.broadcast(s, t).shape)
    for i in range(k):
        for j in range(k):
            acc += (
                comb(k - 1, i) * comb(k - 1, j) * (-1.0) ** (i + j)
                * p ** (k - 1 - i) * q ** (k - 1 - j)
                * mval ** (i + j + 1) / (i + j + 1)
            )
    acc /= factorial(k - 1) ** 2
    return np.where(s * t > 0.0, acc, 0.0)


def scaling_identity_check(a: float, sigma: float, k: int, grid=None) -> float:
    """Max deviation between Y_{a,sigma} and the rescaled canonical process.

    The two Gaussian processes are compared through their deterministic
    drift and covariance functions (which determine the laws): the drift
    and covariance of Y_{a,sigma} against those of (1/s1) Y_{1,1}(t/s2).
    Returns the maximum absolute deviation over the grid.
    """
    k = _check_k(k)
    a = float(a)
    sigma = float(sigma)
    if a <= 0.0 or sigma <= 0.0:
        raise ValueError("a and sigma must be positive")
    if grid is None:
        grid = np.linspace(-1.0, 1.0, 41)
    grid = np.asarray(grid, dtype=float)
    s1, s2 = _s1_s2(a, sigma, k)
    ck = (-1.0) ** k * factorial(k) / factorial(2 * k)
    drift_lhs = a * ck * grid ** (2 * k)
    drift_rhs = (1.0 / s1) * ck * (grid / s2) ** (2 * k)
    ss, tt = grid[:, None], grid[None, :]
    cov_lhs = sigma**2 * _yk_cov(ss, tt, k)
    cov_rhs = (1.0 / s1**2) * _yk_cov(ss / s2, tt / s2, k)
    return float(
        max(np.max(np.abs(drift_lhs - drift_rhs)), np.max(np.abs(cov_lhs - cov_rhs)))
    )


# ---------------------------------------------------------------------------
# localized processes


@dataclass(frozen=True)
class LocalDiagnostics:
    """Localized process pair around x0 in the n^{-1/(2k+1)} coordinate.

    ``slack = h_loc - y_loc`` is computed in closed form (not by
    quadrature) so the localized Fenchel inequality and the near-equality
    at the local knot images can be certified sharply.
    """

    t: np.ndarray
    x: np.ndarray
    y_loc: np.ndarray
    h_loc: np.ndarray
    slack: np.ndarray
    a_coefs: np.ndarray
    local_knots: np.ndarray
    knot_residuals: np.ndarray
    scale: float
    estimator: str
    n: int
    k: int


def localized_processes(
    sample: Sample,
    fit: FitResult,
    x0: float,
    k: int,
    g0_derivs,
    estimator: str = "lse",
    t_grid=None,
) -> LocalDiagnostics:
    """Localized driving/fitted process pair around x0.

    ``g0_derivs`` holds the true density derivatives g0^(j)(x0) for
    j = 0..k-1 used to center the processes.  Both processes are scaled by
    n^{2k/(2k+1)} in the local coordinate t = (x - x0) n^{1/(2k+1)}; the
    polynomial coefficients ``a_coefs`` absorb the boundary mismatch at x0.
    """
    k = _check_k(k)
    if estimator not in ("lse", "mle"):
        raise ValueError("estimator must be 'lse' or 'mle'")
    if not fit.converged:
        raise ValueError("localized diagnostics need a converged fit")
    x0 = float(x0)
    X = sample.values
    if not X[0] < x0 < X[-1]:
        raise ValueError("x0 must be interior to the data range")
    g0d = np.asarray(g0_derivs, dtype=float)
    if g0d.size < k:
        raise ValueError("g0_derivs must supply orders 0..k-1")
    n = sample.n
    rk = 1.0 / (2 * k + 1)
    r = n ** (-rk)
    amp = n ** (2 * k * rk)
    if t_grid is None:
        t_grid = np.linspace(-2.0, 2.0, 161)
    t = np.asarray(t_grid, dtype=float)
    x = x0 + t * r
    keep = x > 1e-12
    t, x = t[keep], x[keep]

    knots = fit.knots
    kmask = (knots >= x.min()) & (knots <= x.max())
    local_knots = (knots[kmask] - x0) / r

    dx = x - x0
    jj = np.arange(k)

    if estimator == "lse":
        upper = 1.0000001 * max(float(x.max()), float(knots.max()), float(X[-1]))
        hpp = _extended_density(fit.mixing, k, upper).antiderivative(k, anchor=0.0)
        yj = np.array([empirical_Y(sample, k, x0, deriv=j) for j in jj])
        hj = np.array([float(hpp.eval(x0, deriv=j)) for j in jj])
        a_coefs = n ** ((2 * k - jj) * rk) / _factorials(jj) * (hj - yj)

        yx = empirical_Y(sample, k, x)
        taylor = sum(dx**j / factorial(j) * yj[j] for j in range(k))
        qpoly = sum(g0d[j] * dx ** (k + j) / factorial(k + j) for j in range(k))
        y_loc = amp * (yx - taylor - qpoly)
        slack = amp * (hpp.eval(x) - yx)
        tau = knots[kmask]
        knot_res = amp * np.abs(hpp.eval(tau) - empirical_Y(sample, k, tau)) \
            if tau.size else np.array([])
    else:
        g0 = float(g0d[0])
        gX = fit.estimate.eval(X)
        if np.any(gX <= 0.0):
            raise ValueError("fitted density vanishes at a data point")
        # V(x) = x^k/k! (1 - Hhat(x)): the k-fold integral of
        # dx - dG_n / ghat from the origin
        uj = np.empty(k)
        for j in range(k):
            p = k - 1 - j
            dlt = np.clip(x0 - X, 0.0, None)
            uj[j] = np.mean(dlt**p / (factorial(p) * gX))
        vj = x0 ** (k - jj) / _factorials(k - jj) - uj
        a_coefs = g0 * n ** ((2 * k - jj) * rk) / _factorials(jj) * vj

        hhat_x = hhat_values(sample, fit.mixing, k, x)
        slack = g0 * amp * x**k / factorial(k) * (1.0 - hhat_x)
        tau = knots[kmask]
        if tau.size:
            knot_res = g0 * amp * tau**k / factorial(k) * np.abs(
                1.0 - hhat_values(sample, fit.mixing, k, tau)
            )
        else:
            knot_res = np.array([])
        y_loc = g0 * amp * _mle_yloc_raw(sample, fit, x0, k, g0d, x, gX)

    h_loc = y_loc + slack
    scale = max(1.0, float(np.max(np.abs(h_loc))))
    return LocalDiagnostics(
        t=t,
        x=x,
        y_loc=y_loc,
        h_loc=h_loc,
        slack=slack,
        a_coefs=np.asarray(a_coefs, dtype=float),
        local_knots=local_knots,
        knot_residuals=np.asarray(knot_res, dtype=float),
        scale=scale,
        estimator=estimator,
        n=n,
        k=k,
    )


def _factorials(arr) -> np.ndarray:
    return np.array([factorial(int(v)) for v in np.atleast_1d(arr)], dtype=float)


def _mle_yloc_raw(sample, fit, x0, k, g0d, x, gX):
    """k-fold integral from x0 of (dG_n - taylor(g0) du) / ghat, by quadrature.

    The centering polynomial of the true density cancels the absolutely
    continuous part of G_0, so the integrand only involves the data, the
    fitted density and the Taylor coefficients.
    """
    X = sample.values
    n = sample.n
    lo, hi = min(float(x.min()), x0), max(float(x.max()), x0)
    xs = np.linspace(lo, hi, 4001)
    xs = np.unique(np.concatenate([xs, X[(X >= lo) & (X <= hi)], [x0]]))
    gx = fit.estimate.eval(xs)
    if np.any(gx <= 0.0):
        raise ValueError("fitted density vanishes on the local window")
    poly = sum(g0d[j] * (xs - x0) ** j / factorial(j) for j in range(k))
    cont = cumulative_trapezoid(-poly / gx, xs, initial=0.0)
    # atoms of G_n: running sum of 1/(n ghat(X_i)) for X_i <= v
    inside = (X >= lo) & (X <= hi)
    cum_at_xs = np.zeros(xs.size)
    if np.any(inside):
        Xi = X[inside]
        wi = 1.0 / (n * gX[inside])
        cum = np.concatenate([[0.0], np.cumsum(wi)])
        cum_at_xs = cum[np.searchsorted(Xi, xs, side="right")]
    # outside-window data points below lo contribute a constant, removed
    # by the anchoring at x0
    f = cont + cum_at_xs
    f -= np.interp(x0, xs, f)
    for _ in range(k - 1):
        f = cumulative_trapezoid(f, xs, initial=0.0)
        f -= np.interp(x0, xs, f)
    return np.interp(x, xs, f)


# ---------------------------------------------------------------------------
# Monte Carlo experiment harness


class ExponentialTruth:
    """Unit-rate exponential truth: k-monotone for every k."""

    name = "exp1"

    def rvs(self, rng: np.random.Generator, n: int) -> Sample:
        return Sample.from_data(rng.exponential(1.0, n))

    def derivs(self, x0: float, upto: int) -> np.ndarray:
        j = np.arange(upto + 1)
        return (-1.0) ** j * np.exp(-x0)

    def mixing_cdf(self, x0: float, k: int) -> float:
        j = np.arange(k + 1)
        return float(1.0 - np.exp(-x0) * np.sum(x0**j / _factorials(j)))


class MixtureTruth:
    """Finite scale-mixture truth with known mixing measure."""

    def __init__(self, mixing: MixingMeasure, k: int):
        if mixing.mass_constraint != "unit":
            raise ValueError("sampling needs a unit-mass mixing measure")
        self.mixing = mixing
        self.k = _check_k(k)
        self.name = "mixture"
        self._pp = mixture_to_piecewise(mixing, k)

    def rvs(self, rng: np.random.Generator, n: int) -> Sample:
        idx = rng.choice(self.mixing.atoms.size, size=n, p=self.mixing.weights)
        u = rng.uniform(0.0, 1.0, n)
        return Sample.from_data(self.mixing.atoms[idx] * (1.0 - u ** (1.0 / self.k)))

    def derivs(self, x0: float, upto: int) -> np.ndarray:
        out = np.zeros(upto + 1)
        for j in range(min(upto, self.k - 1) + 1):
            out[j] = self._pp.eval(x0, deriv=j)
        return out  # derivatives of order >= k vanish between the atoms

    def mixing_cdf(self, x0: float, k: int) -> float:
        return float(self.mixing.cdf(x0))


def _resolve_truth(truth, k: int):
    if isinstance(truth, str):
        if truth == "exp1":
            return ExponentialTruth()
        raise ValueError(f"unknown named truth {truth!r}")
    if isinstance(truth, MixingMeasure):
        return MixtureTruth(truth, k)
    return truth


def _check_sign_condition(truth, x0: float, k: int):
    d = truth.derivs(x0, k)
    if not (-1.0) ** k * d[k] > 0.0:
        raise ValueError(
            "truth must satisfy (-1)^k g0^(k)(x0) > 0 at the evaluation point"
        )


def _experiment_fit(sample: Sample, k: int, estimator: str, opts: FitOptions):
    fitter = fit_lse if estimator == "lse" else fit_mle
    try:
        return fitter(sample, k, opts), True
    except NonConvergenceError as exc:
        return exc.result, False


def _grenander_jumps(sample: Sample) -> np.ndarray:
    sf = grenander(sample)
    drop = np.nonzero(np.diff(sf.values) != 0.0)[0]
    return np.append(sf.locations[drop], sf.locations[-1])


def _straddling_window(knots: np.ndarray, x0: float, k: int):
    """2k-2 consecutive knots around x0: k-1 at or below, k-1 above.

    Shifts the window (and flags) when one side is short; returns
    (window, flagged) or (None, True) when fewer than 2k-2 knots exist.
    """
    need = 2 * k - 2
    if knots.size < need:
        return None, True
    nb = int(np.sum(knots <= x0))
    lo = nb - (k - 1)
    flagged = False
    if lo < 0:
        lo, flagged = 0, True
    elif lo + need > knots.size:
        lo, flagged = knots.size - need, True
    return knots[lo:lo + need], flagged


@dataclass(frozen=True)
class GapResult:
    """Knot-gap experiment output: one row per replication."""

    k: int
    x0: float
    n_list: tuple
    estimator: str
    seed: int | None
    rows: list = field(default_factory=list)

    def medians(self) -> dict:
        out = {}
        for n in self.n_list:
            gaps = [r["gap"] for r in self.rows if r["n"] == n and not r["excluded"]]
            out[n] = float(np.median(gaps)) if gaps else np.nan
        return out

    def slope(self) -> float:
        med = self.medians()
        ns = [n for n in self.n_list if np.isfinite(med[n]) and med[n] > 0]
        if len(ns) < 2:
            return np.nan
        return float(np.polyfit(np.log([float(n) for n in ns]),
                                np.log([med[n] for n in ns]), 1)[0])

    def summary(self) -> dict:
        med = self.medians()
        quart = {}
        for n in self.n_list:
            gaps = [r["gap"] for r in self.rows if r["n"] == n and not r["excluded"]]
            quart[str(n)] = (
                [float(q) for q in np.percentile(gaps, [25, 50, 75])] if gaps else None
            )
        return {
            "k": self.k,
            "x0": self.x0,
            "estimator": self.estimator,
            "seed": self.seed,
            "slope": self.slope(),
            "median_gap": {str(n): med[n] for n in self.n_list},
            "gap_quartiles": quart,
            "n_excluded": int(sum(r["excluded"] for r in self.rows)),
            "n_flagged": int(sum(r["flagged"] for r in self.rows)),
        }

    def write_csv(self, path: str):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "rep", "gap", "flagged", "excluded", "converged"])
            for r in self.rows:
                writer.writerow([r["n"], r["rep"], r["gap"], int(r["flagged"]),
                                 int(r["excluded"]), int(r["converged"])])

    def write_json(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def _spawn_rngs(seed, n_streams: int):
    """Per-replication generators: SeedSequence(seed) spawned once into
    len(n_list) * reps children, ordered (n-index major, replication minor)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_streams)]


def gap_experiment(
    k: int,
    truth,
    x0: float,
    n_list,
    reps: int,
    seed=None,
    estimator: str = "lse",
    fit_options: FitOptions | None = None,
) -> GapResult:
    """Monte Carlo study of the span of 2k-2 knots straddling x0.

    For k = 1 the gap is the distance between the consecutive jump points
    of the step estimate around x0 (the two estimators coincide there).
    Replications with too few knots near x0 are excluded and counted.
    """
    k = _check_k(k)
    truth = _resolve_truth(truth, k)
    _check_sign_condition(truth, x0, k)
    n_list = tuple(int(n) for n in n_list)
    if reps < 1:
        raise ValueError("reps must be positive")
    opts = fit_options or FitOptions(grid_size=256, polish_rounds=6, max_iter=250,
                                  finish_root=False)
    rngs = _spawn_rngs(seed, len(n_list) * reps)
    result = GapResult(k=k, x0=float(x0), n_list=n_list,
                       estimator=estimator, seed=seed)
    for i, n in enumerate(n_list):
        for rep in range(reps):
            rng = rngs[i * reps + rep]
            sample = truth.rvs(rng, n)
            converged = True
            if k == 1:
                jumps = _grenander_jumps(sample)
                pos = int(np.searchsorted(jumps, x0))
                if jumps.size < 2:
                    row = dict(n=n, rep=rep, gap=np.nan, flagged=True,
                               excluded=True, converged=True)
                    result.rows.append(row)
                    continue
                flagged = not 0 < pos < jumps.size
                pos = min(max(pos, 1), jumps.size - 1)
                gap = float(jumps[pos] - jumps[pos - 1])
            else:
                fit, converged = _experiment_fit(sample, k, estimator, opts)
                window, flagged = _straddling_window(fit.knots, x0, k)
                if window is None:
                    result.rows.append(dict(n=n, rep=rep, gap=np.nan, flagged=True,
                                            excluded=True, converged=converged))
                    continue
                gap = float(window[-1] - window[0])
            result.rows.append(dict(n=n, rep=rep, gap=gap, flagged=flagged,
                                    excluded=False, converged=converged))
    return result


@dataclass(frozen=True)
class RateResult:
    """Pointwise-rate experiment output: one row per (replication, order).

    The order ``j`` is an integer derivative order, or the string "cdf"
    for the inverse-problem statistic n^{1/(2k+1)} (Fbar_n(x0) - F(x0)).
    """

    k: int
    x0: float
    j_list: tuple
    n_list: tuple
    estimator: str
    seed: int | None
    rows: list = field(default_factory=list)

    def errors(self, j, n) -> np.ndarray:
        return np.array([r["rescaled_error"] for r in self.rows
                         if r["j"] == j and r["n"] == n and not r["excluded"]])

    def ks_distances(self) -> dict:
        """Two-sample Kolmogorov distances between consecutive n levels."""
        out = {}
        for j in list(self.j_list) + ["cdf"]:
            pairs = {}
            for lo, hi in zip(self.n_list[:-1], self.n_list[1:]):
                a, b = self.errors(j, lo), self.errors(j, hi)
                if a.size < 2 or b.size < 2:
                    pairs[f"{lo}->{hi}"] = None
                else:
                    pairs[f"{lo}->{hi}"] = float(ks_2samp(a, b).statistic)
            out[str(j)] = pairs
        return out

    def summary(self) -> dict:
        applicable = len(self.n_list) >= 2 and all(
            self.errors(j, n).size >= 2 for j in self.j_list for n in self.n_list
        )
        return {
            "k": self.k,
            "x0": self.x0,
            "estimator": self.estimator,
            "seed": self.seed,
            "j_list": list(self.j_list),
            "n_list": list(self.n_list),
            "stability": self.ks_distances() if applicable else "not-applicable",
            "n_excluded": int(sum(r["excluded"] for r in self.rows)),
        }

    def write_csv(self, path: str):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "rep", "j", "rescaled_error", "excluded",
                             "converged"])
            for r in self.rows:
                writer.writerow([r["n"], r["rep"], r["j"], r["rescaled_error"],
                                 int(r["excluded"]), int(r["converged"])])

    def write_json(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def rate_experiment(
    k: int,
    truth,
    x0: float,
    j_list,
    n_list,
    reps: int,
    seed=None,
    estimator: str = "lse",
    fit_options: FitOptions | None = None,
    include_cdf: bool = True,
) -> RateResult:
    """Monte Carlo study of the rescaled pointwise errors at x0.

    Records n^{(k-j)/(2k+1)} (gbar_n^(j)(x0) - g0^(j)(x0)) for each j, and
    (optionally) the inverse-problem statistic built from the mixing CDF
    recovered by the inversion formula.  Distribution stability across n is
    summarized by two-sample Kolmogorov distances.
    """
    k = _check_k(k)
    truth = _resolve_truth(truth, k)
    _check_sign_condition(truth, x0, k)
    j_list = tuple(int(j) for j in j_list)
    if any(not 0 <= j <= k - 1 for j in j_list):
        raise ValueError("derivative orders must lie in 0..k-1")
    n_list = tuple(int(n) for n in n_list)
    if reps < 1:
        raise ValueError("reps must be positive")
    opts = fit_options or FitOptions(grid_size=256, polish_rounds=6, max_iter=250,
                                  finish_root=False)
    rngs = _spawn_rngs(seed, len(n_list) * reps)
    g0d = truth.derivs(x0, k - 1)
    f_true = truth.mixing_cdf(x0, k)
    rk = 1.0 / (2 * k + 1)
    result = RateResult(k=k, x0=float(x0), j_list=j_list, n_list=n_list,
                        estimator=estimator, seed=seed)
    for i, n in enumerate(n_list):
        for rep in range(reps):
            rng = rngs[i * reps + rep]
            sample = truth.rvs(rng, n)
            fit, converged = _experiment_fit(sample, k, estimator, opts)
            for j in j_list:
                err = float(fit.estimate.eval(x0, deriv=j)) - g0d[j]
                result.rows.append(dict(
                    n=n, rep=rep, j=j,
                    rescaled_error=n ** ((k - j) * rk) * err,
                    excluded=False, converged=converged,
                ))
            if include_cdf:
                ferr = invert_mixing(fit, k, x0) - f_true
                result.rows.append(dict(
                    n=n, rep=rep, j="cdf", rescaled_error=n**rk * ferr,
                    excluded=False, converged=converged,
                ))
    return result
