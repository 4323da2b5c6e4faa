"""Least squares and maximum likelihood estimators of a k-monotone density.

Both estimators are finite nonnegative mixtures of the scaled kernels
k(t - x)_+^{k-1} / t^k (the LSE with free total mass, the MLE with unit mass
at the optimum) and are computed by support reduction: grow the support one
atom at a time at the point of steepest descent of the criterion, re-solve the
finite-dimensional subproblem, prune, and polish the atom locations.

The optimality certificates follow the Fenchel conditions: for the LSE the
k-fold antiderivative of the estimate must dominate the empirical process
Y_n(x) = (1/n) sum (x - X_i)_+^{k-1}/(k-1)! with equality (value and slope)
at the knots; for the MLE the process Hhat_n must stay below 1 with equality
and vanishing derivative at the knots.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy.optimize import minimize_scalar, root
from sklearn.isotonic import isotonic_regression

from .kernels import (
    MixingMeasure,
    Sample,
    _check_k,
    beta_kernel,
    kernel_gram,
    mixture_density,
    mixture_to_piecewise,
)
from .piecewise import PiecewisePoly

__all__ = [
    "FitOptions",
    "FitResult",
    "CharacterizationReport",
    "StepFunction",
    "ProcessTrace",
    "NonConvergenceError",
    "fit_lse",
    "fit_mle",
    "grenander",
    "certify",
    "process_Yn",
    "process_Htilde",
    "process_Hhat",
    "empirical_Y",
    "hhat_values",
    "invert_mixing",
    "invert_hampel",
]


@dataclass(frozen=True)
class StepFunction:
    """Left-continuous step function on (0, locations[-1]].

    ``values[i]`` is the value on the interval (locations[i-1], locations[i]]
    with an implicit left edge at 0; past the last location the function is 0.
    """

    locations: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        val = np.asarray(self.values, dtype=float)
        if loc.ndim != 1 or loc.shape != val.shape or loc.size == 0:
            raise ValueError("locations and values must be equal-length vectors")
        if np.any(np.diff(loc) <= 0) or loc[0] <= 0:
            raise ValueError("locations must be positive and increasing")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "values", val)

    def eval(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.locations, x, side="left")
        out = np.where(idx < self.locations.size,
                       self.values[np.minimum(idx, self.values.size - 1)], 0.0)
        return out if out.ndim else float(out)

    def integral(self) -> float:
        edges = np.concatenate([[0.0], self.locations])
        return float(np.sum(self.values * np.diff(edges)))


@dataclass(frozen=True)
class ProcessTrace:
    """A process evaluated on a grid."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.shape != v.shape:
            raise ValueError("grid and values must have the same shape")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class CharacterizationReport:
    """Grid certificate for the Fenchel optimality conditions.

    ``min_slack`` is the smallest inequality margin over the grid (absolute
    units of the certified process); ``max_knot_residual`` is the largest
    equality violation at the knots, normalized by the process scale.
    """

    min_slack: float
    max_knot_residual: float
    grid: np.ndarray
    passed: bool
    tol_ineq: float
    tol_eq: float
    scale: float

    def to_dict(self) -> dict:
        return {
            "min_slack": self.min_slack,
            "max_knot_residual": self.max_knot_residual,
            "passed": self.passed,
            "tol_ineq": self.tol_ineq,
            "tol_eq": self.tol_eq,
        }


@dataclass(frozen=True)
class FitResult:
    """A fitted k-monotone density with its mixture representation."""

    k: int
    estimate: PiecewisePoly
    mixing: MixingMeasure
    knots: np.ndarray
    objective: float
    certificate: CharacterizationReport | None
    trace: np.ndarray = dataclasses.field(default_factory=lambda: np.array([]))
    converged: bool = True

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "atoms": self.mixing.atoms.tolist(),
            "weights": self.mixing.weights.tolist(),
            "knots": self.knots.tolist(),
            "objective": self.objective,
            "certificate": None if self.certificate is None
            else self.certificate.to_dict(),
        }


@dataclass
class FitOptions:
    max_iter: int = 400
    tol: float = 1e-9
    grid_size: int = 512
    polish_rounds: int = 50
    certify_grid: int = 2000
    tol_ineq: float | None = None
    tol_eq: float | None = None
    finish_root: bool = True


class NonConvergenceError(RuntimeError):
    """Solver ran out of iterations; carries the best iterate found."""

    def __init__(self, message: str, result: FitResult):
        super().__init__(message)
        self.result = result


# ---------------------------------------------------------------------------
# empirical processes


def empirical_Y(sample: Sample, k: int, x, deriv: int = 0):
    """Y_n^{(deriv)}(x) with Y_n(x) = (1/n) sum (x - X_i)_+^{k-1}/(k-1)!."""
    if not 0 <= deriv <= k - 1:
        raise ValueError("deriv must be in 0..k-1")
    x = np.asarray(x, dtype=float)
    X = sample.values
    p = k - 1 - deriv
    out = np.empty(x.size)
    flat = x.ravel()
    # chunk the outer product to bound memory on large grids
    step = max(1, 2**22 // max(X.size, 1))
    for i in range(0, flat.size, step):
        d = flat[i:i + step, None] - X[None, :]
        if p == 0:
            vals = (d >= 0.0).astype(float)
        else:
            vals = np.clip(d, 0.0, None) ** p / factorial(p)
        out[i:i + step] = vals.mean(axis=1)
    return out.reshape(x.shape) if x.ndim else float(out[0])


def _extended_density(mixing: MixingMeasure, k: int, upper: float) -> PiecewisePoly:
    pp = mixture_to_piecewise(mixing, k)
    if upper > pp.breakpoints[-1]:
        bp = np.concatenate([pp.breakpoints, [upper]])
        cf = np.vstack([pp.coeffs, np.zeros((1, pp.coeffs.shape[1]))])
        pp = PiecewisePoly(bp, cf, smoothness=pp.smoothness)
    return pp


def process_Yn(sample: Sample, k: int, grid) -> ProcessTrace:
    grid = np.asarray(grid, dtype=float)
    return ProcessTrace(grid, empirical_Y(sample, k, grid))


def process_Htilde(fit: FitResult, k: int, grid) -> ProcessTrace:
    grid = np.asarray(grid, dtype=float)
    pp = _extended_density(fit.mixing, k, float(grid.max()) * 1.0000001)
    H = pp.antiderivative(k, anchor=0.0)
    return ProcessTrace(grid, H.eval(grid))


def hhat_values(sample: Sample, mixing: MixingMeasure, k: int, x, deriv: int = 0):
    """Hhat_n(x, g) = (1/n) sum_j k (x - X_j)_+^{k-1} / (x^k g(X_j)).

    ``deriv=1`` returns the analytic first derivative in x.  The value at 0 is
    taken as 0 by continuity.
    """
    x = np.asarray(x, dtype=float)
    X = sample.values
    gX = mixture_density(mixing, k, X)
    if np.any(gX <= 0.0):
        raise ValueError("estimate vanishes at a data point")
    flat = x.ravel()
    out = np.empty(flat.size)
    step = max(1, 2**22 // max(X.size, 1))
    for i in range(0, flat.size, step):
        xi = flat[i:i + step, None]
        d = xi - X[None, :]
        pos = d >= 0.0 if k == 1 else d > 0.0
        base = np.where(pos, d, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            if deriv == 0:
                term = k * base ** (k - 1) / np.clip(xi, 1e-300, None) ** k
                term = np.where(pos, term, 0.0)
            else:
                t1 = k * (k - 1) * base ** (k - 2) / xi ** k if k >= 2 else 0.0
                t2 = k * k * base ** (k - 1) / xi ** (k + 1)
                term = np.where(pos, t1 - t2, 0.0)
        out[i:i + step] = (term / gX[None, :]).mean(axis=1)
    out = np.where(flat == 0.0, 0.0, out)
    return out.reshape(x.shape) if x.ndim else float(out[0])


def process_Hhat(sample: Sample, fit: FitResult, k: int, grid) -> ProcessTrace:
    grid = np.asarray(grid, dtype=float)
    return ProcessTrace(grid, hhat_values(sample, fit.mixing, k, grid))


# ---------------------------------------------------------------------------
# Grenander oracle (k = 1)


def grenander(sample: Sample) -> StepFunction:
    """Left derivative of the least concave majorant of the empirical CDF.

    Computed as the antitonic regression of the raw histogram slopes with the
    spacings as weights (pool adjacent violators).
    """
    u, counts = np.unique(sample.values, return_counts=True)
    n = sample.n
    gaps = np.diff(np.concatenate([[0.0], u]))
    raw = (counts / n) / gaps
    heights = isotonic_regression(raw, sample_weight=gaps, increasing=False)
    return StepFunction(u, heights)


# ---------------------------------------------------------------------------
# support reduction internals


def _candidate_grid(sample: Sample, k: int, grid_size: int) -> np.ndarray:
    X = sample.values
    hi = (2 * k - 1) * X[-1] * 1.05
    dense = np.linspace(X[0], hi, grid_size)
    # log spacing resolves the slack landscape near tiny observations,
    # where linear spacing skips whole oscillations
    logs = np.geomspace(max(X[0] * 0.5, hi * 1e-9), hi, grid_size)
    quant = np.quantile(X, np.linspace(0.0, 1.0, min(X.size, grid_size // 2)))
    return np.unique(np.concatenate([X[:: max(1, X.size // grid_size)],
                                     quant, dense, logs]))


def _nnls_gram(G: np.ndarray, c: np.ndarray) -> np.ndarray:
    """argmin_{w >= 0} of 1/2 w'Gw - c'w by a Lawson-Hanson active set.

    The Gram matrix is equilibrated to unit diagonal first; atom scales can
    differ by orders of magnitude and wreck the raw conditioning.  Supports
    are small, so the free-set systems are solved directly.
    """
    m = G.shape[0]
    d = np.sqrt(np.diag(G))
    Gn = G / np.outer(d, d)
    cn = c / d
    tol = 1e-12 * max(float(np.max(np.abs(cn))), 1e-300)
    free = np.zeros(m, dtype=bool)
    w = np.zeros(m)
    for _ in range(50 * m + 100):
        grad = Gn @ w - cn
        grad_out = np.where(~free, grad, np.inf)
        j = int(np.argmin(grad_out))
        if grad_out[j] >= -tol:
            break
        free[j] = True
        for _ in range(m + 1):
            idx = np.flatnonzero(free)
            z = np.linalg.lstsq(Gn[np.ix_(idx, idx)], cn[idx], rcond=None)[0]
            if np.min(z) > 0.0:
                w.fill(0.0)
                w[idx] = z
                break
            wf = w[idx]
            denom = wf - z
            with np.errstate(divide="ignore", invalid="ignore"):
                alphas = np.where((z <= 0.0) & (denom > 0.0),
                                  wf / denom, np.inf)
            alpha = min(float(np.min(alphas)), 1.0)
            wf = wf + alpha * (z - wf)
            w.fill(0.0)
            w[idx] = np.clip(wf, 0.0, None)
            free &= w > 0.0
            if not np.any(free):
                break
    return w / d


def _refine_scalar(fun, lo: float, hi: float, minimize: bool = True) -> float:
    if hi <= lo:
        return lo
    sign = 1.0 if minimize else -1.0
    res = minimize_scalar(lambda t: sign * fun(t), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-12 * hi})
    return float(res.x)


def fit_lse(sample: Sample, k: int, opts: FitOptions | None = None) -> FitResult:
    """Least squares estimate: minimize 1/2 int g^2 - int g dG_n over
    nonnegative free-mass kernel mixtures."""
    k = _check_k(k)
    opts = opts or FitOptions()
    X = sample.values
    if X.size < k:
        import warnings

        warnings.warn("n < k: the (k-1)st derivative has at most n jumps")
    grid = _candidate_grid(sample, k, opts.grid_size)
    def cfun(t):
        return float(np.mean(beta_kernel(k, t, X)))

    def slack_fun(atoms, w):
        def D(t):
            s = -cfun(t)
            if atoms.size:
                s += float(kernel_gram(k, np.atleast_1d(t), atoms) @ w)
            return s
        return D

    def refit(at):
        G = kernel_gram(k, at[:, None], at[None, :])
        c = beta_kernel(k, at[:, None], X[None, :]).mean(axis=1)
        wt = _nnls_gram(G, c)
        return wt, float(0.5 * wt @ G @ wt - c @ wt)

    def polish_one(at, wt, j):
        # best location for atom j with its weight held fixed
        wj = wt[j]
        others = np.delete(np.arange(at.size), j)

        def phi_j(t):
            val = 0.5 * wj**2 * kernel_gram(k, t, t) - wj * cfun(t)
            if others.size:
                val += wj * float(
                    kernel_gram(k, np.atleast_1d(t), at[others]) @ wt[others])
            return val

        # search near the current knot only: the landscape is multimodal and
        # the equality conditions are local to each knot
        lo = (at[j - 1] + at[j]) / 2.0 if j > 0 else X[0] * 0.5
        hi = (at[j] + at[j + 1]) / 2.0 if j < at.size - 1 else grid[-1]
        lo = max(lo, 0.6 * at[j])
        hi = min(hi, 1.6 * at[j])
        t_new = _refine_scalar(phi_j, lo, hi)
        return t_new if phi_j(t_new) < phi_j(at[j]) else at[j]

    fact = float(factorial(k))
    c_grid = beta_kernel(k, grid[:, None], X[None, :]).mean(axis=1)

    def worst_slack(atoms, w):
        """Most negative slack in integrated (certificate) units.

        The gram-form slack D(t) relates to the integrated one by the factor
        t^k / k!; measuring in the integrated units keeps the convergence
        thresholds commensurate with the certificate's.
        """
        # fixed candidate grid plus atom-local probes: slack violations can
        # open between nearby atoms, far below the grid resolution
        probes = []
        if atoms.size:
            probes.append(0.5 * (atoms[1:] + atoms[:-1]))
            for h in (1e-4, 1e-3, 1e-2):
                probes.append(atoms * (1.0 + h))
                probes.append(atoms * (1.0 - h))
        tp = np.unique(np.concatenate(probes)) if probes else np.empty(0)
        tp = tp[(tp > 0.0) & (tp <= grid[-1])]
        cand = np.concatenate([grid, tp])
        D_cand = -np.concatenate([
            c_grid, beta_kernel(k, tp[:, None], X[None, :]).mean(axis=1)
        ])
        order = np.argsort(cand)
        cand, D_cand = cand[order], D_cand[order]
        if atoms.size:
            D_cand += kernel_gram(k, cand[:, None], atoms[None, :]) @ w
        D_cand = D_cand * cand**k / fact
        D = slack_fun(atoms, w)

        def S(t):
            return D(t) * t**k / fact

        # a dip narrower than the sampling can sit between positive samples;
        # refine around the deepest sampled local minima, not just the argmin
        interior = ((D_cand[1:-1] <= D_cand[:-2])
                    & (D_cand[1:-1] <= D_cand[2:]))
        locs = np.flatnonzero(interior) + 1
        locs = locs[np.argsort(D_cand[locs])[:24]]
        i = int(np.argmin(D_cand))
        t_star, d_star = cand[i], D_cand[i]
        for j in np.unique(np.append(locs, i)):
            t_new = _refine_scalar(S, cand[max(j - 1, 0)],
                                   cand[min(j + 1, cand.size - 1)])
            d_new = S(t_new)
            if d_new < d_star:
                t_star, d_star = t_new, d_new
        return t_star, d_star

    def cert_tol(atoms, w):
        """Half the inequality tolerance the certificate will apply.

        The certificate normalizes by max |H| over its grid; near the
        optimum H tracks Y_n closely, so Y_n at the top of the window is a
        cheap proxy for that scale.
        """
        if not atoms.size:
            return 1e-7
        upper_c = 1.02 * max(float(X[-1]), float(atoms[-1]))
        hscale = max(1.0, abs(empirical_Y(sample, k, upper_c)))
        return 0.5e-7 * (1.0 + hscale)

    atoms = np.array([])
    w = np.array([])
    trace = []
    converged = False
    # insertion and polish alternate: moving knots can open a shallow slack
    # violation between them, which the next insertion sweep repairs
    for _ in range(4):
        best_obj = np.inf
        stall = 0
        for _ in range(opts.max_iter):
            t_star, d_new = worst_slack(atoms, w)
            ti = cert_tol(atoms, w)
            if d_new >= -0.2 * ti:
                converged = True
                break
            if atoms.size and np.min(np.abs(atoms - t_star)) < 1e-12 * grid[-1]:
                converged = True
                break
            atoms = np.sort(np.append(atoms, t_star))
            w, obj = refit(atoms)
            keep = w > 0.0
            atoms, w = atoms[keep], w[keep]
            trace.append(obj)
            # numerical noise floor: once the objective stops improving, stop
            # -- but only declare convergence if the slack is near certificate
            # level
            if not np.isfinite(best_obj) or obj < best_obj - 1e-13 * (1.0 + abs(best_obj)):
                best_obj = obj
                stall = 0
            else:
                stall += 1
                if stall >= 8:
                    converged = d_new >= -100.0 * ti
                    break

        # polish: coordinate descent on atom locations (weight of the moving
        # atom held fixed, stationarity <=> vanishing derivative of the slack
        # at the knot), with merging of near-duplicate atoms when it does not
        # hurt the criterion.  k = 1 keeps its knots on the observations.
        rounds = opts.polish_rounds if (converged and k >= 2) else 0
        obj_cur = refit(atoms)[1] if atoms.size else 0.0
        for _ in range(rounds):
            if atoms.size == 0:
                break
            moved = 0.0
            while atoms.size > 1:
                gaps = np.diff(atoms)
                j = int(np.argmin(gaps))
                if gaps[j] > 1e-2 * grid[-1]:
                    break
                trial = np.delete(atoms, j + 1)
                trial[j] = ((atoms[j] * w[j] + atoms[j + 1] * w[j + 1])
                            / (w[j] + w[j + 1]))
                wt, _ = refit(trial)
                if wt[j] > 0.0:
                    trial[j] = polish_one(trial, wt, j)
                wt, obj_t = refit(trial)
                if obj_t <= obj_cur + 1e-10 * (1.0 + abs(obj_cur)):
                    keep = wt > 0.0
                    atoms, w, obj_cur = trial[keep], wt[keep], obj_t
                    moved = grid[-1]
                else:
                    break
            for j in range(atoms.size):
                t_new = polish_one(atoms, w, j)
                moved = max(moved, abs(t_new - atoms[j]))
                atoms[j] = t_new
            w, obj_cur = refit(atoms)
            keep = w > 0.0
            atoms, w = atoms[keep], w[keep]
            if moved <= 1e-13 * grid[-1]:
                break

        # atom pairs closer than the piecewise conversion can resolve are
        # merged at their weighted mean; if that perturbs the fit, the next
        # insertion sweep repairs it
        while atoms.size > 1:
            if np.min(np.diff(atoms)) >= 1e-7 * atoms[-1]:
                try:
                    mixture_to_piecewise(MixingMeasure(atoms, w), k)
                    break
                except ValueError:
                    pass
            j = int(np.argmin(np.diff(atoms)))
            merged = ((atoms[j] * w[j] + atoms[j + 1] * w[j + 1])
                      / (w[j] + w[j + 1]))
            atoms = np.delete(atoms, j + 1)
            atoms[j] = merged
            w, _ = refit(atoms)
            keep = w > 0.0
            atoms, w = atoms[keep], w[keep]

        if not converged or rounds == 0:
            break
        if worst_slack(atoms, w)[1] >= -cert_tol(atoms, w):
            break

    # finisher: polish cannot resolve stiff directions whose objective
    # improvement is below double precision, so solve the stationarity
    # equations (H - Y and H' - Y' vanish at every knot) directly
    if opts.finish_root and converged and k >= 2 and atoms.size:
        hi_dom = grid[-1] * 1.01
        obj_cur = refit(atoms)[1]
        yscale = max(1.0, float(np.max(np.abs(empirical_Y(sample, k, atoms)))))
        trial_atoms, trial_w = atoms.copy(), w.copy()
        # if the root iteration drives two knots together, the optimum has
        # them coalesced and the full system is singular there; merge the
        # pair and solve the smaller system instead
        for _ in range(max(1, atoms.size)):
            m = trial_atoms.size

            def stationarity(z, m=m):
                a, wt = z[:m], z[m:]
                if (a[0] <= 0.0 or np.any(np.diff(a) <= 1e-9 * a[-1])
                        or np.any(wt <= 0.0)):
                    return np.full(2 * m, 1e3)
                try:
                    mm = MixingMeasure(a, wt)
                    Hm = _extended_density(mm, k, hi_dom).antiderivative(
                        k, anchor=0.0)
                    r1 = Hm.eval(a) - empirical_Y(sample, k, a)
                    r2 = (Hm.eval(a, deriv=1)
                          - empirical_Y(sample, k, a, deriv=1))
                except ValueError:
                    return np.full(2 * m, 1e3)
                return np.concatenate([r1, r2])

            sol = root(stationarity, np.concatenate([trial_atoms, trial_w]),
                       method="hybr", options={"xtol": 1e-14})
            a2, w2 = np.asarray(sol.x[:m]), np.asarray(sol.x[m:])
            valid = (a2[0] > 0.0 and np.all(np.diff(a2) > 0.0)
                     and np.all(w2 > 0.0))
            # judge by the achieved residual: hybr can declare slow progress
            # after it has already landed on the solution
            if np.max(np.abs(sol.fun)) <= 1e-9 * yscale and valid:
                try:
                    mixture_to_piecewise(MixingMeasure(a2, w2), k)
                except ValueError:
                    pass
                else:
                    _, obj_t = refit(a2)
                    if obj_t <= obj_cur + 1e-9 * (1.0 + abs(obj_cur)):
                        atoms, w = a2, w2
                        break
            if m <= 1:
                break
            src_a, src_w = (a2, w2) if valid else (trial_atoms, trial_w)
            gaps = np.diff(src_a)
            j = int(np.argmin(gaps))
            if gaps[j] > 1e-4 * src_a[-1]:
                break
            merged = ((src_a[j] * src_w[j] + src_a[j + 1] * src_w[j + 1])
                      / (src_w[j] + src_w[j + 1]))
            trial_atoms = np.delete(src_a, j + 1)
            trial_atoms[j] = merged
            trial_w, _ = refit(trial_atoms)
            keep = trial_w > 0.0
            trial_atoms, trial_w = trial_atoms[keep], trial_w[keep]
            if trial_atoms.size == 0:
                break

    mixing = MixingMeasure(atoms, w)
    G = kernel_gram(k, atoms[:, None], atoms[None, :])
    c = beta_kernel(k, atoms[:, None], X[None, :]).mean(axis=1)
    objective = float(0.5 * w @ G @ w - c @ w)
    fit = FitResult(
        k=k,
        estimate=mixture_to_piecewise(mixing, k),
        mixing=mixing,
        knots=atoms.copy(),
        objective=objective,
        certificate=None,
        trace=np.array(trace),
        converged=converged,
    )
    fit = dataclasses.replace(
        fit, certificate=certify(fit, sample, k, "lse", opts.certify_grid,
                                 tol_ineq=opts.tol_ineq, tol_eq=opts.tol_eq))
    if not converged:
        raise NonConvergenceError("LSE support reduction did not converge", fit)
    return fit


def _mle_objective(w, B):
    # -l_n in the free-mass form: mass - mean log g(X)
    gX = w @ B
    if np.any(gX <= 0.0):
        return np.inf
    return float(np.sum(w) - np.mean(np.log(gX)))


def _mle_inner(atoms, w, B, max_steps=60, tol=1e-12):
    """Minimize mass - mean log(w'B) over w >= 0 on a fixed support.

    Damped Newton steps with an Armijo backtracking line search; falls back to
    the (monotone) EM multiplicative update whenever Newton fails to improve.
    """
    n = B.shape[1]
    obj = _mle_objective(w, B)
    for _ in range(max_steps):
        gX = w @ B
        ratio = B / gX[None, :]
        Hbar = ratio.mean(axis=1)  # Hhat at the atoms
        grad = 1.0 - Hbar
        kkt = max(np.max(np.abs(w * grad)), -np.min(grad))
        if kkt <= tol:
            break
        hess = ratio @ ratio.T / n
        try:
            step = np.linalg.solve(hess + 1e-12 * np.eye(w.size), -grad)
        except np.linalg.LinAlgError:
            step = -grad
        improved = False
        alpha = 1.0
        for _ in range(25):
            w_try = np.clip(w + alpha * step, 0.0, None)
            obj_try = _mle_objective(w_try, B)
            if obj_try < obj - 1e-14 * abs(obj):
                w, obj = w_try, obj_try
                improved = True
                break
            alpha *= 0.5
        if not improved:
            w_em = w * Hbar
            obj_em = _mle_objective(w_em, B)
            if obj_em < obj:
                w, obj = w_em, obj_em
            else:
                break
    return w, obj


def _merge_close(atoms: np.ndarray, w: np.ndarray, tol_gap: float):
    """Collapse runs of atoms closer than ``tol_gap`` to their weighted mean."""
    if atoms.size < 2:
        return atoms, w
    groups = np.concatenate([[0], np.cumsum(np.diff(atoms) > tol_gap)])
    m = groups[-1] + 1
    if m == atoms.size:
        return atoms, w
    wa = np.zeros(m)
    ta = np.zeros(m)
    np.add.at(wa, groups, w)
    np.add.at(ta, groups, w * atoms)
    ta = np.where(wa > 0.0, ta / np.where(wa > 0.0, wa, 1.0),
                  np.bincount(groups, weights=atoms) / np.bincount(groups))
    return ta, wa


def fit_mle(sample: Sample, k: int, opts: FitOptions | None = None) -> FitResult:
    """Maximum likelihood estimate over unit-mass kernel mixtures.

    Solved in the free-mass form (mass penalty replaces the constraint; the
    optimum has mass 1); support reduction adds atoms where Hhat_n exceeds 1.
    """
    k = _check_k(k)
    opts = opts or FitOptions()
    X = sample.values
    if X.size < k:
        import warnings

        warnings.warn("n < k: the (k-1)st derivative has at most n jumps")
    grid = _candidate_grid(sample, k, opts.grid_size)
    # atoms below the data minimum contribute nothing to the likelihood;
    # keep them away from the origin spike
    grid = grid[grid >= X[0] * (1.0 if k == 1 else 1.0 + 1e-12)]
    t0 = X[-1] if k == 1 else max((k + 1) * float(np.mean(X)),
                                  X[-1] * (1.0 + 1.0 / k))
    atoms = np.array([t0])
    w = np.array([1.0])
    Bgrid_cache: dict[int, np.ndarray] = {}

    def kernel_at(atom_vec):
        return beta_kernel(k, atom_vec[:, None], X[None, :])

    def polish_round(atoms, w, B, merge_gap):
        """One merge + location coordinate-descent + weight re-solve pass."""
        moved = 0.0
        while atoms.size > 1:
            gaps = np.diff(atoms)
            j = int(np.argmin(gaps))
            if gaps[j] > merge_gap:
                break
            obj_cur = _mle_objective(w, B)
            trial = np.delete(atoms, j + 1)
            trial[j] = ((atoms[j] * w[j] + atoms[j + 1] * w[j + 1])
                        / (w[j] + w[j + 1]))
            wt = np.delete(w, j + 1)
            wt[j] = w[j] + w[j + 1]
            Bt = kernel_at(trial)
            wt, obj_t = _mle_inner(trial, wt, Bt, max_steps=200)
            if obj_t <= obj_cur + 1e-10 * (1.0 + abs(obj_cur)):
                keep = wt > 0.0
                atoms, w, B = trial[keep], wt[keep], Bt[keep]
                moved = grid[-1]
            else:
                break
        for j in range(atoms.size):
            g_other = w @ B - w[j] * B[j]
            wj = w[j]

            def psi_j(t):
                g = g_other + wj * beta_kernel(k, t, X)
                if np.any(g <= 0.0):
                    return np.inf
                return -float(np.mean(np.log(g)))

            lo = (atoms[j - 1] + atoms[j]) / 2.0 if j > 0 else X[0]
            hi = (atoms[j] + atoms[j + 1]) / 2.0 if j < atoms.size - 1 else grid[-1]
            lo = max(lo, 0.6 * atoms[j])
            hi = min(hi, 1.6 * atoms[j])
            t_new = _refine_scalar(psi_j, lo, hi)
            if psi_j(t_new) < psi_j(atoms[j]):
                moved = max(moved, abs(t_new - atoms[j]))
                atoms[j] = t_new
                B[j] = beta_kernel(k, t_new, X)
        w, _ = _mle_inner(atoms, w, B, max_steps=200)
        keep = w > 0.0
        return atoms[keep], w[keep], B[keep], moved

    Bgrid_cache[0] = kernel_at(grid)

    def worst_hhat(atoms, inv):
        """Largest mean kernel ratio over the grid, atom-local probes, and
        refined local maxima; a spike between close atoms or just above a
        small observation is narrower than the fixed grid."""
        H_grid = Bgrid_cache[0] @ inv / X.size
        probes = []
        if atoms.size:
            probes.append(0.5 * (atoms[1:] + atoms[:-1]))
            for h in (1e-4, 1e-3, 1e-2):
                probes.append(atoms * (1.0 + h))
                probes.append(atoms * (1.0 - h))
        tp = np.unique(np.concatenate(probes)) if probes else np.empty(0)
        tp = tp[(tp > grid[0]) & (tp <= grid[-1])]
        cand = np.concatenate([grid, tp])
        H_cand = np.concatenate([
            H_grid,
            beta_kernel(k, tp[:, None], X[None, :]) @ inv / X.size,
        ])
        order = np.argsort(cand)
        cand, H_cand = cand[order], H_cand[order]

        def Hfun(t):
            return float(np.mean(beta_kernel(k, t, X) * inv))

        interior = ((H_cand[1:-1] >= H_cand[:-2])
                    & (H_cand[1:-1] >= H_cand[2:]))
        locs = np.flatnonzero(interior) + 1
        locs = locs[np.argsort(H_cand[locs])[::-1][:24]]
        i = int(np.argmax(H_cand))
        t_best, h_best = cand[i], H_cand[i]
        for j in np.unique(np.append(locs, i)):
            t_new = _refine_scalar(Hfun, cand[max(j - 1, 0)],
                                   cand[min(j + 1, cand.size - 1)],
                                   minimize=False)
            h_new = Hfun(t_new)
            if h_new > h_best:
                t_best, h_best = t_new, h_new
        return t_best, h_best

    trace = []
    converged = False
    B = kernel_at(atoms)
    # insertion and polish alternate: moved knots can leave a ratio spike
    # between them, which the next insertion sweep repairs
    for _ in range(4):
        best_obj = np.inf
        stall = 0
        for it in range(opts.max_iter):
            w, obj = _mle_inner(atoms, w, B)
            keep = w > 0.0
            atoms, w, B = atoms[keep], w[keep], B[keep]
            merged, wm = _merge_close(atoms, w, 1e-5 * grid[-1])
            if merged.size < atoms.size:
                atoms, w = merged, wm
                B = kernel_at(atoms)
                w, obj = _mle_inner(atoms, w, B)
                keep = w > 0.0
                atoms, w, B = atoms[keep], w[keep], B[keep]
            # periodic consolidation: collapse atom clusters and polish knot
            # locations so support reduction does not churn micro-atoms
            if k >= 2 and atoms.size > 1 and (stall >= 3 or (it + 1) % 10 == 0):
                atoms, w, B, _ = polish_round(atoms, w, B, 1e-2 * grid[-1])
                obj = _mle_objective(w, B)
            trace.append(obj)
            if not np.isfinite(best_obj) or obj < best_obj - 1e-11 * (1.0 + abs(best_obj)):
                best_obj = obj
                stall = 0
            else:
                stall += 1
                if stall >= 30:
                    break
            gX = w @ B
            inv = 1.0 / gX
            t_star, h_best = worst_hhat(atoms, inv)
            if h_best <= 1.0 + opts.tol * 10:
                converged = True
                break
            if atoms.size and np.min(np.abs(atoms - t_star)) < 1e-12 * grid[-1]:
                converged = True
                break
            atoms = np.append(atoms, t_star)
            order = np.argsort(atoms)
            b_new = beta_kernel(k, t_star, X)
            # seed the new atom at its one-dimensional Newton-optimal weight
            ratio_new = b_new / gX
            q = float(np.mean(ratio_new**2))
            eps = max((float(np.mean(ratio_new)) - 1.0) / max(q, 1e-300), 1e-12)
            B = np.vstack([B, b_new[None, :]])[order]
            w = np.append(w, eps)[order]
            atoms = atoms[order]

        # final polish: coordinate descent on atom locations; stationarity of
        # the criterion in a knot location is the vanishing-derivative
        # condition
        rounds = opts.polish_rounds if (converged and k >= 2) else 0
        for _ in range(rounds):
            if atoms.size == 0:
                break
            atoms, w, B, moved = polish_round(atoms, w, B, 1e-2 * grid[-1])
            if moved <= 1e-13 * grid[-1]:
                break

        if not converged or rounds == 0:
            break
        if worst_hhat(atoms, 1.0 / (w @ B))[1] <= 1.0 + 1e-7:
            break

    # atom pairs closer than the piecewise conversion can resolve are merged
    # at their weighted mean
    while atoms.size > 1:
        if np.min(np.diff(atoms)) >= 1e-7 * atoms[-1]:
            try:
                mixture_to_piecewise(MixingMeasure(atoms, w), k)
                break
            except ValueError:
                pass
        j = int(np.argmin(np.diff(atoms)))
        merged = (atoms[j] * w[j] + atoms[j + 1] * w[j + 1]) / (w[j] + w[j + 1])
        atoms = np.delete(atoms, j + 1)
        atoms[j] = merged
        wt = np.delete(w, j + 1)
        wt[j] = w[j] + w[j + 1]
        B = kernel_at(atoms)
        w, _ = _mle_inner(atoms, wt, B, max_steps=200)
        keep = w > 0.0
        atoms, w, B = atoms[keep], w[keep], B[keep]

    # finisher: solve the stationarity equations directly (mean kernel ratio
    # one at every knot, vanishing location derivative); the likelihood
    # itself cannot resolve stiff near-duplicate-knot directions
    if opts.finish_root and converged and k >= 2 and atoms.size:
        m = atoms.size

        def stationarity(z):
            a, wt = z[:m], z[m:]
            if np.any(np.diff(a) <= 1e-9 * a[-1]) or np.any(wt <= 0.0) \
                    or a[0] <= 0.0:
                return np.full(2 * m, 1e3)
            gX = wt @ beta_kernel(k, a[:, None], X[None, :])
            if np.any(gX <= 0.0):
                return np.full(2 * m, 1e3)
            mm = MixingMeasure(a, wt)
            r1 = hhat_values(sample, mm, k, a) - 1.0
            r2 = hhat_values(sample, mm, k, a, deriv=1)
            return np.concatenate([r1, np.atleast_1d(r2)])

        obj_cur = _mle_objective(w, B)
        sol = root(stationarity, np.concatenate([atoms, w]), method="hybr",
                   options={"xtol": 1e-14})
        a2, w2 = np.asarray(sol.x[:m]), np.asarray(sol.x[m:])
        if (np.max(np.abs(sol.fun)) <= 1e-9 and a2[0] > 0.0
                and np.all(np.diff(a2) > 0.0) and np.all(w2 > 0.0)):
            try:
                mixture_to_piecewise(MixingMeasure(a2, w2), k)
            except ValueError:
                pass
            else:
                B2 = kernel_at(a2)
                obj_t = _mle_objective(w2, B2)
                if obj_t <= obj_cur + 1e-9 * (1.0 + abs(obj_cur)):
                    atoms, w, B = a2, w2, B2

    # at the optimum the free-mass solution has unit mass; renormalize the
    # residual drift so the returned measure is exactly a density
    w = w / float(np.sum(w))
    mixing = MixingMeasure(atoms, w, "unit")
    objective = _mle_objective(w, B)
    fit = FitResult(
        k=k,
        estimate=mixture_to_piecewise(mixing, k),
        mixing=mixing,
        knots=atoms.copy(),
        objective=float(objective),
        certificate=None,
        trace=np.array(trace),
        converged=converged,
    )
    fit = dataclasses.replace(
        fit, certificate=certify(fit, sample, k, "mle", opts.certify_grid,
                                 tol_ineq=opts.tol_ineq, tol_eq=opts.tol_eq))
    if not converged:
        raise NonConvergenceError("MLE support reduction did not converge", fit)
    return fit


# ---------------------------------------------------------------------------
# certification


def _certify_grid(sample: Sample, knots: np.ndarray, upper: float,
                  density: int) -> np.ndarray:
    base = np.linspace(upper * 1e-6, upper, density)
    extra = [sample.values, knots,
             np.geomspace(min(upper * 1e-6, sample.values[0] * 0.5), upper,
                          density)]
    span = upper
    for h in (1e-4, 1e-3, 1e-2):
        extra.append(np.clip(knots - h * span, span * 1e-7, upper))
        extra.append(np.clip(knots + h * span, span * 1e-7, upper))
    grid = np.unique(np.concatenate([base, *extra]))
    return grid[(grid > 0) & (grid <= upper)]


def certify(fit: FitResult, sample: Sample, k: int, which: str,
            grid_density: int = 2000, tol_ineq: float | None = None,
            tol_eq: float | None = None) -> CharacterizationReport:
    """Verify the Fenchel optimality conditions of a fit on a refined grid."""
    if which not in ("lse", "mle"):
        raise ValueError("which must be 'lse' or 'mle'")
    knots = fit.knots
    upper = 1.02 * max(float(sample.values[-1]),
                       float(knots[-1]) if knots.size else 0.0)
    grid = _certify_grid(sample, knots, upper, grid_density)

    if which == "lse":
        pp = _extended_density(fit.mixing, k, upper)
        H = pp.antiderivative(k, anchor=0.0)
        Hg = H.eval(grid)
        Yg = empirical_Y(sample, k, grid)
        scale = max(1.0, float(np.max(np.abs(Hg))))
        slack = Hg - Yg
        min_slack = float(np.min(slack))
        if knots.size:
            rv = np.abs(H.eval(knots) - empirical_Y(sample, k, knots)) / scale
            if k >= 2:
                d1 = np.abs(H.eval(knots, deriv=1)
                            - empirical_Y(sample, k, knots, deriv=1))
                s1 = max(1.0, float(np.max(np.abs(H.eval(grid, deriv=1)))))
                rv = np.concatenate([rv, d1 / s1])
            max_res = float(np.max(rv))
        else:
            max_res = 0.0
        ti = tol_ineq if tol_ineq is not None else 1e-7 * (1.0 + scale)
        te = tol_eq if tol_eq is not None else 1e-6
    else:
        Hg = hhat_values(sample, fit.mixing, k, grid)
        scale = 1.0
        slack = 1.0 - Hg
        min_slack = float(np.min(slack))
        if knots.size:
            rv = np.abs(hhat_values(sample, fit.mixing, k, knots) - 1.0)
            if k >= 2:
                rv = np.concatenate([rv, _eq416_residual(sample, fit.mixing,
                                                         k, knots)])
            max_res = float(np.max(rv))
        else:
            max_res = 0.0
        ti = tol_ineq if tol_ineq is not None else 1e-7 * (1.0 + scale)
        te = tol_eq if tol_eq is not None else 1e-6
    passed = bool(min_slack >= -ti and max_res <= te)
    return CharacterizationReport(
        min_slack=min_slack, max_knot_residual=max_res, grid=grid,
        passed=passed, tol_ineq=ti, tol_eq=te, scale=scale,
    )


def _eq416_residual(sample: Sample, mixing: MixingMeasure, k: int,
                    knots: np.ndarray) -> np.ndarray:
    """Dimensionless residual of the knot derivative condition.

    At every knot tau the fitted model must satisfy
    (1/n) sum_{X_j <= tau} (tau - X_j)^{k-2} / g(X_j) = tau^{k-1}/(k-1).
    """
    X = sample.values
    gX = mixture_density(mixing, k, X)
    res = np.empty(knots.size)
    for i, tau in enumerate(knots):
        d = tau - X
        mask = d >= 0.0
        lhs = np.mean(np.where(mask, d ** (k - 2) if k > 2
                               else mask.astype(float), 0.0) / gX)
        rhs = tau ** (k - 1) / (k - 1)
        res[i] = abs(lhs - rhs) / rhs
    return res


# ---------------------------------------------------------------------------
# inversion


def _as_density(obj, k: int) -> PiecewisePoly:
    if isinstance(obj, FitResult):
        return obj.estimate
    if isinstance(obj, MixingMeasure):
        return mixture_to_piecewise(obj, k)
    if isinstance(obj, PiecewisePoly):
        return obj
    raise TypeError("expected FitResult, MixingMeasure or PiecewisePoly")


def invert_mixing(obj, k: int, t):
    """Mixing CDF recovered from the fitted density.

    F(t) = sum_{j=0}^{k} (-1)^j (t^j/j!) G^{(j)}(t) with G the integral of g.
    Exact on finite mixtures off the atoms (right-limit convention at atoms).
    """
    g = _as_density(obj, k)
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0.0):
        raise ValueError("t must be positive")
    G0 = g.antiderivative(1, anchor=0.0)
    total = float(G0.eval(G0.breakpoints[-1], side="left"))
    hi = g.breakpoints[-1]
    flat = np.atleast_1d(t)
    out = np.empty(flat.size)
    for i, ti in enumerate(flat):
        if ti >= hi:
            out[i] = total
            continue
        acc = G0.eval(ti)
        for j in range(1, k + 1):
            acc += (-1.0) ** j * ti ** j / factorial(j) * g.eval(ti, deriv=j - 1)
        out[i] = acc
    return out.reshape(t.shape) if t.ndim else float(out[0])


def invert_hampel(obj, k: int, t):
    """Mixing CDF via the top-derivative ratio 1 - g^(k-1)(t)/g^(k-1)(0+).

    For kernel mixtures this recovers the atom CDF with weights reweighted
    proportionally to w_i / t_i^k.
    """
    g = _as_density(obj, k)
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0.0):
        raise ValueError("t must be positive")
    top0 = g.eval(g.breakpoints[0], deriv=k - 1)
    if top0 == 0.0:
        raise ZeroDivisionError("(k-1)st derivative vanishes at the origin")
    hi = g.breakpoints[-1]
    flat = np.atleast_1d(t)
    out = np.empty(flat.size)
    for i, ti in enumerate(flat):
        out[i] = 1.0 if ti >= hi else 1.0 - g.eval(ti, deriv=k - 1) / top0
    return out.reshape(t.shape) if t.ndim else float(out[0])
