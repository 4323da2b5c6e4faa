"""Randomized stress harness for the odd-degree Hermite interpolation bound.

The working hypothesis is that the sup-norm error of the degree 2k-1 Hermite
spline interpolant is bounded uniformly in the knot locations, with bound
2/(2k)! for the extremal perfect spline.  The harness samples knot
configurations (including adversarially clustered ones), interpolates a chosen
target on each, and records the largest sup-norm error seen.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .hermite import (
    HermiteData,
    IllConditionedError,
    hermite_interpolant,
    perfect_spline,
    sup_error,
)
from .piecewise import PiecewisePoly

__all__ = ["ConjectureReport", "conjecture_trial", "sample_knots"]

SAMPLERS = ("uniform", "dirichlet", "clustered")
TARGETS = ("perfect", "truncated", "user")


@dataclass(frozen=True)
class ConjectureReport:
    """Outcome of a batch of randomized interpolation-error trials."""

    k: int
    trials: int
    max_sup_error: float
    bound: float
    argmax_knots: np.ndarray
    violated: bool
    target: str = "perfect"
    sampler: str = "uniform"
    n_ill_conditioned: int = 0
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "trials": self.trials,
            "max_sup_error": self.max_sup_error,
            "bound": self.bound if np.isfinite(self.bound) else None,
            "argmax_knots": np.asarray(self.argmax_knots).tolist(),
            "violated": self.violated,
            "target": self.target,
            "sampler": self.sampler,
            "n_ill_conditioned": self.n_ill_conditioned,
            "seed": self.seed,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def sample_knots(rng: np.random.Generator, k: int, sampler: str) -> np.ndarray:
    """Draw a full site vector 0 = y_0 < ... < y_{2k-3} = 1."""
    m = 2 * k - 4
    if sampler == "uniform":
        interior = np.sort(rng.uniform(0.0, 1.0, size=m))
    elif sampler == "dirichlet":
        # uneven spacings: gaps from a sparse Dirichlet
        gaps = rng.dirichlet(np.full(m + 1, 0.5))
        interior = np.cumsum(gaps)[:-1]
    elif sampler == "clustered":
        # pile min(3, m) knots within 1e-4 of a random center
        interior = np.sort(rng.uniform(0.0, 1.0, size=m))
        if m >= 2:
            c = rng.uniform(0.1, 0.9)
            nclust = min(3, m)
            idx = rng.choice(m, size=nclust, replace=False)
            interior[idx] = c + rng.uniform(0.0, 1e-4, size=nclust)
            interior = np.sort(interior)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    sites = np.concatenate([[0.0], interior, [1.0]])
    # re-draw on (near-)collisions the interpolant cannot represent at all
    if np.min(np.diff(sites)) < 1e-10:
        return sample_knots(rng, k, sampler)
    return sites


def _truncated_power(k: int, t: float) -> PiecewisePoly:
    # (x - t)_+^{k-1} / (k-1)! on [0, 1]
    if not 0.0 < t < 1.0:
        raise ValueError("t must be in (0, 1)")
    deg = k - 1
    zero = np.zeros((1, deg + 1))
    bump = np.zeros((1, deg + 1))
    bump[0, deg] = 1.0 / factorial(deg)  # local basis is centered at t
    return PiecewisePoly(
        np.array([0.0, t, 1.0]), np.vstack([zero, bump]), smoothness=k - 2
    )


def conjecture_trial(
    k: int,
    sampler: str = "uniform",
    trials: int = 1000,
    grid_resolution: int = 2048,
    target: str = "perfect",
    f: PiecewisePoly | None = None,
    bound: float | None = None,
    seed: int | None = None,
    csv_path: str | None = None,
) -> ConjectureReport:
    """Sample knot configurations and track the worst interpolation error.

    ``target`` selects the interpolated function: ``"perfect"`` rebuilds the
    perfect spline on each sampled configuration (bound 2/(2k)!),
    ``"truncated"`` draws a fresh truncated power (x-t)_+^{k-1}/(k-1)! with
    t uniform on (0,1) per trial, ``"user"`` interpolates a fixed ``f``.
    Ill-conditioned trials are skipped and counted, never folded into the max.
    """
    if not 3 <= k <= 8:
        raise ValueError("k must be in 3..8")
    if sampler not in SAMPLERS:
        raise ValueError(f"sampler must be one of {SAMPLERS}")
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    if target == "user" and f is None:
        raise ValueError("target 'user' needs f")
    if bound is None:
        bound = 2.0 / factorial(2 * k) if target == "perfect" else np.inf

    streams = np.random.SeedSequence(seed).spawn(trials)
    max_err = 0.0
    argmax_knots = np.array([])
    n_ill = 0
    log_rows = []
    for trial in range(trials):
        rng = np.random.default_rng(streams[trial])
        sites = sample_knots(rng, k, sampler)
        t = np.nan
        if target == "perfect":
            fn = perfect_spline(k, sites[1:-1])
        elif target == "truncated":
            t = rng.uniform(1e-3, 1.0 - 1e-3)
            fn = _truncated_power(k, t)
        else:
            fn = f
        try:
            interp = hermite_interpolant(HermiteData.from_function(k, sites, fn))
            err, _ = sup_error(fn, interp, grid_per_interval=grid_resolution)
            cond = 0.0
        except (IllConditionedError, ValueError) as exc:
            n_ill += 1
            cond = getattr(exc, "condition", np.inf)
            err = np.nan
        if csv_path is not None:
            log_rows.append([trial, *sites.tolist(), t, err, cond])
        if np.isfinite(err) and err > max_err:
            max_err = err
            argmax_knots = sites
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["trial"] + [f"y{i}" for i in range(2 * k - 2)]
                + ["t", "sup_error", "condition"]
            )
            writer.writerows(log_rows)
    return ConjectureReport(
        k=k,
        trials=trials,
        max_sup_error=max_err,
        bound=bound,
        argmax_knots=argmax_knots,
        violated=bool(max_err > bound),
        target=target,
        sampler=sampler,
        n_ill_conditioned=n_ill,
        seed=seed,
    )
