"""Scale-mixture kernels of Beta(1, k) densities and the associated types.

A k-monotone density is a mixture g(x) = sum_i w_i * k (t_i - x)_+^{k-1} / t_i^k
over positive atoms t_i.  This module holds the kernel, the discrete mixing
measure, the sorted sample container, and exact conversion of mixtures to
piecewise polynomials.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .piecewise import MAX_K, PiecewisePoly

__all__ = [
    "MixingMeasure",
    "Sample",
    "beta_kernel",
    "mixture_density",
    "mixture_to_piecewise",
    "kernel_gram",
]


def _check_k(k: int) -> int:
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ValueError("k must be an integer >= 1")
    if k > MAX_K:
        raise ValueError(f"k = {k} exceeds the supported cap {MAX_K}")
    return int(k)


@dataclass(frozen=True)
class MixingMeasure:
    """Finite discrete measure on (0, inf).

    ``mass_constraint`` is ``"unit"`` (weights sum to one, checked to 1e-12)
    or ``"free"``.
    """

    atoms: np.ndarray
    weights: np.ndarray
    mass_constraint: str = "free"

    def __post_init__(self):
        atoms = np.atleast_1d(np.asarray(self.atoms, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if atoms.shape != weights.shape:
            raise ValueError("atoms and weights must have equal length")
        if atoms.size and not np.all(atoms > 0):
            raise ValueError("all atoms must be positive")
        if atoms.size and not np.all(np.diff(atoms) > 0):
            raise ValueError("atoms must be strictly increasing")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if self.mass_constraint not in ("unit", "free"):
            raise ValueError("mass_constraint must be 'unit' or 'free'")
        if self.mass_constraint == "unit" and abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("unit-mass measure must have weights summing to 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def cdf(self, t):
        """Right-continuous CDF of the measure (exact off atoms)."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.atoms, t, side="right")
        cum = np.concatenate([[0.0], np.cumsum(self.weights)])
        out = cum[idx]
        return float(out) if t.ndim == 0 else out


@dataclass(frozen=True)
class Sample:
    """Sorted positive observations."""

    values: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if v.size == 0:
            raise ValueError("sample must be nonempty")
        if not np.all(v > 0):
            raise ValueError("all observations must be positive")
        if np.any(np.diff(v) < 0):
            raise ValueError("values must be sorted ascending")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_data(cls, data) -> "Sample":
        return cls(np.sort(np.asarray(data, dtype=float)))

    @property
    def n(self) -> int:
        return self.values.size

    def ecdf(self, x):
        """Empirical CDF, right-continuous."""
        x = np.asarray(x, dtype=float)
        out = np.searchsorted(self.values, x, side="right") / self.n
        return float(out) if x.ndim == 0 else out


def beta_kernel(k: int, y, x):
    """Scaled Beta(1, k) density k (y - x)_+^{k-1} / y^k (broadcasting).

    For k = 1 the kernel is taken closed at x = y (value 1/y), matching the
    left-continuous Grenander convention; for k >= 2 the kernel vanishes there
    anyway.
    """
    k = _check_k(k)
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("scale y must be positive")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("x must be nonnegative")
    z = y - x
    if k == 1:
        out = np.where(z >= 0, 1.0 / y, 0.0)
    else:
        out = np.where(z > 0, k * np.maximum(z, 0.0) ** (k - 1) / y**k, 0.0)
    return float(out) if out.ndim == 0 else out


def mixture_density(mm: MixingMeasure, k: int, x):
    """Mixture density sum_i w_i * beta_kernel(k, t_i, x)."""
    k = _check_k(k)
    x = np.asarray(x, dtype=float)
    out = np.zeros(np.shape(x) if x.ndim else ())
    out = np.atleast_1d(out).astype(float)
    xa = np.atleast_1d(x)
    for t, w in zip(mm.atoms, mm.weights):
        if w:
            out += w * np.atleast_1d(beta_kernel(k, t, xa))
    return float(out[0]) if x.ndim == 0 else out


def mixture_to_piecewise(mm: MixingMeasure, k: int) -> PiecewisePoly:
    """Exact spline of degree k-1 with breakpoints at 0 and the atoms."""
    k = _check_k(k)
    if mm.atoms.size == 0:
        raise ValueError("cannot convert an empty mixing measure")
    bp = np.concatenate([[0.0], mm.atoms])
    cf = np.zeros((bp.size - 1, k))
    for i in range(bp.size - 1):
        b = bp[i]
        for t, w in zip(mm.atoms, mm.weights):
            if t <= b or w == 0.0:
                continue
            scale = w * k / t**k
            for l in range(k):
                cf[i, l] += scale * comb(k - 1, l) * (t - b) ** (k - 1 - l) * (-1.0) ** l
    return PiecewisePoly(bp, cf, smoothness=k - 2)


def kernel_gram(k: int, s, t):
    """L2 inner product of beta kernels with scales ``s`` and ``t`` (broadcasting)."""
    k = _check_k(k)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    lo = np.minimum(s, t)
    hi = np.maximum(s, t)
    # integral_0^lo (lo - u)^{k-1} (hi - u)^{k-1} du, expanded binomially
    acc = np.zeros(np.broadcast(s, t).shape)
    gap = hi - lo
    for j in range(k):
        acc += comb(k - 1, j) * gap ** (k - 1 - j) * lo ** (k + j) / (k + j)
    out = k**2 / (lo**k * hi**k) * acc
    return float(out) if out.ndim == 0 else out
