"""Piecewise polynomials in a local power basis.

Each piece stores its coefficients about the left breakpoint (ascending
powers), which keeps the representation well conditioned for the high-degree
splines used elsewhere in the package.  Evaluation at a breakpoint returns the
right-limit value, except at the last breakpoint where the left limit is used;
``side="left"`` overrides this for step-like pieces.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

__all__ = ["PiecewisePoly"]

#: largest supported kernel order; factorials up to degree 2k stay well inside
#: double precision for k <= 8
MAX_K = 8


def _shift_poly(coeffs: np.ndarray, d: float) -> np.ndarray:
    """Re-center ascending coefficients from x0 to x0 + d."""
    n = len(coeffs)
    out = np.zeros(n)
    for i in range(n):
        ci = coeffs[i]
        if ci == 0.0:
            continue
        for j in range(i + 1):
            out[j] += ci * comb(i, j) * d ** (i - j)
    return out


@dataclass(frozen=True)
class PiecewisePoly:
    """Piecewise polynomial on a strictly increasing breakpoint grid.

    Parameters
    ----------
    breakpoints : array, shape (m+1,)
        Strictly increasing, at least two entries.
    coeffs : array, shape (m, degree+1)
        Ascending local power-basis coefficients per piece, about the left
        breakpoint of the piece.
    smoothness : int
        Derivatives 0..smoothness agree at interior breakpoints; -1 means the
        function may jump.  Checked at construction when >= 0.
    """

    breakpoints: np.ndarray
    coeffs: np.ndarray
    smoothness: int = -1

    def __post_init__(self):
        bp = np.atleast_1d(np.asarray(self.breakpoints, dtype=float))
        cf = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if bp.ndim != 1 or bp.size < 2:
            raise ValueError("need at least two breakpoints")
        if not np.all(np.diff(bp) > 0):
            raise ValueError("breakpoints must be strictly increasing")
        if cf.shape[0] != bp.size - 1:
            raise ValueError(
                f"{bp.size - 1} pieces but {cf.shape[0]} coefficient rows"
            )
        if not np.all(np.isfinite(bp)) or not np.all(np.isfinite(cf)):
            raise ValueError("non-finite breakpoints or coefficients")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "coeffs", cf)
        if self.smoothness >= 0:
            defect = self.smoothness_defect(self.smoothness)
            if defect > 1e-9:
                raise ValueError(
                    f"declared smoothness {self.smoothness} violated "
                    f"(relative defect {defect:.3e})"
                )

    # -- basic geometry ----------------------------------------------------

    @property
    def degree(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def npieces(self) -> int:
        return self.coeffs.shape[0]

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.breakpoints[0]), float(self.breakpoints[-1])

    # -- construction helpers ----------------------------------------------

    @classmethod
    def from_polynomial(cls, coeffs, interval, center=None) -> "PiecewisePoly":
        """Single-piece polynomial with ascending ``coeffs`` about ``center``."""
        a, b = float(interval[0]), float(interval[1])
        coeffs = np.asarray(coeffs, dtype=float)
        if center is None:
            center = a
        local = _shift_poly(coeffs, a - center)
        return cls(np.array([a, b]), local[None, :], smoothness=len(coeffs))

    @classmethod
    def from_scipy_ppoly(cls, pp, smoothness: int = -1) -> "PiecewisePoly":
        """Convert a ``scipy.interpolate.PPoly`` (drops zero-length pieces)."""
        x = np.asarray(pp.x, dtype=float)
        keep = np.flatnonzero(np.diff(x) > 0)
        bp = np.concatenate([x[keep], [x[keep[-1] + 1]]])
        cf = pp.c[::-1, keep].T  # descending -> ascending
        return cls(bp, np.ascontiguousarray(cf), smoothness=smoothness)

    # -- evaluation ---------------------------------------------------------

    def _piece_index(self, x: np.ndarray, side: str) -> np.ndarray:
        bp = self.breakpoints
        srch = "right" if side == "right" else "left"
        idx = np.searchsorted(bp, x, side=srch) - 1
        return np.clip(idx, 0, self.npieces - 1)

    def __call__(self, x, deriv: int = 0, side: str = "right"):
        return self.eval(x, deriv=deriv, side=side)

    def eval(self, x, deriv: int = 0, side: str = "right"):
        """Evaluate the ``deriv``-th derivative at ``x`` (inside the domain)."""
        if deriv < 0:
            raise ValueError("deriv must be >= 0")
        x_arr = np.asarray(x, dtype=float)
        scalar = x_arr.ndim == 0
        x_arr = np.atleast_1d(x_arr)
        a, b = self.domain
        tol = 1e-12 * max(1.0, abs(a), abs(b))
        if np.any(x_arr < a - tol) or np.any(x_arr > b + tol):
            raise ValueError(f"evaluation point outside domain [{a}, {b}]")
        x_arr = np.clip(x_arr, a, b)
        idx = self._piece_index(x_arr, side)
        dx = x_arr - self.breakpoints[idx]
        out = np.zeros_like(x_arr)
        if deriv <= self.degree:
            c = self.coeffs[idx]  # (npts, degree+1)
            # Horner on the deriv-th derivative coefficients
            for j in range(self.degree, deriv - 1, -1):
                fac = 1.0
                for i in range(j, j - deriv, -1):
                    fac *= i
                out = out * dx + fac * c[:, j]
        return float(out[0]) if scalar else out

    # -- calculus -----------------------------------------------------------

    def derivative(self, order: int = 1) -> "PiecewisePoly":
        if order < 0:
            raise ValueError("order must be >= 0")
        if order == 0:
            return self
        if order > self.degree:
            cf = np.zeros((self.npieces, 1))
            return PiecewisePoly(self.breakpoints, cf, smoothness=-1)
        deg = self.degree
        cf = np.zeros((self.npieces, deg - order + 1))
        for j in range(order, deg + 1):
            fac = 1.0
            for i in range(j, j - order, -1):
                fac *= i
            cf[:, j - order] = fac * self.coeffs[:, j]
        sm = max(self.smoothness - order, -1)
        return PiecewisePoly(self.breakpoints, cf, smoothness=sm)

    def antiderivative(self, order: int = 1, anchor: float | None = None) -> "PiecewisePoly":
        """Repeated antiderivative vanishing (with derivatives 0..order-1) at ``anchor``."""
        if order < 1:
            raise ValueError("order must be >= 1")
        a, b = self.domain
        if anchor is None:
            anchor = a
        if anchor < a - 1e-12 or anchor > b + 1e-12:
            raise ValueError("anchor outside domain")
        cur = self
        for _ in range(order):
            cur = cur._antiderivative_once()
        # subtract Taylor polynomial of cur at anchor up to degree order-1
        tay = np.array([cur.eval(anchor, deriv=j) / _factorial(j) for j in range(order)])
        corr = PiecewisePoly.from_polynomial(tay, self.domain, center=anchor)
        out = cur - corr
        sm = self.smoothness + order if self.smoothness >= -1 else -1
        return PiecewisePoly(out.breakpoints, out.coeffs, smoothness=min(sm, out.degree))

    def _antiderivative_once(self) -> "PiecewisePoly":
        deg = self.degree
        cf = np.zeros((self.npieces, deg + 2))
        for j in range(deg + 1):
            cf[:, j + 1] = self.coeffs[:, j] / (j + 1)
        # stitch constants for continuity, zero at the first breakpoint
        widths = np.diff(self.breakpoints)
        running = 0.0
        for i in range(self.npieces):
            cf[i, 0] = running
            running = np.polynomial.polynomial.polyval(widths[i], cf[i])
        return PiecewisePoly(self.breakpoints, cf, smoothness=-1)

    def integral(self) -> float:
        """Integral over the full domain."""
        anti = self._antiderivative_once()
        w = self.breakpoints[-1] - self.breakpoints[-2]
        return float(np.polynomial.polynomial.polyval(w, anti.coeffs[-1]))

    # -- algebra ------------------------------------------------------------

    def refine(self, breakpoints) -> "PiecewisePoly":
        """Re-express on a finer grid containing the current breakpoints."""
        new_bp = np.union1d(self.breakpoints, np.asarray(breakpoints, dtype=float))
        a, b = self.domain
        if new_bp[0] < a - 1e-12 or new_bp[-1] > b + 1e-12:
            raise ValueError("refinement grid exceeds the domain")
        idx = np.clip(np.searchsorted(self.breakpoints, new_bp[:-1], side="right") - 1,
                      0, self.npieces - 1)
        cf = np.zeros((new_bp.size - 1, self.degree + 1))
        for i, (left, piece) in enumerate(zip(new_bp[:-1], idx)):
            cf[i] = _shift_poly(self.coeffs[piece], left - self.breakpoints[piece])
        return PiecewisePoly(new_bp, cf, smoothness=self.smoothness)

    def _binary(self, other: "PiecewisePoly", sign: float) -> "PiecewisePoly":
        if not isinstance(other, PiecewisePoly):
            return NotImplemented
        sa, sb = self.domain, other.domain
        if abs(sa[0] - sb[0]) > 1e-12 * max(1, abs(sa[0])) or \
           abs(sa[1] - sb[1]) > 1e-12 * max(1, abs(sa[1])):
            raise ValueError("operands must share a common domain")
        grid = np.union1d(self.breakpoints, other.breakpoints)
        left = self.refine(grid)
        right = other.refine(grid)
        deg = max(left.degree, right.degree)
        cf = np.zeros((left.npieces, deg + 1))
        cf[:, : left.degree + 1] = left.coeffs
        cf[:, : right.degree + 1] += sign * right.coeffs
        return PiecewisePoly(grid, cf, smoothness=-1)

    def __add__(self, other):
        return self._binary(other, +1.0)

    def __sub__(self, other):
        return self._binary(other, -1.0)

    def __neg__(self):
        return PiecewisePoly(self.breakpoints, -self.coeffs, smoothness=self.smoothness)

    def __mul__(self, scalar):
        if not np.isscalar(scalar):
            return NotImplemented
        return PiecewisePoly(self.breakpoints, float(scalar) * self.coeffs,
                             smoothness=self.smoothness)

    __rmul__ = __mul__

    # -- diagnostics ---------------------------------------------------------

    def smoothness_defect(self, order: int) -> float:
        """Largest relative derivative mismatch at interior breakpoints, orders 0..order."""
        worst = 0.0
        for j in range(min(order, self.degree) + 1):
            dj = self.derivative(j) if j else self
            # evaluation with the absolute coefficients bounds the cancellation
            # in the signed sums; a mismatch below its roundoff is
            # indistinguishable from zero at this representation's precision
            mag = PiecewisePoly(dj.breakpoints, np.abs(dj.coeffs),
                                smoothness=-1)
            for bp in self.breakpoints[1:-1]:
                left = dj.eval(bp, side="left")
                right = dj.eval(bp, side="right")
                scale = max(1.0, abs(left), abs(right),
                            1e-5 * mag.eval(bp, side="left"),
                            1e-5 * mag.eval(bp, side="right"))
                worst = max(worst, abs(left - right) / scale)
        return worst


def _factorial(n: int) -> float:
    out = 1.0
    for i in range(2, n + 1):
        out *= i
    return out
