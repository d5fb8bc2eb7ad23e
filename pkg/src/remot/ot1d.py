"""One-dimensional optimal transport primitives.

Monotone rearrangement maps stored as piecewise-linear interpolants on
mid-quantile knots, the quadratic Wasserstein distance between quantile grids,
Lipschitz verification, and the structural validator for target laws reachable
from a compound Poisson martingale by a monotone map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from remot.laws import LawSummary, QuantileGrid, SurplusSpec, mt_law

# Slopes up to 1 + this tolerance count as 1-Lipschitz (discretization noise floor).
LIPSCHITZ_SLOPE_TOL = 1e-9


class NonConstantOnAtom(ValueError):
    """The target assigns non-constant quantile values across a source atom."""


@dataclass(frozen=True, eq=False)
class MonotoneMap:
    """Non-decreasing piecewise-linear map on the real line.

    Between knots the map interpolates linearly; beyond the first/last knot it
    extends with slope_left/slope_right (defaulting to the adjacent segment
    slopes, clamped to be non-negative).  Knots sharing the same x must carry
    the same y and are merged.
    """

    knots_x: np.ndarray
    knots_y: np.ndarray
    slope_left: float
    slope_right: float

    def __init__(self, knots_x, knots_y, slope_left=None, slope_right=None):
        x = np.asarray(knots_x, dtype=float)
        y = np.asarray(knots_y, dtype=float)
        if x.ndim != 1 or x.size == 0 or x.shape != y.shape:
            raise ValueError("knots_x and knots_y must be equal-length 1-D arrays")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise ValueError("knots must be finite")
        if np.any(np.diff(x) < 0) or np.any(np.diff(y) < 0):
            raise ValueError("knots must be non-decreasing in x and y")
        x, y = _merge_duplicate_knots(x, y)
        if slope_left is None:
            slope_left = _end_slope(x, y, left=True)
        if slope_right is None:
            slope_right = _end_slope(x, y, left=False)
        if slope_left < 0 or slope_right < 0:
            raise ValueError("extrapolation slopes must be non-negative")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "knots_x", x)
        object.__setattr__(self, "knots_y", y)
        object.__setattr__(self, "slope_left", float(slope_left))
        object.__setattr__(self, "slope_right", float(slope_right))

    def __call__(self, x) -> Union[float, np.ndarray]:
        x_arr = np.asarray(x, dtype=float)
        scalar = x_arr.ndim == 0
        x_arr = np.atleast_1d(x_arr)
        kx, ky = self.knots_x, self.knots_y
        out = np.interp(x_arr, kx, ky)
        lo = x_arr < kx[0]
        hi = x_arr > kx[-1]
        if np.any(lo):
            out[lo] = ky[0] + self.slope_left * (x_arr[lo] - kx[0])
        if np.any(hi):
            out[hi] = ky[-1] + self.slope_right * (x_arr[hi] - kx[-1])
        return float(out[0]) if scalar else out

    def affine_hinges(self, tol: float = 0.0):
        """Decompose into F(x) = y0 + s_left*(x - x0) + sum_j g_j * (x - k_j)_+.

        Returns (x0, y0, s_left, kinks, jumps) keeping slope jumps larger
        than tol in magnitude.  Exact at tol=0 for the piecewise-linear map
        including both extrapolation tails; a small positive tol merges
        numerically collinear segments.
        """
        x, y = self.knots_x, self.knots_y
        if x.size == 1:
            slopes_after = np.array([self.slope_right])
            slopes_before = np.array([self.slope_left])
        else:
            seg = np.diff(y) / np.diff(x)
            slopes_after = np.concatenate([seg, [self.slope_right]])
            slopes_before = np.concatenate([[self.slope_left], seg])
        jumps = slopes_after - slopes_before
        keep = np.abs(jumps) > tol
        return float(x[0]), float(y[0]), self.slope_left, x[keep].copy(), jumps[keep]


def _merge_duplicate_knots(x: np.ndarray, y: np.ndarray):
    """Collapse exactly-duplicated x knots, requiring constant y on each group."""
    if x.size < 2 or np.all(np.diff(x) > 0):
        return x.copy(), y.copy()
    # group boundaries where x strictly increases
    starts = np.concatenate(([0], np.nonzero(np.diff(x) > 0)[0] + 1))
    ends = np.concatenate((starts[1:], [x.size]))
    ymin = np.minimum.reduceat(y, starts)
    ymax = np.array([y[e - 1] for e in ends])
    spread = ymax - ymin
    tol = 1e-9 * (1.0 + np.abs(ymax))
    if np.any(spread > tol):
        raise ValueError("non-constant y values across a zero-width knot group")
    return x[starts].copy(), 0.5 * (ymin + ymax)


def _end_slope(x: np.ndarray, y: np.ndarray, left: bool) -> float:
    if x.size < 2:
        return 0.0
    if left:
        s = (y[1] - y[0]) / (x[1] - x[0])
    else:
        s = (y[-1] - y[-2]) / (x[-1] - x[-2])
    return max(float(s), 0.0)


@dataclass(frozen=True)
class QuantileTarget:
    """Target law given directly by its quantile grid."""

    grid: QuantileGrid


@dataclass(frozen=True)
class CLFormTarget:
    """Target of the reachable form: atom at x0 plus mass below it.

    rho_quantile is the quantile grid of the conditional law given that at
    least one claim occurred; atom_mass is the weight of the point mass at x0.
    """

    x0: float
    rho_quantile: QuantileGrid
    atom_mass: float

    def __post_init__(self):
        if not (0.0 < self.atom_mass < 1.0):
            raise ValueError("atom_mass must lie in (0, 1)")
        if not np.all(self.rho_quantile.values < self.x0):
            raise ValueError("all rho quantile values must lie below x0")


TargetLaw = Union[QuantileTarget, CLFormTarget]


def target_quantile(nu: TargetLaw, u: np.ndarray) -> np.ndarray:
    """Quantile function of a target law at levels u in (0, 1)."""
    u = np.asarray(u, dtype=float)
    if isinstance(nu, QuantileTarget):
        g = nu.grid
        return np.interp(u, g.levels(), g.values)
    body = u <= 1.0 - nu.atom_mass
    out = np.full(u.shape, nu.x0)
    if np.any(body):
        rho = nu.rho_quantile
        out[body] = np.interp(u[body] / (1.0 - nu.atom_mass), rho.levels(), rho.values)
    return out


def target_size(nu: TargetLaw) -> int:
    return nu.grid.n if isinstance(nu, QuantileTarget) else nu.rho_quantile.n


def brenier_map_1d(mu: LawSummary, nu: TargetLaw) -> MonotoneMap:
    """Monotone rearrangement sending mu to nu: the composition Q_nu(F_mu(x)).

    Knots sit at the mid-quantile levels of the target's grid.  Where mu has
    an atom, several knots collapse to one x; the target values there must be
    constant, otherwise no monotone transport map exists and
    NonConstantOnAtom is raised.
    """
    n = target_size(nu)
    u = (np.arange(n) + 0.5) / n
    x = np.asarray(mu.quantile(u), dtype=float)
    x = np.maximum.accumulate(x)
    y = target_quantile(nu, u)
    _check_constant_on_atoms(x, y)
    # a source top atom captured by the grid pins the map beyond it
    slope_right = 0.0 if (n >= 2 and x[-1] == x[-2]) else None
    return MonotoneMap(x, y, slope_right=slope_right)


def _check_constant_on_atoms(x: np.ndarray, y: np.ndarray) -> None:
    if x.size < 2:
        return
    dup = np.diff(x) == 0.0
    if not np.any(dup):
        return
    spread_ok = np.abs(np.diff(y)) <= 1e-9 * (1.0 + np.abs(y[1:]))
    bad = dup & ~spread_ok
    if np.any(bad):
        i = int(np.nonzero(bad)[0][0])
        raise NonConstantOnAtom(
            f"target quantile varies from {y[i]} to {y[i + 1]} across the source atom at x={x[i]}"
        )


def w2_distance(qa: QuantileGrid, qb: QuantileGrid) -> float:
    """Quadratic Wasserstein distance between two quantile grids of equal size."""
    if qa.n != qb.n:
        raise ValueError(f"grids must have equal size, got {qa.n} and {qb.n}")
    return float(np.sqrt(np.mean(np.square(qa.values - qb.values))))


def lipschitz_bound(m: MonotoneMap) -> float:
    """Largest slope of the piecewise-linear map, extrapolation included."""
    x, y = m.knots_x, m.knots_y
    bound = max(m.slope_left, m.slope_right)
    if x.size >= 2:
        seg = np.diff(y) / np.diff(x)
        bound = max(bound, float(seg.max()))
    return bound


def is_one_lipschitz(m: MonotoneMap, tol: float = LIPSCHITZ_SLOPE_TOL) -> bool:
    return lipschitz_bound(m) <= 1.0 + tol


@dataclass(frozen=True)
class CLValidation:
    ok: bool
    map: Optional[MonotoneMap]
    reason: str


def validate_cl_target(spec: SurplusSpec, nu: TargetLaw, **law_kwargs) -> CLValidation:
    """Check whether nu is reachable from law(M_T) by an increasing 1-Lipschitz map.

    Reachability requires the target to place a point mass at the top of its
    support covering the no-claim atom of M_T, the rest of the mass below it,
    and the induced monotone rearrangement to have slopes at most one.  When
    the check passes the induced map is returned.
    """
    law = mt_law(spec, spec.horizon, **law_kwargs)
    atom_mass = law.atom_top.mass
    if isinstance(nu, CLFormTarget):
        if abs(nu.atom_mass - atom_mass) > 1e-9:
            return CLValidation(
                ok=False,
                map=None,
                reason=(
                    f"target atom mass {nu.atom_mass:.12g} does not equal the "
                    f"no-claim mass exp(-lambda T) = {atom_mass:.12g}"
                ),
            )
        # rho below x0 is enforced by the CLFormTarget invariant
    try:
        f = brenier_map_1d(law, nu)
    except NonConstantOnAtom as exc:
        return CLValidation(ok=False, map=None, reason=str(exc))
    bound = lipschitz_bound(f)
    if bound > 1.0 + LIPSCHITZ_SLOPE_TOL:
        return CLValidation(
            ok=False, map=None, reason=f"induced map has Lipschitz bound {bound:.6g} > 1"
        )
    return CLValidation(ok=True, map=f, reason="")
