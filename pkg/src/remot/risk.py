"""Risk and moment functionals on quantile grids, and their convex encodings.

Each constraint evaluates to a signed slack (feasible iff slack >= -1e-9) and
translates into solver-facing convex set descriptors.  Quantile evaluation at
an interior level p uses the cell with 1-based index p*n (the left-continuous
generalized inverse), which requires p*n to be an integer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from remot.laws import QuantileGrid, SurplusSpec

FEASIBILITY_TOL = 1e-9

# default level grid for the supremum skewness measure: 0.025 .. 0.475
DEFAULT_SUP_SKEW_LEVELS = tuple(round(0.025 * k, 6) for k in range(1, 20))


class IncompatibleGrid(ValueError):
    """A constraint level does not land on a grid cell boundary."""


@dataclass(frozen=True)
class VarianceCap:
    """Var of the terminal martingale at most k (on mean-zero grids)."""

    k: float

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("variance bound k must be positive")


@dataclass(frozen=True)
class ValueAtRiskFloor:
    """Q(p) - alpha * ||q - q_ref||_{L2} >= c."""

    p: float
    c: float
    alpha: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass(frozen=True)
class ExpectedShortfallFloor:
    """(1/p) * integral of Q below p, minus the surcharge, at least c."""

    p: float
    c: float
    alpha: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass(frozen=True)
class SkewnessFloor:
    """Quantile skewness at level u (tail-spread asymmetry ratio) at least k."""

    u: float
    k: float

    def __post_init__(self):
        if not 0.0 < self.u < 0.5:
            raise ValueError("u must lie in (0, 1/2)")
        if not -1.0 <= self.k <= 1.0:
            raise ValueError("k must lie in [-1, 1]")


@dataclass(frozen=True)
class SupSkewnessFloor:
    """Supremum of the quantile skewness over a finite level grid at least k."""

    k: float
    u_grid: Tuple[float, ...] = DEFAULT_SUP_SKEW_LEVELS

    def __post_init__(self):
        if not -1.0 <= self.k <= 1.0:
            raise ValueError("k must lie in [-1, 1]")
        us = tuple(float(u) for u in self.u_grid)
        if len(us) == 0 or any(not 0.0 < u < 0.5 for u in us):
            raise ValueError("u_grid must be non-empty with levels in (0, 1/2)")
        if any(b <= a for a, b in zip(us, us[1:])):
            raise ValueError("u_grid must be strictly increasing")
        object.__setattr__(self, "u_grid", us)


@dataclass(frozen=True)
class PearsonSkewnessFloor:
    """Median skewness 3*(mean - median)/sigma at least k."""

    k: float


@dataclass(frozen=True)
class IntegratedSkewnessFloor:
    """(mean - median) / E|X - median| at least k."""

    k: float


@dataclass(frozen=True)
class KurtosisCap:
    """Quantile tail-spread ratio (u-spread over v-spread) at most k."""

    u: float
    v: float
    k: float

    def __post_init__(self):
        if not 0.0 < self.u < self.v < 0.5:
            raise ValueError("need 0 < u < v < 1/2")
        if not self.k > 0:
            raise ValueError("kurtosis bound k must be positive")


ConstraintSpec = Union[
    VarianceCap,
    ValueAtRiskFloor,
    ExpectedShortfallFloor,
    SkewnessFloor,
    SupSkewnessFloor,
    PearsonSkewnessFloor,
    IntegratedSkewnessFloor,
    KurtosisCap,
]


def level_index(p: float, n: int) -> int:
    """0-based index of the cell holding Q(p): 1-based ceil(p*n) with p*n integral."""
    raw = p * n
    nearest = round(raw)
    if abs(raw - nearest) > 1e-6 or nearest < 1 or nearest > n - 1:
        raise IncompatibleGrid(
            f"level {p} is incompatible with grid size {n} (p*n = {raw} not an interior integer)"
        )
    return int(nearest) - 1


def _l2(q: np.ndarray, ref: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(q - ref))))


def _need_reference(reference: Optional[QuantileGrid], n: int, alpha: float):
    if alpha == 0.0:
        return None
    if reference is None:
        raise ValueError("a reference grid is required when the surcharge alpha > 0")
    if reference.n != n:
        raise ValueError("reference grid size mismatch")
    return reference.values


def _gm_skew_slack(q: np.ndarray, u: float, k: float, n: int) -> float:
    hi = q[level_index(1.0 - u, n)]
    lo = q[level_index(u, n)]
    med = q[level_index(0.5, n)]
    den = hi - lo
    if den <= 1e-300:
        # point mass between the two levels: zero skewness by convention
        return 0.0 if k <= 0 else -1.0
    return (hi + lo - 2.0 * med) - k * den


def evaluate(
    constraint: ConstraintSpec,
    q: QuantileGrid,
    reference: Optional[QuantileGrid] = None,
) -> float:
    """Signed slack of a constraint at q; feasible iff slack >= -1e-9.

    VaR and ES constraints with a positive surcharge coefficient need the
    reference grid the surcharge is measured against.
    """
    return slack_on_values(constraint, q.values, reference)


def slack_on_values(
    constraint: ConstraintSpec,
    vals: np.ndarray,
    reference: Optional[QuantileGrid] = None,
) -> float:
    """evaluate() on a raw value array (no monotonicity validation)."""
    vals = np.asarray(vals, dtype=float)
    n = vals.size
    if isinstance(constraint, VarianceCap):
        return constraint.k - float(np.mean(np.square(vals)))
    if isinstance(constraint, ValueAtRiskFloor):
        ref = _need_reference(reference, n, constraint.alpha)
        penalty = constraint.alpha * _l2(vals, ref) if constraint.alpha else 0.0
        return float(vals[level_index(constraint.p, n)]) - penalty - constraint.c
    if isinstance(constraint, ExpectedShortfallFloor):
        ref = _need_reference(reference, n, constraint.alpha)
        m = level_index(constraint.p, n) + 1  # number of cells below p
        penalty = constraint.alpha * _l2(vals, ref) if constraint.alpha else 0.0
        return float(np.mean(vals[:m])) - penalty - constraint.c
    if isinstance(constraint, SkewnessFloor):
        return _gm_skew_slack(vals, constraint.u, constraint.k, n)
    if isinstance(constraint, SupSkewnessFloor):
        return max(_gm_skew_slack(vals, u, constraint.k, n) for u in constraint.u_grid)
    if isinstance(constraint, PearsonSkewnessFloor):
        mean = float(np.mean(vals))
        med = float(vals[level_index(0.5, n)])
        sigma = float(np.sqrt(np.mean(np.square(vals - mean))))
        return 3.0 * (mean - med) - constraint.k * sigma
    if isinstance(constraint, IntegratedSkewnessFloor):
        mean = float(np.mean(vals))
        med = float(vals[level_index(0.5, n)])
        return (mean - med) - constraint.k * float(np.mean(np.abs(vals - med)))
    if isinstance(constraint, KurtosisCap):
        outer = vals[level_index(1.0 - constraint.u, n)] - vals[level_index(constraint.u, n)]
        inner = vals[level_index(1.0 - constraint.v, n)] - vals[level_index(constraint.v, n)]
        return constraint.k * float(inner) - float(outer)
    raise TypeError(f"unknown constraint type {type(constraint).__name__}")


def surcharge(spec: SurplusSpec, q: QuantileGrid, q_ref: QuantileGrid, t: float) -> float:
    """Reinsurance premium surcharge (alpha * t / T) * ||q - q_ref||_{L2(0,1)}."""
    if q.n != q_ref.n:
        raise ValueError("grid size mismatch")
    if not 0.0 <= t <= spec.horizon:
        raise ValueError("t must lie in [0, horizon]")
    return spec.surcharge_alpha * (t / spec.horizon) * _l2(q.values, q_ref.values)


# ---------------------------------------------------------------------------
# Convex set descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Hyperplane:
    """{q : a . q = b}"""

    a: np.ndarray
    b: float


@dataclass(frozen=True, eq=False)
class Halfspace:
    """{q : a . q <= b}"""

    a: np.ndarray
    b: float


@dataclass(frozen=True, eq=False)
class Ball:
    """{q : ||q - center|| <= radius} in the plain coordinate norm."""

    center: np.ndarray
    radius: float


@dataclass(frozen=True, eq=False)
class NormCone:
    """{q : alpha * ||q - anchor|| <= a . q - b}"""

    alpha: float
    anchor: np.ndarray
    a: np.ndarray
    b: float


@dataclass(frozen=True, eq=False)
class DisjunctiveHalfspaces:
    """Union of halfspaces; feasible means belonging to at least one member."""

    members: Tuple[Halfspace, ...]
    levels: Tuple[float, ...]


ConvexSetDescriptor = Union[Hyperplane, Halfspace, Ball, NormCone, DisjunctiveHalfspaces]


def violation(desc: ConvexSetDescriptor, q: np.ndarray) -> float:
    """Scaled constraint residual; zero iff q belongs to the set."""
    if isinstance(desc, Hyperplane):
        return abs(float(desc.a @ q) - desc.b) / float(np.linalg.norm(desc.a))
    if isinstance(desc, Halfspace):
        return max(0.0, float(desc.a @ q) - desc.b) / float(np.linalg.norm(desc.a))
    if isinstance(desc, Ball):
        return max(0.0, float(np.linalg.norm(q - desc.center)) - desc.radius)
    if isinstance(desc, NormCone):
        res = desc.alpha * float(np.linalg.norm(q - desc.anchor)) - (float(desc.a @ q) - desc.b)
        return max(0.0, res) / (desc.alpha + float(np.linalg.norm(desc.a)))
    if isinstance(desc, DisjunctiveHalfspaces):
        return min(violation(h, q) for h in desc.members)
    raise TypeError(f"unknown descriptor type {type(desc).__name__}")


def _unit(n: int, idx: int) -> np.ndarray:
    e = np.zeros(n)
    e[idx] = 1.0
    return e


def _gm_skew_halfspace(u: float, k: float, n: int) -> Halfspace:
    # slack = (1-k)*q_hi + (1+k)*q_lo - 2*q_med >= 0
    a = np.zeros(n)
    a[level_index(1.0 - u, n)] -= 1.0 - k
    a[level_index(u, n)] -= 1.0 + k
    a[level_index(0.5, n)] += 2.0
    return Halfspace(a=a, b=0.0)


def to_convex_sets(
    constraint: ConstraintSpec,
    q_ref: QuantileGrid,
    sigma_fixed: Optional[float] = None,
):
    """Descriptors whose intersection (union for the disjunctive case) encodes
    the constraint on grids of size q_ref.n.

    The Pearson skewness denominator is nonlinear; its halfspace uses
    sigma_fixed (defaulting to the std of q_ref), which the solver refreshes
    in an outer fixed-point pass.  The integrated skewness halfspace is the
    exact constraint on non-decreasing grids.
    """
    n = q_ref.n
    if isinstance(constraint, VarianceCap):
        return [Ball(center=np.zeros(n), radius=float(np.sqrt(n * constraint.k)))]
    if isinstance(constraint, ValueAtRiskFloor):
        a = _unit(n, level_index(constraint.p, n))
        if constraint.alpha == 0.0:
            return [Halfspace(a=-a, b=-constraint.c)]
        return [
            NormCone(
                alpha=constraint.alpha / np.sqrt(n),
                anchor=q_ref.values.copy(),
                a=a,
                b=constraint.c,
            )
        ]
    if isinstance(constraint, ExpectedShortfallFloor):
        m = level_index(constraint.p, n) + 1
        a = np.zeros(n)
        a[:m] = 1.0 / m
        if constraint.alpha == 0.0:
            return [Halfspace(a=-a, b=-constraint.c)]
        return [
            NormCone(
                alpha=constraint.alpha / np.sqrt(n),
                anchor=q_ref.values.copy(),
                a=a,
                b=constraint.c,
            )
        ]
    if isinstance(constraint, SkewnessFloor):
        return [_gm_skew_halfspace(constraint.u, constraint.k, n)]
    if isinstance(constraint, SupSkewnessFloor):
        members = tuple(_gm_skew_halfspace(u, constraint.k, n) for u in constraint.u_grid)
        return [DisjunctiveHalfspaces(members=members, levels=constraint.u_grid)]
    if isinstance(constraint, PearsonSkewnessFloor):
        if sigma_fixed is None:
            sigma_fixed = float(np.std(q_ref.values))
        a = -3.0 * (np.full(n, 1.0 / n) - _unit(n, level_index(0.5, n)))
        return [Halfspace(a=a, b=-constraint.k * sigma_fixed)]
    if isinstance(constraint, IntegratedSkewnessFloor):
        med = level_index(0.5, n)
        # on sorted grids E|q - q_med| = (sum above - sum below)/n with the
        # median cell balancing the counts
        w = np.zeros(n)
        w[med + 1 :] = 1.0 / n
        w[:med] = -1.0 / n
        w[med] = (med - (n - med - 1)) / n
        a_slack = np.full(n, 1.0 / n) - _unit(n, med) - constraint.k * w
        return [Halfspace(a=-a_slack, b=0.0)]
    if isinstance(constraint, KurtosisCap):
        a = np.zeros(n)
        a[level_index(1.0 - constraint.u, n)] += 1.0
        a[level_index(constraint.u, n)] -= 1.0
        a[level_index(1.0 - constraint.v, n)] -= constraint.k
        a[level_index(constraint.v, n)] += constraint.k
        return [Halfspace(a=a, b=0.0)]
    raise TypeError(f"unknown constraint type {type(constraint).__name__}")
