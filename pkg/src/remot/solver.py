"""Projection solver for the constrained nearest-quantile problem.

Minimizes the squared L2(0,1) distance to a reference quantile grid over the
feasible set: mean zero, non-decreasing, increments dominated by the
reference increments, plus the risk constraints.  The solution is the
Euclidean projection of the reference grid onto that intersection, computed
with Dykstra's cyclic projection algorithm (plain alternating projection
would only find *a* feasible point, not the nearest one).

A projected-subgradient oracle with multiple starts provides an independent
low-dimensional cross-check for tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from remot.laws import QuantileGrid
from remot.risk import (
    Ball,
    ConstraintSpec,
    ConvexSetDescriptor,
    DisjunctiveHalfspaces,
    Halfspace,
    Hyperplane,
    NormCone,
    PearsonSkewnessFloor,
    SkewnessFloor,
    SupSkewnessFloor,
    to_convex_sets,
    violation,
)

VIOLATION_TOL = 1e-7
CHANGE_TOL = 1e-10


class Infeasible(RuntimeError):
    """No feasible point found; carries the best residual violation seen."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (best residual violation {residual:.3e})")
        self.residual = residual


class NotConverged(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual violation {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class Problem:
    q_M: QuantileGrid
    constraints: Tuple[ConstraintSpec, ...]
    include_mean_zero: bool = True
    include_domination: bool = True

    def __init__(self, q_M, constraints=(), include_mean_zero=True, include_domination=True):
        object.__setattr__(self, "q_M", q_M)
        object.__setattr__(self, "constraints", tuple(constraints))
        object.__setattr__(self, "include_mean_zero", include_mean_zero)
        object.__setattr__(self, "include_domination", include_domination)


@dataclass(frozen=True)
class SolveReport:
    objective: float
    iterations: int
    max_violation: float
    converged: bool
    branch_chosen: Optional[float] = None


def feasible_base_sets(q_M: QuantileGrid) -> List[ConvexSetDescriptor]:
    """Mean-zero hyperplane plus the 2(n-1) increment halfspaces of the base set."""
    n = q_M.n
    if n < 2:
        raise ValueError("need a grid with at least two cells")
    sets: List[ConvexSetDescriptor] = [Hyperplane(a=np.ones(n), b=0.0)]
    d = np.diff(q_M.values)
    for i in range(n - 1):
        a_mono = np.zeros(n)
        a_mono[i] = 1.0
        a_mono[i + 1] = -1.0
        sets.append(Halfspace(a=a_mono, b=0.0))  # q_{i+1} - q_i >= 0
        a_dom = -a_mono
        sets.append(Halfspace(a=a_dom, b=float(d[i])))  # q_{i+1} - q_i <= d_i
    return sets


# ---------------------------------------------------------------------------
# Euclidean projections
# ---------------------------------------------------------------------------


def _project_hyperplane(h: Hyperplane, q: np.ndarray) -> np.ndarray:
    a = h.a
    return q - ((a @ q - h.b) / (a @ a)) * a


def _project_halfspace(h: Halfspace, q: np.ndarray) -> np.ndarray:
    a = h.a
    excess = a @ q - h.b
    if excess <= 0.0:
        return q
    return q - (excess / (a @ a)) * a


def _project_ball(ball: Ball, q: np.ndarray) -> np.ndarray:
    diff = q - ball.center
    norm = np.linalg.norm(diff)
    if norm <= ball.radius:
        return q
    return ball.center + (ball.radius / norm) * diff


def _project_norm_cone(cone: NormCone, q: np.ndarray) -> np.ndarray:
    """Exact projection onto {q : alpha ||q - anchor|| <= a.q - b}.

    Stationarity reduces to a scalar root find in the KKT multiplier mu:
    q(mu) = anchor + max(||y|| - mu*alpha, 0) * y/||y|| with
    y = q - anchor + mu*a, and the active constraint pins mu.  The residual
    only needs three inner products, so each trial mu costs O(1).
    """
    alpha, anchor, a, b = cone.alpha, cone.anchor, cone.a, cone.b
    if alpha * np.linalg.norm(q - anchor) <= a @ q - b:
        return q
    x0 = q - anchor
    sq_x0 = float(x0 @ x0)
    ax0 = float(a @ x0)
    sq_a = float(a @ a)
    a_anchor_b = float(a @ anchor) - b

    def residual(mu: float) -> float:
        ny = math.sqrt(max(sq_x0 + 2.0 * mu * ax0 + mu * mu * sq_a, 0.0))
        r = ny - mu * alpha
        if r <= 0.0 or ny == 0.0:
            return -a_anchor_b
        scale = r / ny
        return alpha * r - scale * (ax0 + mu * sq_a) - a_anchor_b

    lo, hi = 0.0, 1.0
    grow = 0
    while residual(hi) > 0.0:
        lo, hi = hi, 2.0 * hi
        grow += 1
        if grow > 200:
            raise RuntimeError("norm cone projection failed to bracket the multiplier")
    mu = optimize.brentq(residual, lo, hi, xtol=1e-12, rtol=8.9e-16, maxiter=200)
    y = x0 + mu * a
    ny = float(np.linalg.norm(y))
    if ny <= mu * alpha or ny == 0.0:
        return anchor.copy()
    return anchor + (1.0 - mu * alpha / ny) * y


def project(desc: ConvexSetDescriptor, q) -> np.ndarray:
    """Euclidean projection of q onto a single descriptor set."""
    q = np.asarray(q, dtype=float)
    if isinstance(desc, Hyperplane):
        return _project_hyperplane(desc, q)
    if isinstance(desc, Halfspace):
        return _project_halfspace(desc, q)
    if isinstance(desc, Ball):
        return _project_ball(desc, q)
    if isinstance(desc, NormCone):
        return _project_norm_cone(desc, q)
    raise TypeError(f"cannot project onto {type(desc).__name__}")


# ---------------------------------------------------------------------------
# Dykstra machinery
# ---------------------------------------------------------------------------


class _MeanZero:
    def __init__(self, n: int):
        self.n = n

    def project(self, q):
        return q - np.mean(q)

    def violation(self, q):
        return abs(float(np.sum(q))) / math.sqrt(self.n)


class _MonotoneCone:
    """Non-decreasing grids; exact projection is isotonic regression (PAVA)."""

    def project(self, q):
        return optimize.isotonic_regression(q).x

    def violation(self, q):
        return float(np.maximum(-np.diff(q), 0.0).max(initial=0.0)) / math.sqrt(2.0)


class _DominatedIncrements:
    """Increments at most those of the reference grid.

    q_{i+1} - q_i <= d_i is equivalent to q_M - q being non-decreasing, so
    the exact projection is a reflected isotonic regression.
    """

    def __init__(self, q_M: np.ndarray):
        self.q_M = q_M
        self.d = np.diff(q_M)

    def project(self, q):
        return self.q_M - optimize.isotonic_regression(self.q_M - q).x

    def violation(self, q):
        over = np.diff(q) - self.d
        return float(np.maximum(over, 0.0).max(initial=0.0)) / math.sqrt(2.0)


class _DescriptorSet:
    def __init__(self, desc: ConvexSetDescriptor):
        self.desc = desc

    def project(self, q):
        return project(self.desc, q)

    def violation(self, q):
        return violation(self.desc, q)


def _dykstra_sets(q_M: QuantileGrid, descriptors, include_mean_zero, include_domination):
    n = q_M.n
    sets = []
    if include_mean_zero:
        sets.append(_MeanZero(n))
    if include_domination and n >= 2:
        sets.append(_MonotoneCone())
        sets.append(_DominatedIncrements(q_M.values))
    sets.extend(_DescriptorSet(d) for d in descriptors)
    return sets


def _dykstra(q_M: QuantileGrid, descriptors, include_mean_zero, include_domination,
             tol, max_iter, start=None):
    """Dykstra's algorithm; returns (point, cycles, max_violation, converged, stalled).

    stalled=True flags diverging correction vectors, the footprint of an empty
    intersection (in the inconsistent case Dykstra's corrections grow without
    bound, while iterate-change tests misfire on temporary plateaus).
    """
    sets = _dykstra_sets(q_M, descriptors, include_mean_zero, include_domination)
    if start is None:
        x = q_M.values.copy()
        corrections = [np.zeros_like(x) for _ in sets]
    else:
        # a different start is a different dual initialization of the same
        # projection-of-q_M problem: corrections absorb the discrepancy
        x = np.asarray(start, dtype=float).copy()
        corrections = [(q_M.values - x) / len(sets) for _ in sets]
    blow_up = 1e3 * (1.0 + float(np.abs(q_M.values).max()))

    cycle = 0
    while cycle < max_iter:
        cycle += 1
        x_prev = x.copy()
        for i, s in enumerate(sets):
            y = x + corrections[i]
            x = s.project(y)
            corrections[i] = y - x
        change = float(np.max(np.abs(x - x_prev))) if x.size else 0.0
        viol = max((s.violation(x) for s in sets), default=0.0)
        if viol <= tol and change <= CHANGE_TOL:
            return x, cycle, viol, True, False
        if cycle % 64 == 0:
            corr_max = max(float(np.abs(c).max()) for c in corrections)
            if corr_max > blow_up and viol > 10.0 * tol:
                return x, cycle, viol, False, True
    return x, cycle, max((s.violation(x) for s in sets), default=0.0), False, False


def _objective(q: np.ndarray, q_M: QuantileGrid) -> float:
    return float(np.mean(np.square(q - q_M.values)))


def _expand_branches(constraints: Sequence[ConstraintSpec]):
    """Cartesian expansion of disjunctive constraints into convex branches.

    Returns a list of (branch_level, constraint_tuple); branch_level is the
    chosen skewness level u (None when nothing is disjunctive).
    """
    branches = [(None, [])]
    for c in constraints:
        if isinstance(c, SupSkewnessFloor):
            new = []
            for level, cs in branches:
                for u in c.u_grid:
                    chosen = u if level is None else level
                    new.append((chosen, cs + [SkewnessFloor(u=u, k=c.k)]))
            branches = new
        else:
            branches = [(level, cs + [c]) for level, cs in branches]
    return [(level, tuple(cs)) for level, cs in branches]


def solve(
    problem: Problem,
    tol: float = 1e-8,
    max_iter: int = 200_000,
    start=None,
) -> Tuple[QuantileGrid, SolveReport]:
    """Project the reference grid onto the constrained feasible set.

    Disjunctive skewness constraints are solved branch by branch and the
    branch with the smallest objective wins (ties to the smallest level).
    The Pearson skewness denominator is refreshed by a damped outer fixed
    point (at most 10 passes).  `start` only re-seeds the iteration (the
    limit stays the projection of q_M).
    """
    q_M = problem.q_M
    pearson = [c for c in problem.constraints if isinstance(c, PearsonSkewnessFloor)]
    sigma = float(np.std(q_M.values))
    outer_passes = 10 if pearson else 1

    result = None
    for _ in range(outer_passes):
        result = _solve_branches(
            problem, sigma_fixed=sigma, tol=tol, max_iter=max_iter, start=start
        )
        if not pearson:
            break
        sigma_new = 0.5 * sigma + 0.5 * float(np.std(result[0]))
        if abs(sigma_new - sigma) <= 1e-10:
            sigma = sigma_new
            break
        sigma = sigma_new
    x, cycles, viol, branch = result
    grid = QuantileGrid(np.maximum.accumulate(x))
    report = SolveReport(
        objective=_objective(x, q_M),
        iterations=cycles,
        max_violation=viol,
        converged=viol <= VIOLATION_TOL,
        branch_chosen=branch,
    )
    return grid, report


def _solve_branches(problem: Problem, sigma_fixed: float, tol: float, max_iter: int, start=None):
    q_M = problem.q_M
    branches = _expand_branches(problem.constraints)
    best = None
    best_residual = math.inf
    total_cycles = 0
    hit_max_iter = False
    for level, cs in branches:
        descriptors = []
        for c in cs:
            descriptors.extend(to_convex_sets(c, q_M, sigma_fixed=sigma_fixed))
        x, cycles, viol, converged, stalled = _dykstra(
            q_M,
            descriptors,
            problem.include_mean_zero,
            problem.include_domination,
            tol,
            max_iter,
            start=start,
        )
        total_cycles += cycles
        best_residual = min(best_residual, viol)
        if not converged:
            hit_max_iter |= not stalled
            continue
        obj = _objective(x, q_M)
        if best is None or obj < best[1] - 1e-12:
            best = (x, obj, viol, level)
    if best is None:
        if hit_max_iter:
            raise NotConverged(
                f"no branch converged within {max_iter} cycles", best_residual
            )
        raise Infeasible("every branch reached a fixed point off the feasible set", best_residual)
    x, _, viol, level = best
    return x, total_cycles, viol, level


def variance_closed_form(q_M: QuantileGrid, k: float) -> QuantileGrid:
    """Scale the centered reference grid so its variance meets the bound.

    This is the analytic optimum under a pure variance cap: when the bound
    binds, the solution is the quota-share scaling sqrt(k / Var) of the
    centered grid; otherwise centering alone is optimal.
    """
    centered = q_M.values - np.mean(q_M.values)
    var = float(np.mean(np.square(centered)))
    if k >= var or var == 0.0:
        return QuantileGrid(centered)
    return QuantileGrid(np.sqrt(k / var) * centered)


# ---------------------------------------------------------------------------
# Independent verification oracle (tests only, n <= 16)
# ---------------------------------------------------------------------------


def _oracle_violations(q, q_M, descriptors, include_mean_zero, include_domination):
    """Max scaled residual over base and constraint sets; self-contained."""
    worst = 0.0
    n = q.size
    if include_mean_zero:
        worst = max(worst, abs(float(np.sum(q))) / math.sqrt(n))
    if include_domination:
        t = np.diff(q)
        d = np.maximum(np.diff(q_M.values), 0.0)
        worst = max(worst, float(np.maximum(-t, 0.0).max(initial=0.0)) / math.sqrt(2.0))
        worst = max(worst, float(np.maximum(t - d, 0.0).max(initial=0.0)) / math.sqrt(2.0))
    for desc in descriptors:
        worst = max(worst, violation(desc, q))
    return worst


def _oracle_subgradient(q, q_M, descriptors, include_mean_zero, include_domination, weight):
    """Subgradient of the exact-penalty objective at q."""
    n = q.size
    g = 2.0 * (q - q_M.values) / n
    if include_mean_zero:
        s = float(np.sum(q))
        if abs(s) > 0.0:
            g = g + weight * math.copysign(1.0, s) * np.ones(n) / math.sqrt(n)
    if include_domination:
        t = np.diff(q)
        d = np.maximum(np.diff(q_M.values), 0.0)
        for i in np.nonzero(-t > 0.0)[0]:
            sub = np.zeros(n)
            sub[i] = 1.0
            sub[i + 1] = -1.0
            g = g + weight * sub / math.sqrt(2.0)
        for i in np.nonzero(t - d > 0.0)[0]:
            sub = np.zeros(n)
            sub[i] = -1.0
            sub[i + 1] = 1.0
            g = g + weight * sub / math.sqrt(2.0)
    for desc in descriptors:
        if isinstance(desc, Hyperplane):
            r = float(desc.a @ q) - desc.b
            if r != 0.0:
                g = g + weight * math.copysign(1.0, r) * desc.a / np.linalg.norm(desc.a)
        elif isinstance(desc, Halfspace):
            if float(desc.a @ q) - desc.b > 0.0:
                g = g + weight * desc.a / np.linalg.norm(desc.a)
        elif isinstance(desc, Ball):
            diff = q - desc.center
            norm = float(np.linalg.norm(diff))
            if norm > desc.radius and norm > 0.0:
                g = g + weight * diff / norm
        elif isinstance(desc, NormCone):
            norm = float(np.linalg.norm(q - desc.anchor))
            if desc.alpha * norm - (float(desc.a @ q) - desc.b) > 0.0:
                grad = -desc.a.copy()
                if norm > 0.0:
                    grad = grad + desc.alpha * (q - desc.anchor) / norm
                g = g + weight * grad / (desc.alpha + np.linalg.norm(desc.a))
        else:
            raise TypeError(type(desc).__name__)
    return g


def _oracle_snap(q, q_M, descriptors, include_mean_zero, include_domination,
                 passes=4000, tol=1e-12):
    """Polyak feasibility steps: walk down each violated constraint in turn.

    Deliberately independent of the Dykstra projections: every set is handled
    by the generic step x -> x - residual * grad / ||grad||^2, which is exact
    for affine sets and linearly convergent for the rest.
    """
    x = q.copy()
    n = x.size
    d = np.maximum(np.diff(q_M.values), 0.0)
    for _ in range(passes):
        moved = 0.0
        if include_mean_zero:
            m = float(np.mean(x))
            x = x - m
            moved = max(moved, abs(m))
        if include_domination:
            for i in range(n - 1):
                t = x[i + 1] - x[i]
                tc = min(max(t, 0.0), d[i])
                if tc != t:
                    shift = 0.5 * (t - tc)
                    x[i] += shift
                    x[i + 1] -= shift
                    moved = max(moved, abs(shift))
        for desc in descriptors:
            if isinstance(desc, Halfspace):
                r = float(desc.a @ x) - desc.b
                if r > 0.0:
                    step = r / float(desc.a @ desc.a)
                    x = x - step * desc.a
                    moved = max(moved, abs(r))
            elif isinstance(desc, Ball):
                diff = x - desc.center
                norm = float(np.linalg.norm(diff))
                if norm > desc.radius:
                    x = desc.center + (desc.radius / norm) * diff
                    moved = max(moved, norm - desc.radius)
            elif isinstance(desc, NormCone):
                norm = float(np.linalg.norm(x - desc.anchor))
                r = desc.alpha * norm - (float(desc.a @ x) - desc.b)
                if r > 0.0:
                    grad = -desc.a.copy()
                    if norm > 0.0:
                        grad = grad + desc.alpha * (x - desc.anchor) / norm
                    x = x - (r / float(grad @ grad)) * grad
                    moved = max(moved, r)
            elif isinstance(desc, Hyperplane):
                r = float(desc.a @ x) - desc.b
                x = x - (r / float(desc.a @ desc.a)) * desc.a
                moved = max(moved, abs(r))
        if moved <= tol:
            break
    return x


def _oracle_ray_polish(q_feas, q_M, descriptors, include_mean_zero, include_domination):
    """Shrink a feasible point toward the reference along the ray while staying feasible."""

    def feasible(theta):
        pt = q_M.values + theta * (q_feas - q_M.values)
        return _oracle_violations(pt, q_M, descriptors, include_mean_zero, include_domination) <= 1e-11

    if feasible(0.0):
        return q_M.values.copy()
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return q_M.values + hi * (q_feas - q_M.values)


def _oracle_starts(q_M: QuantileGrid, rng: np.random.Generator, n_random: int):
    """Random perturbations plus structured candidates mimicking known contract shapes."""
    centered = q_M.values - np.mean(q_M.values)
    starts = [q_M.values.copy(), centered.copy(), np.zeros(q_M.n)]
    for s in (0.1, 0.25, 0.5, np.sqrt(0.5), 0.75, 0.9):
        starts.append(s * centered)
    for cap_level in np.linspace(0.1, 0.9, 9):
        cap = np.quantile(centered, cap_level)
        trunc = np.minimum(centered, cap)
        starts.append(trunc - np.mean(trunc))
    spread = float(np.std(centered)) + 1e-12
    for _ in range(n_random):
        starts.append(np.sort(centered + rng.normal(scale=0.5 * spread, size=q_M.n)))
    return starts


def _oracle_slsqp_polish(x0, q_M, constraints, include_mean_zero, include_domination):
    """Sequential quadratic programming polish of a candidate point.

    Independent of the projection machinery twice over: SLSQP is scipy's SQP
    implementation, and the risk constraints enter through their slack
    formulas rather than the descriptor encoding.
    """
    from remot.risk import slack_on_values

    n = q_M.n
    d = np.maximum(np.diff(q_M.values), 0.0)
    cons = []
    if include_mean_zero:
        cons.append({"type": "eq", "fun": lambda q: np.array([np.mean(q)])})
    if include_domination:
        cons.append({"type": "ineq", "fun": lambda q: np.diff(q)})
        cons.append({"type": "ineq", "fun": lambda q: d - np.diff(q)})
    for c in constraints:
        cons.append(
            {"type": "ineq", "fun": lambda q, c=c: np.array([slack_on_values(c, q, q_M)])}
        )
    res = optimize.minimize(
        lambda q: float(np.mean(np.square(q - q_M.values))),
        x0,
        jac=lambda q: 2.0 * (q - q_M.values) / n,
        method="SLSQP",
        constraints=cons,
        options={"maxiter": 400, "ftol": 1e-14},
    )
    return res.x


def oracle_solve(
    problem: Problem,
    seed: int = 0,
    n_starts: int = 50,
    total_iters: int = 1_000_000,
) -> Tuple[QuantileGrid, float]:
    """Brute-force solve by multi-start projected subgradient descent (n <= 16).

    Exact-penalty subgradient phase (weight schedule 2 -> 10 -> 50 over the
    iteration budget, diminishing steps) from random and structured starts,
    then a Polyak feasibility snap; the best candidates get an SLSQP polish
    and a bisection polish toward the reference along the feasible ray.
    Returns the best feasible point found.  Test-only machinery.
    """
    q_M = problem.q_M
    if q_M.n > 16:
        raise ValueError("oracle_solve is restricted to grids with n <= 16")
    rng = np.random.default_rng(seed)
    best_q = None
    best_obj = math.inf
    for _, cs in _expand_branches(problem.constraints):
        descriptors = []
        for c in cs:
            descriptors.extend(to_convex_sets(c, q_M))
        starts = _oracle_starts(q_M, rng, n_random=n_starts)
        iters_per_start = max(total_iters // max(len(starts), 1), 1000)
        args = (q_M, descriptors, problem.include_mean_zero, problem.include_domination)
        candidates = []
        for x0 in starts:
            x = x0.copy()
            x_best, f_best = x.copy(), math.inf
            for t in range(iters_per_start):
                frac = t / iters_per_start
                weight = 2.0 if frac < 0.3 else (10.0 if frac < 0.7 else 50.0)
                g = _oracle_subgradient(x, *args, weight=weight)
                step = min(0.5, q_M.n / (2.0 * (t + 32.0)))
                x = x - step * g
                f = _objective(x, q_M) + 50.0 * _oracle_violations(x, *args)
                if f < f_best:
                    f_best, x_best = f, x.copy()
            snapped = _oracle_snap(x_best, *args)
            if _oracle_violations(snapped, *args) <= 1e-9:
                candidates.append((_objective(snapped, q_M), snapped))
        candidates.sort(key=lambda t: t[0])
        for obj, cand in candidates[:8]:
            polished = _oracle_slsqp_polish(
                cand, q_M, cs, problem.include_mean_zero, problem.include_domination
            )
            polished = _oracle_snap(polished, *args, passes=500)
            for point in (polished, cand):
                point = _oracle_ray_polish(point, *args)
                point = _oracle_snap(point, *args, passes=200)
                if _oracle_violations(point, *args) > 1e-9:
                    continue
                obj_p = _objective(point, q_M)
                if obj_p < best_obj:
                    best_obj = obj_p
                    best_q = point
    if best_q is None:
        raise Infeasible("oracle found no feasible point in any branch", math.inf)
    return QuantileGrid(np.maximum.accumulate(best_q)), best_obj
