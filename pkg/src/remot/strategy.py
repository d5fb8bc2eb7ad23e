"""Optimal reinsurance strategies built from a terminal transport map.

Given a centered 1-Lipschitz terminal map applied to the surplus martingale,
the retained surplus martingale at time t is the conditional expectation of
the mapped terminal value.  For compound Poisson claims that conditional map
is a Poisson mixture of stop-loss transforms of the remaining claim sum,
which this module evaluates exactly (series for exponential claims, lattice
sum for deterministic ones, sorted-sample sums for empirical ones), simulates
along claim paths, and audits against its defining invariants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import special

from remot.laws import (
    DeterministicClaims,
    EmpiricalClaims,
    ExponentialClaims,
    QuantileGrid,
    SurplusPaths,
    SurplusSpec,
    _poisson_weights,
    mt_quantile_grid,
    sample_paths,
)
from remot.ot1d import MonotoneMap, lipschitz_bound
from remot.risk import surcharge

TIME_GRID_SIZE = 256
MAP_KNOTS = 2048
HERMITE_NODES = 16384
# above this many transform evaluations, switch from the exact series to a
# cubic Hermite table with exact values and derivatives at the nodes
EXACT_EVAL_LIMIT = 300_000


@dataclass(frozen=True)
class StrategySpec:
    """A reinsurance strategy: surplus model plus centered terminal map.

    q_hat and q_ref are the quantile grids of the mapped and original
    terminal martingale; they set the premium surcharge.  u0R defaults to
    target_mean - g(T) + h(T), which reproduces the optimal initial capital.
    """

    surplus: SurplusSpec
    terminal_map: MonotoneMap
    q_hat: QuantileGrid
    q_ref: QuantileGrid
    target_mean: float = 0.0
    u0R: Optional[float] = None

    def __post_init__(self):
        if lipschitz_bound(self.terminal_map) > 1.0 + 1e-7:
            raise ValueError("terminal map must be 1-Lipschitz")
        if abs(self.q_hat.mean()) > 1e-6:
            raise ValueError("terminal map must push the martingale law to mean zero")

    @classmethod
    def from_solution(
        cls,
        spec: SurplusSpec,
        q_hat: QuantileGrid,
        q_ref: QuantileGrid,
        target_mean: float = 0.0,
        u0R: Optional[float] = None,
    ) -> "StrategySpec":
        """Strategy whose terminal map carries the reference grid to q_hat."""
        terminal = MonotoneMap(
            q_ref.values,
            q_hat.values,
            slope_right=0.0 if q_ref.values[-1] == q_ref.values[-2] else None,
        )
        return cls(
            surplus=spec,
            terminal_map=terminal,
            q_hat=q_hat,
            q_ref=q_ref,
            target_mean=target_mean,
            u0R=u0R,
        )

    @classmethod
    def from_map(
        cls,
        spec: SurplusSpec,
        terminal_map: MonotoneMap,
        n: int = 640,
        target_mean: float = 0.0,
        u0R: Optional[float] = None,
        **law_kwargs,
    ) -> "StrategySpec":
        """Strategy from an explicit map; grids derived by pushforward."""
        q_ref = mt_quantile_grid(spec, spec.horizon, n, **law_kwargs)
        q_hat = QuantileGrid(np.maximum.accumulate(terminal_map(q_ref.values)))
        return cls(
            surplus=spec,
            terminal_map=terminal_map,
            q_hat=q_hat,
            q_ref=q_ref,
            target_mean=target_mean,
            u0R=u0R,
        )

    def premium_surcharge(self, t: float) -> float:
        return surcharge(self.surplus, self.q_hat, self.q_ref, t)

    def initial_capital(self) -> float:
        if self.u0R is not None:
            return self.u0R
        T = self.surplus.horizon
        return self.target_mean - float(self.surplus.drift(T)) + self.premium_surcharge(T)


# ---------------------------------------------------------------------------
# Stop-loss transform of the remaining claim sum
# ---------------------------------------------------------------------------


class _StopLossTransform:
    """phi(z) = E[(z - S)_+] and the CDF of S for a compound Poisson sum S.

    Exponential claims use the truncated Poisson-Gamma series, where each
    mixture component has the closed form z*P(G_k <= z) - (k/rate)*P(G_{k+1} <= z).
    Deterministic claims reduce to a lattice sum, empirical claims to partial
    sums of a seeded Monte Carlo sample.
    """

    def __init__(self, spec: SurplusSpec, duration: float, mc_samples: int = 100_000,
                 mc_seed: int = 0):
        self.lam_s = spec.intensity * duration
        self.mean = spec.compensator(duration)
        claims = spec.claims
        self.claims = claims
        self.weights = _poisson_weights(self.lam_s)
        if isinstance(claims, EmpiricalClaims):
            rng = np.random.default_rng([mc_seed, 31_415_926])
            counts = rng.poisson(self.lam_s, mc_samples)
            flat = claims.sample(rng, int(counts.sum()))
            sums = np.zeros(mc_samples)
            offsets = np.concatenate(([0], np.cumsum(counts)))[:-1]
            nz = counts > 0
            sums[nz] = np.add.reduceat(flat, offsets[nz])
            self._sorted = np.sort(sums)
            self._cumsum = np.concatenate(([0.0], np.cumsum(self._sorted)))

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if isinstance(self.claims, ExponentialClaims):
            return self._exp_value(z)
        if isinstance(self.claims, DeterministicClaims):
            return self._lattice_value(z)
        return self._empirical_value(z)

    def cdf(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if isinstance(self.claims, ExponentialClaims):
            rate = self.claims.rate
            out = np.zeros(z.shape)
            pos = z >= 0
            if np.any(pos):
                zp = z[pos]
                ks = np.arange(1, len(self.weights))
                out[pos] = self.weights[0] + self.weights[1:] @ special.gammainc(
                    ks[:, None], rate * zp[None, :]
                )
            return out
        if isinstance(self.claims, DeterministicClaims):
            k_max = (len(self.weights) - 1)
            ks = np.arange(0, k_max + 1)
            return (z[:, None] >= ks[None, :] * self.claims.size) @ self.weights
        return np.searchsorted(self._sorted, z, side="right") / self._sorted.size

    def _exp_value(self, z, chunk=200_000):
        rate = self.claims.rate
        out = np.zeros(z.shape)
        pos = z > 0
        idx = np.nonzero(pos)[0]
        ks = np.arange(1, len(self.weights))
        w = self.weights[1:]
        for lo in range(0, idx.size, chunk):
            sel = idx[lo : lo + chunk]
            zp = z[sel]
            p_k = special.gammainc(ks[:, None], rate * zp[None, :])
            p_k1 = special.gammainc((ks + 1)[:, None], rate * zp[None, :])
            mix = (w * (ks / rate)) @ p_k1
            out[sel] = self.weights[0] * zp + (w @ (p_k * zp[None, :])) - mix
        return out

    def _lattice_value(self, z):
        size = self.claims.size
        ks = np.arange(len(self.weights))
        return np.maximum(z[:, None] - ks[None, :] * size, 0.0) @ self.weights

    def _empirical_value(self, z):
        n = self._sorted.size
        cnt = np.searchsorted(self._sorted, z, side="right")
        return (z * cnt - self._cumsum[cnt]) / n

    def make_evaluator(self, z_max: float, exact: bool):
        """Return a fast phi evaluator valid on (-inf, z_max].

        Exponential claims optionally go through a cubic Hermite table with
        exact node values and derivatives (the CDF); everything else is
        cheap enough to stay exact.
        """
        if exact or not isinstance(self.claims, ExponentialClaims):
            return self.__call__
        n_nodes = HERMITE_NODES
        nodes = np.linspace(0.0, max(z_max, 1e-6), n_nodes)
        h = nodes[1] - nodes[0]
        vals = self(nodes)
        derivs = self.cdf(nodes)

        def evaluator(z):
            z = np.atleast_1d(np.asarray(z, dtype=float))
            out = np.zeros(z.shape)
            body = (z > 0.0) & (z <= nodes[-1])
            above = z > nodes[-1]
            if np.any(above):
                # beyond the table the expected shortfall above z is < 1e-13
                out[above] = z[above] - self.mean
            if np.any(body):
                zb = z[body]
                i = np.minimum((zb / h).astype(int), n_nodes - 2)
                u = zb / h - i
                u2 = u * u
                u3 = u2 * u
                h00 = 2 * u3 - 3 * u2 + 1
                h10 = u3 - 2 * u2 + u
                h01 = -2 * u3 + 3 * u2
                h11 = u3 - u2
                out[body] = (
                    h00 * vals[i]
                    + h10 * h * derivs[i]
                    + h01 * vals[i + 1]
                    + h11 * h * derivs[i + 1]
                )
            return out

        return evaluator


# ---------------------------------------------------------------------------
# Conditional maps
# ---------------------------------------------------------------------------

# slope jumps below this are numerical noise from the solver, not map kinks
HINGE_TOL = 1e-12


def _law_quantile_knots(spec: SurplusSpec, t: float, n: int) -> np.ndarray:
    """Approximate mid-quantile knots of the time-t martingale law.

    Knot positions only need coverage and density (map values are computed
    exactly at whatever knots are chosen), so the claim-sum CDF is tabulated
    once and inverted by interpolation instead of bisecting per level.
    """
    lam_t = spec.intensity * t
    comp = spec.compensator(t)
    levels = (np.arange(n) + 0.5) / n
    claims = spec.claims
    if isinstance(claims, ExponentialClaims):
        weights = _poisson_weights(lam_t)
        rate = claims.rate
        hi = lam_t / rate + 60.0 * (1.0 + math.sqrt(lam_t)) / rate
        xs = np.linspace(0.0, hi, 4 * n + 1)
        ks = np.arange(1, len(weights))
        cdf = weights[0] + weights[1:] @ special.gammainc(ks[:, None], rate * xs[None, :])
        s_q = np.interp(1.0 - levels, cdf, xs)
        return np.sort(comp - s_q)
    if isinstance(claims, DeterministicClaims):
        weights = _poisson_weights(lam_t)
        cum = np.cumsum(weights)
        k_q = np.searchsorted(cum, 1.0 - levels, side="left")
        return np.sort(comp - k_q * claims.size)
    transform = _StopLossTransform(spec, t)
    idx = np.clip(np.ceil((1.0 - levels) * transform._sorted.size).astype(int) - 1,
                  0, transform._sorted.size - 1)
    return np.sort(comp - transform._sorted[idx])


def expect_map_at(spec: SurplusSpec, map_: MonotoneMap, duration: float,
                  m_points: np.ndarray, exact: bool = True) -> np.ndarray:
    """E[map(m + Z)] for Z the compensated claim increment over `duration`.

    Splits the piecewise-linear map into an affine part (exact under the
    mean-zero increment) plus hinges, each integrating to a stop-loss
    transform of the remaining claim sum.
    """
    m_points = np.asarray(m_points, dtype=float)
    if duration <= 0.0:
        return map_(m_points)
    x0, y0, s_left, kinks, jumps = map_.affine_hinges(tol=HINGE_TOL)
    comp = spec.compensator(duration)
    out = y0 + s_left * (m_points - x0)
    if kinks.size:
        transform = _StopLossTransform(spec, duration)
        z = m_points[:, None] + comp - kinks[None, :]
        n_eval = z.size
        evaluator = transform.make_evaluator(
            float(z.max(initial=0.0)), exact=exact or n_eval <= EXACT_EVAL_LIMIT
        )
        chunk = max(1, 400_000 // max(kinks.size, 1))
        for lo in range(0, m_points.size, chunk):
            block = z[lo : lo + chunk]
            out[lo : lo + chunk] += evaluator(block.ravel()).reshape(block.shape) @ jumps
    return out


def _conditional_values(strategy: StrategySpec, t: float, m_points: np.ndarray,
                        exact: bool = True) -> np.ndarray:
    """E[terminal_map(m + Z)] for Z the martingale increment over (t, T]."""
    spec = strategy.surplus
    return expect_map_at(spec, strategy.terminal_map, spec.horizon - t, m_points, exact)


def conditional_map(strategy: StrategySpec, t: float, knots: int = MAP_KNOTS,
                    exact: bool = False) -> MonotoneMap:
    """The time-t retention map as a piecewise-linear interpolant.

    Knots sit at the mid-quantiles of the time-t martingale law plus the
    kink locations inherited from the terminal map; sampling a monotone
    1-Lipschitz function keeps both properties exactly.
    """
    spec = strategy.surplus
    if not 0.0 <= t <= spec.horizon:
        raise ValueError("t must lie in [0, horizon]")
    if t == spec.horizon:
        return strategy.terminal_map
    # the knot layout only needs coverage and density, so very small times
    # (including 0, where the law is degenerate) borrow a floor time's grid
    grid_t = max(t, spec.horizon * 0.005)
    m_vals = np.unique(_law_quantile_knots(spec, grid_t, knots))
    _, _, _, kinks, _ = strategy.terminal_map.affine_hinges(tol=HINGE_TOL)
    if kinks.size:
        shifted = kinks - spec.compensator(spec.horizon - t)
        shifted = shifted[(shifted > m_vals[0]) & (shifted < m_vals[-1])]
        m_vals = np.union1d(m_vals, shifted)
        # near-coincident knots amplify evaluation error into spurious
        # secant slopes; keep a minimum spacing (the top knot always stays)
        min_gap = 1e-5 * (1.0 + np.abs(m_vals))
        keep = np.ones(m_vals.size, dtype=bool)
        last = m_vals[0]
        for i in range(1, m_vals.size - 1):
            if m_vals[i] - last < min_gap[i]:
                keep[i] = False
            else:
                last = m_vals[i]
        if m_vals.size >= 2 and m_vals[-1] - last < min_gap[-1]:
            keep[np.nonzero(keep[:-1])[0][-1]] = False
        m_vals = m_vals[keep]
    f_vals = _conditional_values(strategy, t, m_vals, exact=exact)
    f_vals = np.maximum.accumulate(f_vals)
    return MonotoneMap(m_vals, f_vals)


def intermediate_quantile(strategy: StrategySpec, t: float, n: int) -> QuantileGrid:
    """Quantile grid of the retained martingale at an interior time.

    Pushforward of the time-t law through the conditional map, evaluated
    exactly at the law's mid-quantiles (linear in the terminal map).
    """
    spec = strategy.surplus
    if not 0.0 < t < spec.horizon:
        raise ValueError("t must lie strictly inside (0, horizon)")
    m_grid = mt_quantile_grid(spec, t, n)
    vals = _conditional_values(strategy, t, m_grid.values, exact=True)
    return QuantileGrid(np.maximum.accumulate(vals))


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated before/after-reinsurance paths with per-jump retention data."""

    strategy: StrategySpec
    paths: SurplusPaths
    retained: np.ndarray  # retained claim per jump, flat like paths.claim_sizes
    mr_at_records: np.ndarray  # (n_paths, n_records)
    u_at_records: np.ndarray
    ur_at_records: np.ndarray
    mr_terminal: np.ndarray  # (n_paths,)
    record_maps: tuple

    @property
    def record_times(self) -> np.ndarray:
        return self.paths.record_times


def _blend_eval(map_lo: MonotoneMap, map_hi: MonotoneMap, w_lo: np.ndarray,
                x: np.ndarray) -> np.ndarray:
    return w_lo * map_lo(x) + (1.0 - w_lo) * map_hi(x)


def simulate(
    strategy: StrategySpec,
    n_paths: int,
    seed: int,
    record_times: Sequence[float],
    time_grid_size: int = TIME_GRID_SIZE,
) -> PathEnsemble:
    """Simulate claim paths and the retained surplus they induce.

    Retention maps are precomputed on a uniform time grid and blended
    linearly between neighbouring grid times at each jump; blending two
    monotone 1-Lipschitz maps preserves both properties, so jump domination
    holds by construction.  Record times use exactly-computed maps.
    """
    spec = strategy.surplus
    T = spec.horizon
    paths = sample_paths(spec, n_paths, seed, record_times)
    rec = paths.record_times

    t_grid = np.linspace(0.0, T, time_grid_size)
    grid_maps = [conditional_map(strategy, t) for t in t_grid]
    record_maps = tuple(conditional_map(strategy, t) for t in rec)

    # per-jump retention through the blended maps, vectorized per time bin
    jump_t = paths.jump_times
    retained = np.empty(jump_t.size)
    bins = np.clip(np.searchsorted(t_grid, jump_t, side="right") - 1, 0, time_grid_size - 2)
    dt = t_grid[1] - t_grid[0]
    for b in np.unique(bins):
        sel = bins == b
        w_lo = (t_grid[b + 1] - jump_t[sel]) / dt
        before = _blend_eval(grid_maps[b], grid_maps[b + 1], w_lo, paths.m_before[sel])
        after = _blend_eval(grid_maps[b], grid_maps[b + 1], w_lo, paths.m_after[sel])
        retained[sel] = before - after

    mr_rec = np.empty_like(paths.m_at_records)
    u_rec = np.empty_like(paths.m_at_records)
    ur_rec = np.empty_like(paths.m_at_records)
    u0 = spec.initial_capital
    u0R = strategy.initial_capital()
    for j, t in enumerate(rec):
        mr_rec[:, j] = record_maps[j](paths.m_at_records[:, j])
        g_t = float(spec.drift(t))
        u_rec[:, j] = u0 + g_t + paths.m_at_records[:, j]
        ur_rec[:, j] = u0R + g_t - strategy.premium_surcharge(t) + mr_rec[:, j]

    mr_terminal = strategy.terminal_map(paths.m_terminal())

    return PathEnsemble(
        strategy=strategy,
        paths=paths,
        retained=retained,
        mr_at_records=mr_rec,
        u_at_records=u_rec,
        ur_at_records=ur_rec,
        mr_terminal=mr_terminal,
        record_maps=record_maps,
    )


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def ks_distance_grid(samples: np.ndarray, grid: QuantileGrid) -> float:
    """KS distance between an empirical sample and the discrete grid law."""
    xs, counts = np.unique(samples, return_counts=True)
    n = samples.size
    ecdf = np.cumsum(counts) / n
    F = np.searchsorted(grid.values, xs, side="right") / grid.n
    F_left = np.searchsorted(grid.values, xs, side="left") / grid.n
    return max(
        float(np.abs(F - ecdf).max()),
        float(np.abs(F_left - (ecdf - counts / n)).max()),
    )


@dataclass(frozen=True)
class DiagnosticsReport:
    record_times: np.ndarray
    martingale_drift: np.ndarray  # mean(M^R_T) - mean(M^R_t) per record time
    martingale_band: np.ndarray  # 3 standard errors of the drift estimate
    domination_violations: int
    ks_terminal: float
    ceded_mc: float  # Monte Carlo mean of sum (retained - claim)^2
    ceded_identity: float  # ||q_hat - q_ref||^2 in the L2(0,1) norm
    ceded_band: float  # 3 standard errors of the Monte Carlo mean
    lipschitz_bounds: np.ndarray

    @property
    def martingale_ok(self) -> bool:
        return bool(np.all(np.abs(self.martingale_drift) <= self.martingale_band))

    @property
    def ceded_ok(self) -> bool:
        return abs(self.ceded_mc - self.ceded_identity) <= self.ceded_band

    @property
    def lipschitz_ok(self) -> bool:
        return bool(np.all(self.lipschitz_bounds <= 1.0 + 1e-6))


def diagnostics(ensemble: PathEnsemble, strategy: StrategySpec,
                q_hat: QuantileGrid) -> DiagnosticsReport:
    """Audit an ensemble against the strategy's defining invariants.

    Checks the martingale property of the retained surplus, per-jump
    admissibility, the terminal law against q_hat, the ceded-risk identity
    (expected squared ceded jumps equal the squared transport distance), and
    the 1-Lipschitz property of every record-time map.
    """
    if ensemble.strategy is not strategy:
        raise ValueError("ensemble was produced by a different strategy")
    paths = ensemble.paths
    n = paths.n_paths

    drift = np.empty(paths.record_times.size)
    band = np.empty(paths.record_times.size)
    for j in range(paths.record_times.size):
        diff = ensemble.mr_terminal - ensemble.mr_at_records[:, j]
        drift[j] = float(np.mean(diff))
        band[j] = 3.0 * float(np.std(diff)) / math.sqrt(n)

    ceded_jump = ensemble.retained - paths.claim_sizes
    per_path = np.zeros(n)
    counts = paths.jump_counts()
    nz = counts > 0
    if ceded_jump.size:
        per_path[nz] = np.add.reduceat(ceded_jump**2, paths.jump_offsets[:-1][nz])
    ceded_mc = float(np.mean(per_path))
    ceded_band = 3.0 * float(np.std(per_path)) / math.sqrt(n)
    ceded_identity = float(np.mean((q_hat.values - strategy.q_ref.values) ** 2))

    violations = int(
        np.sum(
            (ensemble.retained < -1e-12)
            | (ensemble.retained > paths.claim_sizes + 1e-12)
        )
    )

    return DiagnosticsReport(
        record_times=paths.record_times.copy(),
        martingale_drift=drift,
        martingale_band=band,
        domination_violations=violations,
        ks_terminal=ks_distance_grid(ensemble.mr_terminal, q_hat),
        ceded_mc=ceded_mc,
        ceded_identity=ceded_identity,
        ceded_band=ceded_band,
        lipschitz_bounds=np.array([lipschitz_bound(m) for m in ensemble.record_maps]),
    )
