"""Compound Poisson surplus models and the law of the compensated claims martingale.

The surplus before reinsurance is u0 + g(t) + M_t, where M_t is the claim
compensator minus the cumulative claims.  This module gives exact (series) or
Monte Carlo representations of the law of M_t, discretized quantile grids, and
a reproducible path sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
from scipy import special

# Poisson mixture truncation: drop claim counts once the remaining tail mass
# falls below this (far under every test tolerance used downstream).
POISSON_TAIL = 1e-12

# Default Monte Carlo sample count for laws without a usable series form.
MC_LAW_SAMPLES = 1_000_000


@dataclass(frozen=True)
class ExponentialClaims:
    """Exp(rate) claim sizes; the one family with an exact series law."""

    rate: float

    def __post_init__(self):
        if not (np.isfinite(self.rate) and self.rate > 0):
            raise ValueError(f"rate must be a positive finite real, got {self.rate}")

    def mean(self) -> float:
        return 1.0 / self.rate

    def second_moment(self) -> float:
        return 2.0 / self.rate**2

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.exponential(1.0 / self.rate, size)


@dataclass(frozen=True)
class DeterministicClaims:
    """Every claim has the same positive size."""

    size: float

    def __post_init__(self):
        if not (np.isfinite(self.size) and self.size > 0):
            raise ValueError(f"size must be a positive finite real, got {self.size}")

    def mean(self) -> float:
        return self.size

    def second_moment(self) -> float:
        return self.size**2

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, self.size)


@dataclass(frozen=True)
class EmpiricalClaims:
    """Claims resampled uniformly from an observed sample."""

    samples: tuple

    def __init__(self, samples: Sequence[float]):
        arr = np.asarray(samples, dtype=float)
        if arr.size == 0:
            raise ValueError("samples must be non-empty")
        if not (np.isfinite(arr).all() and (arr > 0).all()):
            raise ValueError("all claim samples must be positive finite reals")
        object.__setattr__(self, "samples", tuple(arr.tolist()))

    def mean(self) -> float:
        return float(np.mean(self.samples))

    def second_moment(self) -> float:
        return float(np.mean(np.square(self.samples)))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(np.asarray(self.samples), size=size, replace=True)


ClaimLaw = Union[ExponentialClaims, DeterministicClaims, EmpiricalClaims]


@dataclass(frozen=True)
class SurplusSpec:
    """Parameters of the surplus model.

    intensity: claim arrival rate per unit time.
    horizon: terminal time T.
    claims: claim size law.
    loading: safety loading theta >= 0 (drift g(t) = theta * mean * intensity * t).
    initial_capital: u0 >= 0.
    surcharge_alpha: coefficient of the reinsurance premium surcharge.
    """

    intensity: float
    horizon: float
    claims: ClaimLaw
    loading: float = 0.0
    initial_capital: float = 0.0
    surcharge_alpha: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.intensity) and self.intensity > 0):
            raise ValueError("intensity must be positive and finite")
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError("horizon must be positive and finite")
        for name in ("loading", "initial_capital", "surcharge_alpha"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a non-negative finite real")

    def compensator(self, t: float) -> float:
        """Expected cumulative claims up to t (the martingale compensator level)."""
        return self.intensity * t * self.claims.mean()

    def drift(self, t) -> Union[float, np.ndarray]:
        """Premium gain in excess of expected claims: g(t) = theta * mean * lambda * t."""
        return self.loading * self.claims.mean() * self.intensity * np.asarray(t, dtype=float)


@dataclass(frozen=True, eq=False)
class QuantileGrid:
    """Quantile function discretized at midpoint levels (i - 1/2)/n, i = 1..n."""

    values: np.ndarray

    def __init__(self, values):
        arr = np.asarray(values, dtype=float)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("values must be a non-empty 1-D array")
        if not np.isfinite(arr).all():
            raise ValueError("quantile values must be finite")
        if np.any(np.diff(arr) < 0):
            raise ValueError("quantile values must be non-decreasing")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return self.values.size

    def levels(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) / self.n

    def mean(self) -> float:
        return float(np.mean(self.values))

    def variance(self) -> float:
        """Variance of the discrete law putting mass 1/n on each value."""
        return float(np.mean(np.square(self.values - np.mean(self.values))))

    def centered(self) -> "QuantileGrid":
        return QuantileGrid(self.values - np.mean(self.values))


@dataclass(frozen=True)
class Atom:
    location: float
    mass: float


@dataclass(frozen=True)
class LawSummary:
    """Law of the compensated martingale at a fixed time.

    cdf and quantile accept scalars or arrays.  atom_top is the no-claim atom
    sitting at the top of the support.  mean and variance are the exact values
    (0 and intensity * t * E[claim^2]), also when cdf/quantile are Monte Carlo
    representations.
    """

    atom_top: Atom
    cdf: Callable[[np.ndarray], np.ndarray]
    quantile: Callable[[np.ndarray], np.ndarray]
    mean: float
    variance: float


def _poisson_weights(mu: float, tail: float = POISSON_TAIL) -> np.ndarray:
    """Poisson(mu) pmf truncated at the smallest K with tail mass below `tail`."""
    weights = [math.exp(-mu)]
    cum = weights[0]
    k = 0
    while 1.0 - cum > tail:
        k += 1
        weights.append(weights[-1] * mu / k)
        cum += weights[-1]
        if k > 2000:  # only reachable for absurd mu; keep a hard stop
            break
    return np.asarray(weights)


def _compound_exp_cdf(x, mu: float, rate: float, weights: np.ndarray):
    """CDF of a compound Poisson(mu) sum of Exp(rate) claims.

    Conditional on k >= 1 claims the sum is Gamma(k, rate), so the CDF is the
    Poisson mixture of regularized lower incomplete gamma functions, plus the
    no-claim atom at zero.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape)
    pos = x >= 0
    if np.any(pos):
        xp = np.atleast_1d(x[pos])
        ks = np.arange(1, len(weights))
        # (K, m) broadcast; K stays small thanks to the tail truncation
        terms = special.gammainc(ks[:, None], rate * xp[None, :])
        out[pos] = weights[0] + weights[1:] @ terms
    return out


def _bisect_increasing(f, targets: np.ndarray, lo: float, hi: float, iters: int = 90) -> np.ndarray:
    """Vectorized bisection solving f(x) = target for a non-decreasing f."""
    lo_arr = np.full(targets.shape, lo, dtype=float)
    hi_arr = np.full(targets.shape, hi, dtype=float)
    for _ in range(iters):
        mid = 0.5 * (lo_arr + hi_arr)
        below = f(mid) < targets
        lo_arr = np.where(below, mid, lo_arr)
        hi_arr = np.where(below, hi_arr, mid)
    return 0.5 * (lo_arr + hi_arr)


def _exponential_law(spec: SurplusSpec, t: float) -> LawSummary:
    lam_t = spec.intensity * t
    rate = spec.claims.rate
    comp = spec.compensator(t)
    weights = _poisson_weights(lam_t)
    atom_mass = math.exp(-lam_t)

    def claims_cdf(x):
        return _compound_exp_cdf(x, lam_t, rate, weights)

    # Bracket for quantiles of the claim sum: grow until the truncated series
    # has exhausted all the mass it can represent.
    cdf_top = float(weights.sum())
    hi = lam_t / rate + 60.0 * (1.0 + math.sqrt(lam_t)) / rate
    while claims_cdf(np.asarray([hi]))[0] < cdf_top - 1e-13:
        hi *= 2.0

    def cdf(m):
        m_arr = np.asarray(m, dtype=float)
        scalar = m_arr.ndim == 0
        m_arr = np.atleast_1d(m_arr)
        out = np.where(m_arr >= comp, 1.0, 1.0 - claims_cdf(comp - m_arr))
        return float(out[0]) if scalar else out

    def quantile(u):
        u_arr = np.asarray(u, dtype=float)
        scalar = u_arr.ndim == 0
        u_arr = np.atleast_1d(u_arr)
        if np.any((u_arr <= 0) | (u_arr >= 1)):
            raise ValueError("quantile levels must lie in (0, 1)")
        out = np.full(u_arr.shape, comp)
        body = u_arr <= 1.0 - atom_mass
        if np.any(body):
            targets = 1.0 - u_arr[body]
            xs = _bisect_increasing(claims_cdf, targets, 0.0, hi)
            out[body] = comp - xs
        return float(out[0]) if scalar else out

    return LawSummary(
        atom_top=Atom(location=comp, mass=atom_mass),
        cdf=cdf,
        quantile=quantile,
        mean=0.0,
        variance=lam_t * spec.claims.second_moment(),
    )


def _sample_claim_sums(
    claims: ClaimLaw, lam_t: float, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw n_samples realizations of the cumulative claim sum at lam_t."""
    counts = rng.poisson(lam_t, n_samples)
    if isinstance(claims, DeterministicClaims):
        return counts * claims.size
    total = int(counts.sum())
    flat = claims.sample(rng, total)
    sums = np.zeros(n_samples)
    nonzero = counts > 0
    offsets = np.concatenate(([0], np.cumsum(counts)))[:-1]
    sums[nonzero] = np.add.reduceat(flat, offsets[nonzero])
    return sums


def _monte_carlo_law(
    spec: SurplusSpec, t: float, mc_samples: int, mc_seed: int
) -> LawSummary:
    lam_t = spec.intensity * t
    comp = spec.compensator(t)
    atom_mass = math.exp(-lam_t)
    rng = np.random.default_rng([mc_seed, 2_718_281])
    sums = _sample_claim_sums(spec.claims, lam_t, mc_samples, rng)
    m_sorted = np.sort(comp - sums)
    n = m_sorted.size

    def cdf(m):
        m_arr = np.asarray(m, dtype=float)
        scalar = m_arr.ndim == 0
        out = np.searchsorted(m_sorted, np.atleast_1d(m_arr), side="right") / n
        return float(out[0]) if scalar else out

    def quantile(u):
        u_arr = np.asarray(u, dtype=float)
        scalar = u_arr.ndim == 0
        u_arr = np.atleast_1d(u_arr)
        if np.any((u_arr <= 0) | (u_arr >= 1)):
            raise ValueError("quantile levels must lie in (0, 1)")
        idx = np.clip(np.ceil(u_arr * n).astype(int) - 1, 0, n - 1)
        out = m_sorted[idx]
        # the no-claim atom is exact even under Monte Carlo
        out[u_arr > 1.0 - atom_mass] = comp
        return float(out[0]) if scalar else out

    return LawSummary(
        atom_top=Atom(location=comp, mass=atom_mass),
        cdf=cdf,
        quantile=quantile,
        mean=0.0,
        variance=lam_t * spec.claims.second_moment(),
    )


def mt_law(
    spec: SurplusSpec,
    t: float,
    mc_samples: int = MC_LAW_SAMPLES,
    mc_seed: int = 0,
) -> LawSummary:
    """Law of M_t = intensity * t * mean_claim - S_t.

    Exponential claims use the truncated Poisson-Gamma series; deterministic
    and empirical claims fall back to Monte Carlo with `mc_samples` draws.
    """
    if not (np.isfinite(t) and 0 < t <= spec.horizon):
        raise ValueError(f"t must lie in (0, horizon], got {t}")
    if isinstance(spec.claims, ExponentialClaims):
        return _exponential_law(spec, t)
    return _monte_carlo_law(spec, t, mc_samples, mc_seed)


def increment_law(spec: SurplusSpec, s: float, **kwargs) -> LawSummary:
    """Law of M_{t+s} - M_t; equals mt_law(spec, s) by stationary independent increments."""
    if not (np.isfinite(s) and 0 < s <= spec.horizon):
        raise ValueError(f"increment duration must lie in (0, horizon], got {s}")
    return mt_law(spec, s, **kwargs)


def mt_quantile_grid(spec: SurplusSpec, t: float, n: int, **kwargs) -> QuantileGrid:
    """Quantile grid of mt_law at midpoint levels (i - 1/2)/n."""
    if n < 2:
        raise ValueError("grid size n must be at least 2")
    law = mt_law(spec, t, **kwargs)
    values = law.quantile((np.arange(n) + 0.5) / n)
    # guard against floating point wiggle from the bisection
    values = np.maximum.accumulate(values)
    return QuantileGrid(values)


@dataclass(frozen=True)
class SurplusPaths:
    """Sampled claim arrival paths with the martingale recorded along the way.

    Jump data is stored flat; path i owns the slice
    jump_offsets[i]:jump_offsets[i+1].  m_before/m_after are the martingale
    values immediately before and after each jump.
    """

    spec: SurplusSpec
    seed: int
    n_paths: int
    record_times: np.ndarray
    jump_offsets: np.ndarray
    jump_times: np.ndarray
    claim_sizes: np.ndarray
    m_before: np.ndarray
    m_after: np.ndarray
    m_at_records: np.ndarray  # shape (n_paths, len(record_times))

    def jumps_of(self, i: int) -> slice:
        return slice(self.jump_offsets[i], self.jump_offsets[i + 1])

    def jump_counts(self) -> np.ndarray:
        return np.diff(self.jump_offsets)

    def claim_totals(self) -> np.ndarray:
        """Total claims paid per path over the full horizon."""
        totals = np.zeros(self.n_paths)
        counts = self.jump_counts()
        nonzero = counts > 0
        if self.claim_sizes.size:
            totals[nonzero] = np.add.reduceat(
                self.claim_sizes, self.jump_offsets[:-1][nonzero]
            )
        return totals

    def m_terminal(self) -> np.ndarray:
        """Martingale value at the horizon for every path."""
        return self.spec.compensator(self.spec.horizon) - self.claim_totals()


def sample_paths(
    spec: SurplusSpec,
    n_paths: int,
    seed: int,
    record_times: Sequence[float],
) -> SurplusPaths:
    """Simulate compound Poisson claim paths of M on [0, horizon].

    Each path draws from its own stream keyed by (seed, path index), so the
    ensemble is independent of evaluation order.
    """
    if n_paths <= 0:
        raise ValueError("n_paths must be positive")
    rec = np.asarray(record_times, dtype=float)
    if rec.ndim != 1:
        raise ValueError("record_times must be one-dimensional")
    if np.any(np.diff(rec) < 0):
        raise ValueError("record_times must be sorted")
    if rec.size and (rec[0] < 0 or rec[-1] > spec.horizon):
        raise ValueError("record_times must lie within [0, horizon]")

    lam, T = spec.intensity, spec.horizon
    mean_claim = spec.claims.mean()
    comp_rate = lam * mean_claim

    all_times = []
    all_claims = []
    counts = np.empty(n_paths, dtype=np.int64)
    m_rec = np.empty((n_paths, rec.size))
    for i in range(n_paths):
        rng = np.random.default_rng([seed, i])
        k = rng.poisson(lam * T)
        counts[i] = k
        times = np.sort(rng.uniform(0.0, T, k))
        claims = spec.claims.sample(rng, k)
        all_times.append(times)
        all_claims.append(claims)
        if rec.size:
            paid = np.concatenate(([0.0], np.cumsum(claims)))
            idx = np.searchsorted(times, rec, side="right")
            m_rec[i] = comp_rate * rec - paid[idx]

    jump_times = np.concatenate(all_times) if all_times else np.empty(0)
    claim_sizes = np.concatenate(all_claims) if all_claims else np.empty(0)
    offsets = np.concatenate(([0], np.cumsum(counts)))

    # martingale just before each jump: compensator minus claims paid so far
    m_before = np.empty(jump_times.size)
    m_after = np.empty(jump_times.size)
    pos = 0
    for i in range(n_paths):
        k = counts[i]
        if k == 0:
            continue
        times = jump_times[pos : pos + k]
        claims = claim_sizes[pos : pos + k]
        paid_before = np.concatenate(([0.0], np.cumsum(claims)[:-1]))
        m_before[pos : pos + k] = comp_rate * times - paid_before
        m_after[pos : pos + k] = m_before[pos : pos + k] - claims
        pos += k

    return SurplusPaths(
        spec=spec,
        seed=seed,
        n_paths=n_paths,
        record_times=rec,
        jump_offsets=offsets,
        jump_times=jump_times,
        claim_sizes=claim_sizes,
        m_before=m_before,
        m_after=m_after,
        m_at_records=m_rec,
    )
