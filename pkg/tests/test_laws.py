"""Tests for the compound Poisson law machinery."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remot import (
    DeterministicClaims,
    EmpiricalClaims,
    ExponentialClaims,
    QuantileGrid,
    SurplusSpec,
    increment_law,
    mt_law,
    mt_quantile_grid,
    sample_paths,
)

UNIT_SPEC = SurplusSpec(intensity=1.0, horizon=1.0, claims=ExponentialClaims(1.0))


@pytest.fixture(scope="module")
def unit_paths():
    return sample_paths(UNIT_SPEC, 100_000, seed=7, record_times=[0.5, 1.0])


class TestClaimLaws:
    def test_exponential_moments(self):
        c = ExponentialClaims(rate=2.0)
        assert c.mean() == 0.5
        assert c.second_moment() == 0.5

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            ExponentialClaims(rate=0.0)
        with pytest.raises(ValueError):
            DeterministicClaims(size=-1.0)
        with pytest.raises(ValueError):
            EmpiricalClaims(samples=[])
        with pytest.raises(ValueError):
            EmpiricalClaims(samples=[1.0, -0.5])
        with pytest.raises(ValueError):
            SurplusSpec(intensity=-1.0, horizon=1.0, claims=ExponentialClaims(1.0))

    def test_drift_non_decreasing(self):
        spec = SurplusSpec(1.0, 1.0, ExponentialClaims(1.0), loading=0.2)
        t = np.linspace(0, 1, 11)
        assert np.all(np.diff(spec.drift(t)) >= 0)
        assert spec.compensator(0.5) == pytest.approx(0.5)


class TestMtLaw:
    def test_atom_closed_form(self):
        law = mt_law(UNIT_SPEC, 1.0)
        assert law.atom_top.location == pytest.approx(1.0)
        assert law.atom_top.mass == pytest.approx(0.3678794412, abs=1e-10)
        # independent check: fraction of zero-count Poisson draws
        rng = np.random.default_rng(123)
        frac = np.mean(rng.poisson(1.0, 1_000_000) == 0)
        assert law.atom_top.mass == pytest.approx(frac, abs=0.002)

    def test_mean_is_zero(self):
        assert mt_law(UNIT_SPEC, 1.0).mean == 0.0

    def test_variance_closed_form_and_monte_carlo(self):
        law = mt_law(UNIT_SPEC, 1.0)
        assert law.variance == pytest.approx(2.0, abs=1e-12)
        rng = np.random.default_rng(5)
        counts = rng.poisson(1.0, 400_000)
        sums = np.array([rng.exponential(1.0, k).sum() for k in counts])
        assert np.var(1.0 - sums) == pytest.approx(2.0, abs=0.05)

    def test_cdf_quantile_inverse_consistency(self):
        law = mt_law(UNIT_SPEC, 1.0)
        u = np.linspace(0.02, 0.6, 25)
        assert np.abs(law.cdf(law.quantile(u)) - u).max() < 1e-12

    def test_rejects_bad_time(self):
        with pytest.raises(ValueError):
            mt_law(UNIT_SPEC, 0.0)
        with pytest.raises(ValueError):
            mt_law(UNIT_SPEC, -0.3)
        with pytest.raises(ValueError):
            mt_law(UNIT_SPEC, math.nan)

    def test_series_cdf_vs_monte_carlo_dkw(self, unit_paths):
        # Dvoretzky-Kiefer-Wolfowitz band at confidence 1e-3
        law = mt_law(UNIT_SPEC, 1.0)
        m_T = unit_paths.m_at_records[:, 1]
        n = m_T.size
        eps = math.sqrt(math.log(2.0 / 1e-3) / (2.0 * n))
        xs, counts = np.unique(m_T, return_counts=True)
        ecdf = np.cumsum(counts) / n
        F = law.cdf(xs)
        # both CDFs jump at the no-claim atom, so compare left limits too
        F_left = F.copy()
        F_left[xs == law.atom_top.location] -= law.atom_top.mass
        ks = max(np.abs(F - ecdf).max(), np.abs(F_left - (ecdf - counts / n)).max())
        assert ks < eps

    def test_monte_carlo_law_deterministic_claims(self):
        spec = SurplusSpec(2.0, 1.0, DeterministicClaims(0.7))
        law = mt_law(spec, 1.0, mc_samples=200_000)
        assert law.atom_top.mass == pytest.approx(math.exp(-2.0))
        assert law.atom_top.location == pytest.approx(1.4)
        assert law.variance == pytest.approx(2.0 * 0.49)
        # lattice support: quantiles live on {1.4 - 0.7 k}
        q = law.quantile(np.linspace(0.05, 0.95, 19))
        frac = (law.atom_top.location - q) / 0.7
        assert np.abs(frac - np.round(frac)).max() < 1e-12


class TestQuantileGrid:
    def test_validation(self):
        with pytest.raises(ValueError):
            QuantileGrid([1.0, 0.0])
        with pytest.raises(ValueError):
            QuantileGrid([0.0, math.inf])

    def test_atom_entries_n8(self):
        # levels 0.6875, 0.8125, 0.9375 all exceed 1 - e^{-1} = 0.63212,
        # hence sit inside the top atom
        g = mt_quantile_grid(UNIT_SPEC, 1.0, 8)
        assert np.all(g.values[5:] == 1.0)
        assert g.values[4] < 1.0

    def test_atom_entry_count(self):
        g = mt_quantile_grid(UNIT_SPEC, 1.0, 640)
        mass = math.exp(-1.0)
        n_atom = int(np.sum(g.values == 1.0))
        assert n_atom >= math.ceil(640 * mass) - 1

    def test_monotone_any_n(self):
        g = mt_quantile_grid(UNIT_SPEC, 1.0, 2)
        assert g.values[0] <= g.values[1]

    def test_grid_mean_near_zero_n512(self):
        g = mt_quantile_grid(UNIT_SPEC, 1.0, 512)
        assert -0.01 <= g.mean() <= 0.01

    @settings(max_examples=25, deadline=None)
    @given(
        lam=st.floats(0.2, 4.0),
        rate=st.floats(0.3, 3.0),
        t=st.floats(0.1, 1.0),
        n=st.integers(2, 257),
    )
    def test_grids_non_decreasing_random_specs(self, lam, rate, t, n):
        spec = SurplusSpec(lam, 1.0, ExponentialClaims(rate))
        g = mt_quantile_grid(spec, t, n)
        assert np.all(np.diff(g.values) >= 0)


class TestIncrementLaw:
    def test_full_horizon_matches_mt_law(self):
        a = increment_law(UNIT_SPEC, 1.0)
        b = mt_law(UNIT_SPEC, 1.0)
        u = (np.arange(64) + 0.5) / 64
        assert np.array_equal(a.quantile(u), b.quantile(u))

    def test_half_time_atom(self):
        law = increment_law(UNIT_SPEC, 0.5)
        assert law.atom_top.mass == pytest.approx(0.6065306597, abs=1e-10)
        assert law.mean == 0.0

    def test_rejects_bad_duration(self):
        with pytest.raises(ValueError):
            increment_law(UNIT_SPEC, 0.0)
        with pytest.raises(ValueError):
            increment_law(UNIT_SPEC, 1.5)


class TestSamplePaths:
    def test_claim_free_fraction(self, unit_paths):
        frac = np.mean(unit_paths.jump_counts() == 0)
        assert frac == pytest.approx(math.exp(-1.0), abs=0.005)

    def test_same_seed_reproduces(self):
        a = sample_paths(UNIT_SPEC, 500, seed=11, record_times=[0.3, 1.0])
        b = sample_paths(UNIT_SPEC, 500, seed=11, record_times=[0.3, 1.0])
        assert np.array_equal(a.jump_times, b.jump_times)
        assert np.array_equal(a.claim_sizes, b.claim_sizes)
        assert np.array_equal(a.m_at_records, b.m_at_records)

    def test_terminal_mean_clt_band(self, unit_paths):
        m_T = unit_paths.m_at_records[:, 1]
        band = 3.0 * math.sqrt(2.0 / m_T.size)
        assert abs(m_T.mean()) < band

    def test_total_claims_mean(self, unit_paths):
        totals = np.add.reduceat(
            np.concatenate([unit_paths.claim_sizes, [0.0]]),
            np.minimum(unit_paths.jump_offsets[:-1], unit_paths.claim_sizes.size),
        )
        totals[unit_paths.jump_counts() == 0] = 0.0
        # Var(S_T) = lambda T E[xi^2] = 2
        se = math.sqrt(2.0 / unit_paths.n_paths)
        assert totals.mean() == pytest.approx(1.0, abs=3 * se)

    def test_jump_bookkeeping(self):
        p = sample_paths(UNIT_SPEC, 200, seed=3, record_times=[1.0])
        i = int(np.argmax(p.jump_counts() > 1))
        sl = p.jumps_of(i)
        times, sizes = p.jump_times[sl], p.claim_sizes[sl]
        assert np.all(np.diff(times) >= 0)
        assert np.allclose(p.m_before[sl] - sizes, p.m_after[sl])
        # terminal record equals compensator minus total claims
        assert p.m_at_records[i, 0] == pytest.approx(1.0 - sizes.sum())

    def test_input_validation(self):
        with pytest.raises(ValueError):
            sample_paths(UNIT_SPEC, 0, seed=1, record_times=[1.0])
        with pytest.raises(ValueError):
            sample_paths(UNIT_SPEC, 10, seed=1, record_times=[0.7, 0.3])
        with pytest.raises(ValueError):
            sample_paths(UNIT_SPEC, 10, seed=1, record_times=[0.5, 1.5])
