"""Tests for monotone rearrangement maps and 1-D Wasserstein machinery."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from remot import ExponentialClaims, QuantileGrid, SurplusSpec, mt_law, mt_quantile_grid
from remot.laws import Atom, LawSummary
from remot.ot1d import (
    CLFormTarget,
    MonotoneMap,
    NonConstantOnAtom,
    QuantileTarget,
    brenier_map_1d,
    is_one_lipschitz,
    lipschitz_bound,
    validate_cl_target,
    w2_distance,
)

UNIT_SPEC = SurplusSpec(intensity=1.0, horizon=1.0, claims=ExponentialClaims(1.0))


def gaussian_law(sigma=1.0):
    dist = stats.norm(scale=sigma)
    return LawSummary(
        atom_top=Atom(location=math.inf, mass=0.0),
        cdf=dist.cdf,
        quantile=dist.ppf,
        mean=0.0,
        variance=sigma**2,
    )


def grid_law_ks(samples: np.ndarray, grid: QuantileGrid) -> float:
    """KS distance between an empirical sample and the discrete grid law.

    The grid law puts mass 1/n on each entry; its staircase CDF and the
    empirical CDF both jump at atoms, so compare right values and left limits
    at the unique sample points.
    """
    xs, counts = np.unique(samples, return_counts=True)
    n = samples.size
    ecdf = np.cumsum(counts) / n
    F = np.searchsorted(grid.values, xs, side="right") / grid.n
    F_left = np.searchsorted(grid.values, xs, side="left") / grid.n
    return max(np.abs(F - ecdf).max(), np.abs(F_left - (ecdf - counts / n)).max())


class TestMonotoneMap:
    def test_interpolation_and_extrapolation(self):
        m = MonotoneMap([0.0, 1.0, 3.0], [0.0, 2.0, 2.5])
        assert m(0.5) == pytest.approx(1.0)
        assert m(2.0) == pytest.approx(2.25)
        # extrapolation continues the end slopes
        assert m(-1.0) == pytest.approx(-2.0)
        assert m(4.0) == pytest.approx(2.75)

    def test_explicit_flat_right_slope(self):
        m = MonotoneMap([0.0, 1.0], [0.0, 1.0], slope_right=0.0)
        assert m(5.0) == 1.0

    def test_duplicate_knots_merge(self):
        m = MonotoneMap([0.0, 1.0, 1.0, 1.0], [0.0, 2.0, 2.0, 2.0])
        assert m.knots_x.size == 2
        assert m(1.0) == 2.0

    def test_duplicate_knots_inconsistent(self):
        with pytest.raises(ValueError):
            MonotoneMap([0.0, 1.0, 1.0], [0.0, 1.0, 2.0])

    def test_affine_hinges_reconstruction(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            kx = np.sort(rng.uniform(-3, 3, 7))
            ky = np.sort(rng.uniform(-2, 2, 7))
            m = MonotoneMap(kx, ky)
            x0, y0, s_left, kinks, jumps = m.affine_hinges()
            xs = np.linspace(-5, 5, 201)
            rebuilt = y0 + s_left * (xs - x0)
            for k, g in zip(kinks, jumps):
                rebuilt += g * np.maximum(xs - k, 0.0)
            assert np.allclose(rebuilt, m(xs), atol=1e-12)

    def test_single_knot_map(self):
        m = MonotoneMap([0.0], [0.3])
        assert m(-2.0) == 0.3
        assert m(2.0) == 0.3


class TestBrenierMap:
    def test_identity_when_target_is_source(self):
        law = mt_law(UNIT_SPEC, 1.0)
        grid = mt_quantile_grid(UNIT_SPEC, 1.0, 256)
        f = brenier_map_1d(law, QuantileTarget(grid))
        assert np.allclose(f.knots_y, f.knots_x, atol=1e-12)
        xs = np.linspace(grid.values[0], grid.values[-1], 500)
        spacing = np.max(np.diff(np.unique(grid.values)))
        assert np.abs(f(xs) - xs).max() <= 2 * spacing

    def test_cl_form_constant_above_compensator(self):
        # target = law(M_T) rewritten in atom-plus-rest form; map is identity
        # below the atom and pinned at x0 = 1 beyond it
        law = mt_law(UNIT_SPEC, 1.0)
        mass = law.atom_top.mass
        n_rho = 512
        rho_levels = (np.arange(n_rho) + 0.5) / n_rho
        rho = QuantileGrid(law.quantile(rho_levels * (1.0 - mass)))
        nu = CLFormTarget(x0=1.0, rho_quantile=rho, atom_mass=mass)
        f = brenier_map_1d(law, nu)
        for x in (1.0, 1.5, 3.0, 10.0):
            assert f(x) == pytest.approx(1.0, abs=1e-12)

    def test_gaussian_affine_map(self):
        n = 512
        mu = gaussian_law(1.0)
        target = QuantileGrid(stats.norm(scale=2.0).ppf((np.arange(n) + 0.5) / n))
        f = brenier_map_1d(mu, QuantileTarget(target))
        xs = np.linspace(-2.5, 2.5, 301)
        spacing = np.max(np.diff(f.knots_x[np.abs(f.knots_x) < 3.0]))
        assert np.abs(f(xs) - 2.0 * xs).max() <= 2 * spacing

    def test_non_constant_on_atom_raises(self):
        law = mt_law(UNIT_SPEC, 1.0)
        n = 128
        strictly_increasing = QuantileGrid(stats.norm.ppf((np.arange(n) + 0.5) / n))
        with pytest.raises(NonConstantOnAtom):
            brenier_map_1d(law, QuantileTarget(strictly_increasing))

    def test_pushforward_ks(self):
        # F built from a valid target; empirical image should match the target law
        law = mt_law(UNIT_SPEC, 1.0)
        grid = mt_quantile_grid(UNIT_SPEC, 1.0, 512)
        rng = np.random.default_rng(21)
        for cap in (0.2, 0.6):
            target = QuantileGrid(np.minimum(grid.values, cap))
            f = brenier_map_1d(law, QuantileTarget(target))
            x = law.quantile(rng.uniform(1e-9, 1.0 - 1e-9, 100_000))
            assert grid_law_ks(f(x), target) <= 0.01


class TestW2Distance:
    def test_zero_iff_equal(self):
        g = mt_quantile_grid(UNIT_SPEC, 1.0, 32)
        assert w2_distance(g, g) == 0.0

    def test_point_masses(self):
        a = QuantileGrid(np.zeros(16))
        b = QuantileGrid(np.ones(16))
        assert w2_distance(a, b) == pytest.approx(1.0)

    def test_mismatched_sizes(self):
        with pytest.raises(ValueError):
            w2_distance(QuantileGrid(np.zeros(4)), QuantileGrid(np.zeros(5)))

    def test_matches_assignment_oracle_four_atoms(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = np.sort(rng.normal(size=4))
            b = np.sort(rng.normal(size=4))
            best = min(
                np.mean((a - np.asarray(perm)) ** 2)
                for perm in itertools.permutations(b)
            )
            d = w2_distance(QuantileGrid(a), QuantileGrid(b))
            assert d**2 == pytest.approx(best, abs=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_triangle_inequality(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (QuantileGrid(np.sort(rng.normal(size=12))) for _ in range(3))
        assert w2_distance(a, c) <= w2_distance(a, b) + w2_distance(b, c) + 1e-10

    def test_comonotone_coupling_is_optimal(self):
        rng = np.random.default_rng(9)
        a = np.sort(rng.normal(size=8))
        b = np.sort(rng.normal(size=8))
        d2 = w2_distance(QuantileGrid(a), QuantileGrid(b)) ** 2
        for _ in range(200):
            perm = rng.permutation(8)
            assert d2 <= np.mean((a - b[perm]) ** 2) + 1e-12


class TestLipschitz:
    def test_identity(self):
        m = MonotoneMap([-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0])
        assert lipschitz_bound(m) == pytest.approx(1.0)
        assert is_one_lipschitz(m)

    def test_quota_share(self):
        x = np.linspace(-2, 2, 9)
        m = MonotoneMap(x, 0.5 * x)
        assert lipschitz_bound(m) == pytest.approx(0.5)

    def test_variance_optimum_slope(self):
        # scaling the centered grid by sqrt(1/2) is the variance-constrained
        # optimum; the induced map is quota-share with that slope
        q_m = mt_quantile_grid(UNIT_SPEC, 1.0, 640)
        q_hat = np.sqrt(0.5) * (q_m.values - q_m.mean())
        f = MonotoneMap(q_m.values, q_hat)
        assert lipschitz_bound(f) == pytest.approx(math.sqrt(0.5), abs=1e-6)

    def test_zero_width_intervals_ignored(self):
        m = MonotoneMap([0.0, 1.0, 1.0, 2.0], [0.0, 0.5, 0.5, 2.0])
        assert lipschitz_bound(m) == pytest.approx(1.5)


class TestValidateClTarget:
    def test_law_itself_is_ok(self):
        grid = mt_quantile_grid(UNIT_SPEC, 1.0, 512)
        res = validate_cl_target(UNIT_SPEC, QuantileTarget(grid))
        assert res.ok
        assert np.allclose(res.map.knots_y, res.map.knots_x, atol=1e-12)

    def test_wrong_atom_mass_rejected(self):
        n = 64
        rho = QuantileGrid(np.linspace(-2.0, 0.5, n))
        nu = CLFormTarget(x0=1.0, rho_quantile=rho, atom_mass=0.5)
        res = validate_cl_target(UNIT_SPEC, nu)
        assert not res.ok
        assert "atom mass" in res.reason

    def test_stop_loss_pushforward_round_trip(self):
        grid = mt_quantile_grid(UNIT_SPEC, 1.0, 512)
        shift = 0.1
        cap = 0.5
        target = QuantileGrid(np.minimum(grid.values, cap) + shift)
        res = validate_cl_target(UNIT_SPEC, QuantileTarget(target))
        assert res.ok
        xs = np.linspace(-4.0, 1.0, 301)
        spacing = np.max(np.diff(np.unique(grid.values[grid.values > -4.5])))
        expected = np.minimum(xs, cap) + shift
        assert np.abs(res.map(xs) - expected).max() <= 2 * spacing

    def test_too_steep_map_rejected(self):
        grid = mt_quantile_grid(UNIT_SPEC, 1.0, 512)
        stretched = QuantileGrid(1.5 * grid.values)
        res = validate_cl_target(UNIT_SPEC, QuantileTarget(stretched))
        assert not res.ok
        assert "Lipschitz" in res.reason
