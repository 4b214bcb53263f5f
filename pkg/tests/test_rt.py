import numpy as np
import pytest

from ivrt.data import Dataset, center
from ivrt.errors import InputError, RelevanceError
from ivrt.moments import GammaWald, gamma_wald, summarize
from ivrt.rt import (
    csw_weights,
    efficiency_decomposition,
    ew_weights,
    frontier_value,
    rt_estimate,
    rt_stratified,
    variance_frontier,
)
from ivrt.sim import StarDgpSpec, star_sample
from tests.conftest import rand_pd


def constraint_scan_oracle(values, wald, target, step=1e-3):
    """Grid search over {omega in simplex: omega'wald = target} for L = 3.

    The feasible set is a line segment; start from the vertex interpolation
    between the extreme Walds and scan along the null direction.
    """
    lo, hi = int(np.argmin(wald)), int(np.argmax(wald))
    t = (target - wald[lo]) / (wald[hi] - wald[lo])
    base = np.zeros(3)
    base[lo], base[hi] = 1 - t, t
    null = np.linalg.svd(np.vstack([np.ones(3), wald]))[2][2]
    # Exact feasible range of the scan parameter, so the segment endpoints
    # (where the minimum often sits) are sampled exactly.
    s_lo, s_hi = -np.inf, np.inf
    for b, d in zip(base, null):
        if d > 1e-15:
            s_lo = max(s_lo, -b / d)
        elif d < -1e-15:
            s_hi = min(s_hi, -b / d)
    ss = np.unique(np.r_[np.arange(s_lo, s_hi, step), s_lo, s_hi])
    W = base[None, :] + ss[:, None] * null[None, :]
    W = W[(W >= -1e-12).all(axis=1)]
    return np.einsum("ij,jk,ik->i", W, values, W).min()


def _fixture(rng, n=2000, L=3):
    z = rng.integers(0, 2, (n, L)).astype(float)
    d = (rng.uniform(size=n) < 0.15 + (0.7 / L) * z.sum(axis=1)).astype(float)
    y = (2.0 + 3.0 * z[:, 0]) * d + rng.normal(size=n)
    cd = center(Dataset(y=y, d=d, z=z))
    ms = summarize(cd)
    return cd, ms, gamma_wald(cd, ms)


class TestRtEstimate:
    def test_basis_vector(self, rng):
        cd, ms, gw = _fixture(rng)
        e1 = np.eye(3)[1]
        res = rt_estimate(ms, gw, e1)
        assert res.beta == pytest.approx(ms.wald[1])
        assert res.se ** 2 * ms.n == pytest.approx(gw.values[1, 1], abs=1e-12)

    def test_simple_average(self):
        ms_like = type("MS", (), {})()
        # Direct check through the public API with constructed moments.
        gw = GammaWald(values=np.eye(2))
        from ivrt.moments import MomentSummary
        ms = MomentSummary(p=np.array([0.5, 0.5]), pi=np.array([1.0, 1.0]),
                           rho=np.array([4.0, 8.0]), gamma=np.array([0.25, 0.25]),
                           wald=np.array([4.0, 8.0]), sigma_z=np.eye(2) * 0.25,
                           n=100, g0=np.array([1.0, 2.0]))
        res = rt_estimate(ms, gw, np.array([0.5, 0.5]))
        assert res.beta == pytest.approx(6.0)

    def test_off_simplex_rejected(self, rng):
        cd, ms, gw = _fixture(rng)
        with pytest.raises(InputError):
            rt_estimate(ms, gw, np.array([0.7, 0.7, -0.4]))

    def test_variance_quadratic_reconstruction(self, rng):
        cd, ms, gw = _fixture(rng)
        e = np.eye(3)
        for l in range(3):
            for k in range(3):
                mid = 0.5 * (e[l] + e[k])
                v = float(mid @ gw.values @ mid)
                recon = 0.25 * gw.values[l, l] + 0.25 * gw.values[k, k] + 0.5 * gw.values[l, k]
                assert v == pytest.approx(recon, abs=1e-12)


class TestCanonicalWeights:
    def test_csw_normalization(self, rng):
        cd, ms, _ = _fixture(rng)
        w = csw_weights(ms)
        assert np.allclose(w, ms.gamma / ms.gamma.sum())

    def test_csw_equals_aggregate_instrument_ratio(self, rng):
        cd, ms, gw = _fixture(rng)
        res = rt_estimate(ms, gw, csw_weights(ms))
        zbar = cd.z_c.sum(axis=1)
        agg = np.mean(cd.y_c * zbar) / np.mean(cd.d_c * zbar)
        assert res.beta == pytest.approx(agg, abs=1e-10)

    def test_csw_sign_error(self, rng):
        cd, ms, _ = _fixture(rng)
        bad = summarize(cd)
        object.__setattr__(bad, "gamma", ms.gamma * np.array([1, -1, 1]))
        with pytest.raises(InputError):
            csw_weights(bad)

    def test_ew(self):
        assert np.allclose(ew_weights(2), [0.5, 0.5])
        assert np.allclose(ew_weights(1), [1.0])
        w6 = ew_weights(6)
        assert abs(w6.sum() - 1.0) < 1e-15 and len(w6) == 6


class TestFrontier:
    def test_two_instrument_unique_combination(self, rng):
        gw = GammaWald(values=rand_pd(rng, 2))
        wald = np.array([1.0, 3.0])
        curve = variance_frontier(gw, wald, grid_size=21)
        for j, b in enumerate(curve.grid):
            t = (b - 1.0) / 2.0
            assert np.allclose(curve.omega_star[j], [1 - t, t], atol=1e-8)
            w = curve.omega_star[j]
            assert curve.v_min[j] == pytest.approx(w @ gw.values @ w, abs=1e-10)

    def test_random_weights_dominate_frontier(self, rng):
        gw = GammaWald(values=rand_pd(rng, 3))
        wald = np.array([0.0, 1.0, 2.5])
        # A dense grid keeps the chord error of interpolating the convex
        # curve below the slack allowed to random points.
        curve = variance_frontier(gw, wald, grid_size=1001)
        scale = np.max(curve.v_min)
        for _ in range(200):
            w = rng.dirichlet(np.ones(3))
            v = w @ gw.values @ w
            b = w @ wald
            interp = np.interp(b, curve.grid, curve.v_min)
            assert v >= interp - 1e-6 * scale

    def test_grid_search_oracle(self, rng):
        gw = GammaWald(values=rand_pd(rng, 3))
        wald = np.array([0.0, 1.0, 2.0])
        for b in (0.4, 1.0, 1.7):
            val, w = frontier_value(gw, wald, b)
            oracle = constraint_scan_oracle(gw.values, wald, b)
            assert val == pytest.approx(oracle, abs=1e-4)
            assert val <= oracle + 1e-10  # scan can only overshoot
            assert abs(w @ wald - b) < 1e-8

    def test_convexity_on_grid(self, rng):
        gw = GammaWald(values=rand_pd(rng, 4))
        wald = np.array([0.0, 0.5, 1.5, 3.0])
        curve = variance_frontier(gw, wald)
        d2 = np.diff(curve.v_min, 2)
        assert d2.min() >= -1e-8 * np.max(curve.v_min)

    def test_endpoints_are_vertices(self, rng):
        gw = GammaWald(values=np.diag([1.0, 2.0, 3.0]))
        wald = np.array([0.0, 1.0, 2.0])
        curve = variance_frontier(gw, wald, grid_size=11)
        assert np.allclose(curve.omega_star[0], [1, 0, 0], atol=1e-9)
        assert np.allclose(curve.omega_star[-1], [0, 0, 1], atol=1e-9)


class TestEfficiencyDecomposition:
    def test_two_instruments_zero_cost(self, rng):
        gw = GammaWald(values=rand_pd(rng, 2))
        wald = np.array([1.0, 4.0])
        for _ in range(10):
            w = rng.dirichlet(np.ones(2))
            front, cost = efficiency_decomposition(w, gw, wald)
            assert cost == pytest.approx(0.0, abs=1e-8)

    def test_frontier_weights_zero_cost(self, rng):
        gw = GammaWald(values=rand_pd(rng, 3))
        wald = np.array([0.0, 1.0, 2.0])
        _, w = frontier_value(gw, wald, 0.9)
        _, cost = efficiency_decomposition(w, gw, wald)
        assert cost <= 1e-8

    def test_ew_cost_matches_grid(self, rng):
        gw = GammaWald(values=rand_pd(rng, 3))
        wald = np.array([0.0, 1.0, 2.0])
        w = ew_weights(3)
        front, cost = efficiency_decomposition(w, gw, wald)
        v_rt = w @ gw.values @ w
        assert front + cost == pytest.approx(v_rt, abs=1e-12)
        oracle = constraint_scan_oracle(gw.values, wald, float(w @ wald))
        assert front == pytest.approx(oracle, abs=1e-4)


class TestStratified:
    def _cell_dataset(self, rng, late_by_cell, n=6000):
        cells = rng.integers(0, len(late_by_cell), n)
        z = rng.integers(0, 2, (n, 2)).astype(float)
        d = (rng.uniform(size=n) < 0.2 + 0.3 * z.sum(axis=1)).astype(float)
        tau = np.array(late_by_cell)[cells]
        y = tau * d + rng.normal(size=n)
        return Dataset(y=y, d=d, z=z, cell=cells)

    def test_single_cell_reduces_to_rt(self, rng):
        ds = self._cell_dataset(rng, [2.0])
        w = np.array([0.5, 0.5])
        strat = rt_stratified(ds, w, mode="marginal")
        cd = center(Dataset(y=ds.y, d=ds.d, z=ds.z))
        ms = summarize(cd)
        plain = rt_estimate(ms, gamma_wald(cd, ms), w)
        assert strat.beta == pytest.approx(plain.beta, abs=1e-12)

    def test_marginal_is_share_weighted_average(self, rng):
        ds = self._cell_dataset(rng, [2.0, 5.0])
        w = np.array([0.5, 0.5])
        cond = rt_stratified(ds, w, mode="conditional")
        marg = rt_stratified(ds, w, mode="marginal")
        shares = [np.mean(ds.cell == c) for c in sorted(cond)]
        avg = sum(s * cond[c].beta for s, c in zip(shares, sorted(cond)))
        assert marg.beta == pytest.approx(avg, abs=1e-12)

    def test_identical_cells_small_between_term(self, rng):
        ds = self._cell_dataset(rng, [3.0, 3.0], n=60_000)
        w = np.array([0.5, 0.5])
        marg = rt_stratified(ds, w, mode="marginal")
        cond = rt_stratified(ds, w, mode="conditional")
        within = np.mean([cond[c].gamma_wald.values for c in cond], axis=0)
        between = marg.gamma_wald.values - np.einsum(
            "c,cij->ij",
            np.array([np.mean(ds.cell == c) for c in sorted(cond)]),
            np.stack([cond[c].gamma_wald.values for c in sorted(cond)]))
        assert np.max(np.abs(between)) < 0.05 * np.max(np.abs(within))

    def test_undersized_cell_rejected(self, rng):
        ds = self._cell_dataset(rng, [2.0, 5.0], n=200)
        with pytest.raises(InputError, match="cell"):
            rt_stratified(ds, np.array([0.5, 0.5]), min_cell_size=150)


class TestRtCoverageSmoke:
    def test_group_design_ew_coverage(self):
        spec = StarDgpSpec(shares=[0.5, 0.5], p=[0.5, 0.5], late=[2.0, 6.0],
                           sigma_y0_sq=[1.0, 1.0], sigma_tau_sq=[0.5, 0.5])
        hits = 0
        R = 200
        for rep in range(R):
            ds = star_sample(spec, 1500, seed=77, rep=rep)
            cd = center(ds)
            ms = summarize(cd)
            res = rt_estimate(ms, gamma_wald(cd, ms), ew_weights(2))
            hits += abs(res.beta - 4.0) <= 1.96 * res.se
        assert 0.90 <= hits / R <= 0.99
