import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semtok.controller import (
    HORIZON,
    MU_GRID,
    RHO_TH_GRID,
    SNR_BINS,
    STOCHASTIC_RUNS,
    V_GRID,
    WINDOW,
    ControllerParams,
    Gamma,
    ProxyTable,
    SNRProcess,
    feasible,
    lookup,
    per_slot_argmin,
    queue_update,
    run_controller,
    tune_hyperparams,
)


def two_cell_table():
    # rho_hat = n * o_r / p with o_r = 1 (r = 0.5, d = 2) and p = 100
    acc = np.array([[[0.80], [0.90]]])
    return ProxyTable((0.5,), (0.25, 1.0), (10.0,), acc, np.array([[1.0, 10.0]]), dim=2, input_size=100)


def random_table(rng, discrete=True):
    """Random table; ``discrete`` draws from coarse sets so exact ties are common."""
    nr, na, nb = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5)
    r_grid = tuple(sorted(rng.choice([0.125, 0.25, 0.5, 0.75, 1.0], nr, replace=False)))
    a_grid = tuple(sorted(rng.choice([0.1, 0.25, 0.5, 0.75, 1.0], na, replace=False)))
    bins = tuple(sorted(rng.choice(np.arange(-20, 21, 5), nb, replace=False).astype(float)))
    if discrete:
        acc = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], (nr, na, nb))
        n = rng.choice([1.0, 2.0, 4.0], (nr, na))
    else:
        acc = rng.random((nr, na, nb))
        n = rng.uniform(1, 17, (nr, na))
    return ProxyTable(r_grid, a_grid, bins, acc, n, dim=8, input_size=256)


def brute_force(table, Z, V, snr):
    """Independent enumeration with the declared tie order."""
    bins = np.asarray(table.snr_bins)
    dist = np.abs(bins - snr)
    k = int(np.flatnonzero(dist == dist.min())[0])  # lowest bin among equidistant ones
    rows = []
    for i, r in enumerate(table.r_grid):
        o = max(1, int(round(r * table.dim)))
        for j, a in enumerate(table.alpha_grid):
            rho = table.mean_n_alpha[i, j] * o / table.input_size
            rows.append((-V * table.accuracy[i, j, k] + Z * rho, rho, r, a))
    best = sorted(rows)[0]
    return Gamma(best[2], best[3])


class TestProxyTable:
    def test_cell_count(self):
        t = ProxyTable((0.005, 0.1, 0.15, 0.25, 0.5), (0.25, 0.5, 0.75, 1.0), SNR_BINS,
                       np.zeros((5, 4, 9)), np.ones((5, 4)), 64, 3072)
        assert t.accuracy.size == 180 and len(t.cells) == 20

    def test_default_bins(self):
        assert SNR_BINS == tuple(float(v) for v in range(-20, 21, 5))

    def test_accuracy_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            ProxyTable((0.5,), (1.0,), (0.0,), np.array([[[1.5]]]), np.ones((1, 1)), 2, 10)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ProxyTable((0.5,), (1.0,), (0.0, 5.0), np.zeros((1, 1, 1)), np.ones((1, 1)), 2, 10)

    def test_csv_round_trip(self, tmp_path):
        t = random_table(np.random.default_rng(0), discrete=False)
        back = ProxyTable.from_csv(t.to_csv(tmp_path / "p.csv"), t.dim, t.input_size)
        assert back.r_grid == t.r_grid and back.alpha_grid == t.alpha_grid and back.snr_bins == t.snr_bins
        np.testing.assert_allclose(back.accuracy, t.accuracy, rtol=1e-9)
        np.testing.assert_allclose(back.mean_n_alpha, t.mean_n_alpha, rtol=1e-9)

    def test_csv_missing_cell_rejected(self, tmp_path):
        t = ProxyTable((0.5,), (0.25, 1.0), (0.0, 10.0), np.zeros((1, 2, 2)), np.ones((1, 2)), 2, 100)
        path = t.to_csv(tmp_path / "p.csv")
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ValueError):
            ProxyTable.from_csv(path, 2, 100)


class TestLookup:
    def table(self):
        acc = np.array([[[0.1, 0.2, 0.3]]])
        return ProxyTable((0.5,), (1.0,), (0.0, 5.0, 10.0), acc, np.array([[4.0]]), 2, 100)

    def test_exact_bin(self):
        assert lookup(self.table(), Gamma(0.5, 1.0), 5.0) == (0.2, 0.04)

    def test_midway_goes_low(self):
        assert lookup(self.table(), Gamma(0.5, 1.0), 7.5)[0] == 0.2
        assert lookup(self.table(), Gamma(0.5, 1.0), 2.5)[0] == 0.1

    def test_near_bins(self):
        assert lookup(self.table(), Gamma(0.5, 1.0), 7.6)[0] == 0.3

    @pytest.mark.parametrize("snr,expected", [(-40.0, 0.1), (99.0, 0.3)])
    def test_clamped_at_edges(self, snr, expected):
        assert lookup(self.table(), Gamma(0.5, 1.0), snr)[0] == expected

    def test_off_grid_rejected(self):
        with pytest.raises(KeyError):
            lookup(self.table(), Gamma(0.25, 1.0), 0.0)


class TestArgmin:
    def test_hand_enumeration(self):
        # scores -10*0.8 + 50*0.01 = -7.5 and -10*0.9 + 50*0.1 = -4.0
        assert per_slot_argmin(two_cell_table(), 50.0, 10.0, 10.0) == Gamma(0.5, 0.25)

    def test_zero_queue_maximises_accuracy(self):
        assert per_slot_argmin(two_cell_table(), 0.0, 10.0, 10.0) == Gamma(0.5, 1.0)

    def test_vanishing_weight_minimises_ratio(self):
        assert per_slot_argmin(two_cell_table(), 1.0, 1e-12, 10.0) == Gamma(0.5, 0.25)

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            per_slot_argmin(two_cell_table(), 0.0, 1.0, 0.0, cells=[])

    def test_tie_goes_to_smaller_ratio_then_r_then_alpha(self):
        acc = np.full((2, 2, 1), 0.5)
        n = np.array([[2.0, 2.0], [1.0, 1.0]])  # r=0.5 gives o=2, r=1.0 gives o=4 with d=4
        t = ProxyTable((0.5, 1.0), (0.5, 1.0), (0.0,), acc, n, 4, 100)
        # rho: (0.5, *) -> 0.04, (1.0, *) -> 0.04; all scores tie at Z = 0
        assert per_slot_argmin(t, 0.0, 1.0, 0.0) == Gamma(0.5, 0.5)

    def test_matches_brute_force_on_1000_instances(self):
        rng = np.random.default_rng(1234)
        for i in range(1000):
            table = random_table(rng, discrete=i % 2 == 0)
            Z = float(rng.choice([0.0, 1.0, 10.0, rng.uniform(0, 100)]))
            V = float(rng.choice([1.0, 10.0, rng.uniform(0.1, 100)]))
            snr = float(rng.choice([rng.uniform(-30, 30), rng.choice(np.arange(-20, 21, 5)) + 2.5]))
            assert per_slot_argmin(table, Z, V, snr) == brute_force(table, Z, V, snr), i

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0, 50), st.floats(0, 50))
    def test_more_pressure_never_raises_ratio(self, seed, z1, dz):
        table = random_table(np.random.default_rng(seed), discrete=seed % 2 == 0)
        a = per_slot_argmin(table, z1, 10.0, 0.0)
        b = per_slot_argmin(table, z1 + dz, 10.0, 0.0)
        assert table.rho_hat(b) <= table.rho_hat(a)


class TestQueue:
    def test_floored(self):
        assert queue_update(0.0, 0.02, 0.05, 10.0) == 0.0

    def test_growth(self):
        assert queue_update(1.0, 0.10, 0.05, 10.0) == pytest.approx(1.5)

    def test_fixed_point(self):
        z = 3.0
        for _ in range(100):
            z = queue_update(z, 0.05, 0.05, 10.0)
        assert z == 3.0

    def test_non_positive_step_rejected(self):
        with pytest.raises(ValueError):
            queue_update(0.0, 0.1, 0.05, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(1e-3, 1), st.floats(1e-3, 100))
    def test_never_negative(self, rhos, rho_th, mu):
        z = 0.0
        for rho in rhos:
            z = queue_update(z, rho, rho_th, mu)
            assert z >= 0


class TestRunController:
    def test_singleton_follows_recursion(self):
        t = two_cell_table()
        params = ControllerParams(V=1.0, mu=10.0, rho_th=0.05)
        trace = run_controller(t, SNRProcess(10.0), params, T=20, cells=[Gamma(0.5, 1.0)])
        expected = np.cumsum(np.full(20, 10.0 * (0.1 - 0.05)))
        np.testing.assert_allclose(trace.Z, expected, rtol=1e-12)
        np.testing.assert_array_equal(trace.alpha, 1.0)

    def test_trace_length_and_determinism(self, tmp_path):
        t = random_table(np.random.default_rng(3), discrete=False)
        params = ControllerParams(V=10.0, mu=10.0, rho_th=0.05)
        a = run_controller(t, SNRProcess(10.0, 2.5), params, T=500, rng=np.random.default_rng(0))
        b = run_controller(t, SNRProcess(10.0, 2.5), params, T=500, rng=np.random.default_rng(0))
        assert len(a) == 500
        assert a.to_csv(tmp_path / "a.csv").read_bytes() == b.to_csv(tmp_path / "b.csv").read_bytes()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([0.1, 1.0, 100.0]), st.sampled_from([1.0, 10.0]))
    def test_decisions_equal_enumeration(self, seed, V, mu):
        # the fast per-bin envelope must reproduce slot-by-slot enumeration
        r = np.random.default_rng(seed)
        table = random_table(r, discrete=seed % 2 == 0)
        rho_th = float(np.median([table.rho_hat(g) for g in table.cells]))
        trace = run_controller(table, SNRProcess(0.0, 8.0), ControllerParams(V, mu, rho_th), T=300,
                               rng=np.random.default_rng(seed))
        z = 0.0
        for t in range(300):
            g = per_slot_argmin(table, z, V, trace.snr_db[t])
            assert (g.r, g.alpha) == (trace.r[t], trace.alpha[t])
            z = queue_update(z, table.rho_hat(g), rho_th, mu)
            assert z == trace.Z[t]

    def test_queue_non_negative_and_constraint_met(self):
        t = random_table(np.random.default_rng(5), discrete=False)
        rho_th = float(np.mean([t.rho_hat(g) for g in t.cells]))
        trace = run_controller(t, SNRProcess(10.0, 2.5), ControllerParams(100.0, 10.0, rho_th), T=20_000,
                               rng=np.random.default_rng(1))
        assert trace.Z.min() >= 0
        assert trace.window_rho() <= 1.05 * rho_th
        assert trace.Z[-1] / len(trace) <= 0.01 * 10.0

    def test_bad_horizon_rejected(self):
        with pytest.raises(ValueError):
            run_controller(two_cell_table(), SNRProcess(10.0), ControllerParams(1.0, 1.0, 0.05), T=0)

    @pytest.mark.parametrize("kw", [dict(V=0, mu=1, rho_th=0.1), dict(V=1, mu=-1, rho_th=0.1),
                                    dict(V=1, mu=1, rho_th=0.0), dict(V=1, mu=1, rho_th=1.5)])
    def test_invalid_params_rejected(self, kw):
        with pytest.raises(ValueError):
            ControllerParams(**kw)


class TestTuner:
    def test_picks_accuracy_max_feasible_pair(self):
        t = two_cell_table()
        res = tune_hyperparams(t, 0.05, SNRProcess(10.0), V_grid=(0.01, 1.0), mu_grid=(1.0, 10.0), T=3000,
                               window=500)
        assert res.feasible
        feasible_rows = [g for g in res.grid if g["mean_rho"] <= 0.05]
        assert res.mean_accuracy == max(g["mean_accuracy"] for g in feasible_rows)
        assert len(res.grid) == 4

    def test_infeasible_reported(self):
        t = two_cell_table()
        assert not feasible(t, 0.005)
        res = tune_hyperparams(t, 0.005, SNRProcess(10.0), V_grid=(1.0,), mu_grid=(1.0, 10.0), T=500,
                               window=100)
        assert not res.feasible
        assert res.mean_rho == min(g["mean_rho"] for g in res.grid)

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            tune_hyperparams(two_cell_table(), 0.05, SNRProcess(10.0), V_grid=())


class TestDefaultSettings:
    def test_search_grids(self):
        assert V_GRID == (1.0, 10.0, 100.0, 1000.0, 1e4)
        assert MU_GRID == (1.0, 10.0, 100.0)

    def test_horizon_window_runs(self):
        assert (HORIZON, WINDOW, STOCHASTIC_RUNS) == (100_000, 1_000, 5)

    def test_threshold_grid(self):
        assert RHO_TH_GRID == (0.0025, 0.005, 0.01, 0.02, 0.05, 0.1)
