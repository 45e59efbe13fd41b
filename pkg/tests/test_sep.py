"""Exclusion process: exact event dynamics, journals, martingale pieces.

The mechanical layer (swaps, alias table, incremental averages) is
checked exactly against naive replays; the stochastic layer is checked
in law against a matrix-exponential marginal on a small ring.
"""

import csv
import itertools
import math

import numpy as np
import pytest
from scipy.linalg import expm

from manigrid.grids import (
    build_weights,
    graph_laplacian_apply,
    normalize_grid,
    regular_circle_cloud,
    sample_cloud,
)
from manigrid.manifolds import Circle, TestFunction
from manigrid.sep import (
    Configuration,
    EdgeTable,
    dynkin_path,
    empirical_average,
    init_bernoulli,
    martingale_report,
    qv_bound,
    replica_rngs,
    save_traces,
    simulate,
    swap,
)

TWO_PI = 2.0 * math.pi


def _chart(fid="x"):
    return TestFunction(fid, lambda p: np.asarray(p, dtype=float)[..., 0],
                        lambda p: np.zeros(np.asarray(p).shape[:-1]), 1.0)


def _cos_chart(k=1):
    return TestFunction(
        f"cos{k}",
        lambda p: np.cos(TWO_PI * k * np.asarray(p, dtype=float)[..., 0]),
        lambda p: -(TWO_PI * k) ** 2 * np.cos(TWO_PI * k * np.asarray(p, dtype=float)[..., 0]),
        TWO_PI * k,
    )


def _replay_occupancy(journal, upto):
    """Naive replay: apply journal swaps with time <= upto."""
    occ = journal.initial_occupancy.astype(np.int64).copy()
    for t, i, j in zip(journal.times, journal.site_i, journal.site_j):
        if t > upto:
            break
        occ[i], occ[j] = occ[j], occ[i]
    return occ


class TestConfiguration:
    def test_from_occupancy(self):
        c = Configuration.from_occupancy(np.array([1, 0, 1, 1]))
        assert c.particle_count == 3
        assert c.occupancy.dtype == np.uint8
        c.validate()

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            Configuration.from_occupancy(np.array([0, 2, 1]))
        with pytest.raises(ValueError):
            Configuration.from_occupancy(np.array([[0, 1], [1, 0]]))

    def test_validate_catches_drift(self):
        c = Configuration(np.array([1, 0], dtype=np.uint8), 2)
        with pytest.raises(AssertionError):
            c.validate()

    def test_swap_is_involution(self):
        c = Configuration.from_occupancy(np.array([1, 0, 0, 1]))
        d = swap(swap(c, 0, 1), 0, 1)
        np.testing.assert_array_equal(d.occupancy, c.occupancy)
        assert swap(c, 0, 1).particle_count == c.particle_count
        with pytest.raises(IndexError):
            swap(c, 0, 4)


class TestInitialization:
    def test_bernoulli_mean(self):
        _, g = regular_circle_cloud(4096)
        c = init_bernoulli(g, lambda p: np.full(p.shape[0], 0.3),
                           np.random.default_rng(81))
        se = math.sqrt(4096 * 0.3 * 0.7)
        assert abs(c.particle_count - 0.3 * 4096) < 4 * se

    def test_profile_range_enforced(self):
        _, g = regular_circle_cloud(8)
        with pytest.raises(ValueError):
            init_bernoulli(g, lambda p: np.full(p.shape[0], 1.5),
                           np.random.default_rng(82))
        with pytest.raises(ValueError):
            init_bernoulli(g, lambda p: np.full(3, 0.5), np.random.default_rng(82))

    def test_accepts_test_function(self):
        _, g = regular_circle_cloud(32)
        profile = TestFunction("half", lambda p: np.full(np.asarray(p).shape[:-1], 0.5),
                               lambda p: np.zeros(np.asarray(p).shape[:-1]), 0.0)
        c = init_bernoulli(g, profile, np.random.default_rng(83))
        c.validate()

    def test_empirical_average_by_hand(self):
        _, g = regular_circle_cloud(4)
        c = Configuration.from_occupancy(np.array([1, 0, 1, 0]))
        # sites at 0, 1/4, 1/2, 3/4: mu(x) = (0 + 0.5) / 4
        assert empirical_average(c, g, _chart()) == pytest.approx(0.125, abs=1e-15)


class TestEdgeTable:
    def test_total_rate(self):
        _, g = regular_circle_cloud(16)
        table = EdgeTable.from_grid(g)
        # 16 unit edges at rate a = 256 each
        assert table.rate.size == 16
        assert table.total_rate == pytest.approx(16 * 256.0, abs=1e-9)

    def test_alias_frequencies(self):
        cloud = sample_cloud(Circle(), 12, seed=84)
        g = normalize_grid(build_weights(cloud, 1.0))
        table = EdgeTable.from_grid(g)
        u = np.random.default_rng(85).random(200_000)
        idx = table.sample(u)
        counts = np.bincount(idx, minlength=table.rate.size)
        probs = table.rate / table.total_rate
        for k in range(table.rate.size):
            se = math.sqrt(probs[k] * (1 - probs[k]) / 200_000)
            assert abs(counts[k] / 200_000 - probs[k]) < 4 * se + 1e-9

    def test_configuration_space_generator_is_symmetric(self):
        # swap rates depend only on the edge, so the jump generator on
        # occupancy space is symmetric and the uniform law on every
        # particle-number sector is stationary
        cloud = sample_cloud(Circle(), 3, seed=86)
        g = normalize_grid(build_weights(cloud, 6.0))
        table = EdgeTable.from_grid(g)
        assert table.rate.size == 3
        configs = list(itertools.product((0, 1), repeat=3))
        index = {c: k for k, c in enumerate(configs)}
        q = np.zeros((8, 8))
        for a, b, r in zip(table.i, table.j, table.rate):
            for c in configs:
                d = list(c)
                d[a], d[b] = d[b], d[a]
                d = tuple(d)
                if d != c:
                    q[index[c], index[d]] += r
        np.testing.assert_allclose(q, q.T, atol=1e-12)
        np.fill_diagonal(q, -q.sum(axis=1))
        # swaps conserve particle number: uniform times q vanishes sectorwise
        for k in range(4):
            sector = [index[c] for c in configs if sum(c) == k]
            flow = q[sector].sum(axis=0)
            np.testing.assert_allclose(flow[sector], 0.0, atol=1e-10)


class TestSimulate:
    def test_validation(self):
        _, g = regular_circle_cloud(8)
        c = init_bernoulli(g, lambda p: np.full(p.shape[0], 0.5),
                           np.random.default_rng(87))
        rng = np.random.default_rng(88)
        with pytest.raises(ValueError):
            simulate(c, g, 0.0, [0.0], [], rng)
        with pytest.raises(ValueError):
            simulate(c, g, 1.0, [0.5, 0.2], [], rng)
        with pytest.raises(ValueError):
            simulate(c, g, 1.0, [0.5, 2.0], [], rng)
        cloud = sample_cloud(Circle(), 8, seed=89)
        raw = build_weights(cloud, 1.0)
        with pytest.raises(ValueError):
            simulate(c, raw, 1.0, [0.5], [], rng)
        _, g16 = regular_circle_cloud(16)
        with pytest.raises(ValueError):
            simulate(c, g16, 1.0, [0.5], [], rng)

    def test_disconnected_grid_warns(self):
        cloud = sample_cloud(Circle(), 40, seed=90)
        g = normalize_grid(build_weights(cloud, 1e-3))
        c = init_bernoulli(g, lambda p: np.full(p.shape[0], 0.5),
                           np.random.default_rng(91))
        with pytest.warns(UserWarning, match="components"):
            simulate(c, g, 0.01, [0.01], [], np.random.default_rng(92))

    def test_zero_rate_grid_freezes(self):
        cloud, _ = regular_circle_cloud(8)
        g = normalize_grid(build_weights(cloud, 1e-4))
        assert g.weights.nnz == 0
        c = Configuration.from_occupancy(np.array([1, 0, 1, 0, 1, 0, 1, 0]))
        with pytest.warns(UserWarning):
            trace = simulate(c, g, 1.0, [0.0, 1.0], [_cos_chart()],
                             np.random.default_rng(93), journal=True)
        assert trace.event_count == 0
        np.testing.assert_array_equal(trace.final.occupancy, c.occupancy)
        assert trace.values["cos1"][0] == trace.values["cos1"][1]
        assert trace.journal.times.size == 0

    def test_conservation_and_journal_replay(self):
        _, g = regular_circle_cloud(64)
        c0 = init_bernoulli(g, lambda p: np.full(p.shape[0], 0.5),
                            np.random.default_rng(94))
        rec = np.linspace(0.0, 0.02, 9)
        phi = _cos_chart()
        trace = simulate(c0, g, 0.02, rec, [phi], np.random.default_rng(95),
                         journal=True)
        assert trace.final.particle_count == c0.particle_count
        trace.final.validate()
        jr = trace.journal
        assert np.all(np.diff(jr.times) >= 0)
        assert set(np.unique(jr.delta)).issubset({-1, 1})
        assert trace.event_count >= jr.times.size
        # incremental observable values match a from-scratch replay
        vals = np.asarray(phi.eval(g.cloud.points), dtype=float)
        for k, t in enumerate(rec):
            occ = _replay_occupancy(jr, t)
            direct = float(vals @ occ) / g.size
            assert trace.values["cos1"][k] == pytest.approx(direct, abs=1e-10)
        occ_end = _replay_occupancy(jr, 0.02)
        np.testing.assert_array_equal(occ_end, trace.final.occupancy.astype(np.int64))

    def test_table_reuse_identical(self):
        _, g = regular_circle_cloud(32)
        c0 = init_bernoulli(g, lambda p: np.full(p.shape[0], 0.5),
                            np.random.default_rng(96))
        table = EdgeTable.from_grid(g)
        t1 = simulate(c0, g, 0.01, [0.01], [_cos_chart()], np.random.default_rng(97))
        t2 = simulate(c0, g, 0.01, [0.01], [_cos_chart()], np.random.default_rng(97),
                      table=table)
        assert t1.values["cos1"][0] == t2.values["cos1"][0]
        assert t1.event_count == t2.event_count

    def test_single_particle_marginal_matches_matrix_exponential(self):
        # one walker on a ring: occupancy marginals follow expm(Q T) with
        # Q the weighted adjacency off the diagonal
        _, g = regular_circle_cloud(8)
        table = EdgeTable.from_grid(g)
        q = g.a_scaling * g.weights.toarray()
        np.fill_diagonal(q, -q.sum(axis=1))
        horizon = 0.05
        p_t = expm(q * horizon)[0]
        reps = 2000
        hits = np.zeros(8)
        c0 = Configuration.from_occupancy(np.eye(8, dtype=np.uint8)[0])
        for rng in replica_rngs(4242, reps):
            tr = simulate(c0, g, horizon, [horizon], [], rng, table=table)
            hits += tr.final.occupancy
        freq = hits / reps
        for s in range(8):
            se = math.sqrt(p_t[s] * (1 - p_t[s]) / reps)
            assert abs(freq[s] - p_t[s]) <= 4 * se + 1e-12


class TestDynkin:
    def test_requires_journal(self):
        _, g = regular_circle_cloud(16)
        c0 = init_bernoulli(g, lambda p: np.full(p.shape[0], 0.5),
                            np.random.default_rng(98))
        trace = simulate(c0, g, 0.01, [0.01], [], np.random.default_rng(99))
        with pytest.raises(ValueError, match="journal"):
            dynkin_path(trace, _cos_chart(), g)

    def test_matches_naive_compensator(self):
        _, g = regular_circle_cloud(32)
        c0 = init_bernoulli(g, lambda p: np.full(p.shape[0], 0.5),
                            np.random.default_rng(100))
        rec = np.linspace(0.0, 0.01, 6)
        phi = _cos_chart()
        trace = simulate(c0, g, 0.01, rec, [phi], np.random.default_rng(101),
                         journal=True)
        path = dynkin_path(trace, phi, g)
        assert path[0] == pytest.approx(0.0, abs=1e-15)

        vals = np.asarray(phi.eval(g.cloud.points), dtype=float)
        b = graph_laplacian_apply(g, phi)
        jr = trace.journal
        for k, tau in enumerate(rec):
            occ = jr.initial_occupancy.astype(float).copy()
            integral = 0.0
            t_prev = 0.0
            mu0 = float(vals @ occ) / g.size
            for t, i, j in zip(jr.times, jr.site_i, jr.site_j):
                if t > tau:
                    break
                integral += (float(b @ occ) / g.size) * (t - t_prev)
                occ[i], occ[j] = occ[j], occ[i]
                t_prev = t
            integral += (float(b @ occ) / g.size) * (tau - t_prev)
            mu_tau = float(vals @ occ) / g.size
            assert path[k] == pytest.approx(mu_tau - mu0 - integral, abs=1e-12)

    def test_qv_bound_by_hand(self):
        _, g = regular_circle_cloud(4)
        phi = _chart()
        # edge gaps 0.25, 0.25, 0.25 and 0.75 in chart coordinates;
        # bound = T * a / (2 N^2) * 2 * sum of squared gaps
        expected = 2.0 * 16.0 / 32.0 * 2.0 * (3 * 0.0625 + 0.5625)
        assert qv_bound(g, phi, 2.0) == pytest.approx(expected, abs=1e-12)

    def test_martingale_report_fields(self):
        _, g = regular_circle_cloud(16)
        rep = martingale_report(g, _cos_chart(), 0.5, np.array([0.01, -0.02, 0.005]))
        assert rep["N"] == 16
        assert rep["T"] == 0.5
        assert rep["qv_bound"] == pytest.approx(qv_bound(g, _cos_chart(), 0.5))
        assert rep["var_MT"] >= 0
        with pytest.raises(ValueError):
            martingale_report(g, _cos_chart(), 0.5, np.array([0.01]))


class TestReplicasAndStorage:
    def test_replica_rngs_deterministic_and_distinct(self):
        a = replica_rngs(7, 4)
        b = replica_rngs(7, 4)
        draws_a = [r.random(3) for r in a]
        draws_b = [r.random(3) for r in b]
        for x, y in zip(draws_a, draws_b):
            np.testing.assert_array_equal(x, y)
        flat = np.concatenate(draws_a)
        assert np.unique(np.round(flat, 12)).size == flat.size

    def test_save_traces_roundtrip(self, tmp_path):
        _, g = regular_circle_cloud(16)
        c0 = init_bernoulli(g, lambda p: np.full(p.shape[0], 0.5),
                            np.random.default_rng(102))
        traces = [
            simulate(c0, g, 0.01, [0.0, 0.01], [_cos_chart(), _chart()], rng)
            for rng in replica_rngs(103, 2)
        ]
        path = tmp_path / "traces.csv"
        save_traces(str(path), traces)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 2 * 2
        assert rows[0]["phi_id"] == "cos1"  # ids sorted within replica
        got = float(rows[0]["value"])
        assert got == traces[0].values["cos1"][0]
