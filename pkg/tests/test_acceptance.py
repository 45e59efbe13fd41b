"""Acceptance gate: twelve pinned criteria, one printed line each.

Master clouds are sampled once per module and shared by every criterion
that consumes the same randomness (prefixes of one sample keep the
dyadic families nested).  Each criterion asserts its own wall-clock
budget on the work done in its body; the shared fixtures amortize.

Run with ``pytest -v -s tests/test_acceptance.py`` to see the lines.
"""

import math
import time

import numpy as np
import pytest
from scipy.linalg import expm

from manigrid import grids, pde, sep
from manigrid.manifolds import (
    Circle,
    FlatTorus,
    Sphere2,
    laplace_eigenbasis,
    volume_density_expansion_check,
)
from manigrid.manifolds import test_function_library as function_library
from manigrid.walk import (
    biased_control_step,
    check_canonical,
    ensemble_expectation,
    product_counterexample_step,
    uniform_sphere_step,
)

BUDGETS = {1: 1.0, 2: 1.0, 3: 300.0, 4: 120.0, 5: 60.0, 6: 180.0,
           7: 30.0, 8: 60.0, 9: 600.0, 10: 300.0, 11: 30.0, 12: 1.0}

CIRCLE_SEED = 20250
SPHERE_SEED = 101


def _report(num: int, passed: bool, t0: float, detail: str) -> None:
    elapsed = time.monotonic() - t0
    line = (f"[criterion {num:2d}] {'PASS' if passed else 'FAIL'} "
            f"({elapsed:.1f}s / {BUDGETS[num]:.0f}s budget): {detail}")
    print(line, flush=True)
    assert passed, line
    assert elapsed < BUDGETS[num], f"over budget: {line}"


def _half_cosine(p):
    return 0.5 * (1.0 + np.cos(np.asarray(p, dtype=float)[..., 0]))


@pytest.fixture(scope="module")
def circle_master():
    master = grids.sample_cloud(Circle(), 2**14, CIRCLE_SEED)
    curve = grids.w1_curve(master, [2**k for k in range(4, 15)])
    return master, curve


@pytest.fixture(scope="module")
def sphere_master():
    master = grids.sample_cloud(Sphere2(), 2**12, SPHERE_SEED)
    curve = grids.w1_curve(master, [2**k for k in range(4, 13)])
    return master, curve


def _ladder_errors(m, master, curve, top_log):
    lib = function_library(m)
    errs: dict[str, list[float]] = {}
    for n in [2**k for k in range(4, top_log + 1)]:
        eps = grids.epsilon_schedule(curve, m.dim, n)
        g = grids.normalize_grid(grids.build_weights(master.prefix(n), eps))
        for f in lib:
            errs.setdefault(f.id, []).append(grids.convergence_error(g, f).mean_err)
    return errs


def test_criterion_01_stencil_convergence():
    t0 = time.monotonic()
    lib = function_library(FlatTorus(1))
    errs: dict[str, list[float]] = {}
    for n in (256, 512, 1024):
        _, grid = grids.regular_circle_cloud(n)
        for f in lib:
            errs.setdefault(f.id, []).append(grids.convergence_error(grid, f).sup_err)
    worst = 0.0
    ok = True
    for seq in errs.values():
        if max(seq) < 1e-12:
            continue
        for a, b in zip(seq, seq[1:]):
            ok &= b * 3.0 <= a
            worst = max(worst, b / a)
    _report(1, ok, t0, f"stencil error shrinks {1.0 / worst:.1f}x per doubling (need 3x)")


def test_criterion_02_limiting_constants():
    t0 = time.monotonic()
    k = grids.default_kernel()
    c_sphere = grids.limiting_constant_op(k, Sphere2())
    c_circle = grids.limiting_constant_op(k, Circle())
    gap = max(abs(c_sphere - 1.0 / 160.0), abs(c_circle - 1.0 / (24.0 * math.pi)))
    _report(2, gap < 1e-12, t0,
            f"C=1/160 and 1/(24*pi) reproduced to {gap:.1e} (need 1e-12)")


def test_criterion_03_laplacian_ladders(circle_master, sphere_master):
    t0 = time.monotonic()
    ok = True
    details = []
    for m, (master, curve), top_log in (
        (Circle(), circle_master, 13),
        (Sphere2(), sphere_master, 12),
    ):
        errs = _ladder_errors(m, master, curve, top_log)
        worst = 0.0
        for seq in errs.values():
            if max(seq) < 1e-12:
                continue
            ratio = seq[-1] / seq[0]
            ok &= seq[-1] < seq[0] and ratio < 0.5
            worst = max(worst, ratio)
        details.append(f"{m.kind} worst end/start {worst:.3f}")
    _report(3, ok, t0, "; ".join(details) + " (need < 0.5)")


def test_criterion_04_sampling_distance_rate(circle_master):
    t0 = time.monotonic()
    _, curve = circle_master
    margins = [w / (3.0 * n ** (-1.0 / 3.0)) for n, w in curve]
    _report(4, max(margins) <= 1.0, t0,
            f"W1 <= 3 N^(-1/3) on dyadic sizes to 2^14, tightest margin "
            f"{max(margins):.2f} of the bound")


def test_criterion_05_schedule_keeps_grids_connected(circle_master, sphere_master):
    t0 = time.monotonic()
    components = []
    ok = True
    for m, (master, curve), top_log in (
        (Circle(), circle_master, 13),
        (Sphere2(), sphere_master, 12),
    ):
        for n in [2**k for k in range(9, top_log + 1)]:
            eps = grids.epsilon_schedule(curve, m.dim, n)
            g = grids.build_weights(master.prefix(n), eps)
            rep = grids.check_connected(g)
            ok &= rep.connected
            components.append(rep.components)
    _report(5, ok, t0,
            f"all {len(components)} scheduled grids with N >= 2^9 connected")


def test_criterion_06_walk_matches_heat_kernel():
    t0 = time.monotonic()
    m = Sphere2()
    mu = uniform_sphere_step(m, math.sqrt(2.0))
    north = np.array([0.0, 0.0, 1.0])
    y10 = next(md for md in laplace_eigenbasis(m, 4) if md.id == "y10")
    times = [0.25, 0.5, 1.0]
    ests = ensemble_expectation(m, north, 200, mu, y10.eval, times, 20_000,
                                rng=np.random.default_rng(606))
    f0 = float(np.asarray(y10.eval(north[None]))[0])
    ok = True
    worst = 0.0
    for t, est in zip(times, ests):
        gap = abs(est.value - math.exp(-t) * f0)
        ok &= gap <= 4.0 * est.stderr + 0.02
        worst = max(worst, gap)
    _report(6, ok, t0,
            f"N=200 walk ensemble tracks exp(-t) decay, worst gap {worst:.4f} "
            f"(tol 4se+0.02)")


def test_criterion_07_canonical_step_validation():
    t0 = time.monotonic()
    ex2 = check_canonical(FlatTorus(3), [0.2, 0.5, 0.8],
                          uniform_sphere_step(FlatTorus(3), math.sqrt(3.0)),
                          samples=10_000, rng=np.random.default_rng(11))
    ex3 = check_canonical(FlatTorus(3), [0.1, 0.4, 0.7],
                          product_counterexample_step(3),
                          samples=10_000, rng=np.random.default_rng(12))
    bad = check_canonical(Sphere2(), [0.0, 0.0, 1.0],
                          biased_control_step(Sphere2(), 0.5),
                          samples=10_000, rng=np.random.default_rng(13))
    speeds_ok = (abs(ex2.c_hat - 1.0) <= 4.0 * ex2.mc_stderr + 1e-12
                 and abs(ex3.c_hat - 1.0) <= 4.0 * ex3.mc_stderr + 1e-12)
    ok = ex2.passed and ex3.passed and speeds_ok and not bad.passed
    _report(7, ok, t0,
            f"sphere-law and two-atom measures pass (c_hat {ex2.c_hat:.3f}, "
            f"{ex3.c_hat:.3f}), biased control fails as required")


def test_criterion_08_single_particle_marginal():
    t0 = time.monotonic()
    _, g = grids.regular_circle_cloud(64)
    table = sep.EdgeTable.from_grid(g)
    q = g.a_scaling * g.weights.toarray()
    np.fill_diagonal(q, -q.sum(axis=1))
    horizon = 0.004
    p_t = expm(q * horizon)[0]
    reps = 10_000
    hits = np.zeros(64)
    c0 = sep.Configuration.from_occupancy(np.eye(64, dtype=np.uint8)[0])
    for rng in sep.replica_rngs(4096, reps):
        tr = sep.simulate(c0, g, horizon, [horizon], [], rng, table=table)
        hits += tr.final.occupancy
    freq = hits / reps
    se = np.sqrt(p_t * (1.0 - p_t) / reps)
    z = np.abs(freq - p_t) / np.maximum(se, 1e-12)
    _report(8, bool(np.max(z) <= 4.0), t0,
            f"ring-64 occupancy matches the matrix exponential, max z {np.max(z):.2f} "
            f"(need <= 4)")


def test_criterion_09_hydrodynamic_limit(circle_master):
    t0 = time.monotonic()
    master, curve = circle_master
    m = Circle()
    obs = [f for f in function_library(m) if f.id in ("cost", "sint", "cos2t")]
    field = pde.project(_half_cosine, m, 64)
    assert field.quadrature_residual < 1e-10
    rec = np.linspace(0.0, 1.0, 21)
    oracle = {
        f.id: np.array([pde.pair(pde.evolve(field, t, "one"), f) for t in rec])
        for f in obs
    }
    rngs = sep.replica_rngs(7, 3)
    worst = []
    for idx, n in enumerate([2**10, 2**12, 2**14]):
        eps = grids.epsilon_schedule(curve, 1, n)
        g = grids.normalize_grid(grids.build_weights(master.prefix(n), eps))
        table = sep.EdgeTable.from_grid(g)
        c0 = sep.init_bernoulli(g, _half_cosine, rngs[idx])
        tr = sep.simulate(c0, g, 1.0, rec, obs, rngs[idx], table=table)
        worst.append(max(
            float(np.max(np.abs(tr.values[f.id] - oracle[f.id]))) for f in obs
        ))
    ok = worst[0] > worst[1] > worst[2] and worst[2] <= 0.02
    _report(9, ok, t0,
            f"density gaps {worst[0]:.4f} -> {worst[1]:.4f} -> {worst[2]:.4f} "
            f"(final needs <= 0.02)")


def test_criterion_10_martingale_quadratic_variation(circle_master):
    t0 = time.monotonic()
    master, curve = circle_master
    m = Circle()
    phi = next(f for f in function_library(m) if f.id == "cost")
    horizon = 0.5
    qvs = []
    ok = True
    details = []
    for n in (2**8, 2**10, 2**12):
        eps = grids.epsilon_schedule(curve, 1, n)
        g = grids.normalize_grid(grids.build_weights(master.prefix(n), eps))
        table = sep.EdgeTable.from_grid(g)
        terminal = np.empty(300)
        for r, rng in enumerate(sep.replica_rngs(313 + n, 300)):
            c0 = sep.init_bernoulli(g, lambda p: np.full(p.shape[0], 0.5), rng)
            tr = sep.simulate(c0, g, horizon, [horizon], [], rng,
                              journal=True, table=table)
            terminal[r] = sep.dynkin_path(tr, phi, g)[-1]
        rep = sep.martingale_report(g, phi, horizon, terminal)
        z = abs(rep["mean_MT"]) / rep["stderr"]
        ok &= z <= 4.0 and rep["var_MT"] <= rep["qv_bound"]
        qvs.append(rep["qv_bound"])
        details.append(f"N={n}: z={z:.2f} var/qv={rep['var_MT'] / rep['qv_bound']:.2f}")
    ok &= all(b < a for a, b in zip(qvs, qvs[1:]))
    _report(10, ok, t0, "; ".join(details) + "; qv bound strictly decreasing")


def test_criterion_11_particle_conservation():
    t0 = time.monotonic()
    _, g = grids.regular_circle_cloud(256)
    table = sep.EdgeTable.from_grid(g)
    horizon = 1.1e6 / table.total_rate
    ok = True
    events = []
    for seed in (99, 100):
        rng = np.random.default_rng(seed)
        c0 = sep.init_bernoulli(g, lambda p: np.full(p.shape[0], 0.5), rng)
        tr = sep.simulate(c0, g, horizon, [horizon], [], rng, table=table)
        tr.final.validate()
        ok &= tr.final.particle_count == c0.particle_count
        ok &= tr.event_count >= 1_000_000
        events.append(tr.event_count)
    _report(11, ok, t0,
            f"particle count exact over {events[0]} and {events[1]} events")


def test_criterion_12_volume_density_expansion():
    t0 = time.monotonic()
    radii = np.linspace(0.01, 0.5, 99)
    rows = volume_density_expansion_check(Sphere2(), [0.0, 0.0, 1.0], radii)
    ok = all(r.within for r in rows)
    margin = max(r.deviation / r.tolerance for r in rows)
    _report(12, ok, t0,
            f"sin(r)/r stays within 0.05 r^4 of 1 - r^2/6 up to r=0.5 "
            f"(worst margin {margin:.2f})")
