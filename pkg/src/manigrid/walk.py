"""Geodesic random walks driven by step measures on tangent spaces.

A step measure assigns to every point a probability law on its tangent
space.  The walk with step count parameter ``N`` jumps along geodesics of
parameter length ``1/N`` at exponential rate ``total_mass * N**2``, so its
generator applied to a smooth ``f`` approaches ``(c/2) * Lap f`` where the
speed constant ``c`` is the mean squared step length per dimension.  The
module provides the canonical-measure validators, a Monte Carlo generator
probe with antithetic pairing, single trajectories, and a vectorized
ensemble runner for observable averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numba
import numpy as np

from manigrid.manifolds import (
    Circle,
    FlatTorus,
    Manifold,
    Sphere2,
    TangentVector,
    TestFunction,
)

SUPPORT_SLACK = 1e-9


class MonteCarloEstimate(NamedTuple):
    value: float
    stderr: float


@dataclass(frozen=True)
class StepMeasure:
    """Probability law on tangent spaces with a uniform support bound.

    ``sampler(points, rng)`` draws one tangent vector per row of a stacked
    ``(M, point_dim)`` array of base points and returns an ``(M, point_dim)``
    array in canonical coordinates.  Every draw is checked against
    ``support_bound``; a violation raises immediately rather than
    corrupting downstream statistics.
    """

    id: str
    manifold: Manifold
    sampler: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    support_bound: float
    total_mass: float = 1.0
    declared_speed: float | None = None
    # Optional in-place jump kernel advancing a stacked batch by one
    # geodesic step of parameter h; must realize the same law as
    # sampler followed by exp.  Hot ensemble loops use it when present.
    fused_jump: Callable[[np.ndarray, np.random.Generator, float], None] | None = None

    def draw_batch(self, points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        vecs = self.sampler(points, rng)
        norms = np.linalg.norm(vecs, axis=1)
        if np.any(norms > self.support_bound + SUPPORT_SLACK):
            raise AssertionError(
                f"step measure {self.id!r} produced a draw of norm "
                f"{norms.max():.6g} beyond its support bound {self.support_bound:.6g}"
            )
        return vecs

    def draw(self, p, rng: np.random.Generator) -> TangentVector:
        p = self.manifold.as_point(p)
        vec = self.draw_batch(p[None, :], rng)[0]
        return TangentVector(base=p, vec=vec)


@dataclass(frozen=True)
class MomentReport:
    """Empirical first and second tangent-space moments in an orthonormal frame."""

    mean_vec: np.ndarray
    cov_mat: np.ndarray
    c_hat: float
    mc_stderr: float
    mean_stderr: np.ndarray
    cov_stderr: np.ndarray
    samples: int
    mean_ok: bool
    cov_ok: bool

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.cov_ok


@dataclass(frozen=True)
class WalkPath:
    """Jump skeleton of one trajectory: positions between jump times."""

    times: np.ndarray
    points: np.ndarray

    @property
    def jump_count(self) -> int:
        return len(self.times) - 1

    def state_at(self, t: float) -> np.ndarray:
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.points[max(idx, 0)]


# ---------------------------------------------------------------------------
# built-in step measures
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _sphere_jump(pos, psi, cos_a, sin_a):
    """Rotate each unit row by a fixed arc toward a random tangent azimuth."""
    for r in range(pos.shape[0]):
        x = pos[r, 0]
        y = pos[r, 1]
        z = pos[r, 2]
        rxy = math.sqrt(x * x + y * y)
        if rxy > 1e-12:
            e1x = -y / rxy
            e1y = x / rxy
        else:
            e1x = 1.0
            e1y = 0.0
        # e2 = p cross e1 completes the tangent frame
        e2x = -z * e1y
        e2y = z * e1x
        e2z = x * e1y - y * e1x
        c = math.cos(psi[r])
        s = math.sin(psi[r])
        dx = c * e1x + s * e2x
        dy = c * e1y + s * e2y
        dz = s * e2z
        nx = cos_a * x + sin_a * dx
        ny = cos_a * y + sin_a * dy
        nz = cos_a * z + sin_a * dz
        nrm = math.sqrt(nx * nx + ny * ny + nz * nz)
        pos[r, 0] = nx / nrm
        pos[r, 1] = ny / nrm
        pos[r, 2] = nz / nrm


def uniform_sphere_step(m: Manifold, scale: float = 1.0) -> StepMeasure:
    """Uniform law on the centered tangent sphere of radius ``scale``.

    On the circle this is a fair coin on ``{-scale, +scale}``.  The law is
    invariant under tangent-space rotations, hence canonical with speed
    constant ``scale**2 / dim``.
    """
    if scale <= 0.0:
        raise ValueError("scale must be positive")

    if isinstance(m, Circle):

        def sampler(points, rng):
            signs = rng.integers(0, 2, size=points.shape[0]) * 2 - 1
            return (scale * signs.astype(float))[:, None]

    elif isinstance(m, FlatTorus):

        def sampler(points, rng):
            raw = rng.standard_normal(points.shape)
            raw /= np.linalg.norm(raw, axis=1, keepdims=True)
            return scale * raw

    elif isinstance(m, Sphere2):

        def sampler(points, rng):
            e1, e2 = m.tangent_frames(points)
            psi = rng.uniform(0.0, 2.0 * math.pi, size=points.shape[0])
            return scale * (np.cos(psi)[:, None] * e1 + np.sin(psi)[:, None] * e2)

    else:
        raise ValueError(f"unsupported manifold {m!r}")

    fused = None
    if isinstance(m, Sphere2):

        def fused(pos, rng, h):
            psi = rng.uniform(0.0, 2.0 * math.pi, size=pos.shape[0])
            arc = scale * h
            _sphere_jump(pos, psi, math.cos(arc), math.sin(arc))

    return StepMeasure(
        id=f"uniform-sphere(scale={scale:g})",
        manifold=m,
        sampler=sampler,
        support_bound=scale,
        total_mass=1.0,
        declared_speed=scale * scale / m.dim,
        fused_jump=fused,
    )


def product_counterexample_step(d: int) -> StepMeasure:
    """Product law on the torus with atoms ``-2`` (mass 1/5) and ``1/2`` (mass 4/5).

    Each coordinate has mean zero and unit variance, so the law is canonical
    with speed constant 1, yet it is not invariant under sign flips: the
    law of ``-eta`` differs from the law of ``eta``.
    """
    m = FlatTorus(d)
    atoms = np.array([-2.0, 0.5])
    probs = np.array([0.2, 0.8])

    def sampler(points, rng):
        idx = rng.choice(2, size=points.shape, p=probs)
        return atoms[idx]

    return StepMeasure(
        id=f"product-two-atom(d={d})",
        manifold=m,
        sampler=sampler,
        support_bound=2.0 * math.sqrt(d),
        total_mass=1.0,
        declared_speed=1.0,
    )


def biased_control_step(m: Manifold, bias: float = 0.5) -> StepMeasure:
    """Control law with a deliberate mean drift; must fail the canonical check.

    Draws a uniform tangent direction and adds ``bias`` times the first
    frame axis, giving mean ``bias * e1`` instead of zero.
    """
    base = uniform_sphere_step(m, 1.0)

    def sampler(points, rng):
        vecs = base.sampler(points, rng)
        if isinstance(m, Sphere2):
            e1, _ = m.tangent_frames(points)
        else:
            e1 = np.zeros_like(points)
            e1[:, 0] = 1.0
        return vecs + bias * e1

    return StepMeasure(
        id=f"biased-control(bias={bias:g})",
        manifold=m,
        sampler=sampler,
        support_bound=1.0 + bias,
        total_mass=1.0,
        declared_speed=None,
    )


# ---------------------------------------------------------------------------
# canonical-measure validation
# ---------------------------------------------------------------------------


def _frame_coordinates(m: Manifold, p: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    if isinstance(m, Sphere2):
        frame = m.tangent_frame(p)
        return vecs @ frame.T
    return vecs


def check_canonical(
    m: Manifold,
    p,
    mu: StepMeasure,
    samples: int = 10_000,
    rng: np.random.Generator | None = None,
) -> MomentReport:
    """Monte Carlo test of the canonical moment conditions at one point.

    Estimates the tangent-space mean and second moment matrix in the
    orthonormal frame at ``p`` and flags PASS when the mean vanishes and
    the second moment matrix equals ``c_hat`` times the identity, both
    within four standard errors entrywise.
    """
    if samples < 1000:
        raise ValueError("need at least 1000 samples")
    if rng is None:
        rng = np.random.default_rng()
    p = m.as_point(p)
    pts = np.broadcast_to(p, (samples, m.point_dim))
    vecs = mu.draw_batch(np.ascontiguousarray(pts), rng)
    coords = _frame_coordinates(m, p, vecs)

    n = m.dim
    mean_vec = coords.mean(axis=0)
    mean_stderr = coords.std(axis=0, ddof=1) / math.sqrt(samples)

    second = coords[:, :, None] * coords[:, None, :]
    cov_mat = second.mean(axis=0)
    sq_norm = np.einsum("ij,ij->i", coords, coords)
    c_hat = float(sq_norm.mean() / n)

    # Deviation of the second moment from c_hat * I, with a matched
    # per-entry standard error for the same linear statistic.
    dev_stat = second - (sq_norm / n)[:, None, None] * np.eye(n)
    deviation = dev_stat.mean(axis=0)
    cov_stderr = dev_stat.std(axis=0, ddof=1) / math.sqrt(samples)

    mean_ok = bool(np.all(np.abs(mean_vec) <= 4.0 * mean_stderr))
    cov_ok = bool(np.all(np.abs(deviation) <= 4.0 * cov_stderr))
    return MomentReport(
        mean_vec=mean_vec,
        cov_mat=cov_mat,
        c_hat=c_hat,
        mc_stderr=float(max(mean_stderr.max(), cov_stderr.max())),
        mean_stderr=mean_stderr,
        cov_stderr=cov_stderr,
        samples=samples,
        mean_ok=mean_ok,
        cov_ok=cov_ok,
    )


def speed_constant(
    m: Manifold,
    p,
    mu: StepMeasure,
    samples: int = 10_000,
    rng: np.random.Generator | None = None,
) -> MonteCarloEstimate:
    """Monte Carlo estimate of the speed constant ``E[|eta|^2] / dim``."""
    if rng is None:
        rng = np.random.default_rng()
    p = m.as_point(p)
    pts = np.broadcast_to(p, (samples, m.point_dim))
    vecs = mu.draw_batch(np.ascontiguousarray(pts), rng)
    sq = np.einsum("ij,ij->i", vecs, vecs) / m.dim
    return MonteCarloEstimate(
        value=float(sq.mean()),
        stderr=float(sq.std(ddof=1) / math.sqrt(samples)),
    )


# ---------------------------------------------------------------------------
# generator probe
# ---------------------------------------------------------------------------


def generator_apply(
    m: Manifold,
    f,
    p,
    N: int,
    mu: StepMeasure,
    samples: int = 20_000,
    rng: np.random.Generator | None = None,
) -> MonteCarloEstimate:
    """Monte Carlo estimate of the rescaled generator at one point.

    Computes ``total_mass * N**2 * E[f(exp(p, eta, 1/N)) - f(p)]`` with
    antithetic pairing of ``eta`` and ``-eta``, which cancels the first
    order term drawwise and leaves the estimate exactly zero for constant
    ``f``.  The limit for a canonical measure with speed ``c`` is
    ``(c/2) * Lap f(p)``.
    """
    if N < 1:
        raise ValueError("N must be a positive integer")
    if rng is None:
        rng = np.random.default_rng()
    fn = f.eval if isinstance(f, TestFunction) else f
    p = m.as_point(p)
    pts = np.ascontiguousarray(np.broadcast_to(p, (samples, m.point_dim)))
    vecs = mu.draw_batch(pts, rng)
    f0 = float(np.asarray(fn(p)))
    fp = np.asarray(fn(m.exp_many(pts, vecs, 1.0 / N)), dtype=float)
    fm = np.asarray(fn(m.exp_many(pts, -vecs, 1.0 / N)), dtype=float)
    vals = mu.total_mass * N * N * (0.5 * (fp + fm) - f0)
    return MonteCarloEstimate(
        value=float(vals.mean()),
        stderr=float(vals.std(ddof=1) / math.sqrt(samples)),
    )


# ---------------------------------------------------------------------------
# trajectories and ensembles
# ---------------------------------------------------------------------------


def simulate_walk(
    m: Manifold,
    p0,
    N: int,
    mu: StepMeasure,
    t_end: float,
    rng: np.random.Generator | None = None,
) -> WalkPath:
    """One continuous-time trajectory up to ``t_end``, returned as its jump skeleton.

    Holding times are exponential with rate ``total_mass * N**2`` in
    macroscopic time; each jump moves along the geodesic of length
    ``|eta| / N`` in the sampled direction.
    """
    if N < 1:
        raise ValueError("N must be a positive integer")
    if t_end <= 0.0:
        raise ValueError("t_end must be positive")
    if rng is None:
        rng = np.random.default_rng()
    rate = mu.total_mass * N * N
    p = m.as_point(p0)
    times = [0.0]
    points = [p]
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rate)
        if t > t_end:
            break
        vec = mu.draw_batch(p[None, :], rng)[0]
        p = m.exp(p, vec, 1.0 / N)
        times.append(t)
        points.append(p)
    return WalkPath(times=np.asarray(times), points=np.vstack(points))


def ensemble_expectation(
    m: Manifold,
    p0,
    N: int,
    mu: StepMeasure,
    f,
    times: Sequence[float],
    replicas: int,
    rng: np.random.Generator | None = None,
) -> list[MonteCarloEstimate]:
    """Monte Carlo mean of ``f`` along the walk at several macroscopic times.

    Runs all replicas in lockstep over the jump chain.  Jump counts at the
    requested times are Poisson with rate ``total_mass * N**2``, drawn with
    independent increments, so the marginal law at each time agrees with
    :func:`simulate_walk`.
    """
    if replicas < 2:
        raise ValueError("need at least 2 replicas")
    times = [float(t) for t in times]
    if any(t < 0 for t in times) or times != sorted(times):
        raise ValueError("times must be nonnegative and sorted")
    if rng is None:
        rng = np.random.default_rng()
    fn = f.eval if isinstance(f, TestFunction) else f
    rate = mu.total_mass * N * N
    h = 1.0 / N

    pos = np.ascontiguousarray(
        np.broadcast_to(m.as_point(p0), (replicas, m.point_dim))
    ).copy()
    out = []
    prev = 0.0
    for t in times:
        need = rng.poisson(rate * (t - prev), size=replicas)
        prev = t
        # Replicas sorted by remaining jumps so the active set is always a
        # contiguous prefix; batches are views, not fancy-indexed copies.
        order = np.argsort(-need, kind="stable")
        pos = pos[order]
        need_sorted = need[order]
        for step in range(1, int(need_sorted[0]) + 1):
            k = int(np.searchsorted(-need_sorted, -step, side="right"))
            batch = pos[:k]
            if mu.fused_jump is not None:
                mu.fused_jump(batch, rng, h)
            else:
                vecs = mu.draw_batch(batch, rng)
                pos[:k] = m.exp_many(batch, vecs, h)
        inv = np.empty_like(order)
        inv[order] = np.arange(replicas)
        pos = pos[inv]
        vals = np.asarray(fn(pos), dtype=float)
        out.append(
            MonteCarloEstimate(
                value=float(vals.mean()),
                stderr=float(vals.std(ddof=1) / math.sqrt(replicas)),
            )
        )
    return out
