"""Closed-form geometry for the compact spaces used throughout the package.

Three homogeneous manifolds are supported: the circle of circumference
``2*pi``, the flat unit torus in dimension ``d``, and the unit round sphere.
Points are stored as small numpy arrays in canonical coordinates (angle in
``[0, 2*pi)``, fundamental-domain coordinates in ``[0, 1)^d``, unit
3-vector).  Geodesics, distances and uniform sampling are exact closed
forms, so everything here can serve as ground truth for the stochastic
modules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import special

TWO_PI = 2.0 * math.pi

# Validation slack for canonical point coordinates (unit norm on the sphere).
POINT_ATOL = 1e-12


@dataclass(frozen=True)
class TangentVector:
    """Tangent vector attached to a base point, in canonical coordinates.

    On the circle the coordinate is a single signed speed, on the torus a
    vector in ``R^d``, and on the sphere an ambient 3-vector orthogonal to
    the base point.
    """

    base: np.ndarray
    vec: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vec))


@dataclass(frozen=True)
class TestFunction:
    """Smooth observable with a closed-form Laplacian.

    ``eval`` and ``laplacian`` accept a single point of shape
    ``(point_dim,)`` or a stacked cloud of shape ``(N, point_dim)`` and
    return a float or an ``(N,)`` array.  ``lipschitz_bound`` is a valid
    global Lipschitz constant w.r.t. geodesic distance, not necessarily
    sharp.
    """

    id: str
    eval: Callable[[np.ndarray], np.ndarray]
    laplacian: Callable[[np.ndarray], np.ndarray]
    lipschitz_bound: float


@dataclass(frozen=True)
class Mode:
    """Laplace eigenfunction, orthonormal w.r.t. normalized volume.

    Eigenvalues are reported as ``lam >= 0`` where the eigenfunction
    satisfies ``laplacian(f) = -lam * f``.
    """

    id: str
    eigenvalue: float
    eval: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DensityRow:
    """One radius of the radial volume-density expansion check."""

    radius: float
    density: float
    quadratic: float
    deviation: float
    tolerance: float
    within: bool


class Manifold:
    """Common interface of the supported manifolds."""

    kind: str
    dim: int
    point_dim: int
    volume: float
    diameter: float
    injectivity_radius: float

    def __eq__(self, other) -> bool:
        return isinstance(other, Manifold) and (self.kind, self.dim) == (
            other.kind,
            other.dim,
        )

    def __hash__(self) -> int:
        return hash((self.kind, self.dim))

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"

    # -- points ---------------------------------------------------------

    def as_point(self, p) -> np.ndarray:
        """Canonicalize and validate a single point."""
        raise NotImplementedError

    def as_cloud(self, pts) -> np.ndarray:
        """Canonicalize a stacked ``(N, point_dim)`` array of points."""
        raise NotImplementedError

    # -- geodesics ------------------------------------------------------

    def exp(self, p, vec, t: float = 1.0) -> np.ndarray:
        """Geodesic started at ``p`` with velocity ``vec``, evaluated at time ``t``."""
        raise NotImplementedError

    def exp_many(self, pts: np.ndarray, vecs: np.ndarray, t: float = 1.0) -> np.ndarray:
        """Vectorized :meth:`exp` over stacked points and velocities."""
        raise NotImplementedError

    def exp_map(self, p, v: TangentVector, t: float = 1.0) -> np.ndarray:
        """Geodesic flow of a :class:`TangentVector`; validates the base point."""
        p = self.as_point(p)
        base = self.as_point(v.base)
        if not np.allclose(base, p, rtol=0.0, atol=1e-9):
            raise ValueError("tangent vector is attached to a different base point")
        vec = np.asarray(v.vec, dtype=float)
        self._check_tangent(p, vec)
        return self.exp(p, vec, t)

    def _check_tangent(self, p: np.ndarray, vec: np.ndarray) -> None:
        if vec.shape != (self.point_dim,):
            raise ValueError("tangent coordinates have wrong arity")
        if not np.all(np.isfinite(vec)):
            raise ValueError("tangent coordinates must be finite")

    # -- metric ---------------------------------------------------------

    def distance(self, p, q) -> float:
        p = self.as_point(p)
        q = self.as_point(q)
        return float(self.distances(p, q[None, :])[0])

    def distances(self, p, cloud: np.ndarray) -> np.ndarray:
        """Geodesic distances from one point to each row of a cloud."""
        raise NotImplementedError

    # -- sampling and frames -------------------------------------------

    def sample_uniform(self, rng: np.random.Generator, size: int | None = None):
        """Draw from the normalized volume measure.

        Returns a single point when ``size`` is None, otherwise an
        ``(size, point_dim)`` array.
        """
        raise NotImplementedError

    def tangent_frame(self, p) -> np.ndarray:
        """Orthonormal basis of the tangent space, rows of shape ``(dim, point_dim)``."""
        raise NotImplementedError


class Circle(Manifold):
    """Circle of circumference ``2*pi``, coordinates are angles."""

    kind = "circle"
    dim = 1
    point_dim = 1
    volume = TWO_PI
    diameter = math.pi
    injectivity_radius = math.pi

    def as_point(self, p) -> np.ndarray:
        arr = np.atleast_1d(np.asarray(p, dtype=float))
        if arr.shape != (1,):
            raise ValueError("circle points are a single angle")
        if not np.all(np.isfinite(arr)):
            raise ValueError("circle points must be finite")
        return np.mod(arr, TWO_PI)

    def as_cloud(self, pts) -> np.ndarray:
        arr = np.asarray(pts, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[1] != 1 or not np.all(np.isfinite(arr)):
            raise ValueError("expected an (N, 1) array of finite angles")
        return np.mod(arr, TWO_PI)

    def exp(self, p, vec, t: float = 1.0) -> np.ndarray:
        p = self.as_point(p)
        vec = np.atleast_1d(np.asarray(vec, dtype=float))
        return np.mod(p + t * vec, TWO_PI)

    def exp_many(self, pts, vecs, t: float = 1.0) -> np.ndarray:
        return np.mod(pts + t * vecs, TWO_PI)

    def distances(self, p, cloud) -> np.ndarray:
        p = self.as_point(p)
        delta = np.abs(np.asarray(cloud, dtype=float)[:, 0] - p[0])
        delta = np.mod(delta, TWO_PI)
        return np.minimum(delta, TWO_PI - delta)

    def sample_uniform(self, rng, size=None):
        if size is None:
            return np.array([rng.uniform(0.0, TWO_PI)])
        return rng.uniform(0.0, TWO_PI, size=(size, 1))

    def tangent_frame(self, p) -> np.ndarray:
        return np.array([[1.0]])


class FlatTorus(Manifold):
    """Flat torus with unit side lengths, fundamental domain ``[0, 1)^d``."""

    kind = "torus"

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("torus dimension must be at least 1")
        self.dim = int(dim)
        self.point_dim = int(dim)
        self.volume = 1.0
        self.diameter = math.sqrt(dim) / 2.0
        self.injectivity_radius = 0.5

    def __repr__(self) -> str:
        return f"FlatTorus({self.dim})"

    def as_point(self, p) -> np.ndarray:
        arr = np.atleast_1d(np.asarray(p, dtype=float))
        if arr.shape != (self.dim,):
            raise ValueError(f"torus points have {self.dim} coordinates")
        if not np.all(np.isfinite(arr)):
            raise ValueError("torus points must be finite")
        return np.mod(arr, 1.0)

    def as_cloud(self, pts) -> np.ndarray:
        arr = np.asarray(pts, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != self.dim or not np.all(np.isfinite(arr)):
            raise ValueError(f"expected an (N, {self.dim}) array of finite coordinates")
        return np.mod(arr, 1.0)

    def exp(self, p, vec, t: float = 1.0) -> np.ndarray:
        p = self.as_point(p)
        vec = np.atleast_1d(np.asarray(vec, dtype=float))
        return np.mod(p + t * vec, 1.0)

    def exp_many(self, pts, vecs, t: float = 1.0) -> np.ndarray:
        return np.mod(pts + t * vecs, 1.0)

    def distances(self, p, cloud) -> np.ndarray:
        p = self.as_point(p)
        delta = np.abs(np.asarray(cloud, dtype=float) - p[None, :])
        delta = np.mod(delta, 1.0)
        delta = np.minimum(delta, 1.0 - delta)
        return np.sqrt(np.sum(delta * delta, axis=1))

    def sample_uniform(self, rng, size=None):
        if size is None:
            return rng.uniform(0.0, 1.0, size=self.dim)
        return rng.uniform(0.0, 1.0, size=(size, self.dim))

    def tangent_frame(self, p) -> np.ndarray:
        return np.eye(self.dim)


class Sphere2(Manifold):
    """Unit round sphere embedded in ``R^3``."""

    kind = "sphere"
    dim = 2
    point_dim = 3
    volume = 4.0 * math.pi
    diameter = math.pi
    injectivity_radius = math.pi

    def as_point(self, p) -> np.ndarray:
        arr = np.asarray(p, dtype=float)
        if arr.shape != (3,):
            raise ValueError("sphere points are 3-vectors")
        if not np.all(np.isfinite(arr)):
            raise ValueError("sphere points must be finite")
        nrm = float(np.linalg.norm(arr))
        if abs(nrm - 1.0) > POINT_ATOL:
            raise ValueError("sphere points must be unit vectors within 1e-12")
        return arr / nrm

    def as_cloud(self, pts) -> np.ndarray:
        arr = np.asarray(pts, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 3 or not np.all(np.isfinite(arr)):
            raise ValueError("expected an (N, 3) array of finite coordinates")
        nrm = np.linalg.norm(arr, axis=1)
        if np.any(np.abs(nrm - 1.0) > POINT_ATOL):
            raise ValueError("sphere points must be unit vectors within 1e-12")
        return arr / nrm[:, None]

    def _check_tangent(self, p, vec) -> None:
        super()._check_tangent(p, vec)
        speed = float(np.linalg.norm(vec))
        if abs(float(np.dot(p, vec))) > 1e-9 * max(speed, 1.0):
            raise ValueError("tangent vector must be orthogonal to the base point")

    def exp(self, p, vec, t: float = 1.0) -> np.ndarray:
        p = self.as_point(p)
        vec = np.asarray(vec, dtype=float)
        speed = float(np.linalg.norm(vec))
        if speed == 0.0 or t == 0.0:
            return p.copy()
        theta = t * speed
        out = math.cos(theta) * p + math.sin(theta) * (vec / speed)
        return out / np.linalg.norm(out)

    def exp_many(self, pts, vecs, t: float = 1.0) -> np.ndarray:
        speed = np.linalg.norm(vecs, axis=1)
        theta = t * speed
        safe = np.where(speed == 0.0, 1.0, speed)
        unit = vecs / safe[:, None]
        out = np.cos(theta)[:, None] * pts + np.sin(theta)[:, None] * unit
        return out / np.linalg.norm(out, axis=1, keepdims=True)

    def distances(self, p, cloud) -> np.ndarray:
        p = self.as_point(p)
        dots = np.clip(np.asarray(cloud, dtype=float) @ p, -1.0, 1.0)
        return np.arccos(dots)

    def sample_uniform(self, rng, size=None):
        n = 1 if size is None else size
        raw = rng.normal(size=(n, 3))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        return raw[0] if size is None else raw

    def tangent_frame(self, p) -> np.ndarray:
        p = self.as_point(p)
        e1, e2 = self.tangent_frames(p[None, :])
        return np.vstack([e1[0], e2[0]])

    def tangent_frames(self, pts: np.ndarray):
        """Deterministic orthonormal frames for a batch of points.

        The seed axis is the coordinate axis least aligned with the point,
        which keeps the construction well conditioned everywhere.
        """
        pts = np.asarray(pts, dtype=float)
        idx = np.argmin(np.abs(pts), axis=1)
        rows = np.arange(pts.shape[0])
        seed = np.zeros_like(pts)
        seed[rows, idx] = 1.0
        e1 = seed - pts * pts[rows, idx][:, None]
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        e2 = np.cross(pts, e1)
        return e1, e2

    @staticmethod
    def chord(arc):
        """Euclidean chord length corresponding to an arc distance."""
        return 2.0 * np.sin(np.asarray(arc) / 2.0)


def make_manifold(kind: str, dim: int | None = None) -> Manifold:
    """Factory keyed by the ``kind`` strings used in configs and file headers."""
    kind = kind.lower()
    if kind == "circle":
        return Circle()
    if kind == "torus":
        if dim is None:
            raise ValueError("torus requires a dimension")
        return FlatTorus(dim)
    if kind == "sphere":
        return Sphere2()
    raise ValueError(f"unknown manifold kind: {kind!r}")


# ---------------------------------------------------------------------------
# finite-difference Laplacian
# ---------------------------------------------------------------------------


def finite_difference_laplacian(m: Manifold, f, p, h: float = 1e-3) -> float:
    """Symmetric geodesic second-difference estimate of the Laplacian.

    Sums the stencil ``(f(exp(p, e, h)) + f(exp(p, e, -h)) - 2 f(p)) / h**2``
    over an orthonormal tangent frame.  The error is ``O(h**2)``, so halving
    ``h`` should shrink it by about a factor of four.
    """
    p = m.as_point(p)
    frame = m.tangent_frame(p)
    f0 = float(np.asarray(f(p)))
    acc = 0.0
    for e in frame:
        fp = float(np.asarray(f(m.exp(p, e, h))))
        fm = float(np.asarray(f(m.exp(p, e, -h))))
        acc += fp + fm - 2.0 * f0
    return acc / (h * h)


# ---------------------------------------------------------------------------
# radial volume density
# ---------------------------------------------------------------------------


def volume_density_expansion_check(
    m: Manifold, p, radii: Sequence[float]
) -> list[DensityRow]:
    """Compare the radial volume density against its curvature expansion.

    For each radius ``r`` the exact density of the volume element in normal
    coordinates at geodesic distance ``r`` is compared with the quadratic
    curvature approximation.  On the sphere the density is ``sin(r)/r`` and
    the approximation ``1 - r**2/6``; the deviation must stay below
    ``0.05 * r**4`` for ``r <= 0.5``.  Flat manifolds have density exactly 1.
    """
    m.as_point(p)
    rows = []
    for r in radii:
        r = float(r)
        if r < 0.0:
            raise ValueError("radius must be nonnegative")
        if r >= m.injectivity_radius:
            raise ValueError(
                f"radius {r} is outside the injectivity radius {m.injectivity_radius}"
            )
        if isinstance(m, Sphere2):
            density = float(np.sinc(r / math.pi))
            quadratic = 1.0 - r * r / 6.0
        else:
            density = 1.0
            quadratic = 1.0
        deviation = abs(density - quadratic)
        tolerance = 0.05 * r**4
        rows.append(
            DensityRow(
                radius=r,
                density=density,
                quadratic=quadratic,
                deviation=deviation,
                tolerance=tolerance,
                within=(deviation <= tolerance) if r <= 0.5 else True,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# real spherical harmonics (orthonormal over the surface measure)
# ---------------------------------------------------------------------------


def _sph(l: int, m_idx: int) -> Callable[[np.ndarray], np.ndarray]:
    c = math.sqrt
    pi = math.pi

    def xyz(p):
        p = np.asarray(p, dtype=float)
        return p[..., 0], p[..., 1], p[..., 2]

    table = {
        (0, 0): lambda x, y, z: 0.5 / c(pi) * np.ones_like(z),
        (1, -1): lambda x, y, z: c(3 / (4 * pi)) * y,
        (1, 0): lambda x, y, z: c(3 / (4 * pi)) * z,
        (1, 1): lambda x, y, z: c(3 / (4 * pi)) * x,
        (2, -2): lambda x, y, z: 0.5 * c(15 / pi) * x * y,
        (2, -1): lambda x, y, z: 0.5 * c(15 / pi) * y * z,
        (2, 0): lambda x, y, z: 0.25 * c(5 / pi) * (3 * z * z - 1.0),
        (2, 1): lambda x, y, z: 0.5 * c(15 / pi) * x * z,
        (2, 2): lambda x, y, z: 0.25 * c(15 / pi) * (x * x - y * y),
        (3, -3): lambda x, y, z: 0.25 * c(35 / (2 * pi)) * y * (3 * x * x - y * y),
        (3, -2): lambda x, y, z: 0.5 * c(105 / pi) * x * y * z,
        (3, -1): lambda x, y, z: 0.25 * c(21 / (2 * pi)) * y * (5 * z * z - 1.0),
        (3, 0): lambda x, y, z: 0.25 * c(7 / pi) * (5 * z**3 - 3 * z),
        (3, 1): lambda x, y, z: 0.25 * c(21 / (2 * pi)) * x * (5 * z * z - 1.0),
        (3, 2): lambda x, y, z: 0.25 * c(105 / pi) * (x * x - y * y) * z,
        (3, 3): lambda x, y, z: 0.25 * c(35 / (2 * pi)) * x * (x * x - 3 * y * y),
    }
    if (l, m_idx) in table:
        fn = table[(l, m_idx)]

        def ev(p):
            x, y, z = xyz(p)
            return fn(x, y, z)

        return ev

    # Degrees beyond the closed-form table via associated Legendre functions.
    am = abs(m_idx)
    norm = math.sqrt(
        (2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am)
    )
    if am:
        norm *= math.sqrt(2.0)

    def ev_general(p):
        x, y, z = xyz(p)
        leg = special.lpmv(am, l, np.clip(z, -1.0, 1.0))
        if m_idx == 0:
            return norm * leg
        az = np.arctan2(y, x)
        trig = np.cos(am * az) if m_idx > 0 else np.sin(am * az)
        return norm * leg * trig

    return ev_general


def _sph_id(l: int, m_idx: int) -> str:
    if m_idx < 0:
        return f"y{l}m{-m_idx}"
    if m_idx > 0:
        return f"y{l}p{m_idx}"
    return f"y{l}0"


def _fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count)
    z = 1.0 - (2.0 * i + 1.0) / count
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _numeric_lipschitz(m: Sphere2, f, samples: int = 4096, h: float = 1e-4) -> float:
    """Gradient sup-norm estimate over a deterministic sphere covering."""
    pts = _fibonacci_sphere(samples)
    e1, e2 = m.tangent_frames(pts)
    grad_sq = np.zeros(samples)
    for e in (e1, e2):
        fp = np.asarray(f(m.exp_many(pts, e, h)))
        fm = np.asarray(f(m.exp_many(pts, e, -h)))
        grad_sq += ((fp - fm) / (2.0 * h)) ** 2
    return float(np.sqrt(grad_sq.max())) * 1.1 + 1e-9


# ---------------------------------------------------------------------------
# test-function libraries
# ---------------------------------------------------------------------------


def _circle_fn(kind: str, k: int) -> TestFunction:
    if kind == "const":
        return TestFunction(
            id="const",
            eval=lambda p: np.ones_like(np.asarray(p, dtype=float)[..., 0]),
            laplacian=lambda p: np.zeros_like(np.asarray(p, dtype=float)[..., 0]),
            lipschitz_bound=0.0,
        )
    trig = np.cos if kind == "cos" else np.sin
    name = f"{kind}{k}t" if k > 1 else f"{kind}t"

    def ev(p, trig=trig, k=k):
        return trig(k * np.asarray(p, dtype=float)[..., 0])

    def lap(p, trig=trig, k=k):
        return -(k * k) * trig(k * np.asarray(p, dtype=float)[..., 0])

    return TestFunction(id=name, eval=ev, laplacian=lap, lipschitz_bound=float(k))


def _torus_fn(kinds: tuple[str, ...], ks: tuple[int, ...]) -> TestFunction:
    """Product of one-dimensional Fourier factors, an eigenfunction of the Laplacian."""
    d = len(kinds)
    ksq = sum(k * k for k in ks)
    parts = []
    for a, (kind, k) in enumerate(zip(kinds, ks)):
        if kind != "one":
            parts.append(f"{kind}{k}_x{a}")
    name = "*".join(parts) if parts else "const"

    def ev(p, kinds=kinds, ks=ks):
        p = np.asarray(p, dtype=float)
        out = np.ones_like(p[..., 0])
        for a, (kind, k) in enumerate(zip(kinds, ks)):
            if kind == "cos":
                out = out * np.cos(TWO_PI * k * p[..., a])
            elif kind == "sin":
                out = out * np.sin(TWO_PI * k * p[..., a])
        return out

    def lap(p, ksq=ksq):
        return -(4.0 * math.pi**2) * ksq * ev(p)

    lip = TWO_PI * math.sqrt(ksq)
    return TestFunction(id=name, eval=ev, laplacian=lap, lipschitz_bound=lip)


@lru_cache(maxsize=None)
def _library_cached(kind: str, dim: int) -> tuple[TestFunction, ...]:
    m = make_manifold(kind, dim)
    if isinstance(m, Circle):
        fns = [_circle_fn("const", 0)]
        for k in (1, 2, 3):
            fns.append(_circle_fn("cos", k))
            fns.append(_circle_fn("sin", k))
        return tuple(fns)
    if isinstance(m, FlatTorus):
        d = m.dim
        zero = ("one",) * d
        fns = [_torus_fn(zero, (0,) * d)]
        if d == 1:
            for k in (1, 2, 3):
                fns.append(_torus_fn(("cos",), (k,)))
                fns.append(_torus_fn(("sin",), (k,)))
        else:
            for axis in range(min(d, 2)):
                for kind in ("cos", "sin"):
                    kinds = list(zero)
                    ks = [0] * d
                    kinds[axis] = kind
                    ks[axis] = 1
                    fns.append(_torus_fn(tuple(kinds), tuple(ks)))
            mixed = list(zero)
            ks = [0] * d
            mixed[0] = "cos"
            mixed[1] = "cos"
            ks[0] = ks[1] = 1
            fns.append(_torus_fn(tuple(mixed), tuple(ks)))
            mixed[0] = "sin"
            fns.append(_torus_fn(tuple(mixed), tuple(ks)))
        return tuple(fns)
    if isinstance(m, Sphere2):
        fns = []
        for l in range(0, 4):
            for m_idx in range(-l, l + 1):
                ev = _sph(l, m_idx)
                lam = float(l * (l + 1))

                def lap(p, ev=ev, lam=lam):
                    return -lam * np.asarray(ev(p))

                lip = 0.0 if l == 0 else _numeric_lipschitz(m, ev)
                fns.append(
                    TestFunction(
                        id=_sph_id(l, m_idx),
                        eval=ev,
                        laplacian=lap,
                        lipschitz_bound=lip,
                    )
                )
        return tuple(fns)
    raise ValueError(f"no library for {m!r}")


def test_function_library(m: Manifold) -> tuple[TestFunction, ...]:
    """Smooth observables with closed-form Laplacians on ``m``.

    Circle: constant plus ``cos(k t)``, ``sin(k t)`` for ``k <= 3``.
    Torus: constant plus low Fourier products.  Sphere: real spherical
    harmonics up to degree 3.
    """
    return _library_cached(m.kind, m.dim)


# ---------------------------------------------------------------------------
# Laplace eigenbasis (used by the spectral heat solver)
# ---------------------------------------------------------------------------


def _torus_wavevectors(d: int, count: int) -> list[tuple[int, ...]]:
    """Nonzero integer wavevectors, one per ``{k, -k}`` pair, sorted by norm."""
    span = 1
    while (2 * span + 1) ** d < 2 * count + 1:
        span += 1
    grids = np.meshgrid(*[np.arange(-span, span + 1)] * d, indexing="ij")
    flat = np.stack([g.ravel() for g in grids], axis=1)
    keep = []
    for row in flat:
        tup = tuple(int(v) for v in row)
        if all(v == 0 for v in tup):
            continue
        first = next(v for v in tup if v != 0)
        if first < 0:
            continue
        keep.append(tup)
    keep.sort(key=lambda k: (sum(v * v for v in k), k))
    return keep


def laplace_eigenbasis(m: Manifold, count: int = 64) -> tuple[Mode, ...]:
    """First ``count`` Laplace eigenfunctions, orthonormal w.r.t. ``dV/V``.

    Ordered by eigenvalue.  The constant mode comes first with eigenvalue 0.
    """
    if count < 1:
        raise ValueError("count must be positive")
    modes: list[Mode] = []
    if isinstance(m, Circle):
        modes.append(
            Mode("const", 0.0, lambda p: np.ones_like(np.asarray(p, dtype=float)[..., 0]))
        )
        k = 1
        while len(modes) < count:
            for kind, trig in (("cos", np.cos), ("sin", np.sin)):

                def ev(p, trig=trig, k=k):
                    return math.sqrt(2.0) * trig(k * np.asarray(p, dtype=float)[..., 0])

                modes.append(Mode(f"{kind}{k}", float(k * k), ev))
            k += 1
    elif isinstance(m, FlatTorus):
        modes.append(
            Mode("const", 0.0, lambda p: np.ones_like(np.asarray(p, dtype=float)[..., 0]))
        )
        for kvec in _torus_wavevectors(m.dim, count):
            if len(modes) >= count:
                break
            lam = 4.0 * math.pi**2 * sum(v * v for v in kvec)
            karr = np.asarray(kvec, dtype=float)
            for kind, trig in (("cos", np.cos), ("sin", np.sin)):

                def ev(p, trig=trig, karr=karr):
                    phase = TWO_PI * (np.asarray(p, dtype=float) @ karr)
                    return math.sqrt(2.0) * trig(phase)

                modes.append(Mode(f"{kind}{kvec}", lam, ev))
    elif isinstance(m, Sphere2):
        l = 0
        while len(modes) < count:
            for m_idx in range(-l, l + 1):
                base = _sph(l, m_idx)

                def ev(p, base=base):
                    return math.sqrt(4.0 * math.pi) * np.asarray(base(p))

                modes.append(Mode(_sph_id(l, m_idx), float(l * (l + 1)), ev))
            l += 1
    else:
        raise ValueError(f"no eigenbasis for {m!r}")
    return tuple(modes[:count])


# ---------------------------------------------------------------------------
# quadrature rules w.r.t. normalized volume
# ---------------------------------------------------------------------------


def quadrature_rule(m: Manifold, min_nodes: int = 10_000):
    """Nodes and weights integrating w.r.t. normalized volume (weights sum to 1).

    Circle and torus use midpoint product grids, which are spectrally
    accurate for smooth periodic integrands.  The sphere uses a
    Gauss-Legendre grid in the polar variable times a uniform azimuthal
    grid, exact for all harmonics resolved by the grid.
    """
    if isinstance(m, Circle):
        n = max(int(min_nodes), 4)
        theta = (np.arange(n) + 0.5) / n * TWO_PI
        return theta[:, None], np.full(n, 1.0 / n)
    if isinstance(m, FlatTorus):
        per_axis = max(int(math.ceil(min_nodes ** (1.0 / m.dim))), 4)
        axes = [(np.arange(per_axis) + 0.5) / per_axis] * m.dim
        grids = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        return pts, np.full(pts.shape[0], 1.0 / pts.shape[0])
    if isinstance(m, Sphere2):
        n_polar = max(int(math.ceil(math.sqrt(min_nodes / 2.0))), 16)
        n_az = 2 * n_polar
        z, wz = np.polynomial.legendre.leggauss(n_polar)
        phi = (np.arange(n_az) + 0.5) / n_az * TWO_PI
        zz, pp = np.meshgrid(z, phi, indexing="ij")
        rr = np.sqrt(np.clip(1.0 - zz * zz, 0.0, None))
        pts = np.column_stack(
            [(rr * np.cos(pp)).ravel(), (rr * np.sin(pp)).ravel(), zz.ravel()]
        )
        w = np.repeat(wz / 2.0, n_az) / n_az
        return pts, w
    raise ValueError(f"no quadrature rule for {m!r}")
