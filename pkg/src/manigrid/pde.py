"""Spectral heat-equation solver used as the convergence oracle.

Densities are truncated eigenbasis expansions; evolution multiplies each
coefficient by the exact semigroup factor, so the only approximation in
the pipeline is the initial projection, whose residual is reported and
must be checked by every consumer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from manigrid.manifolds import Manifold, Mode, TestFunction, laplace_eigenbasis, quadrature_rule

DIFFUSIVITIES = {"half": 0.5, "one": 1.0}


@dataclass(frozen=True)
class SpectralField:
    """Eigenbasis coefficients of a density, ordered by eigenvalue."""

    manifold: Manifold
    modes: tuple[Mode, ...]
    coefficients: np.ndarray
    truncation: int
    quadrature_residual: float

    def __post_init__(self) -> None:
        lams = np.array([md.eigenvalue for md in self.modes])
        if lams.size and (np.any(lams < 0) or np.any(np.diff(lams) < 0)):
            raise ValueError("eigenvalues must be nonnegative and nondecreasing")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("coefficients must be finite")

    def reconstruct(self, points: np.ndarray) -> np.ndarray:
        """Evaluate the expansion on a stacked cloud of points."""
        total = np.zeros(np.asarray(points).shape[0])
        for md, c in zip(self.modes, self.coefficients):
            if c != 0.0:
                total += c * np.asarray(md.eval(points), dtype=float)
        return total


def project(
    rho0: TestFunction | Callable[[np.ndarray], np.ndarray],
    m: Manifold,
    truncation: int = 64,
) -> SpectralField:
    """Quadrature projection of a bounded profile onto the eigenbasis.

    The residual field stores the max reconstruction error on the
    quadrature nodes; consumers must check it against their tolerance.
    """
    if truncation < 1:
        raise ValueError("truncation must be at least 1")
    profile = rho0.eval if isinstance(rho0, TestFunction) else rho0
    modes = laplace_eigenbasis(m, truncation)
    nodes, weights = quadrature_rule(m)
    vals = np.asarray(profile(nodes), dtype=float).reshape(-1)
    basis = np.stack([np.asarray(md.eval(nodes), dtype=float) for md in modes])
    coeffs = basis @ (weights * vals)
    recon = coeffs @ basis
    residual = float(np.max(np.abs(recon - vals)))
    return SpectralField(m, modes, coeffs, truncation, residual)


def evolve(f: SpectralField, t: float, diffusivity: str = "one") -> SpectralField:
    """Heat semigroup: coefficient_k -> coefficient_k * exp(-lambda_k t s)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if diffusivity not in DIFFUSIVITIES:
        raise ValueError(f"diffusivity must be one of {sorted(DIFFUSIVITIES)}")
    s = DIFFUSIVITIES[diffusivity]
    lams = np.array([md.eigenvalue for md in f.modes])
    coeffs = f.coefficients * np.exp(-lams * t * s)
    return SpectralField(f.manifold, f.modes, coeffs, f.truncation, f.quadrature_residual)


def pair(f: SpectralField, phi: TestFunction) -> float:
    """Weak pairing with the normalized volume, integral of rho * phi dVbar.

    Contracts coefficients when phi lies in the truncated eigenspace
    (checked by its own projection residual), falling back to direct
    quadrature otherwise.
    """
    nodes, weights = quadrature_rule(f.manifold)
    pv = np.asarray(phi.eval(nodes), dtype=float).reshape(-1)
    basis = np.stack([np.asarray(md.eval(nodes), dtype=float) for md in f.modes])
    phi_coeffs = basis @ (weights * pv)
    tail = float(np.max(np.abs(phi_coeffs @ basis - pv)))
    if tail < 1e-8:
        return float(f.coefficients @ phi_coeffs)
    recon = f.coefficients @ basis
    return float(weights @ (recon * pv))


def save_field(path: str, f: SpectralField) -> None:
    """CSV rows mode_id,lambda,coefficient in stored order."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("mode_id,lambda,coefficient\n")
        for md, c in zip(f.modes, f.coefficients):
            fh.write(f"{md.id},{md.eigenvalue:.17g},{c:.17g}\n")
