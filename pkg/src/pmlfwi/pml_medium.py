"""PML stretch profiles, stretch-tensor products and nodal material fields."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from pmlfwi.specgrid import SpectralMesh

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = (1e5, 1e10)


@dataclass(frozen=True)
class StretchProfile:
    """Polynomial attenuation profile ``alpha = 1 + alpha0 s^m``, ``beta = beta0 s^m``.

    ``rd_half`` holds the RD half-extents in x and y and the RD depth;
    ``thickness`` is the PML thickness L. ``s`` is the normalized depth into
    the PML (0 on the interface, 1 on the outer boundary).
    """

    rd_half: tuple[float, float, float]
    thickness: float
    alpha0: float = 5.0
    beta0: float = 400.0
    m: float = 2.0

    def __post_init__(self):
        if self.alpha0 < 0 or self.beta0 < 0:
            raise ValueError("alpha0 and beta0 must be non-negative")
        if self.m < 1:
            raise ValueError("profile exponent m must be >= 1")
        if self.thickness <= 0:
            raise ValueError("PML thickness must be positive")

    @classmethod
    def for_mesh(cls, mesh: SpectralMesh, **kwargs) -> StretchProfile:
        lx, ly, depth = mesh.spec.rd_extent
        return cls((lx / 2, ly / 2, depth), mesh.spec.pml_thickness, **kwargs)

    def normalized_depth(self, points: np.ndarray) -> np.ndarray:
        """``s_i`` per axis, clamped to [0, 1]; shape ``(..., 3)``."""
        p = np.asarray(points, dtype=float)
        hx, hy, depth = self.rd_half
        s = np.empty(p.shape)
        s[..., 0] = (np.abs(p[..., 0]) - hx) / self.thickness
        s[..., 1] = (np.abs(p[..., 1]) - hy) / self.thickness
        s[..., 2] = (-p[..., 2] - depth) / self.thickness
        return np.clip(s, 0.0, 1.0)


def stretch_functions(profile: StretchProfile, point) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis ``(alpha, beta)`` at ``point`` (or an array of points)."""
    sm = profile.normalized_depth(point) ** profile.m
    return 1.0 + profile.alpha0 * sm, profile.beta0 * sm


@dataclass
class PMLCoefficients:
    """Stretch-tensor diagonals and scalar products, any leading shape.

    ``Le``, ``Lp``, ``Lw`` have a trailing axis of length 3; ``a``..``d`` are scalars.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    Le: np.ndarray
    Lp: np.ndarray
    Lw: np.ndarray


def pml_coefficients(alpha, beta) -> PMLCoefficients:
    """Products of the stretch functions entering the PML equations."""
    al = np.asarray(alpha, dtype=float)
    be = np.asarray(beta, dtype=float)
    a1, a2, a3 = al[..., 0], al[..., 1], al[..., 2]
    b1, b2, b3 = be[..., 0], be[..., 1], be[..., 2]
    return PMLCoefficients(
        a=a1 * a2 * a3,
        b=a2 * a3 * b1 + a3 * a1 * b2 + a1 * a2 * b3,
        c=a1 * b2 * b3 + a2 * b3 * b1 + a3 * b1 * b2,
        d=b1 * b2 * b3,
        Le=np.stack([a2 * a3, a3 * a1, a1 * a2], axis=-1),
        Lp=np.stack([a2 * b3 + a3 * b2, a3 * b1 + a1 * b3, a1 * b2 + a2 * b1], axis=-1),
        Lw=np.stack([b2 * b3, b3 * b1, b1 * b2], axis=-1),
    )


def nodal_pml_coefficients(mesh: SpectralMesh, profile: StretchProfile) -> PMLCoefficients:
    """Coefficients at every lattice node (identity in the RD closure).

    The stretch functions depend on position only, so values at shared nodes
    agree between neighbouring elements.
    """
    alpha, beta = stretch_functions(profile, mesh.coords)
    if mesh.all_rd:
        alpha[:] = 1.0
        beta[:] = 0.0
    return pml_coefficients(alpha, beta)


@dataclass
class MaterialField:
    """Nodal ``lam``, ``mu`` (Pa) and ``rho`` (kg/m^3) on the mesh lattice."""

    lam: np.ndarray
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        if not (self.lam.shape == self.mu.shape == self.rho.shape):
            raise ValueError("lam, mu and rho must have identical shapes")

    @classmethod
    def homogeneous(cls, mesh: SpectralMesh, lam: float, mu: float, rho: float) -> MaterialField:
        n = mesh.n_nodes
        return cls(np.full(n, float(lam)), np.full(n, float(mu)), np.full(n, float(rho)))

    def copy(self) -> MaterialField:
        return MaterialField(self.lam.copy(), self.mu.copy(), self.rho.copy())

    def with_values(self, lam=None, mu=None) -> MaterialField:
        return replace(
            self,
            lam=self.lam.copy() if lam is None else np.asarray(lam, dtype=float).copy(),
            mu=self.mu.copy() if mu is None else np.asarray(mu, dtype=float).copy(),
            rho=self.rho.copy(),
        )

    def validate(self) -> None:
        if np.any(self.mu <= 0) or np.any(self.lam + 2 * self.mu <= 0) or np.any(self.rho <= 0):
            raise ValueError("material field violates mu > 0, lambda + 2 mu > 0, rho > 0")


def _projection_map(mesh: SpectralMesh) -> np.ndarray:
    """Node id of the clamp-to-RD-box projection of every lattice node."""
    nx, ny, nz = mesh.lattice_shape
    p = mesh.spec.pml_elements * 2
    rx, ry, rz = (2 * n for n in mesh.spec.rd_elements)
    ix, iy, iz = mesh.lattice_index(np.arange(mesh.n_nodes))
    jx = np.clip(ix, p, p + rx)
    jy = np.clip(iy, p, p + ry)
    jz = np.clip(iz, p, nz - 1)
    return mesh.node_id(jx, jy, jz)


def extend_into_pml(material: MaterialField, mesh: SpectralMesh) -> MaterialField:
    """Copy interface values outward: every PML node takes its RD-box projection."""
    if mesh.all_rd:
        return material.copy()
    src = _projection_map(mesh)
    return MaterialField(material.lam[src], material.mu[src], material.rho[src])


def extend_nodal(values: np.ndarray, mesh: SpectralMesh) -> np.ndarray:
    if mesh.all_rd:
        return np.array(values, dtype=float)
    return np.asarray(values)[_projection_map(mesh)]


def clip_to_bounds(values: np.ndarray, bounds=DEFAULT_BOUNDS, name: str = "field") -> np.ndarray:
    lo, hi = bounds
    n_clipped = int(np.count_nonzero((values < lo) | (values > hi)))
    if n_clipped:
        log.info("clipped %d %s values to [%g, %g]", n_clipped, name, lo, hi)
    return np.clip(values, lo, hi)


def velocities(material: MaterialField) -> tuple[np.ndarray, np.ndarray]:
    """Nodal shear and compressional wave speeds ``(c_s, c_p)``."""
    ms = material.mu / material.rho
    mp = (material.lam + 2 * material.mu) / material.rho
    if np.any(ms < 0) or np.any(mp < 0):
        raise ValueError("negative modulus-to-density ratio; material invariants violated")
    return np.sqrt(ms), np.sqrt(mp)
