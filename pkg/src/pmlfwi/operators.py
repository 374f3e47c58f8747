"""Diagonal mass, matrix-free system operators, probing pulses and surface loads.

The semi-discrete system is ``M d'' + C d' + K d + G dbar = f`` over the
padded internal vector ``[u (3, N), S (6, Ns)]``. Every weak-form term is
routed by the time-derivative order of its trial factor:

* ``M``: ``rho`` (RD) and ``rho a`` (PML) on displacement rows, ``a`` on stress rows;
* ``C``: ``rho b`` and ``b`` lumped terms plus both ``Lambda_e`` couplings;
* ``K``: RD stiffness, ``rho c`` and ``c`` lumped terms plus the ``Lambda_p`` couplings;
* ``G``: ``rho d`` and ``d`` lumped terms plus the ``Lambda_w`` couplings.

All integrals use LGL quadrature on the element nodes, which makes ``M``
diagonal. Fixed (Dirichlet) displacement entries are kept at zero by a zero
inverse mass and by masking every operator output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from pmlfwi._backend import kernels
from pmlfwi.pml_medium import MaterialField, PMLCoefficients, nodal_pml_coefficients, StretchProfile, velocities
from pmlfwi.specgrid import MeshError, SpectralMesh

OPERATOR_NAMES = ("Minv", "M", "C", "K", "G", "CT", "KT", "GT")


@dataclass
class OperatorSet:
    """Tabulated data for matrix-free application of ``M, C, K, G`` and transposes.

    Build with :func:`assemble`. Public ``apply`` works on compact state
    vectors; the ``*_internal`` methods work on padded internal vectors and
    are what the time integrators use.
    """

    mesh: SpectralMesh
    material: MaterialField
    coeffs: PMLCoefficients
    mass: np.ndarray = field(repr=False)
    inv_mass: np.ndarray = field(repr=False)
    free_mask: np.ndarray = field(repr=False)
    history_mask: np.ndarray = field(repr=False)
    lump: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False)
    _L: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False)

    @property
    def size(self) -> int:
        return self.mesh.internal_size

    @property
    def mass_diag(self) -> np.ndarray:
        """Diagonal of ``M`` on the compact state."""
        return self.mesh.pack(self.mass)

    # ---- internal (padded) application -----------------------------------
    def system_internal(self, x0: np.ndarray | None, x1: np.ndarray | None, x2: np.ndarray | None,
                        out: np.ndarray | None = None) -> np.ndarray:
        """``C x2 + K x1 + G x0``; ``None`` blocks are treated as zero."""
        return self._combined(x0, x1, x2, out, transpose=False)

    def system_transpose_internal(self, y0, y1, y2, out=None) -> np.ndarray:
        """``C^T y2 + K^T y1 + G^T y0``; ``None`` blocks are treated as zero."""
        return self._combined(y0, y1, y2, out, transpose=True)

    def _combined(self, x0, x1, x2, out, transpose):
        mesh = self.mesh
        n = self.size
        zero = None
        blocks = []
        for x in (x0, x1, x2):
            if x is None:
                if zero is None:
                    zero = np.zeros(n)
                x = zero
            blocks.append(x * self.free_mask)
        if out is None:
            out = np.zeros(n)
        else:
            out[:] = 0.0
        ou, oS = mesh.split(out)
        (u0, S0), (u1, S1), (u2, S2) = (mesh.split(b) for b in blocks)

        # lumped PML terms (diagonal, hence self-adjoint)
        lb, lc, ld = self.lump
        out += lb * blocks[2] + lc * blocks[1] + ld * blocks[0]

        m = self.material
        D = mesh.derivative_matrix
        wq = mesh.quad_weights
        kernels.elastic_apply(u1, m.lam, m.mu, mesh.conn_rd, D, wq, ou)
        Le, Lp, Lw = self._L
        if len(mesh.pml_elements):
            f = kernels.pml_apply_transpose if transpose else kernels.pml_apply
            f(u0, u1, u2, S0, S1, S2, m.lam, m.mu, Le, Lp, Lw,
              mesh.conn_pml, mesh.stress_conn, D, wq, ou, oS)
        out *= self.free_mask
        return out

    # ---- compact-vector API ----------------------------------------------
    def apply(self, op: str, v: np.ndarray) -> np.ndarray:
        """Apply one of ``Minv, M, C, K, G, CT, KT, GT`` to a compact state vector."""
        if op not in OPERATOR_NAMES:
            raise ValueError(f"unknown operator {op!r}; expected one of {OPERATOR_NAMES}")
        v = np.asarray(v, dtype=float)
        if v.shape != (self.mesh.n_state,):
            raise MeshError(f"vector has shape {v.shape}, expected ({self.mesh.n_state},)")
        x = self.mesh.unpack(v)
        if op == "Minv":
            y = self.inv_mass * x
        elif op == "M":
            y = self.mass * x
        else:
            slot = {"G": 0, "K": 1, "C": 2}[op[0]]
            args = [None, None, None]
            args[slot] = x
            fn = self.system_transpose_internal if op.endswith("T") else self.system_internal
            y = fn(*args)
        return self.mesh.pack(y)

    def dense(self, op: str) -> np.ndarray:
        """Assembled matrix of ``op`` on the compact state (tiny meshes only)."""
        n = self.mesh.n_state
        if n > 20000:
            raise MemoryError(f"dense assembly of a {n}x{n} operator refused")
        A = np.empty((n, n))
        e = np.zeros(n)
        for j in range(n):
            e[j] = 1.0
            A[:, j] = self.apply(op, e)
            e[j] = 0.0
        return A


def _pml_slot_weights(mesh: SpectralMesh) -> np.ndarray:
    """Lumped volume weight of each stress slot."""
    sconn = mesh.stress_conn
    w = np.tile(mesh.quad_weights, len(sconn))
    return np.bincount(sconn.ravel(), weights=w, minlength=mesh.n_stress_slots)


def assemble(mesh: SpectralMesh, material: MaterialField, profile: StretchProfile | None = None,
             coeffs: PMLCoefficients | None = None) -> OperatorSet:
    """Tabulate everything needed to apply the system operators on ``mesh``.

    ``material`` must already be extended into the PML. Pass either a stretch
    ``profile`` or precomputed nodal ``coeffs``; the default profile uses the
    standard attenuation parameters.
    """
    n = mesh.n_nodes
    for name in ("lam", "mu", "rho"):
        if getattr(material, name).shape != (n,):
            raise MeshError(f"material {name} has shape {getattr(material, name).shape}, expected ({n},)")
    if coeffs is None:
        coeffs = nodal_pml_coefficients(mesh, profile or StretchProfile.for_mesh(mesh))

    w_rd = mesh.nodal_weights(mesh.rd_elements)
    w_pml = mesh.nodal_weights(mesh.pml_elements)
    w_slot = _pml_slot_weights(mesh)
    at_slot = mesh.stress_slot_node

    rho = material.rho
    mass = np.zeros(mesh.internal_size)
    mu_part, s_part = mesh.split(mass)
    mu_part[:] = rho * (w_rd + coeffs.a * w_pml)
    s_part[:] = coeffs.a[at_slot] * w_slot

    free = np.ones(mesh.internal_size)
    fu, _ = mesh.split(free)
    fu[:, mesh.fixed_mask] = 0.0
    inv_mass = np.zeros_like(mass)
    nz = (free > 0) & (mass > 0)
    inv_mass[nz] = 1.0 / mass[nz]
    if np.any((free > 0) & (mass <= 0)):
        raise MeshError("non-positive mass at a free degree of freedom")

    hist = np.zeros(mesh.internal_size)
    hu, hS = mesh.split(hist)
    hu[:, mesh.pml_closure_mask] = 1.0
    hS[:] = 1.0
    hist *= free

    lumps = []
    for coef in (coeffs.b, coeffs.c, coeffs.d):
        arr = np.zeros(mesh.internal_size)
        au, aS = mesh.split(arr)
        au[:] = rho * coef * w_pml
        aS[:] = coef[at_slot] * w_slot
        lumps.append(arr)

    L = tuple(np.ascontiguousarray(X.T) for X in (coeffs.Le, coeffs.Lp, coeffs.Lw))
    return OperatorSet(mesh, material, coeffs, mass, inv_mass, free, hist, tuple(lumps), L)


# ---- pulses -----------------------------------------------------------------


@dataclass(frozen=True)
class Pulse:
    """Truncated Gaussian probing pulse.

    ``spread`` is read as a variance (s^2): ``exp(-(t - mean)^2 / spread)``.
    ``reading="literal"`` uses ``exp(-((t - mean) / spread)^2)`` instead.
    """

    name: str
    mean: float
    spread: float
    t_end: float
    f_max: float
    reading: str = "variance"

    def __post_init__(self):
        if not (0 < self.mean < self.t_end):
            raise ValueError("pulse mean must lie in (0, t_end)")
        if self.spread <= 0:
            raise ValueError("pulse spread must be positive")
        if self.reading not in ("variance", "literal"):
            raise ValueError(f"unknown pulse reading {self.reading!r}")


PULSES = {
    "p20": Pulse("p20", 0.11, 0.0014, 0.20, 20.0),
    "p30": Pulse("p30", 0.08, 0.0007, 0.15, 30.0),
    "p40": Pulse("p40", 0.06, 0.0004, 0.12, 40.0),
}

# below this relative amplitude the pulse is flushed to exact zero
PULSE_FLOOR = 1e-8


def gaussian_pulse(pulse: Pulse, t):
    """Pulse amplitude at ``t`` (scalar or array); zero outside ``[0, t_end]``."""
    t = np.asarray(t, dtype=float)
    if pulse.reading == "variance":
        val = np.exp(-((t - pulse.mean) ** 2) / pulse.spread)
    else:
        val = np.exp(-(((t - pulse.mean) / pulse.spread) ** 2))
    val = np.where((t >= 0) & (t <= pulse.t_end) & (val >= PULSE_FLOOR), val, 0.0)
    return float(val) if val.ndim == 0 else val


def pulse_cutoff_frequency(pulse: Pulse, dt: float = 1e-4, duration: float = 2.0, level: float = 1e-3) -> float:
    """Highest frequency where the sampled pulse spectrum is above ``level`` times its peak."""
    t = np.arange(0.0, duration, dt)
    spec = np.abs(np.fft.rfft(gaussian_pulse(pulse, t)))
    freqs = np.fft.rfftfreq(len(t), dt)
    above = np.flatnonzero(spec >= level * spec.max())
    return float(freqs[above[-1]])


# ---- loads ------------------------------------------------------------------


@dataclass(frozen=True)
class LoadCase:
    """Uniform vertical traction on a rectangle of the free surface.

    ``patch = (x_min, x_max, y_min, y_max)`` in metres; edges must fall on
    element boundaries inside the regular domain. ``direction`` is the sign
    of the z traction (``-1`` pushes down).
    """

    patch: tuple[float, float, float, float]
    amplitude: float = 1000.0
    pulse: Pulse = PULSES["p20"]
    direction: float = -1.0

    @classmethod
    def centered(cls, half_width: float, **kwargs) -> LoadCase:
        return cls((-half_width, half_width, -half_width, half_width), **kwargs)

    def area(self) -> float:
        x0, x1, y0, y1 = self.patch
        return (x1 - x0) * (y1 - y0)

    def nodal_pattern(self, mesh: SpectralMesh) -> np.ndarray:
        """Consistent nodal weights of the unit traction on the z components, shape ``(N,)``."""
        x0, x1, y0, y1 = self.patch
        h = mesh.element_size
        lx, ly, _ = mesh.spec.rd_extent
        tol = 1e-9 * h
        if x1 <= x0 or y1 <= y0:
            raise MeshError("load patch is empty")
        if x0 < -lx / 2 - tol or x1 > lx / 2 + tol or y0 < -ly / 2 - tol or y1 > ly / 2 + tol:
            raise MeshError("load patch extends outside the free surface of the regular domain")
        xs, ys, _ = mesh.axes
        for v, ax in ((x0, xs), (x1, xs), (y0, ys), (y1, ys)):
            k = int(np.argmin(np.abs(ax - v)))
            if abs(ax[k] - v) > tol or k % 2:
                raise MeshError(f"load patch edge {v} is not on an element boundary")
        w = mesh.basis.weights * (h / 2)
        face_w = np.outer(w, w).ravel()
        out = np.zeros(mesh.n_nodes)
        top_local = np.array([a * 9 + b * 3 + 2 for a in range(3) for b in range(3)])
        for e, _face in mesh.boundary_faces()["top_rd"]:
            nodes = mesh.conn[e, top_local]
            cx, cy = mesh.coords[nodes[4], :2]
            if x0 < cx < x1 and y0 < cy < y1:
                out[nodes] += face_w
        return out

    def force_provider(self, mesh: SpectralMesh) -> Callable[[float], np.ndarray]:
        """``t -> f(t)`` as a padded internal vector."""
        pattern = np.zeros(mesh.internal_size)
        pu, _ = mesh.split(pattern)
        pu[2] = self.direction * self.amplitude * self.nodal_pattern(mesh)

        def provider(t: float) -> np.ndarray:
            return gaussian_pulse(self.pulse, t) * pattern

        return provider


def assemble_force(load: LoadCase, mesh: SpectralMesh, t: float) -> np.ndarray:
    """Load vector at time ``t`` on the compact state."""
    return mesh.pack(load.force_provider(mesh)(t))


# ---- stability --------------------------------------------------------------

# calibrated so that h = 1.25 m, c_p ~ 346 m/s gives about 1e-3 s (see ledger)
DEFAULT_CFL = 0.6


def estimate_stable_dt(mesh: SpectralMesh, material: MaterialField, cfl: float = DEFAULT_CFL) -> float:
    """``cfl * min nodal spacing / max c_p``."""
    _, cp = velocities(material)
    return cfl * (mesh.element_size / 2) / float(cp.max())


def spectral_radius(ops: OperatorSet, iterations: int = 60, seed: int = 0) -> float:
    """Power-iteration estimate of ``max |eig(M^-1 K)|`` (RD stiffness only, for dt checks)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(ops.size) * ops.free_mask
    lam = 0.0
    for _ in range(iterations):
        y = ops.inv_mass * ops.system_internal(None, x, None)
        lam = float(np.linalg.norm(y))
        if lam == 0:
            return 0.0
        x = y / lam
    return lam
