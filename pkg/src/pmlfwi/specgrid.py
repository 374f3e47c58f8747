"""Structured spectral-element mesh of a PML-truncated half-space box.

The regular domain (RD) is the box ``[-Lx/2, Lx/2] x [-Ly/2, Ly/2] x [-depth, 0]``.
A PML buffer wraps the four lateral faces and the bottom face; the top face
``z = 0`` is a traction-free surface. All elements are axis-aligned bricks of
the same edge length carrying 27 LGL nodes, so the global nodes form a regular
lattice with spacing ``element_size / 2``.

Lattice index ``(ix, iy, iz)`` maps to the flat node id ``(ix * NY + iy) * NZ + iz``;
``iz = 0`` is the bottom of the PML and ``iz = NZ - 1`` is the free surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import legendre as npleg

STRESS_COMPONENTS = ("xx", "yy", "zz", "xy", "yz", "xz")
# (i, j) -> position of the symmetric component in STRESS_COMPONENTS
SYM_INDEX = np.array([[0, 3, 5], [3, 1, 4], [5, 4, 2]])


class MeshError(ValueError):
    """Raised for inconsistent grid specifications or failed node lookups."""


@dataclass(frozen=True)
class Basis1D:
    """Nodal Lagrange basis on the LGL points of ``[-1, 1]``.

    ``shape_at_nodes[a, m]`` is ``l_m(xi_a)`` and ``dshape_at_nodes[a, m]`` is
    ``l_m'(xi_a)``, so ``dshape_at_nodes @ values`` differentiates nodal data.
    """

    order: int
    nodes: np.ndarray
    weights: np.ndarray
    shape_at_nodes: np.ndarray
    dshape_at_nodes: np.ndarray

    def shape(self, xi: np.ndarray | float) -> np.ndarray:
        """Evaluate all Lagrange shape functions at ``xi`` (shape ``(..., order+1)``)."""
        xi = np.asarray(xi, dtype=float)[..., None]
        out = np.ones(xi.shape[:-1] + (self.order + 1,))
        for m, xm in enumerate(self.nodes):
            for k, xk in enumerate(self.nodes):
                if k != m:
                    out[..., m] *= (xi[..., 0] - xk) / (xm - xk)
        return out


def lgl_basis(order: int) -> Basis1D:
    """Legendre-Gauss-Lobatto nodes, weights and tabulated Lagrange basis.

    Only ``order=2`` (three nodes, 27-node bricks) is supported.
    """
    if order != 2:
        raise MeshError(f"unsupported polynomial order {order}; only order 2 is implemented")
    n = order
    cn = np.zeros(n + 1)
    cn[n] = 1.0
    interior = np.sort(np.real(npleg.legroots(npleg.legder(cn))))
    nodes = np.concatenate(([-1.0], interior, [1.0]))
    nodes[np.abs(nodes) < 1e-15] = 0.0
    weights = 2.0 / (n * (n + 1) * npleg.legval(nodes, cn) ** 2)

    npts = n + 1
    shape_at_nodes = np.eye(npts)
    dshape = np.zeros((npts, npts))
    for m in range(npts):
        others = [nodes[k] for k in range(npts) if k != m]
        denom = np.prod([nodes[m] - xk for xk in others])
        # derivative of prod_k (x - x_k) by the product rule
        for a in range(npts):
            total = 0.0
            for skip in range(len(others)):
                term = 1.0
                for k, xk in enumerate(others):
                    if k != skip:
                        term *= nodes[a] - xk
                total += term
            dshape[a, m] = total / denom
    return Basis1D(order, nodes, weights, shape_at_nodes, dshape)


def _is_multiple(value: float, unit: float) -> bool:
    ratio = value / unit
    return abs(ratio - round(ratio)) < 1e-9 * max(1.0, abs(ratio))


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the PML-truncated box.

    Parameters
    ----------
    rd_extent : (Lx, Ly, depth) of the regular domain in metres.
    element_size : brick edge length in metres (same along every axis).
    pml_thickness : thickness of the lateral and bottom PML in metres.
    polynomial_order : fixed at 2.
    """

    rd_extent: tuple[float, float, float]
    element_size: float
    pml_thickness: float
    polynomial_order: int = 2

    def __post_init__(self):
        object.__setattr__(self, "rd_extent", tuple(float(v) for v in self.rd_extent))
        if len(self.rd_extent) != 3:
            raise MeshError("rd_extent needs three lengths")
        if self.polynomial_order != 2:
            raise MeshError("polynomial_order must be 2")
        h = self.element_size
        if h <= 0 or min(self.rd_extent) <= 0:
            raise MeshError("element_size and rd_extent must be positive")
        if self.pml_thickness <= 0:
            raise MeshError("pml_thickness must be at least one element")
        for name, value in zip(("Lx", "Ly", "depth", "pml_thickness"), (*self.rd_extent, self.pml_thickness)):
            if not _is_multiple(value, h):
                raise MeshError(f"{name}={value} is not an integer multiple of element_size={h}")
        if round(self.pml_thickness / h) < 1:
            raise MeshError("pml_thickness must be at least one element")

    @property
    def rd_elements(self) -> tuple[int, int, int]:
        return tuple(int(round(v / self.element_size)) for v in self.rd_extent)

    @property
    def pml_elements(self) -> int:
        return int(round(self.pml_thickness / self.element_size))

    @property
    def elements(self) -> tuple[int, int, int]:
        nx, ny, nz = self.rd_elements
        p = self.pml_elements
        return (nx + 2 * p, ny + 2 * p, nz + p)

    def refined(self, factor: int) -> GridSpec:
        return GridSpec(self.rd_extent, self.element_size / factor, self.pml_thickness, self.polynomial_order)


@dataclass(frozen=True)
class SpectralMesh:
    """Immutable structured mesh with region tags, node sets and DOF maps.

    Use :func:`build_mesh` to construct. ``stress_layout`` selects how the PML
    stress field is discretized: ``"continuous"`` shares stress nodes between
    neighbouring PML elements (6 DOFs per PML-closure node); ``"element"``
    keeps an independent set of 27 stress nodes per PML element.
    """

    spec: GridSpec
    basis: Basis1D
    stress_layout: str
    all_rd: bool
    fixed_outer: bool
    conn: np.ndarray = field(repr=False)
    element_ijk: np.ndarray = field(repr=False)
    pml_active: np.ndarray = field(repr=False)
    is_pml: np.ndarray = field(repr=False)

    # ---- lattice geometry -------------------------------------------------
    @property
    def element_size(self) -> float:
        return self.spec.element_size

    @property
    def nel(self) -> tuple[int, int, int]:
        return self.spec.elements

    @property
    def lattice_shape(self) -> tuple[int, int, int]:
        return tuple(2 * n + 1 for n in self.nel)

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.lattice_shape
        return nx * ny * nz

    @property
    def n_elements(self) -> int:
        return self.conn.shape[0]

    @cached_property
    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        h2 = self.element_size / 2
        lx, ly, depth = self.spec.rd_extent
        L = self.spec.pml_thickness
        nx, ny, nz = self.lattice_shape
        x = -(lx / 2 + L) + h2 * np.arange(nx)
        y = -(ly / 2 + L) + h2 * np.arange(ny)
        z = -(depth + L) + h2 * np.arange(nz)
        z[-1] = 0.0
        return x, y, z

    @cached_property
    def coords(self) -> np.ndarray:
        x, y, z = self.axes
        X, Y, Z = np.meshgrid(x, y, z, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def lattice_index(self, node: np.ndarray | int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        _, ny, nz = self.lattice_shape
        node = np.asarray(node)
        return node // (ny * nz), (node // nz) % ny, node % nz

    def node_id(self, ix, iy, iz):
        _, ny, nz = self.lattice_shape
        return (np.asarray(ix) * ny + np.asarray(iy)) * nz + np.asarray(iz)

    # ---- element sets ----------------------------------------------------
    @cached_property
    def rd_elements(self) -> np.ndarray:
        return np.flatnonzero(~self.is_pml)

    @cached_property
    def pml_elements(self) -> np.ndarray:
        return np.flatnonzero(self.is_pml)

    @cached_property
    def conn_rd(self) -> np.ndarray:
        return np.ascontiguousarray(self.conn[self.rd_elements], dtype=np.int64)

    @cached_property
    def conn_pml(self) -> np.ndarray:
        return np.ascontiguousarray(self.conn[self.pml_elements], dtype=np.int64)

    # ---- node sets -------------------------------------------------------
    @cached_property
    def _lattice_tags(self):
        x, y, z = self.axes
        lx, ly, depth = self.spec.rd_extent
        tol = 1e-9 * self.element_size
        inx = np.abs(x) <= lx / 2 + tol
        iny = np.abs(y) <= ly / 2 + tol
        inz = z >= -depth - tol
        openx = np.abs(x) < lx / 2 - tol
        openy = np.abs(y) < ly / 2 - tol
        openz = z > -depth + tol
        return inx, iny, inz, openx, openy, openz

    @cached_property
    def rd_closure_mask(self) -> np.ndarray:
        inx, iny, inz, *_ = self._lattice_tags
        if self.all_rd:
            return np.ones(self.n_nodes, dtype=bool)
        return (inx[:, None, None] & iny[None, :, None] & inz[None, None, :]).ravel()

    @cached_property
    def pml_closure_mask(self) -> np.ndarray:
        """Nodes touched by at least one PML element."""
        if self.all_rd:
            return np.zeros(self.n_nodes, dtype=bool)
        _, _, _, ox, oy, oz = self._lattice_tags
        rd_open = (ox[:, None, None] & oy[None, :, None] & oz[None, None, :]).ravel()
        return ~rd_open

    @cached_property
    def rd_nodes(self) -> np.ndarray:
        """Material-parameter nodes: the closure of the regular domain."""
        return np.flatnonzero(self.rd_closure_mask)

    @cached_property
    def pml_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.pml_closure_mask)

    @cached_property
    def interface_nodes(self) -> np.ndarray:
        """Gamma^I: RD-closure nodes shared with PML elements."""
        return np.flatnonzero(self.rd_closure_mask & self.pml_closure_mask)

    @cached_property
    def surface_mask(self) -> np.ndarray:
        _, _, nz = self.lattice_shape
        return (self.lattice_index(np.arange(self.n_nodes))[2] == nz - 1)

    @cached_property
    def surface_rd_nodes(self) -> np.ndarray:
        """Gamma_N^RD: free-surface nodes of the regular domain."""
        return np.flatnonzero(self.surface_mask & self.rd_closure_mask)

    @cached_property
    def surface_pml_nodes(self) -> np.ndarray:
        """Gamma_N^PML: free-surface nodes of the PML (edges shared with RD included)."""
        return np.flatnonzero(self.surface_mask & self.pml_closure_mask)

    @cached_property
    def fixed_mask(self) -> np.ndarray:
        """Gamma_D^PML: outer lateral and bottom faces, where u = 0."""
        if not self.fixed_outer:
            return np.zeros(self.n_nodes, dtype=bool)
        nx, ny, nz = self.lattice_shape
        ix, iy, iz = self.lattice_index(np.arange(self.n_nodes))
        return (ix == 0) | (ix == nx - 1) | (iy == 0) | (iy == ny - 1) | (iz == 0)

    @cached_property
    def dirichlet_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.fixed_mask)

    def boundary_faces(self) -> dict[str, list[tuple[int, int]]]:
        """Classify each boundary element face once: ``top_rd``, ``top_pml`` or ``dirichlet``.

        Faces are ``(element, face)`` with face numbering ``0:-x 1:+x 2:-y 3:+y 4:-z 5:+z``.
        """
        nx, ny, nz = self.nel
        out: dict[str, list[tuple[int, int]]] = {"top_rd": [], "top_pml": [], "dirichlet": []}
        for e, (ex, ey, ez) in enumerate(self.element_ijk):
            bounds = (ex == 0, ex == nx - 1, ey == 0, ey == ny - 1, ez == 0, ez == nz - 1)
            for f, on in enumerate(bounds):
                if not on:
                    continue
                if f == 5:
                    out["top_pml" if self.is_pml[e] else "top_rd"].append((e, f))
                else:
                    out["dirichlet"].append((e, f))
        return out

    # ---- DOF maps --------------------------------------------------------
    @cached_property
    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.fixed_mask)

    @cached_property
    def stress_conn(self) -> np.ndarray:
        """Stress slot of every (PML element, local node)."""
        if self.stress_layout == "element":
            n = len(self.pml_elements)
            return np.arange(n * 27, dtype=np.int64).reshape(n, 27)
        slot = np.full(self.n_nodes, -1, dtype=np.int64)
        slot[self.pml_nodes] = np.arange(len(self.pml_nodes))
        return np.ascontiguousarray(slot[self.conn_pml])

    @property
    def n_stress_slots(self) -> int:
        if self.stress_layout == "element":
            return 27 * len(self.pml_elements)
        return len(self.pml_nodes)

    @cached_property
    def stress_slot_node(self) -> np.ndarray:
        """Lattice node carrying each stress slot."""
        if self.stress_layout == "element":
            return self.conn_pml.ravel().copy()
        return self.pml_nodes

    @property
    def n_displacement_dofs(self) -> int:
        return 3 * len(self.free_nodes)

    @property
    def n_stress_dofs(self) -> int:
        return 6 * self.n_stress_slots

    @property
    def n_state(self) -> int:
        """Unknowns of the semi-discrete system (fixed displacement DOFs excluded)."""
        return self.n_displacement_dofs + self.n_stress_dofs

    @property
    def n_material(self) -> int:
        """Number of discrete lambda and mu values (both fields on the RD closure)."""
        return 2 * len(self.rd_nodes)

    @property
    def internal_size(self) -> int:
        """Length of the padded internal vector ``[u (3, N), S (6, Ns)]``."""
        return 3 * self.n_nodes + 6 * self.n_stress_slots

    def split(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Views ``u (3, N)`` and ``S (6, Ns)`` of a padded internal vector."""
        n = 3 * self.n_nodes
        return v[:n].reshape(3, self.n_nodes), v[n:].reshape(6, self.n_stress_slots)

    def pack(self, v: np.ndarray) -> np.ndarray:
        """Padded internal vector -> compact state vector."""
        u, s = self.split(np.asarray(v))
        return np.concatenate([u[:, self.free_nodes].ravel(), s.ravel()])

    def unpack(self, x: np.ndarray) -> np.ndarray:
        """Compact state vector -> padded internal vector (fixed DOFs zero)."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_state,):
            raise MeshError(f"state vector has shape {x.shape}, expected ({self.n_state},)")
        v = np.zeros(self.internal_size)
        u, s = self.split(v)
        nd = self.n_displacement_dofs
        u[:, self.free_nodes] = x[:nd].reshape(3, -1)
        s[:] = x[nd:].reshape(6, -1)
        return v

    def dof_owner(self, index: int) -> tuple[str, int, int]:
        """Compact state index -> ``(field, node_or_slot, component)``."""
        nd = self.n_displacement_dofs
        nf = len(self.free_nodes)
        if 0 <= index < nd:
            comp, rank = divmod(index, nf)
            return "u", int(self.free_nodes[rank]), int(comp)
        if nd <= index < self.n_state:
            comp, slot = divmod(index - nd, self.n_stress_slots)
            return "S", int(slot), int(comp)
        raise MeshError(f"state index {index} out of range")

    def dof_index(self, field_name: str, owner: int, comp: int) -> int:
        """Inverse of :meth:`dof_owner`; -1 for fixed displacement DOFs."""
        if field_name == "u":
            rank = self._free_rank[owner]
            return -1 if rank < 0 else int(comp * len(self.free_nodes) + rank)
        if field_name == "S":
            return int(self.n_displacement_dofs + comp * self.n_stress_slots + owner)
        raise MeshError(f"unknown field {field_name!r}")

    @cached_property
    def _free_rank(self) -> np.ndarray:
        rank = np.full(self.n_nodes, -1, dtype=np.int64)
        rank[self.free_nodes] = np.arange(len(self.free_nodes))
        return rank

    # ---- quadrature ------------------------------------------------------
    @cached_property
    def quad_weights(self) -> np.ndarray:
        """``w_a w_b w_c |J|`` at the 27 local nodes of any element."""
        w = self.basis.weights
        jac = (self.element_size / 2) ** 3
        return np.einsum("a,b,c->abc", w, w, w).ravel() * jac

    @cached_property
    def derivative_matrix(self) -> np.ndarray:
        """Physical 1D derivative matrix ``(2/h) l_m'(xi_a)``."""
        return self.basis.dshape_at_nodes * (2.0 / self.element_size)

    def nodal_weights(self, elements: np.ndarray | None = None) -> np.ndarray:
        """Lumped (LGL) volume weight of every node over the given elements."""
        elements = self.rd_elements if elements is None else elements
        w = np.tile(self.quad_weights, len(elements))
        return np.bincount(self.conn[elements].ravel(), weights=w, minlength=self.n_nodes)

    def rd_volume(self) -> float:
        return float(np.prod(self.spec.rd_extent))

    # ---- receivers and lookup --------------------------------------------
    def locate_node(self, point) -> int:
        """Id of the lattice node coincident with ``point`` (tolerance 1e-9 h)."""
        p = np.asarray(point, dtype=float)
        tol = 1e-9 * self.element_size
        idx = []
        for axis, value in zip(self.axes, p):
            k = int(np.argmin(np.abs(axis - value)))
            if abs(axis[k] - value) > tol:
                raise MeshError(f"point {tuple(p)} does not coincide with a grid node")
            idx.append(k)
        return int(self.node_id(*idx))

    def surface_nodes_in_patch(self, half_x: float, half_y: float, corners_only: bool = False) -> np.ndarray:
        """Free-surface nodes with ``|x| <= half_x`` and ``|y| <= half_y``."""
        c = self.coords
        tol = 1e-9 * self.element_size
        sel = self.surface_mask & (np.abs(c[:, 0]) <= half_x + tol) & (np.abs(c[:, 1]) <= half_y + tol)
        if corners_only:
            ix, iy, _ = self.lattice_index(np.arange(self.n_nodes))
            sel &= (ix % 2 == 0) & (iy % 2 == 0)
        return np.flatnonzero(sel)


def build_mesh(
    spec: GridSpec,
    *,
    stress_layout: str = "continuous",
    all_rd: bool = False,
    fixed_outer: bool = True,
) -> SpectralMesh:
    """Build the structured 27-node mesh for ``spec``.

    ``all_rd=True`` keeps the geometry but tags every element as regular
    domain (a plain elastodynamic box); ``fixed_outer=False`` drops the
    Dirichlet condition on the outer faces. Both exist for verification runs.
    """
    if stress_layout not in ("continuous", "element"):
        raise MeshError(f"unknown stress layout {stress_layout!r}")
    basis = lgl_basis(spec.polynomial_order)
    nx, ny, nz = spec.elements
    rx, ry, rz = spec.rd_elements
    p = spec.pml_elements
    _, NY, NZ = 2 * nx + 1, 2 * ny + 1, 2 * nz + 1

    ex, ey, ez = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    ijk = np.stack([ex.ravel(), ey.ravel(), ez.ravel()], axis=1)
    loc = np.arange(3)
    la, lb, lc = np.meshgrid(loc, loc, loc, indexing="ij")
    la, lb, lc = la.ravel(), lb.ravel(), lc.ravel()
    conn = ((2 * ijk[:, 0:1] + la) * NY + (2 * ijk[:, 1:2] + lb)) * NZ + (2 * ijk[:, 2:3] + lc)

    active = np.zeros((len(ijk), 3), dtype=bool)
    active[:, 0] = (ijk[:, 0] < p) | (ijk[:, 0] >= p + rx)
    active[:, 1] = (ijk[:, 1] < p) | (ijk[:, 1] >= p + ry)
    active[:, 2] = ijk[:, 2] < p
    if all_rd:
        active[:] = False
    is_pml = active.any(axis=1)
    return SpectralMesh(
        spec=spec,
        basis=basis,
        stress_layout=stress_layout,
        all_rd=all_rd,
        fixed_outer=fixed_outer,
        conn=np.ascontiguousarray(conn, dtype=np.int64),
        element_ijk=ijk,
        pml_active=active,
        is_pml=is_pml,
    )


def count_unknowns(spec: GridSpec) -> dict[str, int]:
    """State and material counts of the continuous-stress mesh, without allocating it."""
    nx, ny, nz = spec.elements
    rx, ry, rz = spec.rd_elements
    NX, NY, NZ = 2 * nx + 1, 2 * ny + 1, 2 * nz + 1
    n_nodes = NX * NY * NZ
    free = (NX - 2) * (NY - 2) * (NZ - 1)
    rd_closure = (2 * rx + 1) * (2 * ry + 1) * (2 * rz + 1)
    rd_open = (2 * rx - 1) * (2 * ry - 1) * (2 * rz)
    pml_closure = n_nodes - rd_open
    return {
        "elements": nx * ny * nz,
        "nodes": n_nodes,
        "displacement_dofs": 3 * free,
        "stress_dofs": 6 * pml_closure,
        "state_unknowns": 3 * free + 6 * pml_closure,
        "material_parameters": 2 * rd_closure,
    }
