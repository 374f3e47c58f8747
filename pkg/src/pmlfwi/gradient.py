"""Reduced material gradients, regularization functionals and derivative checks.

Material fields are nodal on the RD closure (the displacement basis restricted
to the regular domain). All spatial integrals use LGL quadrature over RD
elements, so the mass-like matrix ``Mt`` is the diagonal of nodal RD weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from pmlfwi._backend import kernels
from pmlfwi.adjoint import trapezoid_weights
from pmlfwi.forward import SnapshotStore
from pmlfwi.specgrid import SpectralMesh

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegularizationSpec:
    """``kind`` is ``"TN"`` (Tikhonov) or ``"TV"`` (total variation, smoothed by ``epsilon``)."""

    kind: str = "TN"
    epsilon: float = 0.01
    R_lambda: float = 0.0
    R_mu: float = 0.0

    def __post_init__(self):
        if self.kind not in ("TN", "TV"):
            raise ValueError(f"unknown regularization kind {self.kind!r}")
        if self.kind == "TV" and self.epsilon <= 0:
            raise ValueError("TV regularization needs epsilon > 0")
        if self.R_lambda < 0 or self.R_mu < 0:
            raise ValueError("regularization factors must be non-negative")


@dataclass
class GradientPair:
    """Reduced gradients with their misfit and regularization parts (nodal, full lattice)."""

    g_lambda: np.ndarray
    g_mu: np.ndarray
    mis_lambda: np.ndarray
    mis_mu: np.ndarray
    reg_lambda: np.ndarray
    reg_mu: np.ndarray


def material_mass(mesh: SpectralMesh) -> np.ndarray:
    """Diagonal of ``Mt`` (zero outside the RD closure)."""
    return mesh.nodal_weights(mesh.rd_elements)


# ---- misfit part ---------------------------------------------------------------


def misfit_gradients(forward_store: SnapshotStore, adjoint_store: SnapshotStore, mesh: SpectralMesh,
                     dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Time-integrated ``-(div w)(div u)`` and ``-grad w : (grad u + grad u^T)`` against each basis function."""
    if (forward_store.n_frames != adjoint_store.n_frames or forward_store.stride != adjoint_store.stride
            or len(forward_store.nodes) != len(adjoint_store.nodes)
            or not np.array_equal(forward_store.nodes, adjoint_store.nodes)):
        raise ValueError("forward and adjoint snapshot stores are misaligned")
    tau = trapezoid_weights(forward_store.n_frames, forward_store.stride * dt)
    g_lam = np.zeros(mesh.n_nodes)
    g_mu = np.zeros(mesh.n_nodes)
    D, wq, conn = mesh.derivative_matrix, mesh.quad_weights, mesh.conn_rd
    for f in range(forward_store.n_frames):
        if tau[f] == 0.0:
            continue
        u = forward_store.full_frame(f, mesh.n_nodes)
        w = adjoint_store.full_frame(f, mesh.n_nodes)
        kernels.material_gradient(u, w, conn, D, wq, -tau[f], g_lam, g_mu)
    return g_lam, g_mu


# ---- regularization ----------------------------------------------------------------


def _scalar_grad(field: np.ndarray, mesh: SpectralMesh) -> np.ndarray:
    """Gradient of a nodal scalar at the quadrature points of RD elements: ``(3, ne, 27)``."""
    conn = mesh.conn_rd
    D = mesh.derivative_matrix
    # shifting by a nodal value makes constant fields give exact zeros instead of roundoff
    F = (field[conn] - field[conn[0, 0]]).reshape(-1, 3, 3, 3)
    G = np.empty((3,) + F.shape)
    G[0] = np.einsum("pm,emyz->epyz", D, F)
    G[1] = np.einsum("pm,exmz->expz", D, F)
    G[2] = np.einsum("pm,exym->exyp", D, F)
    return G.reshape(3, len(conn), 27)


def _scalar_div(flux: np.ndarray, mesh: SpectralMesh) -> np.ndarray:
    """``sum_q wq grad(chi_a) . flux`` assembled to nodes (transpose of :func:`_scalar_grad`)."""
    conn = mesh.conn_rd
    D = mesh.derivative_matrix
    V = (flux * mesh.quad_weights).reshape(3, -1, 3, 3, 3)
    r = np.einsum("pm,epyz->emyz", D, V[0])
    r += np.einsum("pm,expz->exmz", D, V[1])
    r += np.einsum("pm,exyp->exym", D, V[2])
    return np.bincount(conn.ravel(), weights=r.ravel(), minlength=mesh.n_nodes)


def reg_gradient(field: np.ndarray, spec: RegularizationSpec, mesh: SpectralMesh) -> np.ndarray:
    """Regularization vector of one field (before multiplication by R).

    TN: ``int grad(chi) . grad(f)``; TV: the same integrand divided by
    ``(|grad f|^2 + eps)^(1/2)`` at each quadrature point.
    """
    G = _scalar_grad(np.asarray(field, dtype=float), mesh)
    if spec.kind == "TV":
        G = G / np.sqrt(np.sum(G * G, axis=0) + spec.epsilon)
    return _scalar_div(G, mesh)


def reg_value(lam: np.ndarray, mu: np.ndarray, spec: RegularizationSpec, mesh: SpectralMesh) -> float:
    """``(R_l/2) int phi(grad lam) + (R_m/2) int phi(grad mu)`` over the RD, phi per ``spec.kind``."""
    wq = mesh.quad_weights
    total = 0.0
    for f, R in ((lam, spec.R_lambda), (mu, spec.R_mu)):
        if R == 0.0:
            continue
        G = _scalar_grad(np.asarray(f, dtype=float), mesh)
        sq = np.sum(G * G, axis=0)
        integrand = sq if spec.kind == "TN" else np.sqrt(sq + spec.epsilon)
        total += 0.5 * R * float(np.sum(integrand * wq))
    return total


def reduced_gradient(g_mis: np.ndarray, g_reg: np.ndarray, R: float, mesh: SpectralMesh) -> np.ndarray:
    """``g = Mt^-1 (R g_reg + g_mis)`` on RD-closure nodes, zero elsewhere."""
    m = material_mass(mesh)
    nodes = mesh.rd_nodes
    if np.any(m[nodes] <= 0):
        raise ZeroDivisionError("material mass matrix has a zero diagonal entry")
    g = np.zeros(mesh.n_nodes)
    g[nodes] = (R * g_reg[nodes] + g_mis[nodes]) / m[nodes]
    return g


def gradient_pair(mis_lambda, mis_mu, lam, mu, spec: RegularizationSpec, mesh: SpectralMesh) -> GradientPair:
    """Assemble both reduced gradients for the factors stored in ``spec``."""
    reg_l = reg_gradient(lam, spec, mesh)
    reg_m = reg_gradient(mu, spec, mesh)
    return GradientPair(
        reduced_gradient(mis_lambda, reg_l, spec.R_lambda, mesh),
        reduced_gradient(mis_mu, reg_m, spec.R_mu, mesh),
        mis_lambda, mis_mu, reg_l, reg_m,
    )


# ---- directional derivatives -------------------------------------------------------


def directional_derivative_co(g: np.ndarray, direction: np.ndarray, mesh: SpectralMesh) -> float:
    """``direction^T Mt g``."""
    g = np.asarray(g, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if g.shape != direction.shape or g.shape != (mesh.n_nodes,):
        raise ValueError(f"direction shape {direction.shape} does not match gradient shape {g.shape}")
    return float(direction @ (material_mass(mesh) * g))


def directional_derivative_fd(objective: Callable[[np.ndarray, np.ndarray], float], lam: np.ndarray,
                              mu: np.ndarray, direction: np.ndarray, which: str, h: float,
                              base_value: float | None = None) -> float:
    """One-sided difference ``(J(m + h d) - J(m)) / h`` along ``direction`` in ``lam`` or ``mu``.

    ``objective(lam, mu)`` must include the PML extension of its arguments.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    if which not in ("lambda", "mu"):
        raise ValueError(f"which must be 'lambda' or 'mu', got {which!r}")
    direction = np.asarray(direction, dtype=float)
    if not np.any(direction):
        return 0.0
    j0 = objective(lam, mu) if base_value is None else base_value
    if which == "lambda":
        j1 = objective(lam + h * direction, mu)
    else:
        j1 = objective(lam, mu + h * direction)
    return (j1 - j0) / h


@dataclass
class GradcheckRow:
    case: str
    f_max: float
    coords: tuple[float, float, float]
    field: str
    d_co: float
    d_fd: dict[float, float]

    def rel_errors(self) -> dict[float, float]:
        return {h: abs(self.d_co - v) / abs(self.d_co) if self.d_co else float("inf") for h, v in self.d_fd.items()}

    def best_error(self) -> float:
        return min(self.rel_errors().values())


def gradcheck_table(rows: Sequence[GradcheckRow]) -> str:
    """CSV text with one row per perturbation: d_co, then d_fd and relative error per h."""
    steps = sorted({h for r in rows for h in r.d_fd}, reverse=True)
    head = ["case", "f_max", "x", "y", "z", "field", "d_co"]
    for h in steps:
        head += [f"d_fd(h={h:g})", f"rel_err(h={h:g})"]
    lines = [",".join(head)]
    for r in rows:
        errs = r.rel_errors()
        vals = [r.case, f"{r.f_max:g}", *(f"{c:g}" for c in r.coords), r.field, f"{r.d_co:.6e}"]
        for h in steps:
            vals += [f"{r.d_fd.get(h, float('nan')):.6e}", f"{errs.get(h, float('nan')):.3e}"]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
