"""Reverse-time RK-4 solution of the adjoint (final-value) problem.

The adjoint system is

    y0' = y1 (history support),  y1' = y2,
    y2' = M^-1 (C^T y2 - K^T y1 + G^T y0 + f_adj),

integrated from ``y(T) = 0`` down to ``t = 0`` with steps of ``-dt``; the
stage vectors and the ``-dt/6`` update are those of classical RK-4 run
backwards. ``f_adj`` injects the receiver misfit ``u - u_m`` nodally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from pmlfwi._backend import kernels
from pmlfwi.forward import (
    NAN_CHECK_INTERVAL,
    InstabilityError,
    SnapshotStore,
    StateTriple,
    TraceRecord,
    rk4_step,
    step_count,
)
from pmlfwi.operators import OperatorSet

MisfitRecord = TraceRecord


class AdjointSource:
    """Nodal injection of a misfit record; linear interpolation between samples."""

    def __init__(self, misfit: MisfitRecord, n_nodes: int, size: int):
        self.misfit = misfit
        self.n_nodes = n_nodes
        self.size = size
        self.dt = misfit.dt
        self.t_max = float(misfit.times[-1])

    def values(self, t: float) -> np.ndarray:
        """Misfit ``(n_receivers, 3)`` at time ``t``."""
        if t < -1e-9 * self.dt or t > self.t_max + 1e-9 * self.dt:
            raise ValueError(f"t={t} outside the misfit record [0, {self.t_max}]")
        s = t / self.dt
        k = int(round(s))
        if abs(s - k) < 1e-9:
            return self.misfit.data[k]
        lo = int(np.floor(s))
        frac = s - lo
        return (1.0 - frac) * self.misfit.data[lo] + frac * self.misfit.data[lo + 1]

    def __call__(self, t: float) -> np.ndarray:
        out = np.zeros(self.size)
        u = out[: 3 * self.n_nodes].reshape(3, -1)
        np.add.at(u.T, self.misfit.receivers, self.values(t))
        return out


def adjoint_source(misfit: MisfitRecord, mesh, t: float) -> np.ndarray:
    """``f_adj(t)`` on the compact state."""
    return mesh.pack(AdjointSource(misfit, mesh.n_nodes, mesh.internal_size)(t))


def adjoint_derivative(ops: OperatorSet, source: Callable[[float], np.ndarray] | None):
    hist = ops.history_mask
    inv_mass = ops.inv_mass
    buf = np.zeros(ops.size)

    def deriv(y0, y1, y2, t):
        ops.system_transpose_internal(y0, -y1, y2, out=buf)
        rhs = buf if source is None else buf + source(t)
        return hist * y1, y2.copy(), inv_mass * rhs

    return deriv


def step_adjoint_reverse_rk4(ops: OperatorSet, state: StateTriple, dt: float,
                             source: Callable[[float], np.ndarray] | None = None) -> StateTriple:
    """One reverse step ``t -> t - dt``."""
    return rk4_step(adjoint_derivative(ops, source), state, -dt)


@dataclass
class AdjointResult:
    store: SnapshotStore | None
    grad_lambda: np.ndarray | None
    grad_mu: np.ndarray | None


def trapezoid_weights(n_frames: int, spacing: float) -> np.ndarray:
    w = np.full(n_frames, spacing)
    if n_frames > 1:
        w[0] = w[-1] = 0.5 * spacing
    else:
        w[:] = 0.0
    return w


def run_adjoint(
    ops: OperatorSet,
    misfit: MisfitRecord | None,
    T: float,
    dt: float,
    stride: int = 1,
    *,
    forward_store: SnapshotStore | None = None,
    store_snapshots: bool = False,
    source: Callable[[float], np.ndarray] | None = None,
    observer: Callable[[int, StateTriple], None] | None = None,
) -> AdjointResult:
    """Integrate the adjoint problem backwards from ``y(T) = 0``.

    With ``forward_store`` given, the misfit parts of the material gradients
    are accumulated while sweeping (trapezoidal rule on the snapshot grid);
    ``store_snapshots`` keeps ``w`` on the same node set and times.
    ``source`` overrides the misfit injection (used by verification tests).
    """
    mesh = ops.mesh
    nsteps = step_count(T, dt)
    if nsteps % stride:
        raise ValueError(f"snapshot stride {stride} does not divide the step count {nsteps}")
    n_frames = nsteps // stride + 1
    if forward_store is not None:
        if forward_store.stride != stride or forward_store.n_frames != n_frames \
                or abs(forward_store.dt - dt) > 1e-12 * dt:
            raise ValueError("forward snapshot store is not aligned with the adjoint time grid")
    if source is None:
        if misfit is None:
            raise ValueError("either a misfit record or an explicit source is required")
        source = AdjointSource(misfit, mesh.n_nodes, ops.size)

    nodes = mesh.rd_nodes if forward_store is None else forward_store.nodes
    store = SnapshotStore.allocate(nodes, stride, dt, n_frames) if store_snapshots else None
    g_lam = g_mu = None
    tau = trapezoid_weights(n_frames, stride * dt)
    if forward_store is not None:
        g_lam = np.zeros(mesh.n_nodes)
        g_mu = np.zeros(mesh.n_nodes)

    deriv = adjoint_derivative(ops, source)
    state = StateTriple.zeros(ops.size, t=nsteps * dt)
    n3 = 3 * mesh.n_nodes
    D, wq, conn = mesh.derivative_matrix, mesh.quad_weights, mesh.conn_rd
    for n in range(nsteps, -1, -1):
        if n < nsteps:
            state = rk4_step(deriv, state, -dt)
            state.t = n * dt
        if n % stride == 0:
            w = state.x1[:n3].reshape(3, -1)
            f = n // stride
            if store is not None:
                store.put(f, w)
            if forward_store is not None and tau[f] != 0.0:
                u = forward_store.full_frame(f, mesh.n_nodes)
                kernels.material_gradient(u, np.ascontiguousarray(w), conn, D, wq, -tau[f], g_lam, g_mu)
        if observer is not None:
            observer(n, state)
        if (nsteps - n) % NAN_CHECK_INTERVAL == 0 or n == 0:
            if not state.is_finite():
                raise InstabilityError(nsteps - n, "non-finite adjoint state")
    if forward_store is not None:
        # gradients live on the RD closure only
        mask = ~mesh.rd_closure_mask
        g_lam[mask] = 0.0
        g_mu[mask] = 0.0
    return AdjointResult(store, g_lam, g_mu)
