"""Explicit RK-4 integration of the state problem, traces, snapshots and energy."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from pmlfwi._backend import kernels
from pmlfwi.operators import OperatorSet

log = logging.getLogger(__name__)

NAN_CHECK_INTERVAL = 100


class InstabilityError(RuntimeError):
    """Raised when a time integration produces non-finite or exploding values."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(f"solver unstable at step {step}{': ' + message if message else ''}")


@dataclass
class StateTriple:
    """``(x0, x1, x2)`` = (history, solution, rate) as padded internal vectors."""

    x0: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    t: float = 0.0

    @classmethod
    def zeros(cls, size: int, t: float = 0.0) -> StateTriple:
        return cls(np.zeros(size), np.zeros(size), np.zeros(size), t)

    def copy(self) -> StateTriple:
        return StateTriple(self.x0.copy(), self.x1.copy(), self.x2.copy(), self.t)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.x0).all() and np.isfinite(self.x1).all() and np.isfinite(self.x2).all())


Derivative = Callable[[np.ndarray, np.ndarray, np.ndarray, float], tuple]


def rk4_step(deriv: Derivative, s: StateTriple, h: float) -> StateTriple:
    """Classical RK-4 step of size ``h`` (negative for reverse-time sweeps).

    ``deriv(x0, x1, x2, t)`` returns the three block derivatives; the force
    inside ``deriv`` is evaluated at ``t``, ``t + h/2`` and ``t + h``.
    """
    x0, x1, x2, t = s.x0, s.x1, s.x2, s.t
    k1 = deriv(x0, x1, x2, t)
    k2 = deriv(x0 + 0.5 * h * k1[0], x1 + 0.5 * h * k1[1], x2 + 0.5 * h * k1[2], t + 0.5 * h)
    k3 = deriv(x0 + 0.5 * h * k2[0], x1 + 0.5 * h * k2[1], x2 + 0.5 * h * k2[2], t + 0.5 * h)
    k4 = deriv(x0 + h * k3[0], x1 + h * k3[1], x2 + h * k3[2], t + h)
    c = h / 6.0
    return StateTriple(
        x0 + c * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        x1 + c * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        x2 + c * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
        t + h,
    )


def state_derivative(ops: OperatorSet, force: Callable[[float], np.ndarray] | None) -> Derivative:
    """Right-hand side of the first-order state system.

    ``x0' = x1`` (restricted to the history support), ``x1' = x2`` and
    ``x2' = M^-1 (f - C x2 - K x1 - G x0)``.
    """
    hist = ops.history_mask
    inv_mass = ops.inv_mass
    buf = np.zeros(ops.size)

    def deriv(x0, x1, x2, t):
        ops.system_internal(x0, x1, x2, out=buf)
        rhs = -buf if force is None else force(t) - buf
        return hist * x1, x2.copy(), inv_mass * rhs

    return deriv


def step_forward_rk4(ops: OperatorSet, state: StateTriple, dt: float,
                     force: Callable[[float], np.ndarray] | None = None) -> StateTriple:
    """Advance the state problem by one step."""
    return rk4_step(state_derivative(ops, force), state, dt)


# ---- records -----------------------------------------------------------------


@dataclass
class TraceRecord:
    """Receiver displacement histories ``data[time, receiver, component]`` (m)."""

    receivers: np.ndarray
    coords: np.ndarray
    times: np.ndarray
    data: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def copy(self) -> TraceRecord:
        return TraceRecord(self.receivers.copy(), self.coords.copy(), self.times.copy(), self.data.copy())

    def with_data(self, data: np.ndarray) -> TraceRecord:
        return TraceRecord(self.receivers.copy(), self.coords.copy(), self.times.copy(), np.asarray(data, float))

    def subsample(self, factor: int) -> TraceRecord:
        return TraceRecord(self.receivers.copy(), self.coords.copy(), self.times[::factor].copy(),
                           self.data[::factor].copy())


_SNAP_MAGIC = b"PMLSNAP1"
_SNAP_HEADER = struct.Struct("<8sqqqd")


@dataclass
class SnapshotStore:
    """Displacement snapshots on a fixed node set at strided steps.

    Frames are ``(3, len(nodes))`` arrays. With ``path`` set, frames are
    written to a flat little-endian float64 file behind a fixed header
    ``(magic, n_frames, n_nodes, stride, dt)`` and read back through a memmap.
    """

    nodes: np.ndarray
    stride: int
    dt: float
    n_frames: int
    path: Path | None = None
    _frames: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def allocate(cls, nodes: np.ndarray, stride: int, dt: float, n_frames: int,
                 path: str | Path | None = None) -> SnapshotStore:
        shape = (n_frames, 3, len(nodes))
        if path is None:
            try:
                frames = np.zeros(shape)
            except MemoryError as exc:
                raise MemoryError(f"snapshot store needs {cls.required_bytes(len(nodes), n_frames)} bytes") from exc
            return cls(np.asarray(nodes), stride, dt, n_frames, None, frames)
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(_SNAP_HEADER.pack(_SNAP_MAGIC, n_frames, len(nodes), stride, dt))
        frames = np.memmap(path, dtype="<f8", mode="r+", offset=_SNAP_HEADER.size, shape=shape)
        return cls(np.asarray(nodes), stride, dt, n_frames, path, frames)

    @classmethod
    def open(cls, path: str | Path, nodes: np.ndarray) -> SnapshotStore:
        path = Path(path)
        with open(path, "rb") as fh:
            magic, n_frames, n_nodes, stride, dt = _SNAP_HEADER.unpack(fh.read(_SNAP_HEADER.size))
        if magic != _SNAP_MAGIC or n_nodes != len(nodes):
            raise ValueError(f"{path} is not a snapshot file for {len(nodes)} nodes")
        frames = np.memmap(path, dtype="<f8", mode="r", offset=_SNAP_HEADER.size, shape=(n_frames, 3, n_nodes))
        return cls(np.asarray(nodes), stride, dt, n_frames, path, frames)

    @staticmethod
    def required_bytes(n_nodes: int, n_frames: int) -> int:
        return 8 * 3 * n_nodes * n_frames

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.stride * self.dt

    def __len__(self) -> int:
        return self.n_frames

    def put(self, index: int, u: np.ndarray) -> None:
        """Store frame ``index`` from a full ``(3, N)`` displacement array."""
        self._frames[index] = u[:, self.nodes]

    def frame(self, index: int) -> np.ndarray:
        return np.asarray(self._frames[index])

    def full_frame(self, index: int, n_nodes: int) -> np.ndarray:
        out = np.zeros((3, n_nodes))
        out[:, self.nodes] = self._frames[index]
        return out

    def flush(self) -> None:
        if isinstance(self._frames, np.memmap):
            self._frames.flush()


def step_count(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, dt):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    return n


def run_forward(
    ops: OperatorSet,
    force: Callable[[float], np.ndarray] | None,
    receivers: Sequence[int],
    T: float,
    dt: float,
    stride: int = 1,
    *,
    store_snapshots: bool = True,
    snapshot_nodes: np.ndarray | None = None,
    spill_path: str | Path | None = None,
    observer: Callable[[int, StateTriple], None] | None = None,
) -> tuple[TraceRecord, SnapshotStore | None]:
    """Integrate the state problem from rest over ``[0, T]``.

    Traces are sampled at every step on the receiver displacement DOFs;
    snapshots of ``u`` (default node set: RD closure) every ``stride`` steps,
    including ``t = 0`` and ``t = T``.
    """
    mesh = ops.mesh
    nsteps = step_count(T, dt)
    if nsteps % stride:
        raise ValueError(f"snapshot stride {stride} does not divide the step count {nsteps}")
    rec = np.asarray(receivers, dtype=np.int64)
    data = np.zeros((nsteps + 1, len(rec), 3))
    store = None
    if store_snapshots:
        nodes = mesh.rd_nodes if snapshot_nodes is None else snapshot_nodes
        store = SnapshotStore.allocate(nodes, stride, dt, nsteps // stride + 1, spill_path)

    deriv = state_derivative(ops, force)
    state = StateTriple.zeros(ops.size)
    n3 = 3 * mesh.n_nodes
    for n in range(nsteps + 1):
        if n > 0:
            state = rk4_step(deriv, state, dt)
            state.t = n * dt
        u = state.x1[:n3].reshape(3, -1)
        data[n] = u[:, rec].T
        if store is not None and n % stride == 0:
            store.put(n // stride, u)
        if observer is not None:
            observer(n, state)
        if n % NAN_CHECK_INTERVAL == 0 or n == nsteps:
            if not state.is_finite():
                raise InstabilityError(n, "non-finite state; reduce dt")
    if store is not None:
        store.flush()
    times = np.arange(nsteps + 1) * dt
    return TraceRecord(rec, mesh.coords[rec].copy(), times, data), store


def total_energy(ops: OperatorSet, state: StateTriple, region: str = "all") -> float:
    """Kinetic plus RD strain energy.

    ``region="all"`` uses the displacement rows of ``M`` for the kinetic part;
    ``region="rd"`` restricts it to the regular-domain mass ``rho W_rd``.
    """
    mesh = ops.mesh
    u, _ = mesh.split(state.x1 * ops.free_mask)
    v, _ = mesh.split(state.x2 * ops.free_mask)
    if region == "all":
        m, _ = mesh.split(ops.mass)
        m = m[0]
    elif region == "rd":
        m = ops.material.rho * mesh.nodal_weights(mesh.rd_elements)
    else:
        raise ValueError(f"unknown region {region!r}")
    kinetic = 0.5 * float(np.sum(m * v * v))
    Ku = np.zeros_like(u)
    kernels.elastic_apply(np.ascontiguousarray(u), ops.material.lam, ops.material.mu,
                          mesh.conn_rd, mesh.derivative_matrix, mesh.quad_weights, Ku)
    return kinetic + 0.5 * float(np.sum(u * Ku))
