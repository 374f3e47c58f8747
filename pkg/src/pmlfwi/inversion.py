"""Objective, L-BFGS directions, Armijo backtracking and the staged inversion loop.

The loop keeps two independent L-BFGS memories (one per Lamé field), picks
the regularization factor every iteration from a target ratio ``p`` of
regularization to misfit gradient norms, optionally biases the lambda
direction towards the normalized mu direction during the first iterations,
and advances through source-frequency stages.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from pmlfwi.adjoint import run_adjoint, trapezoid_weights
from pmlfwi.forward import InstabilityError, SnapshotStore, TraceRecord, run_forward
from pmlfwi.gradient import (
    GradientPair,
    RegularizationSpec,
    gradient_pair,
    material_mass,
    reg_gradient,
    reg_value,
)
from pmlfwi.operators import LoadCase, OperatorSet, Pulse, assemble
from pmlfwi.pml_medium import DEFAULT_BOUNDS, MaterialField, StretchProfile, extend_nodal
from pmlfwi.specgrid import SpectralMesh

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("k", "stage", "J", "misfit", "reg", "R_lambda", "R_mu",
                   "alpha_lambda", "alpha_mu", "W", "backtracks")


# ---- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    """One source-frequency stage.

    ``reg_ratio`` is the target ratio p of scaled regularization to misfit
    gradient norms; with ``reg_ratio_end`` set it decreases linearly to that
    value over ``max_iter`` iterations.
    """

    pulse: Pulse
    T: float
    reg_ratio: float = 0.5
    max_iter: int = 50
    reg_ratio_end: float | None = None
    switch_window: int = 10
    switch_tol: float = 1e-3

    def __post_init__(self):
        for p in (self.reg_ratio, self.reg_ratio_end):
            if p is not None and not (0.0 <= p <= 1.0):
                raise ValueError(f"regularization ratio {p} outside [0, 1]")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")

    def ratio_at(self, k_stage: int) -> float:
        if self.reg_ratio_end is None or self.max_iter <= 1:
            return self.reg_ratio
        frac = min(1.0, k_stage / (self.max_iter - 1))
        return self.reg_ratio + frac * (self.reg_ratio_end - self.reg_ratio)


@dataclass(frozen=True)
class InversionConfig:
    stages: tuple[Stage, ...]
    lbfgs_memory: int = 15
    c1: float = 1e-4
    shrink: float = 0.5
    alpha_init: tuple[float, float] = (1.0, 1.0)
    max_backtracks: int = 20
    bias: bool = True
    k_bias: int = 50
    regularization: str = "TN"
    epsilon: float = 0.01
    bounds: tuple[float, float] = DEFAULT_BOUNDS
    j_tol: float = 0.0
    freeze: str | None = None
    first_step_fraction: float = 0.05
    inner_product: str = "mass"

    def __post_init__(self):
        if not self.stages:
            raise ValueError("at least one stage is required")
        if not (0 < self.c1 < 1) or not (0 < self.shrink < 1):
            raise ValueError("c1 and shrink must lie in (0, 1)")
        if self.freeze not in (None, "lambda", "mu"):
            raise ValueError("freeze must be None, 'lambda' or 'mu'")
        fmax = [s.pulse.f_max for s in self.stages]
        if any(b < a for a, b in zip(fmax, fmax[1:])):
            raise ValueError("stage pulses must have non-decreasing f_max")
        if self.lbfgs_memory < 1:
            raise ValueError("lbfgs_memory must be at least 1")
        if self.inner_product not in ("euclidean", "mass"):
            raise ValueError("inner_product must be 'euclidean' or 'mass'")


def single_parameter_mode(config: InversionConfig, freeze: str) -> InversionConfig:
    """Return ``config`` with one field frozen (``"lambda"`` or ``"mu"``)."""
    if freeze not in ("lambda", "mu"):
        raise ValueError("can freeze only one of 'lambda' or 'mu'; freezing both leaves nothing to invert")
    return replace(config, freeze=freeze, bias=False)


# ---- L-BFGS ------------------------------------------------------------------------


class LBFGSMemory:
    """Bounded store of curvature pairs ``(s, y)``; pairs with ``s.y <= 0`` are skipped."""

    def __init__(self, size: int = 15):
        self.size = size
        self.pairs: deque[tuple[np.ndarray, np.ndarray]] = deque(maxlen=size)
        self.skipped = 0

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        sy = float(s @ y)
        if not (sy > 0.0) or not np.isfinite(sy):
            self.skipped += 1
            return False
        self.pairs.append((np.array(s, dtype=float), np.array(y, dtype=float)))
        return True

    def reset(self) -> None:
        self.pairs.clear()

    def __len__(self) -> int:
        return len(self.pairs)


def lbfgs_direction(memory: LBFGSMemory, g: np.ndarray) -> np.ndarray:
    """Two-loop recursion: ``s = -H g`` with ``H0 = (s.y / y.y) I`` from the newest pair."""
    q = np.array(g, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("gradient contains non-finite values")
    pairs = list(memory.pairs)
    alphas = []
    for s, y in reversed(pairs):
        rho = 1.0 / float(s @ y)
        a = rho * float(s @ q)
        q -= a * y
        alphas.append((rho, a))
    if pairs:
        s, y = pairs[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y), (rho, a) in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def bias_weight(k: int, k_bias: int) -> float:
    """``W(k) = max(0, 1 - k / k_bias)``."""
    if k_bias <= 0:
        return 0.0
    return max(0.0, 1.0 - k / k_bias)


def bias_lambda_direction(s_lambda: np.ndarray, s_mu: np.ndarray, W: float) -> np.ndarray:
    """Blend the lambda direction with the normalized mu direction, keeping ``|s_lambda|``."""
    s_lambda = np.asarray(s_lambda, dtype=float)
    if W == 0.0:
        return s_lambda.copy()
    nl = float(np.linalg.norm(s_lambda))
    nm = float(np.linalg.norm(s_mu))
    if nl == 0.0 or nm == 0.0:
        raise ValueError("biasing needs non-zero lambda and mu directions")
    return nl * (W * np.asarray(s_mu) / nm + (1.0 - W) * s_lambda / nl)


def choose_reg_factor(g_reg: np.ndarray, g_mis: np.ndarray, ratio: float) -> float:
    """``R = ratio * |g_mis| / |g_reg|`` (0 with a warning for a zero ``g_reg``)."""
    nr = float(np.linalg.norm(g_reg))
    if nr == 0.0:
        log.warning("regularization gradient vanishes (constant field); using R = 0")
        return 0.0
    return ratio * float(np.linalg.norm(g_mis)) / nr


# ---- line search ---------------------------------------------------------------------


@dataclass
class LineSearchParams:
    c1: float = 1e-4
    shrink: float = 0.5
    alpha_init: tuple[float, float] = (1.0, 1.0)
    max_backtracks: int = 20


@dataclass
class LineSearchResult:
    alpha_lambda: float
    alpha_mu: float
    J_new: float
    backtracks: int
    accepted: bool
    payload: object = None


def armijo_search(J_eval: Callable[[np.ndarray, np.ndarray], object], lam, mu, s_lambda, s_mu,
                  g_lambda, g_mu, params: LineSearchParams, J0: float | None = None) -> LineSearchResult:
    """Backtracking on both step lengths together until the sufficient-decrease test holds.

    ``J_eval(lam, mu)`` returns a float or an object with attribute ``J``;
    that object is handed back as ``payload`` for the accepted point.
    """
    def value(x):
        return float(x) if isinstance(x, (int, float, np.floating)) else float(x.J)

    if J0 is None:
        J0 = value(J_eval(lam, mu))
    slope_l = float(np.dot(g_lambda, s_lambda))
    slope_m = float(np.dot(g_mu, s_mu))
    al, am = params.alpha_init
    for b in range(params.max_backtracks + 1):
        trial = J_eval(lam + al * s_lambda, mu + am * s_mu)
        J_new = value(trial)
        if J_new < J0 + params.c1 * (al * slope_l + am * slope_m):
            return LineSearchResult(al, am, J_new, b, True, trial)
        al *= params.shrink
        am *= params.shrink
    return LineSearchResult(0.0, 0.0, J0, params.max_backtracks, False, None)


# ---- objective ------------------------------------------------------------------


def misfit_value(traces: TraceRecord, measured: TraceRecord) -> float:
    """``1/2 sum_j int |u - u_m|^2 dt`` by the trapezoidal rule on the sample grid."""
    if traces.data.shape != measured.data.shape:
        raise ValueError(f"trace shapes differ: {traces.data.shape} vs {measured.data.shape}")
    r = traces.data - measured.data
    w = trapezoid_weights(len(traces.times), traces.dt)
    return 0.5 * float(np.einsum("t,trc->", w, r * r))


@dataclass
class Evaluation:
    """Forward solutions and objective parts at one material point."""

    lam: np.ndarray
    mu: np.ndarray
    J: float
    misfit: float
    reg: float
    traces: list[TraceRecord]
    ops: OperatorSet | None = None
    stores: list[SnapshotStore] | None = None


@dataclass
class InversionProblem:
    """Everything fixed during an inversion: mesh, density, receivers, loads and data.

    ``loads[i]`` and ``measured[i]`` are the load cases and recorded traces
    of stage ``i`` (same order).
    """

    mesh: SpectralMesh
    rho: np.ndarray
    receivers: np.ndarray
    dt: float
    loads: list[list[LoadCase]]
    measured: list[list[TraceRecord]]
    profile: StretchProfile | None = None
    stride: int = 1
    bounds: tuple[float, float] = DEFAULT_BOUNDS

    def materials(self, lam: np.ndarray, mu: np.ndarray) -> MaterialField:
        lo, hi = self.bounds
        lam = extend_nodal(np.clip(lam, lo, hi), self.mesh)
        mu = extend_nodal(np.clip(mu, lo, hi), self.mesh)
        return MaterialField(lam, mu, self.rho)

    def operators(self, lam, mu) -> OperatorSet:
        return assemble(self.mesh, self.materials(lam, mu), self.profile)

    def evaluate(self, lam, mu, stage: Stage, stage_index: int, reg: RegularizationSpec,
                 keep: bool = True) -> Evaluation:
        ops = self.operators(lam, mu)
        traces, stores = [], []
        misfit = 0.0
        for load, data in zip(self.loads[stage_index], self.measured[stage_index]):
            tr, st = run_forward(ops, load.force_provider(self.mesh), self.receivers, stage.T, self.dt,
                                 self.stride, store_snapshots=keep)
            misfit += misfit_value(tr, data)
            traces.append(tr)
            stores.append(st)
        r = reg_value(lam, mu, reg, self.mesh)
        return Evaluation(lam, mu, misfit + r, misfit, r, traces, ops if keep else None, stores if keep else None)

    def misfit_gradients(self, ev: Evaluation, stage: Stage, stage_index: int) -> tuple[np.ndarray, np.ndarray]:
        g_l = np.zeros(self.mesh.n_nodes)
        g_m = np.zeros(self.mesh.n_nodes)
        for tr, st, data in zip(ev.traces, ev.stores, self.measured[stage_index]):
            res = run_adjoint(ev.ops, tr.with_data(tr.data - data.data), stage.T, self.dt, self.stride,
                              forward_store=st)
            g_l += res.grad_lambda
            g_m += res.grad_mu
        return g_l, g_m


def objective(problem: InversionProblem, lam, mu, stage_index: int, reg: RegularizationSpec | None = None):
    """``(J, misfit, reg, traces)`` at ``(lam, mu)`` for one stage."""
    stage_reg = reg or RegularizationSpec()
    dummy = Stage(problem.loads[stage_index][0].pulse, problem.measured[stage_index][0].times[-1])
    ev = problem.evaluate(lam, mu, dummy, stage_index, stage_reg, keep=False)
    return ev.J, ev.misfit, ev.reg, ev.traces


# ---- driver -------------------------------------------------------------------------


@dataclass
class IterationRecord:
    k: int
    stage: int
    J: float
    misfit: float
    reg: float
    R_lambda: float
    R_mu: float
    alpha_lambda: float
    alpha_mu: float
    W: float
    backtracks: int
    f_max: float = 0.0
    armijo_lhs: float = float("nan")
    armijo_rhs: float = float("nan")
    misfit_ratio_lambda: float = float("nan")
    misfit_ratio_mu: float = float("nan")


@dataclass
class InversionState:
    k: int
    lam: np.ndarray
    mu: np.ndarray
    memory_lambda: LBFGSMemory
    memory_mu: LBFGSMemory
    stage: int = 0
    history: list[IterationRecord] = field(default_factory=list)
    first_directions: dict[str, np.ndarray] = field(default_factory=dict)
    stop_reason: str = ""
    final_misfit: float = float("nan")


def _scaled_first_step(s: np.ndarray, field_values: np.ndarray, nodes: np.ndarray, fraction: float) -> np.ndarray:
    smax = float(np.max(np.abs(s[nodes]))) if len(nodes) else 0.0
    if smax == 0.0:
        return s
    return s * (fraction * float(np.max(np.abs(field_values[nodes]))) / smax)


def invert(problem: InversionProblem, config: InversionConfig, lam0: np.ndarray, mu0: np.ndarray,
           callback: Callable[[InversionState, IterationRecord], None] | None = None) -> InversionState:
    """Run the staged reduced-space inversion from ``(lam0, mu0)``.

    Each iteration solves the state and adjoint problems, forms the reduced
    gradients with per-iteration regularization factors, computes two L-BFGS
    directions (lambda biased while ``W > 0``), backtracks, and updates with
    PML extension and bound clipping. The state of the last iteration is returned.
    """
    mesh = problem.mesh
    nodes = mesh.rd_nodes
    lo, hi = config.bounds
    params = LineSearchParams(config.c1, config.shrink, config.alpha_init, config.max_backtracks)
    state = InversionState(0, np.clip(np.array(lam0, float), lo, hi), np.clip(np.array(mu0, float), lo, hi),
                           LBFGSMemory(config.lbfgs_memory), LBFGSMemory(config.lbfgs_memory))
    free_l = config.freeze != "lambda"
    free_m = config.freeze != "mu"
    # "mass": L-BFGS and the Armijo slopes work in z = Mt^(1/2) m, where g.s is the true derivative
    if config.inner_product == "mass":
        w = material_mass(mesh)
        root = np.ones(mesh.n_nodes)
        root[nodes] = np.sqrt(w[nodes])
    else:
        root = np.ones(mesh.n_nodes)

    for si, stage in enumerate(config.stages):
        state.stage = si
        state.stop_reason = ""
        state.memory_lambda.reset()
        state.memory_mu.reset()
        base = RegularizationSpec(config.regularization, config.epsilon)
        ev = problem.evaluate(state.lam, state.mu, stage, si, base)
        prev_g: tuple[np.ndarray, np.ndarray] | None = None
        prev_step: tuple[np.ndarray, np.ndarray] | None = None
        stage_J: list[float] = []
        for ks in range(stage.max_iter):
            # gradients at the current point with freshly chosen factors
            mis_l, mis_m = problem.misfit_gradients(ev, stage, si)
            reg_l = reg_gradient(state.lam, base, mesh)
            reg_m = reg_gradient(state.mu, base, mesh)
            ratio = stage.ratio_at(ks)
            R_l = choose_reg_factor(reg_l, mis_l, ratio) if free_l else 0.0
            R_m = choose_reg_factor(reg_m, mis_m, ratio) if free_m else 0.0
            reg = RegularizationSpec(config.regularization, config.epsilon, R_l, R_m)
            grads = gradient_pair(mis_l, mis_m, state.lam, state.mu, reg, mesh)
            g_l = grads.g_lambda if free_l else np.zeros(mesh.n_nodes)
            g_m = grads.g_mu if free_m else np.zeros(mesh.n_nodes)
            J_cur = ev.misfit + reg_value(state.lam, state.mu, reg, mesh)

            if prev_g is not None and prev_step is not None:
                if free_l:
                    state.memory_lambda.push(root * prev_step[0], root * (g_l - prev_g[0]))
                if free_m:
                    state.memory_mu.push(root * prev_step[1], root * (g_m - prev_g[1]))

            if J_cur <= config.j_tol or (not np.any(g_l) and not np.any(g_m)):
                state.stop_reason = "tolerance"
                _record(state, si, stage, J_cur, ev, reg, 0.0, 0.0, 0.0, 0, callback)
                break

            s_l = lbfgs_direction(state.memory_lambda, root * g_l) / root if free_l else np.zeros(mesh.n_nodes)
            s_m = lbfgs_direction(state.memory_mu, root * g_m) / root if free_m else np.zeros(mesh.n_nodes)
            # slopes of J along m-space directions
            d_l, d_m = root * root * g_l, root * root * g_m
            if free_l and len(state.memory_lambda) == 0:
                s_l = _scaled_first_step(s_l, state.lam, nodes, config.first_step_fraction)
            if free_m and len(state.memory_mu) == 0:
                s_m = _scaled_first_step(s_m, state.mu, nodes, config.first_step_fraction)

            W = bias_weight(state.k, config.k_bias) if (config.bias and free_l and free_m) else 0.0
            if W > 0.0 and np.any(s_l) and np.any(s_m):
                s_b = bias_lambda_direction(s_l, s_m, W)
                if float(d_l @ s_b + d_m @ s_m) < 0.0:
                    if state.k == 0:
                        state.first_directions = {"s_lambda": s_l.copy(), "s_mu": s_m.copy(), "biased": s_b.copy()}
                    s_l = s_b
                else:
                    log.info("biased direction is not a descent direction at k=%d; using the unbiased one", state.k)
                    W = 0.0

            def J_eval(lam_t, mu_t):
                lam_c = np.clip(lam_t, lo, hi)
                mu_c = np.clip(mu_t, lo, hi)
                return problem.evaluate(lam_c, mu_c, stage, si, reg)

            try:
                ls = armijo_search(J_eval, state.lam, state.mu, s_l, s_m, d_l, d_m, params, J0=J_cur)
            except InstabilityError as exc:
                state.stop_reason = f"instability: {exc}"
                log.error("stopping: %s", exc)
                break
            if not ls.accepted:
                state.stop_reason = "line search failure"
                log.warning("line search failed at k=%d", state.k)
                _record(state, si, stage, J_cur, ev, reg, 0.0, 0.0, W, ls.backtracks, callback)
                break

            new = ls.payload
            _record(state, si, stage, J_cur, ev, reg, ls.alpha_lambda, ls.alpha_mu, W, ls.backtracks,
                          callback, lhs=ls.J_new,
                          rhs=J_cur + config.c1 * (ls.alpha_lambda * float(d_l @ s_l) + ls.alpha_mu * float(d_m @ s_m)),
                          grads=grads, ratio=ratio)
            prev_step = (new.lam - state.lam, new.mu - state.mu)
            prev_g = (g_l, g_m)
            state.lam, state.mu = new.lam, new.mu
            ev = new
            state.k += 1
            stage_J.append(ls.J_new)
            w = stage.switch_window
            if len(stage_J) > w and stage_J[-w - 1] > 0:
                if (stage_J[-w - 1] - stage_J[-1]) / stage_J[-w - 1] < stage.switch_tol:
                    log.info("stage %d stalled after %d iterations", si, ks + 1)
                    state.stop_reason = "stalled"
                    break
        else:
            state.stop_reason = "max iterations"
        state.final_misfit = ev.misfit
        if state.stop_reason.startswith(("tolerance", "instability", "line search")):
            break
    return state


def _record(state, si, stage, J_cur, ev, reg, al, am, W, backtracks, callback, lhs=float("nan"),
            rhs=float("nan"), grads: GradientPair | None = None, ratio: float = float("nan")):
    ml = mm = float("nan")
    if grads is not None:
        nl = np.linalg.norm(grads.mis_lambda)
        nm = np.linalg.norm(grads.mis_mu)
        if nl > 0:
            ml = reg.R_lambda * np.linalg.norm(grads.reg_lambda) / nl
        if nm > 0:
            mm = reg.R_mu * np.linalg.norm(grads.reg_mu) / nm
    rec = IterationRecord(state.k, si, J_cur, ev.misfit, J_cur - ev.misfit, reg.R_lambda, reg.R_mu, al, am, W,
                          backtracks, stage.pulse.f_max, lhs, rhs, ml, mm)
    state.history.append(rec)
    log.info("k=%d stage=%d J=%.6e misfit=%.6e alpha=(%.3g, %.3g) W=%.2f bt=%d",
             rec.k, si, rec.J, rec.misfit, al, am, W, backtracks)
    if callback is not None:
        callback(state, rec)
    return rec


def export_history(history: Sequence[IterationRecord], path: str | Path) -> None:
    """History CSV with the standard columns."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for r in history:
                w.writerow([r.k, r.stage, repr(r.J), repr(r.misfit), repr(r.reg), repr(r.R_lambda), repr(r.R_mu),
                            repr(r.alpha_lambda), repr(r.alpha_mu), repr(r.W), r.backtracks])
    except OSError as exc:
        raise OSError(f"cannot write history to {path}: {exc}") from exc


def rms_error(values: np.ndarray, target: np.ndarray, nodes: np.ndarray) -> float:
    d = values[nodes] - target[nodes]
    return math.sqrt(float(np.mean(d * d)))
