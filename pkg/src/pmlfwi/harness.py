"""Run configuration, target models, synthetic data, file I/O and the command line.

Config files are INI documents; every key is listed in ``_SCHEMA`` together
with its section, type and default, and unknown keys are rejected with the
offending line number.
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import re
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from pmlfwi._backend import BACKEND
from pmlfwi.forward import InstabilityError, SnapshotStore, TraceRecord, run_forward, step_count
from pmlfwi.gradient import (
    GradcheckRow,
    RegularizationSpec,
    directional_derivative_co,
    directional_derivative_fd,
    gradcheck_table,
    gradient_pair,
)
from pmlfwi.inversion import (
    InversionConfig,
    InversionProblem,
    InversionState,
    IterationRecord,
    Stage,
    export_history,
    invert,
    single_parameter_mode,
)
from pmlfwi.operators import PULSES, LoadCase, Pulse, assemble
from pmlfwi.pml_medium import MaterialField, StretchProfile, extend_nodal, velocities
from pmlfwi.specgrid import GridSpec, MeshError, SpectralMesh, build_mesh, count_unknowns

log = logging.getLogger(__name__)

MODEL_NAMES = ("smooth", "layered", "layered_inclusion", "three_inclusions", "homogeneous", "custom")
TRACE_HEADER = ("t", "receiver_id", "x", "y", "z", "ux", "uy", "uz")

# reference RD boxes of the published models; geometry is scaled from these
_REFERENCE_BOX = {
    "smooth": (40.0, 40.0, 45.0),
    "layered": (40.0, 40.0, 45.0),
    "layered_inclusion": (40.0, 40.0, 45.0),
    "three_inclusions": (80.0, 80.0, 45.0),
}
MPA = 1e6


class ConfigError(ValueError):
    """Invalid configuration; the message carries the file and line when known."""


# ---- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    # grid
    extent: tuple[float, float, float] = (20.0, 20.0, 20.0)
    element_size: float = 2.5
    pml_thickness: float = 5.0
    stress_layout: str = "continuous"
    # PML profile
    alpha0: float = 5.0
    beta0: float = 400.0
    m: float = 2.0
    # target model
    model: str = "smooth"
    model_file: str = ""
    scale_geometry: bool = True
    rho: float = 2000.0
    model_lambda: float = 80e6
    model_mu: float = 80e6
    # loads and receivers
    load_half_width: float = 5.0
    load_amplitude: float = 1000.0
    receiver_half_width: float | None = None
    receiver_corners_only: bool = False
    # time
    dt: float = 1e-3
    T: float = 0.3
    stride: int = 1
    # inversion schedule
    pulses: tuple[str, ...] = ("p20",)
    stage_T: tuple[float, ...] | None = None
    max_iter: int = 50
    reg_ratio: float = 0.5
    reg_ratio_end: float | None = None
    regularization: str = "TN"
    epsilon: float = 0.01
    bias: bool = True
    k_bias: int = 50
    freeze: str = ""
    lbfgs_memory: int = 15
    initial_lambda: float = 80e6
    initial_mu: float = 80e6
    bounds: tuple[float, float] = (1e5, 1e10)
    first_step_fraction: float = 0.05
    inner_product: str = "mass"
    switch_window: int = 10
    switch_tol: float = 1e-3
    snapshot_every: int = 0
    # synthetic data
    refine: int = 2
    noise_percent: float = 0.0
    noise_mode: str = "peak"
    # gradient check
    gradcheck_points: tuple[str, ...] = ("0 0 0 lambda", "0 0 0 mu")
    gradcheck_steps: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    gradcheck_pulses: tuple[str, ...] = ("p20",)
    # run
    out: str = "out"
    seed: int = 0
    workers: int = 1
    custom_pulses: tuple[Pulse, ...] = field(default=())

    # ---- derived objects ----
    def grid(self) -> GridSpec:
        return GridSpec(self.extent, self.element_size, self.pml_thickness)

    def profile(self, mesh: SpectralMesh) -> StretchProfile:
        return StretchProfile.for_mesh(mesh, alpha0=self.alpha0, beta0=self.beta0, m=self.m)

    def pulse(self, name: str) -> Pulse:
        for p in self.custom_pulses:
            if p.name == name:
                return p
        if name in PULSES:
            return PULSES[name]
        raise ConfigError(f"pulse {name!r} is not defined")

    def load_case(self, pulse: Pulse) -> LoadCase:
        return LoadCase.centered(self.load_half_width, amplitude=self.load_amplitude, pulse=pulse)

    def stage_durations(self) -> tuple[float, ...]:
        return self.stage_T if self.stage_T is not None else tuple(self.T for _ in self.pulses)

    def receivers(self, mesh: SpectralMesh) -> np.ndarray:
        lx, ly, _ = mesh.spec.rd_extent
        half = self.receiver_half_width
        hx, hy = (lx / 2, ly / 2) if half is None else (half, half)
        return mesh.surface_nodes_in_patch(hx, hy, corners_only=self.receiver_corners_only)

    def inversion_config(self) -> InversionConfig:
        stages = tuple(
            Stage(self.pulse(p), T, self.reg_ratio, self.max_iter, self.reg_ratio_end,
                  self.switch_window, self.switch_tol)
            for p, T in zip(self.pulses, self.stage_durations())
        )
        cfg = InversionConfig(stages, lbfgs_memory=self.lbfgs_memory, bias=self.bias, k_bias=self.k_bias,
                              regularization=self.regularization, epsilon=self.epsilon, bounds=self.bounds,
                              first_step_fraction=self.first_step_fraction,
                              inner_product=self.inner_product)
        return single_parameter_mode(cfg, self.freeze) if self.freeze else cfg


# (section, key, attribute, kind)
_SCHEMA: tuple[tuple[str, str, str, str], ...] = (
    ("grid", "extent", "extent", "floats"),
    ("grid", "element_size", "element_size", "float"),
    ("grid", "pml_thickness", "pml_thickness", "float"),
    ("grid", "stress_layout", "stress_layout", "str"),
    ("pml", "alpha0", "alpha0", "float"),
    ("pml", "beta0", "beta0", "float"),
    ("pml", "m", "m", "float"),
    ("model", "name", "model", "str"),
    ("model", "file", "model_file", "str"),
    ("model", "scale_geometry", "scale_geometry", "bool"),
    ("model", "rho", "rho", "float"),
    ("model", "lambda", "model_lambda", "float"),
    ("model", "mu", "model_mu", "float"),
    ("load", "half_width", "load_half_width", "float"),
    ("load", "amplitude", "load_amplitude", "float"),
    ("receivers", "half_width", "receiver_half_width", "float?"),
    ("receivers", "corners_only", "receiver_corners_only", "bool"),
    ("time", "dt", "dt", "float"),
    ("time", "T", "T", "float"),
    ("time", "stride", "stride", "int"),
    ("inversion", "pulses", "pulses", "strs"),
    ("inversion", "stage_T", "stage_T", "floats?"),
    ("inversion", "max_iter", "max_iter", "int"),
    ("inversion", "reg_ratio", "reg_ratio", "float"),
    ("inversion", "reg_ratio_end", "reg_ratio_end", "float?"),
    ("inversion", "regularization", "regularization", "str"),
    ("inversion", "epsilon", "epsilon", "float"),
    ("inversion", "bias", "bias", "bool"),
    ("inversion", "k_bias", "k_bias", "int"),
    ("inversion", "freeze", "freeze", "str"),
    ("inversion", "lbfgs_memory", "lbfgs_memory", "int"),
    ("inversion", "initial_lambda", "initial_lambda", "float"),
    ("inversion", "initial_mu", "initial_mu", "float"),
    ("inversion", "bounds", "bounds", "floats"),
    ("inversion", "first_step_fraction", "first_step_fraction", "float"),
    ("inversion", "inner_product", "inner_product", "str"),
    ("inversion", "switch_window", "switch_window", "int"),
    ("inversion", "switch_tol", "switch_tol", "float"),
    ("inversion", "snapshot_every", "snapshot_every", "int"),
    ("data", "refine", "refine", "int"),
    ("data", "noise_percent", "noise_percent", "float"),
    ("data", "noise_mode", "noise_mode", "str"),
    ("gradcheck", "points", "gradcheck_points", "lines"),
    ("gradcheck", "steps", "gradcheck_steps", "floats"),
    ("gradcheck", "pulses", "gradcheck_pulses", "strs"),
    ("run", "out", "out", "str"),
    ("run", "seed", "seed", "int"),
    ("run", "workers", "workers", "int"),
)
_PULSE_KEYS = ("mean", "spread", "t_end", "f_max", "reading")


def _format(kind: str, value) -> str:
    if value is None:
        return ""
    if kind.startswith("float"):
        if kind.startswith("floats"):
            return " ".join(repr(float(v)) for v in value)
        return repr(float(value))
    if kind == "int":
        return str(int(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind == "strs":
        return ", ".join(value)
    if kind == "lines":
        return "".join("\n" + v for v in value)
    return str(value)


def _parse(kind: str, text: str):
    text = text.strip()
    if kind.endswith("?"):
        if text == "":
            return None
        kind = kind[:-1]
    if kind == "float":
        return float(text)
    if kind == "floats":
        return tuple(float(v) for v in text.replace(",", " ").split())
    if kind == "int":
        return int(text)
    if kind == "bool":
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "strs":
        return tuple(v.strip() for v in text.split(",") if v.strip())
    if kind == "lines":
        return tuple(v.strip() for v in text.splitlines() if v.strip())
    return text


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^([^\s=:#;][^=:]*?)\s*[=:]")


def _line_map(text: str) -> dict[tuple[str, str], int]:
    """``(section, key) -> line number`` for every key line of an INI text."""
    out: dict[tuple[str, str], int] = {}
    section = ""
    for no, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            out[(section, "")] = no
            continue
        m = _KEY_RE.match(line)
        if m:
            out[(section, m.group(1).strip())] = no
    return out


def config_to_ini(config: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, key, attr, kind in _SCHEMA:
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, _format(kind, getattr(config, attr)))
    for p in config.custom_pulses:
        sec = f"pulse.{p.name}"
        parser.add_section(sec)
        for k in _PULSE_KEYS:
            v = getattr(p, k)
            parser.set(sec, k, v if isinstance(v, str) else repr(float(v)))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Parse and validate an INI text; errors name ``source`` and the line."""
    lines = _line_map(text)

    def where(section: str, key: str = "") -> str:
        no = lines.get((section, key)) or lines.get((section, ""))
        return f"{source}:{no}" if no else source

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    known = {(s, k): (a, kind) for s, k, a, kind in _SCHEMA}
    sections = {s for s, _, _, _ in _SCHEMA}
    values: dict[str, object] = {}
    pulses: list[Pulse] = []
    for section in parser.sections():
        if section.startswith("pulse."):
            name = section[len("pulse."):].strip()
            opts = dict(parser.items(section))
            extra = set(opts) - set(_PULSE_KEYS)
            if extra:
                key = sorted(extra)[0]
                raise ConfigError(f"{where(section, key)}: unknown pulse key {key!r}")
            try:
                pulses.append(Pulse(name, float(opts["mean"]), float(opts["spread"]), float(opts["t_end"]),
                                    float(opts["f_max"]), opts.get("reading", "variance")))
            except KeyError as exc:
                raise ConfigError(f"{where(section)}: pulse {name!r} lacks key {exc.args[0]!r}") from exc
            except ValueError as exc:
                raise ConfigError(f"{where(section)}: {exc}") from exc
            continue
        if section not in sections:
            raise ConfigError(f"{where(section)}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if (section, key) not in known:
                raise ConfigError(f"{where(section, key)}: unknown key {key!r} in [{section}]")
            attr, kind = known[(section, key)]
            try:
                values[attr] = _parse(kind, raw)
            except ValueError as exc:
                raise ConfigError(f"{where(section, key)}: [{section}] {key}: {exc}") from exc
    config = RunConfig(**values, custom_pulses=tuple(pulses))
    attr_where = {a: where(s, k) for s, k, a, _ in _SCHEMA}
    validate_config(config, attr_where)
    return config


def validate_config(config: RunConfig, where: dict[str, str] | None = None) -> None:
    where = where or {}

    def fail(attr: str, msg: str):
        loc = where.get(attr, "config")
        raise ConfigError(f"{loc}: {attr}: {msg}")

    if len(config.extent) != 3:
        fail("extent", "needs three lengths")
    try:
        config.grid()
    except MeshError as exc:
        fail("element_size", str(exc))
    if config.stress_layout not in ("continuous", "element"):
        fail("stress_layout", "must be 'continuous' or 'element'")
    if config.alpha0 < 0 or config.beta0 < 0 or config.m < 1:
        fail("beta0", "alpha0, beta0 must be >= 0 and m >= 1")
    if config.model not in MODEL_NAMES:
        fail("model", f"unknown model {config.model!r}; expected one of {', '.join(MODEL_NAMES)}")
    if config.model == "custom" and not config.model_file:
        fail("model_file", "the custom model needs a file")
    if config.rho <= 0:
        fail("rho", "density must be positive")
    if config.dt <= 0 or config.T <= 0:
        fail("dt", "dt and T must be positive")
    if config.stride < 1:
        fail("stride", "must be >= 1")
    if not config.pulses:
        fail("pulses", "at least one stage pulse is required")
    for name in (*config.pulses, *config.gradcheck_pulses):
        try:
            config.pulse(name)
        except ConfigError:
            fail("pulses" if name in config.pulses else "gradcheck_pulses", f"pulse {name!r} is not defined")
    if config.stage_T is not None and len(config.stage_T) != len(config.pulses):
        fail("stage_T", "needs one duration per stage pulse")
    for T in config.stage_durations():
        try:
            step_count(T, config.dt)
        except ValueError as exc:
            fail("stage_T" if config.stage_T else "T", str(exc))
    if config.regularization not in ("TN", "TV"):
        fail("regularization", "must be TN or TV")
    if config.freeze not in ("", "lambda", "mu"):
        fail("freeze", "must be empty, 'lambda' or 'mu'")
    if len(config.bounds) != 2 or not (0 < config.bounds[0] < config.bounds[1]):
        fail("bounds", "needs 0 < lower < upper")
    if config.refine not in (1, 2):
        fail("refine", "must be 1 or 2")
    if config.noise_percent < 0:
        fail("noise_percent", "must be non-negative")
    if config.noise_mode not in ("peak", "rms"):
        fail("noise_mode", "must be 'peak' or 'rms'")
    if config.workers < 1:
        fail("workers", "must be >= 1")
    for line in config.gradcheck_points:
        try:
            parse_gradcheck_point(line)
        except ValueError as exc:
            fail("gradcheck_points", str(exc))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config(text, str(path))


def parse_gradcheck_point(line: str) -> tuple[tuple[float, float, float], str]:
    parts = line.split()
    if len(parts) != 4 or parts[3] not in ("lambda", "mu"):
        raise ValueError(f"gradcheck point {line!r} must read 'x y z lambda|mu'")
    return (float(parts[0]), float(parts[1]), float(parts[2])), parts[3]


# ---- target models ------------------------------------------------------------------


def smooth_profile(z) -> np.ndarray:
    """Lamé value (Pa) of the smooth depth profile at elevation ``z`` (m, negative down)."""
    d = np.abs(np.asarray(z, dtype=float))
    return (80.0 + 0.45 * d + 35.0 * np.exp(-((d - 22.5) ** 2) / 150.0)) * MPA


def _layers(z, interfaces: tuple[float, float]) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.full(z.shape, 125.0 * MPA)
    out[z >= -interfaces[1]] = 101.25 * MPA
    out[z >= -interfaces[0]] = 80.0 * MPA
    return out


def _reference_coords(mesh: SpectralMesh, name: str, scale: bool) -> np.ndarray:
    c = mesh.coords.copy()
    if scale and name in _REFERENCE_BOX:
        ref = np.array(_REFERENCE_BOX[name])
        c *= ref / np.array(mesh.spec.rd_extent)
    return c


def _model_values(name: str, pts: np.ndarray) -> np.ndarray:
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    if name == "smooth":
        return smooth_profile(z)
    if name == "layered":
        return _layers(z, (12.0, 27.0))
    if name == "layered_inclusion":
        v = _layers(z, (12.0, 27.0))
        inside = ((x - 7.5) / 7.5) ** 2 + (y / 5.0) ** 2 + ((z + 12.0) / 5.5) ** 2 <= 1.0
        v[inside] = 156.8 * MPA
        return v
    if name == "three_inclusions":
        v = _layers(z, (15.0, 30.0))
        spheroid = ((x + 20) / 3.75) ** 2 + ((y + 20) / 20) ** 2 + ((z + 8.75) / 3.75) ** 2 <= 1.0
        ellipsoid = ((x - 20) / 15) ** 2 + ((y - 20) / 7.5) ** 2 + ((z + 30) / 5) ** 2 <= 1.0
        sphere = (x - 20) ** 2 + (y + 20) ** 2 + (z + 35) ** 2 <= 6.25
        v[spheroid] = 156.8 * MPA
        v[ellipsoid] = 156.8 * MPA
        v[sphere] = 80.0 * MPA
        return v
    raise ValueError(f"unknown model {name!r}")


def read_depth_profile(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """CSV with columns ``z,lambda,mu,rho`` (SI), any row order."""
    path = Path(path)
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise OSError(f"cannot read model file {path}: {exc}") from exc
    if data.shape[1] != 4:
        raise ValueError(f"{path}: expected columns z,lambda,mu,rho")
    data = data[np.argsort(data[:, 0])]
    return data[:, 0], data[:, 1], data[:, 2], data[:, 3]


def build_target_model(name: str, mesh: SpectralMesh, *, scale: bool = True, rho: float = 2000.0,
                       lam: float = 80e6, mu: float = 80e6, path: str | Path | None = None) -> MaterialField:
    """Nodal target material on ``mesh``; PML nodes take their interface values.

    With ``scale`` the published geometry is mapped onto the mesh by the ratio
    of the RD box to the published box along each axis; otherwise the
    coordinates are used as they are.
    """
    n = mesh.n_nodes
    if name == "homogeneous":
        return MaterialField.homogeneous(mesh, lam, mu, rho)
    if name == "custom":
        if path is None:
            raise ValueError("the custom model needs a file")
        z, pl, pm, pr = read_depth_profile(path)
        zc = mesh.coords[:, 2]
        field_ = MaterialField(np.interp(zc, z, pl), np.interp(zc, z, pm), np.interp(zc, z, pr))
    elif name in _REFERENCE_BOX:
        v = _model_values(name, _reference_coords(mesh, name, scale))
        field_ = MaterialField(v, v.copy(), np.full(n, float(rho)))
    else:
        raise ValueError(f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")
    return MaterialField(extend_nodal(field_.lam, mesh), extend_nodal(field_.mu, mesh), extend_nodal(field_.rho, mesh))


def config_model(config: RunConfig, mesh: SpectralMesh) -> MaterialField:
    return build_target_model(config.model, mesh, scale=config.scale_geometry, rho=config.rho,
                              lam=config.model_lambda, mu=config.model_mu, path=config.model_file or None)


# ---- measured data ------------------------------------------------------------------


@dataclass
class MeasuredDataSet:
    """Traces per stage and load case, with their provenance."""

    records: list[list[TraceRecord]]
    provenance: dict[str, str]
    pulses: tuple[str, ...]

    def copy(self) -> MeasuredDataSet:
        return MeasuredDataSet([[r.copy() for r in st] for st in self.records], dict(self.provenance), self.pulses)


def _provenance(config: RunConfig, refine: int) -> dict[str, str]:
    return {
        "extent": _format("floats", config.extent),
        "element_size": repr(config.element_size),
        "pml_thickness": repr(config.pml_thickness),
        "generator_element_size": repr(config.element_size / refine),
        "dt": repr(config.dt),
        "generator_dt": repr(config.dt / refine),
        "refine": str(refine),
        "inverse_crime": "true" if refine == 1 else "false",
        "model": config.model,
        "noise_percent": "0.0",
        "noise_mode": config.noise_mode,
        "seed": str(config.seed),
        "alpha0": repr(config.alpha0),
        "beta0": repr(config.beta0),
        "m": repr(config.m),
    }


def synthesize_data(config: RunConfig, target_model: str | Callable[[SpectralMesh], MaterialField] | None = None,
                    refine: int | None = None) -> MeasuredDataSet:
    """Forward-solve the target on a mesh refined by ``refine`` and sample at the inversion receivers.

    The refined run halves both element size and time step when
    ``refine=2``; receivers are the coarse-mesh receiver nodes, which are
    lattice nodes of the refined mesh as well. ``refine=1`` reproduces the
    inversion discretization and is flagged as inverse crime.
    """
    refine = config.refine if refine is None else refine
    if refine not in (1, 2):
        raise ValueError("refine must be 1 or 2")
    coarse = build_mesh(config.grid(), stress_layout=config.stress_layout)
    fine = build_mesh(config.grid().refined(refine), stress_layout=config.stress_layout)
    if target_model is None:
        material = config_model(config, fine)
    elif isinstance(target_model, str):
        material = build_target_model(target_model, fine, scale=config.scale_geometry, rho=config.rho,
                                      lam=config.model_lambda, mu=config.model_mu, path=config.model_file or None)
    else:
        material = target_model(fine)
    rec_coarse = config.receivers(coarse)
    coords = coarse.coords[rec_coarse]
    rec_fine = np.array([fine.locate_node(c) for c in coords], dtype=np.int64)
    if not np.allclose(fine.coords[rec_fine], coords, rtol=0, atol=1e-9 * fine.element_size):
        raise MeshError("receivers of the inversion mesh do not coincide with nodes of the generating mesh")
    ops = assemble(fine, material, config.profile(fine))
    dt_fine = config.dt / refine
    records = []
    for name, T in zip(config.pulses, config.stage_durations()):
        load = config.load_case(config.pulse(name))
        tr, _ = run_forward(ops, load.force_provider(fine), rec_fine, T, dt_fine, store_snapshots=False)
        sub = tr.subsample(refine)
        sub.times = np.arange(len(sub.times)) * config.dt
        records.append([TraceRecord(rec_coarse.copy(), coords.copy(), sub.times, sub.data)])
    prov = _provenance(config, refine)
    if target_model is not None and not isinstance(target_model, str):
        prov["model"] = "callable"
    elif isinstance(target_model, str):
        prov["model"] = target_model
    return MeasuredDataSet(records, prov, tuple(config.pulses))


def add_noise(data: MeasuredDataSet, percent: float, seed: int, mode: str = "peak") -> MeasuredDataSet:
    """Add zero-mean Gaussian noise per receiver component trace.

    ``mode="peak"`` scales the standard deviation by the trace's peak
    amplitude, ``mode="rms"`` by its root mean square.
    """
    if percent < 0:
        raise ValueError("noise percent must be non-negative")
    if mode not in ("peak", "rms"):
        raise ValueError(f"unknown noise mode {mode!r}")
    out = data.copy()
    if percent == 0:
        return out
    rng = np.random.default_rng(seed)
    for stage in out.records:
        for rec in stage:
            d = rec.data
            ref = np.max(np.abs(d), axis=0) if mode == "peak" else np.sqrt(np.mean(d * d, axis=0))
            rec.data = d + rng.standard_normal(d.shape) * (percent / 100.0) * ref
    out.provenance["noise_percent"] = repr(float(percent))
    out.provenance["noise_mode"] = mode
    out.provenance["noise_seed"] = str(seed)
    return out


# ---- trace, field and dataset files ---------------------------------------------------


def export_traces(record: TraceRecord, path: str | Path, comments: dict[str, str] | None = None) -> None:
    """CSV, one row per (time, receiver), 17 significant digits."""
    path = Path(path)
    nt, nr, _ = record.data.shape
    try:
        with open(path, "w", newline="") as fh:
            for k, v in (comments or {}).items():
                fh.write(f"# {k}={v}\n")
            fh.write(",".join(TRACE_HEADER) + "\n")
            ids = [str(int(r)) for r in record.receivers]
            xyz = [",".join(f"{c:.17g}" for c in row) for row in record.coords]
            for n in range(nt):
                t = f"{record.times[n]:.17g}"
                for j in range(nr):
                    u = record.data[n, j]
                    fh.write(f"{t},{ids[j]},{xyz[j]},{u[0]:.17g},{u[1]:.17g},{u[2]:.17g}\n")
    except OSError as exc:
        raise OSError(f"cannot write traces to {path}: {exc}") from exc


def import_traces(path: str | Path) -> tuple[TraceRecord, dict[str, str]]:
    """Inverse of :func:`export_traces`; returns the record and the comment metadata."""
    path = Path(path)
    meta: dict[str, str] = {}
    rows = []
    try:
        with open(path, newline="") as fh:
            header = None
            for line in fh:
                if line.startswith("#"):
                    k, _, v = line[1:].strip().partition("=")
                    meta[k.strip()] = v.strip()
                    continue
                if header is None:
                    header = tuple(line.strip().split(","))
                    if header != TRACE_HEADER:
                        raise ValueError(f"{path}: unexpected trace header {line.strip()!r}")
                    continue
                if line.strip():
                    rows.append(line.strip().split(","))
    except OSError as exc:
        raise OSError(f"cannot read traces from {path}: {exc}") from exc
    if not rows:
        raise ValueError(f"{path}: no trace samples")
    arr = np.array(rows)
    ids = arr[:, 1].astype(np.int64)
    order, first = np.unique(ids, return_index=True)
    receivers = ids[np.sort(first)]
    nr = len(receivers)
    if len(arr) % nr:
        raise ValueError(f"{path}: ragged trace table")
    nt = len(arr) // nr
    times = arr[::nr, 0].astype(float)
    coords = arr[:nr, 2:5].astype(float)
    data = arr[:, 5:8].astype(float).reshape(nt, nr, 3)
    if not np.array_equal(ids.reshape(nt, nr), np.broadcast_to(receivers, (nt, nr))):
        raise ValueError(f"{path}: receiver order changes between time samples")
    return TraceRecord(receivers, coords, times, data), meta


def save_dataset(data: MeasuredDataSet, directory: str | Path) -> Path:
    """One trace CSV per stage and load, each carrying the full provenance, plus ``dataset.ini``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = configparser.ConfigParser(interpolation=None)
    manifest.optionxform = str
    manifest["provenance"] = dict(data.provenance)
    manifest["stages"] = {}
    for si, (pulse, stage) in enumerate(zip(data.pulses, data.records)):
        names = []
        for li, rec in enumerate(stage):
            name = f"traces_stage{si}_load{li}.csv"
            export_traces(rec, directory / name, {**data.provenance, "stage": str(si), "pulse": pulse, "load": str(li)})
            names.append(name)
        manifest["stages"][f"stage{si}"] = f"{pulse}: " + " ".join(names)
    with open(directory / "dataset.ini", "w") as fh:
        manifest.write(fh)
    return directory


def load_dataset(directory: str | Path) -> MeasuredDataSet:
    directory = Path(directory)
    manifest = configparser.ConfigParser(interpolation=None)
    manifest.optionxform = str
    ini = directory / "dataset.ini"
    if not manifest.read(ini):
        raise ConfigError(f"dataset manifest not found: {ini}")
    prov = dict(manifest["provenance"])
    pulses, records = [], []
    for key in sorted(manifest["stages"], key=lambda s: int(s[len("stage"):])):
        pulse, _, files = manifest["stages"][key].partition(":")
        pulses.append(pulse.strip())
        records.append([import_traces(directory / f)[0] for f in files.split()])
    return MeasuredDataSet(records, prov, tuple(pulses))


def check_dataset(data: MeasuredDataSet, config: RunConfig, mesh: SpectralMesh) -> None:
    """Refuse data whose receivers, sampling or stages differ from ``config``."""
    rec = config.receivers(mesh)
    if tuple(data.pulses) != tuple(config.pulses):
        raise ConfigError(f"dataset stages {data.pulses} differ from configured pulses {config.pulses}")
    for si, (stage, T) in enumerate(zip(data.records, config.stage_durations())):
        for r in stage:
            if len(r.receivers) != len(rec) or not np.array_equal(r.receivers, rec) \
                    or not np.allclose(r.coords, mesh.coords[rec], atol=1e-9 * mesh.element_size, rtol=0):
                raise ConfigError("dataset receiver layout does not match the inversion mesh")
            expected = step_count(T, config.dt) + 1
            if len(r.times) != expected or abs(r.dt - config.dt) > 1e-9 * config.dt:
                raise ConfigError(f"stage {si}: dataset sampling ({len(r.times)} samples, dt={r.dt}) "
                                  f"does not match dt={config.dt}, T={T}")


def export_field(material: MaterialField, mesh: SpectralMesh, path: str | Path, title: str = "material") -> None:
    """Legacy VTK structured grid (ASCII) with lambda, mu, rho, cs, cp point data."""
    path = Path(path)
    NX, NY, NZ = mesh.lattice_shape
    # VTK wants x varying fastest; lattice ids run z fastest
    order = np.arange(mesh.n_nodes).reshape(NX, NY, NZ).transpose(2, 1, 0).ravel()
    cs, cp = velocities(material)
    pts = mesh.coords[order]
    arrays = (("lambda", material.lam), ("mu", material.mu), ("rho", material.rho), ("cs", cs), ("cp", cp))
    try:
        with open(path, "w") as fh:
            fh.write("# vtk DataFile Version 3.0\n")
            fh.write(title.replace("\n", " ")[:255] + "\n")
            fh.write("ASCII\nDATASET STRUCTURED_GRID\n")
            fh.write(f"DIMENSIONS {NX} {NY} {NZ}\n")
            fh.write(f"POINTS {mesh.n_nodes} double\n")
            np.savetxt(fh, pts, fmt="%.17g")
            fh.write(f"POINT_DATA {mesh.n_nodes}\n")
            for name, values in arrays:
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                np.savetxt(fh, values[order], fmt="%.17g")
    except OSError as exc:
        raise OSError(f"cannot write field to {path}: {exc}") from exc


def read_vtk_field(path: str | Path) -> tuple[np.ndarray, dict[str, np.ndarray], tuple[int, int, int]]:
    """Points, named point arrays and dimensions of a file written by :func:`export_field`."""
    lines = Path(path).read_text().splitlines()
    dims = tuple(int(v) for v in lines[4].split()[1:4])
    n = int(lines[5].split()[1])
    pts = np.array([row.split() for row in lines[6:6 + n]], dtype=float)
    arrays: dict[str, np.ndarray] = {}
    i = 6 + n + 1
    while i < len(lines):
        name = lines[i].split()[1]
        arrays[name] = np.array(lines[i + 2:i + 2 + n], dtype=float)
        i += 2 + n
    return pts, arrays, dims


# ---- experiments ------------------------------------------------------------------------


def build_problem(config: RunConfig, data: MeasuredDataSet, mesh: SpectralMesh | None = None) -> InversionProblem:
    mesh = mesh or build_mesh(config.grid(), stress_layout=config.stress_layout)
    check_dataset(data, config, mesh)
    loads = [[config.load_case(config.pulse(p))] for p in config.pulses]
    return InversionProblem(mesh, np.full(mesh.n_nodes, config.rho), config.receivers(mesh), config.dt, loads,
                            [list(st) for st in data.records], config.profile(mesh), config.stride, config.bounds)


def run_gradcheck(config: RunConfig, data: MeasuredDataSet | None = None,
                  mesh: SpectralMesh | None = None) -> list[GradcheckRow]:
    """Pointwise directional derivatives, adjoint-based against one-sided differences.

    The data come from the configured target model (``refine`` from the
    config); derivatives are taken at the homogeneous initial model. Each
    step ``h`` is relative to the field value at the perturbed node.
    """
    mesh = mesh or build_mesh(config.grid(), stress_layout=config.stress_layout)
    cfg = replace(config, pulses=tuple(config.gradcheck_pulses), stage_T=None)
    if data is None:
        data = synthesize_data(cfg)
    problem = build_problem(cfg, data, mesh)
    lam0 = np.full(mesh.n_nodes, cfg.initial_lambda)
    mu0 = np.full(mesh.n_nodes, cfg.initial_mu)
    reg = RegularizationSpec(cfg.regularization, cfg.epsilon)
    rows = []
    for si, pname in enumerate(cfg.pulses):
        stage = Stage(cfg.pulse(pname), cfg.stage_durations()[si])
        ev = problem.evaluate(lam0, mu0, stage, si, reg)
        mis_l, mis_m = problem.misfit_gradients(ev, stage, si)
        grads = gradient_pair(mis_l, mis_m, lam0, mu0, reg, mesh)

        def J(lam, mu, _si=si, _stage=stage):
            return problem.evaluate(lam, mu, _stage, _si, reg, keep=False).J

        for line in cfg.gradcheck_points:
            xyz, which = parse_gradcheck_point(line)
            node = mesh.locate_node(xyz)
            if not mesh.rd_closure_mask[node]:
                raise MeshError(f"gradcheck point {xyz} is outside the regular domain")
            direction = np.zeros(mesh.n_nodes)
            direction[node] = 1.0
            g = grads.g_lambda if which == "lambda" else grads.g_mu
            base = lam0 if which == "lambda" else mu0
            d_co = directional_derivative_co(g, direction, mesh)
            d_fd = {}
            for h in cfg.gradcheck_steps:
                step = h * float(base[node])
                d_fd[h] = directional_derivative_fd(J, lam0, mu0, direction, which, step, base_value=ev.J)
            rows.append(GradcheckRow(pname, stage.pulse.f_max, xyz, which, d_co, d_fd))
            log.info("gradcheck %s %s %s: d_co=%.6e best rel err=%.3e", pname, xyz, which, d_co, rows[-1].best_error())
    return rows


def memory_summary(config: RunConfig) -> dict[str, float]:
    """Counts and storage estimates derived from the grid alone."""
    counts = count_unknowns(config.grid())
    rx, ry, rz = config.grid().rd_elements
    rd_nodes = (2 * rx + 1) * (2 * ry + 1) * (2 * rz + 1)
    longest = max(config.stage_durations())
    frames = step_count(longest, config.dt) // config.stride + 1
    return {
        **counts,
        "snapshot_frames": frames,
        "snapshot_bytes": SnapshotStore.required_bytes(rd_nodes, frames),
        "state_vector_bytes": 8 * counts["state_unknowns"],
    }


# ---- command line -------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmlfwi", description="PML-truncated elastic wave simulation and inversion")
    p.add_argument("--config", type=Path, help="INI run configuration")
    p.add_argument("--out", type=Path, help="output directory (overrides [run] out)")
    p.add_argument("--seed", type=int, help="RNG seed (overrides [run] seed)")
    p.add_argument("--workers", type=int, help="worker count (overrides [run] workers)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("info", help="mesh, unknown counts and memory estimate")
    fw = sub.add_parser("forward", help="simulate the target model and export traces and fields")
    fw.add_argument("--no-field", action="store_true", help="skip the VTK field export")
    sy = sub.add_parser("synthesize", help="generate a measured dataset")
    sy.add_argument("--refine", type=int, choices=(1, 2))
    nz = sub.add_parser("noise", help="add Gaussian noise to a dataset")
    nz.add_argument("--data", type=Path, required=True)
    nz.add_argument("--percent", type=float)
    iv = sub.add_parser("invert", help="run the staged inversion against a dataset")
    iv.add_argument("--data", type=Path, required=True)
    sub.add_parser("gradcheck", help="compare adjoint and finite-difference directional derivatives")
    sub.add_parser("show-config", help="print the effective configuration")
    return p


def _effective_config(args) -> RunConfig:
    config = load_config(args.config) if args.config is not None else RunConfig()
    over = {}
    if args.out is not None:
        over["out"] = str(args.out)
    if args.seed is not None:
        over["seed"] = args.seed
    if args.workers is not None:
        over["workers"] = args.workers
    if over:
        config = replace(config, **over)
        validate_config(config)
    return config


def _cmd_info(config: RunConfig) -> int:
    s = memory_summary(config)
    g = config.grid()
    print(f"backend: {BACKEND}")
    print(f"regular domain: {' x '.join(f'{v:g}' for v in g.rd_extent)} m, element size {g.element_size:g} m, "
          f"PML {g.pml_thickness:g} m")
    print(f"elements: {s['elements']} ({' x '.join(str(v) for v in g.elements)})")
    print(f"nodes: {s['nodes']}")
    print(f"displacement unknowns: {s['displacement_dofs']}")
    print(f"stress unknowns: {s['stress_dofs']}")
    print(f"state unknowns: {s['state_unknowns']}")
    print(f"material parameters: {s['material_parameters']}")
    print(f"snapshot frames: {s['snapshot_frames']} ({s['snapshot_bytes'] / 2**20:.1f} MiB per forward solve)")
    print(f"state vector: {s['state_vector_bytes'] / 2**20:.1f} MiB")
    return 0


def _cmd_forward(config: RunConfig, out: Path, no_field: bool) -> int:
    mesh = build_mesh(config.grid(), stress_layout=config.stress_layout)
    material = config_model(config, mesh)
    ops = assemble(mesh, material, config.profile(mesh))
    rec = config.receivers(mesh)
    for name, T in zip(config.pulses, config.stage_durations()):
        load = config.load_case(config.pulse(name))
        t0 = time.perf_counter()
        tr, _ = run_forward(ops, load.force_provider(mesh), rec, T, config.dt, store_snapshots=False)
        export_traces(tr, out / f"traces_{name}.csv")
        print(f"{name}: {len(tr.times)} samples x {len(rec)} receivers in {time.perf_counter() - t0:.1f} s")
    if not no_field:
        export_field(material, mesh, out / "model.vtk", f"target model {config.model}")
    return 0


def _cmd_invert(config: RunConfig, out: Path, data_dir: Path) -> int:
    data = load_dataset(data_dir)
    mesh = build_mesh(config.grid(), stress_layout=config.stress_layout)
    problem = build_problem(config, data, mesh)
    lam0 = np.full(mesh.n_nodes, config.initial_lambda)
    mu0 = np.full(mesh.n_nodes, config.initial_mu)

    def snapshot(state: InversionState, rec: IterationRecord):
        if config.snapshot_every and rec.k % config.snapshot_every == 0:
            field_ = problem.materials(state.lam, state.mu)
            export_field(field_, mesh, out / f"model_k{rec.k:04d}.vtk", f"iteration {rec.k}")

    state = invert(problem, config.inversion_config(), lam0, mu0, snapshot)
    export_history(state.history, out / "history.csv")
    export_field(problem.materials(state.lam, state.mu), mesh, out / "model_final.vtk", "inverted model")
    print(f"iterations: {state.k}, stop: {state.stop_reason}, final misfit: {state.final_misfit:.6e}")
    if state.stop_reason.startswith("instability"):
        return 2
    return 0


def _cmd_gradcheck(config: RunConfig, out: Path) -> int:
    rows = run_gradcheck(config)
    table = gradcheck_table(rows)
    (out / "gradcheck.csv").write_text(table)
    sys.stdout.write(table)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _effective_config(args)
        if args.command == "info":
            return _cmd_info(config)
        if args.command == "show-config":
            sys.stdout.write(config_to_ini(config))
            return 0
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        if config.workers > 1:
            log.info("kernels run in one process; workers=%d is recorded only", config.workers)
        if args.command == "forward":
            return _cmd_forward(config, out, args.no_field)
        if args.command == "synthesize":
            data = synthesize_data(config, refine=args.refine)
            if config.noise_percent > 0:
                data = add_noise(data, config.noise_percent, config.seed, config.noise_mode)
            save_dataset(data, out / "data")
            print(f"dataset written to {out / 'data'}")
            return 0
        if args.command == "noise":
            percent = config.noise_percent if args.percent is None else args.percent
            data = add_noise(load_dataset(args.data), percent, config.seed, config.noise_mode)
            save_dataset(data, out / "data_noisy")
            print(f"dataset written to {out / 'data_noisy'}")
            return 0
        if args.command == "invert":
            return _cmd_invert(config, out, args.data)
        if args.command == "gradcheck":
            return _cmd_gradcheck(config, out)
    except (ConfigError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InstabilityError, OSError, MemoryError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
