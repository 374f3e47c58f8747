import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pmlfwi.forward import run_forward
from pmlfwi.gradient import RegularizationSpec, gradient_pair
from pmlfwi.inversion import InversionProblem, Stage
from pmlfwi.operators import LoadCase, Pulse, assemble
from pmlfwi.pml_medium import MaterialField, StretchProfile, extend_into_pml, extend_nodal
from pmlfwi.specgrid import GridSpec, build_mesh

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def tiny_mesh():
    """2x2x2 RD elements of 1 m with a one-element PML."""
    return build_mesh(GridSpec((2.0, 2.0, 2.0), 1.0, 1.0))


@pytest.fixture(scope="session")
def small_mesh():
    return build_mesh(GridSpec((4.0, 4.0, 4.0), 1.0, 1.0))


def random_material(mesh, seed=0, scale=1e8):
    rng = np.random.default_rng(seed)
    n = mesh.n_nodes
    m = MaterialField(rng.uniform(0.5, 1.0, n) * scale, rng.uniform(0.5, 1.0, n) * scale,
                      rng.uniform(1800, 2200, n))
    return extend_into_pml(m, mesh)


@pytest.fixture
def profile_for():
    def make(mesh, **kw):
        return StretchProfile.for_mesh(mesh, **kw)
    return make


TOY_PULSE = Pulse("s", 0.004, 2e-6, 0.01, 200.0)


class ToyProblem:
    """Small PML problem with a target model and homogeneous starting point."""

    def __init__(self, dt):
        mesh = build_mesh(GridSpec((4.0, 4.0, 4.0), 1.0, 1.0))
        profile = StretchProfile.for_mesh(mesh)
        n = mesh.n_nodes
        x, z = mesh.coords[:, 0], mesh.coords[:, 2]
        rho = np.full(n, 2000.0)
        lt = extend_nodal(80e6 * (1 + 0.2 * np.exp(-((x - 0.5) ** 2 + (z + 2) ** 2))), mesh)
        mt = extend_nodal(80e6 * (1 + 0.3 * np.exp(-((x + 0.5) ** 2 + (z + 1.5) ** 2))), mesh)
        load = LoadCase((-1, 1, -1, 1), pulse=TOY_PULSE)
        self.T = 0.02
        tr, _ = run_forward(assemble(mesh, MaterialField(lt, mt, rho), profile), load.force_provider(mesh),
                            mesh.surface_rd_nodes, self.T, dt, store_snapshots=False)
        self.mesh = mesh
        self.target = (lt, mt)
        self.problem = InversionProblem(mesh, rho, mesh.surface_rd_nodes, dt, [[load]], [[tr]], profile)
        self.stage = Stage(TOY_PULSE, self.T)

    def gradients(self, lam, mu):
        reg = RegularizationSpec()
        ev = self.problem.evaluate(lam, mu, self.stage, 0, reg)
        gl, gm = self.problem.misfit_gradients(ev, self.stage, 0)
        return ev, gradient_pair(gl, gm, lam, mu, reg, self.mesh)

    def objective(self, lam, mu):
        return self.problem.evaluate(lam, mu, self.stage, 0, RegularizationSpec(), keep=False).J


@pytest.fixture(scope="session")
def toy():
    return ToyProblem(1e-4)


# ---- acceptance reporting ----

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
