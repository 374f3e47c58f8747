import numpy as np
import pytest

from pmlfwi import _backend, _kernels_py, forward, gradient, operators
from pmlfwi.operators import assemble
from pmlfwi.specgrid import GridSpec, build_mesh

from conftest import random_material

compiled = pytest.importorskip("pmlfwi._kernels")


@pytest.fixture(scope="module", params=["continuous", "element"])
def ops(request):
    mesh = build_mesh(GridSpec((2.0, 2.0, 2.0), 1.0, 1.0), stress_layout=request.param)
    return assemble(mesh, random_material(mesh, seed=4))


def _with(module, monkeypatch, fn):
    monkeypatch.setattr(operators, "kernels", module)
    monkeypatch.setattr(forward, "kernels", module)
    monkeypatch.setattr(gradient, "kernels", module)
    return fn()


def test_default_backend_is_compiled():
    assert _backend.BACKEND == "compiled"


@pytest.mark.parametrize("transpose", [False, True])
def test_system_apply_matches(ops, monkeypatch, transpose):
    rng = np.random.default_rng(1)
    x = [rng.standard_normal(ops.size) for _ in range(3)]
    apply = ops.system_transpose_internal if transpose else ops.system_internal
    a = _with(compiled, monkeypatch, lambda: apply(*x))
    b = _with(_kernels_py, monkeypatch, lambda: apply(*x))
    assert np.abs(a - b).max() <= 1e-12 * np.abs(b).max()


def test_material_gradient_matches(ops):
    mesh = ops.mesh
    rng = np.random.default_rng(2)
    u = rng.standard_normal((3, mesh.n_nodes))
    w = rng.standard_normal((3, mesh.n_nodes))
    out = []
    for k in (compiled, _kernels_py):
        gl = np.zeros(mesh.n_nodes)
        gm = np.zeros(mesh.n_nodes)
        k.material_gradient(u, w, mesh.conn_rd, mesh.derivative_matrix, mesh.quad_weights, -0.5, gl, gm)
        out.append((gl, gm))
    for a, b in zip(*out):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12 * np.abs(b).max())


def test_elastic_energy_matches(ops, monkeypatch):
    rng = np.random.default_rng(3)
    s = forward.StateTriple(np.zeros(ops.size), rng.standard_normal(ops.size), rng.standard_normal(ops.size))
    a = _with(compiled, monkeypatch, lambda: forward.total_energy(ops, s))
    b = _with(_kernels_py, monkeypatch, lambda: forward.total_energy(ops, s))
    assert a == pytest.approx(b, rel=1e-12)
