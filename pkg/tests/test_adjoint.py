import numpy as np
import pytest

from pmlfwi.adjoint import AdjointSource, adjoint_source, run_adjoint, trapezoid_weights
from pmlfwi.forward import TraceRecord, run_forward
from pmlfwi.operators import LoadCase, Pulse, assemble
from pmlfwi.pml_medium import MaterialField, StretchProfile
from pmlfwi.specgrid import GridSpec, build_mesh

PULSE = Pulse("s", 0.004, 2e-6, 0.01, 200.0)


@pytest.fixture(scope="module")
def ops():
    mesh = build_mesh(GridSpec((4.0, 4.0, 4.0), 1.0, 1.0))
    return assemble(mesh, MaterialField.homogeneous(mesh, 80e6, 80e6, 2000.0), StretchProfile.for_mesh(mesh))


def _record(mesh, receivers, times, data):
    receivers = np.asarray(receivers)
    return TraceRecord(receivers, mesh.coords[receivers], times, data)


def test_trapezoid_weights():
    np.testing.assert_allclose(trapezoid_weights(4, 0.5), [0.25, 0.5, 0.5, 0.25])
    assert not trapezoid_weights(1, 0.5).any()


def test_zero_misfit_gives_zero_adjoint(ops):
    mesh = ops.mesh
    rec = mesh.surface_rd_nodes[:5]
    times = np.arange(21) * 1e-4
    seen = []
    res = run_adjoint(ops, _record(mesh, rec, times, np.zeros((21, 5, 3))), 0.002, 1e-4, store_snapshots=True,
                      observer=lambda n, s: seen.append(s.x0.any() or s.x1.any() or s.x2.any()))
    assert not any(seen)
    assert not any(res.store.frame(k).any() for k in range(res.store.n_frames))


def test_source_interpolates_between_samples(ops):
    mesh = ops.mesh
    node = int(mesh.surface_rd_nodes[0])
    data = np.zeros((3, 1, 3))
    data[1, 0, 2], data[2, 0, 2] = 0.2, 0.4
    src = AdjointSource(_record(mesh, [node], np.array([0.0, 1.0, 2.0]), data), mesh.n_nodes, mesh.internal_size)
    assert src.values(1.5)[0, 2] == pytest.approx(0.3)
    assert src.values(2.0)[0, 2] == 0.4
    with pytest.raises(ValueError):
        src.values(2.5)


def test_single_receiver_injection(ops):
    mesh = ops.mesh
    node = int(mesh.surface_rd_nodes[3])
    data = np.zeros((2, 1, 3))
    data[:, 0] = [1.0, -2.0, 0.5]
    f = adjoint_source(_record(mesh, [node], np.array([0.0, 1.0]), data), mesh, 0.5)
    u, _ = mesh.split(mesh.unpack(f))
    assert np.count_nonzero(u) == 3
    np.testing.assert_array_equal(u[:, node], [1.0, -2.0, 0.5])


def test_adjoint_is_linear_in_misfit(ops):
    mesh = ops.mesh
    rec = mesh.surface_rd_nodes[::7]
    times = np.arange(41) * 1e-4
    rng = np.random.default_rng(3)
    a = rng.standard_normal((41, len(rec), 3))
    b = rng.standard_normal((41, len(rec), 3))
    ra = run_adjoint(ops, _record(mesh, rec, times, a), 0.004, 1e-4, store_snapshots=True).store
    rb = run_adjoint(ops, _record(mesh, rec, times, b), 0.004, 1e-4, store_snapshots=True).store
    rab = run_adjoint(ops, _record(mesh, rec, times, 2 * a - b), 0.004, 1e-4, store_snapshots=True).store
    for k in (0, 10, 39):
        expect = 2 * ra.frame(k) - rb.frame(k)
        assert np.abs(rab.frame(k) - expect).max() <= 1e-12 * np.abs(expect).max()


def test_duality_with_forward_problem(ops):
    # int g . u dt at the receivers equals int f . w dt over the domain
    mesh = ops.mesh
    rec = mesh.surface_rd_nodes
    errors = []
    for dt in (1e-4, 5e-5):
        f = LoadCase((-1, 1, -1, 1), pulse=PULSE).force_provider(mesh)
        tr, _ = run_forward(ops, f, rec, 0.01, dt, store_snapshots=False)
        shape = np.random.default_rng(1).standard_normal((1, len(rec), 3))
        g = tr.with_data(np.sin(300 * tr.times)[:, None, None] * shape)
        fw = np.zeros(len(tr.times))

        def observe(n, s):
            fw[n] = float(f(n * dt) @ s.x1)

        run_adjoint(ops, g, 0.01, dt, observer=observe)
        w = trapezoid_weights(len(tr.times), dt)
        lhs = float(np.einsum("t,trc->", w, g.data * tr.data))
        errors.append(abs(lhs - w @ fw) / abs(lhs))
    assert errors[0] < 1e-4
    assert errors[0] / errors[1] > 3


def test_rejects_misaligned_inputs(ops):
    mesh = ops.mesh
    rec = mesh.surface_rd_nodes[:2]
    g = _record(mesh, rec, np.arange(11) * 1e-4, np.ones((11, 2, 3)))
    with pytest.raises(ValueError):
        run_adjoint(ops, g, 0.001, 1e-4, stride=3)
    with pytest.raises(ValueError):
        run_adjoint(ops, None, 0.001, 1e-4)
    _, store = run_forward(ops, None, rec, 0.001, 1e-4, stride=5)
    with pytest.raises(ValueError):
        run_adjoint(ops, g, 0.001, 1e-4, stride=2, forward_store=store)
