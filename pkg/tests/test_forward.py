import numpy as np
import pytest

from pmlfwi.forward import (
    InstabilityError,
    SnapshotStore,
    StateTriple,
    TraceRecord,
    rk4_step,
    run_forward,
    step_count,
    step_forward_rk4,
    total_energy,
)
from pmlfwi.operators import LoadCase, Pulse, assemble, gaussian_pulse
from pmlfwi.pml_medium import MaterialField
from pmlfwi.specgrid import GridSpec, build_mesh

SHORT = Pulse("short", 0.01, 5e-6, 0.02, 100.0)


@pytest.fixture(scope="module")
def box():
    mesh = build_mesh(GridSpec((4.0, 4.0, 4.0), 1.0, 1.0))
    return assemble(mesh, MaterialField.homogeneous(mesh, 80e6, 80e6, 2000.0))


@pytest.fixture(scope="module")
def closed_box():
    mesh = build_mesh(GridSpec((4.0, 4.0, 4.0), 1.0, 1.0), all_rd=True)
    return assemble(mesh, MaterialField.homogeneous(mesh, 80e6, 80e6, 2000.0))


def _scalar(y0):
    return StateTriple(np.zeros(1), np.array([y0]), np.zeros(1))


def test_rk4_scalar_decay():
    def deriv(x0, x1, x2, t):
        return 0 * x0, -x1, 0 * x2
    s = rk4_step(deriv, _scalar(1.0), 0.1)
    assert s.x1[0] == pytest.approx(0.9048375, abs=5e-8)
    assert abs(s.x1[0] - np.exp(-0.1)) < 1e-6
    assert s.t == pytest.approx(0.1)


def test_rk4_reverse_step_inverts_to_fourth_order():
    def deriv(x0, x1, x2, t):
        return 0 * x0, -x1, 0 * x2
    for h in (0.1, 0.05):
        back = rk4_step(deriv, rk4_step(deriv, _scalar(1.0), h), -h)
        assert abs(back.x1[0] - 1.0) < 2 * h**5


def test_zero_state_zero_force(box):
    s = step_forward_rk4(box, StateTriple.zeros(box.size), 1e-4)
    assert not (s.x0.any() or s.x1.any() or s.x2.any())


def test_traces_scale_with_amplitude(box):
    rec = box.mesh.surface_rd_nodes
    args = (rec, 0.004, 2e-4)
    a, _ = run_forward(box, LoadCase((-1, 1, -1, 1), 1000.0, SHORT).force_provider(box.mesh), *args,
                       store_snapshots=False)
    b, _ = run_forward(box, LoadCase((-1, 1, -1, 1), 2000.0, SHORT).force_provider(box.mesh), *args,
                       store_snapshots=False)
    np.testing.assert_array_equal(b.data, 2 * a.data)
    assert a.data.shape == (21, len(rec), 3)
    np.testing.assert_allclose(np.diff(a.times), 2e-4)


def test_deterministic(box):
    f = LoadCase((-1, 1, -1, 1), pulse=SHORT).force_provider(box.mesh)
    a, sa = run_forward(box, f, [0, 5], 0.004, 2e-4)
    b, sb = run_forward(box, f, [0, 5], 0.004, 2e-4)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(sa.frame(10), sb.frame(10))


def test_causality():
    mesh = build_mesh(GridSpec((16.0, 16.0, 8.0), 1.0, 1.0))
    ops = assemble(mesh, MaterialField.homogeneous(mesh, 80e6, 80e6, 2000.0))
    onset = SHORT.mean - np.sqrt(SHORT.spread * np.log(1e8))
    xs = (3.0, 5.0, 7.0)
    rec = [mesh.locate_node((x, 0.0, 0.0)) for x in xs]
    tr, _ = run_forward(ops, LoadCase((-1, 1, -1, 1), pulse=SHORT).force_provider(mesh), rec, 0.025, 2e-4,
                        store_snapshots=False)
    peak = np.abs(tr.data).max()
    cp = np.sqrt(240e6 / 2000.0)
    assert not np.any(tr.data[tr.times < onset])
    for j, x in enumerate(xs):
        early = tr.times < onset + (x - 1.0) / cp
        assert np.abs(tr.data[early, j]).max() <= 1e-5 * peak


def test_reciprocity(closed_box):
    mesh = closed_box.mesh
    a = mesh.locate_node((-1.0, 0.5, -1.0))
    b = mesh.locate_node((1.5, -1.0, -2.5))

    def point_force(node):
        pattern = np.zeros(mesh.internal_size)
        mesh.split(pattern)[0][2, node] = 1.0
        return lambda t: gaussian_pulse(SHORT, t) * pattern

    ab, _ = run_forward(closed_box, point_force(a), [b], 0.01, 1e-4, store_snapshots=False)
    ba, _ = run_forward(closed_box, point_force(b), [a], 0.01, 1e-4, store_snapshots=False)
    x, y = ab.data[:, 0, 2], ba.data[:, 0, 2]
    assert np.abs(x - y).max() <= 1e-8 * np.abs(x).max()


def test_energy_conserved_without_pml(closed_box):
    mesh = closed_box.mesh
    load = LoadCase((-1, 1, -1, 1), pulse=Pulse("s", 0.005, 5e-6, 0.01, 200.0))
    drifts = []
    for dt in (1e-4, 5e-5):
        energies = []

        def observe(n, s):
            if s.t >= 0.0101:
                energies.append(total_energy(closed_box, s))

        run_forward(closed_box, load.force_provider(mesh), [0], 0.1101, dt, store_snapshots=False, observer=observe)
        drifts.append(abs(energies[0] - energies[-1]) / energies[0])
    assert drifts[0] < 1e-4
    assert drifts[0] / drifts[1] > 10


def test_total_energy_basic(closed_box):
    assert total_energy(closed_box, StateTriple.zeros(closed_box.size)) == 0.0
    rng = np.random.default_rng(0)
    s = StateTriple(np.zeros(closed_box.size), rng.standard_normal(closed_box.size),
                    rng.standard_normal(closed_box.size))
    assert total_energy(closed_box, s) >= 0.0


def test_rigid_translation_kinetic_energy():
    mesh = build_mesh(GridSpec((2.0, 2.0, 2.0), 1.0, 1.0), all_rd=True, fixed_outer=False)
    ops = assemble(mesh, MaterialField.homogeneous(mesh, 1e6, 1e6, 1500.0))
    s = StateTriple.zeros(ops.size)
    mesh.split(s.x2)[0][0] = 3.0
    volume = 4.0 * 4.0 * 3.0
    assert total_energy(ops, s) == pytest.approx(0.5 * 1500.0 * volume * 9.0, rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_instability_reported(box):
    f = LoadCase((-1, 1, -1, 1), pulse=SHORT).force_provider(box.mesh)
    with pytest.raises(InstabilityError) as info:
        run_forward(box, f, [0], 2.0, 1e-2, store_snapshots=False)
    assert info.value.step > 0


def test_snapshots_and_stride(box, tmp_path):
    f = LoadCase((-1, 1, -1, 1), pulse=SHORT).force_provider(box.mesh)
    tr, store = run_forward(box, f, [0], 0.004, 2e-4, stride=5)
    assert store.n_frames == 5
    np.testing.assert_allclose(store.times, [0, 0.001, 0.002, 0.003, 0.004])
    tr2, spilled = run_forward(box, f, [0], 0.004, 2e-4, stride=5, spill_path=tmp_path / "snap.bin")
    reopened = SnapshotStore.open(tmp_path / "snap.bin", spilled.nodes)
    for k in range(5):
        np.testing.assert_array_equal(reopened.frame(k), store.frame(k))
    assert reopened.stride == 5 and reopened.dt == 2e-4
    with pytest.raises(ValueError):
        run_forward(box, f, [0], 0.004, 2e-4, stride=3)
    with pytest.raises(ValueError):
        SnapshotStore.open(tmp_path / "snap.bin", np.arange(3))


def test_step_count():
    assert step_count(0.3, 1e-3) == 300
    with pytest.raises(ValueError):
        step_count(0.3, 7e-3)


def test_trace_record_helpers():
    tr = TraceRecord(np.array([1, 2]), np.zeros((2, 3)), np.arange(5) * 0.1, np.arange(30.0).reshape(5, 2, 3))
    sub = tr.subsample(2)
    assert len(sub.times) == 3 and sub.dt == pytest.approx(0.2)
    np.testing.assert_array_equal(sub.data[1], tr.data[2])
