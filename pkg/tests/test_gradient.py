import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pmlfwi.gradient import (
    GradcheckRow,
    RegularizationSpec,
    directional_derivative_co,
    directional_derivative_fd,
    gradcheck_table,
    gradient_pair,
    material_mass,
    reduced_gradient,
    reg_gradient,
    reg_value,
)
from pmlfwi.specgrid import GridSpec, build_mesh

def test_material_mass_sums_to_rd_volume(small_mesh):
    m = material_mass(small_mesh)
    assert m.sum() == pytest.approx(small_mesh.rd_volume(), rel=1e-12)
    assert not m[~small_mesh.rd_closure_mask].any()
    assert (m[small_mesh.rd_nodes] > 0).all()


def test_spec_validation():
    with pytest.raises(ValueError):
        RegularizationSpec("L1")
    with pytest.raises(ValueError):
        RegularizationSpec("TV", epsilon=0.0)
    with pytest.raises(ValueError):
        RegularizationSpec(R_mu=-1.0)


def test_reg_values_closed_form(small_mesh):
    vol = small_mesh.rd_volume()
    x = small_mesh.coords[:, 0]
    const = np.full(small_mesh.n_nodes, 3.0)
    tn = RegularizationSpec("TN", R_lambda=2.0, R_mu=4.0)
    tv = RegularizationSpec("TV", 0.01, R_lambda=2.0, R_mu=4.0)
    assert reg_value(const, const, tn, small_mesh) == pytest.approx(0.0, abs=1e-20)
    assert reg_value(const, const, tv, small_mesh) == pytest.approx(3.0 * np.sqrt(0.01) * vol, rel=1e-12)
    assert reg_value(2 * x, const, tn, small_mesh) == pytest.approx(0.5 * 2.0 * 4.0 * vol, rel=1e-12)
    assert reg_value(2 * x, const, tv, small_mesh) == pytest.approx(
        0.5 * 2.0 * np.sqrt(4.01) * vol + 0.5 * 4.0 * np.sqrt(0.01) * vol, rel=1e-12)


def test_reg_gradient_of_constant_vanishes(small_mesh):
    const = np.full(small_mesh.n_nodes, 7e7)
    for kind in ("TN", "TV"):
        assert not reg_gradient(const, RegularizationSpec(kind), small_mesh).any()


def test_tn_gradient_of_linear_field(small_mesh):
    mesh = small_mesh
    g = reg_gradient(mesh.coords[:, 2] * 5.0, RegularizationSpec("TN"), mesh)
    assert abs(g.sum()) < 1e-10
    interior = mesh.rd_nodes[np.all(np.abs(mesh.coords[mesh.rd_nodes, :2]) < 1.9, axis=1)
                             & (mesh.coords[mesh.rd_nodes, 2] < -0.1) & (mesh.coords[mesh.rd_nodes, 2] > -3.9)]
    assert len(interior) > 0
    assert np.abs(g[interior]).max() < 1e-10


@given(st.integers(0, 2**31), st.sampled_from(["TN", "TV"]))
def test_reg_gradient_matches_value_derivative(seed, kind):
    mesh = build_mesh(GridSpec((2.0, 2.0, 2.0), 1.0, 1.0))
    rng = np.random.default_rng(seed)
    f = rng.standard_normal(mesh.n_nodes)
    d = np.zeros(mesh.n_nodes)
    d[mesh.rd_nodes] = rng.standard_normal(len(mesh.rd_nodes))
    spec = RegularizationSpec(kind, 0.5, R_lambda=1.0)
    zero = np.zeros(mesh.n_nodes)
    h = 1e-6
    fd = (reg_value(f + h * d, zero, spec, mesh) - reg_value(f - h * d, zero, spec, mesh)) / (2 * h)
    analytic = float(d @ reg_gradient(f, spec, mesh))
    # the TV vector omits the 1/2 that the functional carries
    factor = 1.0 if kind == "TN" else 0.5
    assert fd == pytest.approx(factor * analytic, rel=1e-6, abs=1e-9)


def test_reduced_gradient_scaling(small_mesh):
    mesh = small_mesh
    m = material_mass(mesh)
    rng = np.random.default_rng(0)
    mis = rng.standard_normal(mesh.n_nodes)
    reg = rng.standard_normal(mesh.n_nodes)
    g = reduced_gradient(mis, reg, 3.0, mesh)
    nodes = mesh.rd_nodes
    np.testing.assert_allclose(g[nodes] * m[nodes], mis[nodes] + 3.0 * reg[nodes])
    assert not g[~mesh.rd_closure_mask].any()


def test_directional_derivative_helpers(small_mesh):
    n = small_mesh.n_nodes
    lam = np.linspace(1.0, 2.0, n)
    d = np.zeros(n)
    d[5] = 1.0
    obj = lambda l, m: float(l @ l)
    assert directional_derivative_fd(obj, lam, lam, d, "lambda", 0.5) == pytest.approx(2 * lam[5] + 0.5)
    assert directional_derivative_fd(obj, lam, lam, d, "mu", 0.5) == 0.0
    assert directional_derivative_fd(obj, lam, lam, np.zeros(n), "lambda", 0.5) == 0.0
    with pytest.raises(ValueError):
        directional_derivative_fd(obj, lam, lam, d, "rho", 0.5)
    with pytest.raises(ValueError):
        directional_derivative_fd(obj, lam, lam, d, "lambda", 0.0)
    g = np.ones(n)
    assert directional_derivative_co(g, d, small_mesh) == pytest.approx(material_mass(small_mesh)[5])
    with pytest.raises(ValueError):
        directional_derivative_co(g, d[:-1], small_mesh)


def test_gradcheck_table_layout():
    rows = [GradcheckRow("smooth", 20.0, (0.0, 0.0, -2.5), "lambda", 2.0, {1e-3: 2.2, 1e-4: 2.02}),
            GradcheckRow("smooth", 20.0, (0.0, 0.0, -2.5), "mu", -1.0, {1e-3: -1.1, 1e-4: -1.01})]
    lines = gradcheck_table(rows).strip().splitlines()
    assert lines[0].split(",")[:7] == ["case", "f_max", "x", "y", "z", "field", "d_co"]
    assert len(lines) == 3
    assert all(len(l.split(",")) == 11 for l in lines)
    assert rows[0].best_error() == pytest.approx(0.01)
    assert float(lines[2].split(",")[-1]) == pytest.approx(0.01)


def test_zero_misfit_at_target(toy):
    ev, gp = toy.gradients(*toy.target)
    assert ev.misfit == 0.0
    assert not gp.g_lambda.any() and not gp.g_mu.any()


def test_gradient_restricted_to_rd(toy):
    n = toy.mesh.n_nodes
    _, gp = toy.gradients(np.full(n, 80e6), np.full(n, 80e6))
    outside = ~toy.mesh.rd_closure_mask
    assert not gp.g_lambda[outside].any() and not gp.g_mu[outside].any()
    assert np.abs(gp.g_lambda[toy.mesh.rd_nodes]).max() > 0


@pytest.mark.slow
def test_gradient_against_finite_differences(toy):
    mesh = toy.mesh
    n = mesh.n_nodes
    lam = np.full(n, 80e6)
    mu = np.full(n, 80e6)
    ev, gp = toy.gradients(lam, mu)
    d = np.zeros(n)
    d[mesh.locate_node((0.0, 0.0, -2.0))] = 1.0
    for which, g in (("lambda", gp.g_lambda), ("mu", gp.g_mu)):
        co = directional_derivative_co(g, d, mesh)
        errs = [abs(co - directional_derivative_fd(toy.objective, lam, mu, d, which, h * 80e6, ev.J)) / abs(co)
                for h in (1e-3, 1e-5)]
        assert min(errs) < 1e-2
