import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from porofix.flow_step import FlowOperator, FlowStepInput
from porofix.mech_step import MechOperator, MechStepInput
from porofix.postprocess import lagrange_p2_values
from porofix.reconstruct import (
    BUBBLE_MEAN,
    MODES,
    FluxEquilibrator,
    StressEquilibrator,
    averaging_interpolate,
    check_mean_value_lemma,
    clamp_mask,
    conform_displacement,
    conform_pressure,
    divergence_integrals,
)
from porofix.spaces import RULE_DEG4, FESpace, MaterialData, flux_divergence_matrix, stress_divergence_matrix, stress_skew_matrix
from conftest import perturbed_square


@pytest.fixture(scope="module")
def fe():
    return FESpace(perturbed_square(4, seed=3))


def cell_mean_quad(fe, field):
    v = field.values(fe, RULE_DEG4.bary)
    return np.einsum("q,mq...->m...", RULE_DEG4.weights, v)


def test_bubble_mean_constant():
    assert BUBBLE_MEAN == pytest.approx(9 / 20)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_pressure_reconstruction_constraints(seed):
    fe = FESpace(perturbed_square(3, seed=seed % 7))
    broken = np.random.default_rng(seed).normal(size=(fe.mesh.n_cells, 6))
    clamp = clamp_mask(fe.mesh)
    ph = conform_pressure(fe, broken, clamp)
    # mean values preserved on every cell
    assert np.abs(cell_mean_quad(fe, ph) - broken[:, 3:].mean(axis=1)).max() <= 1e-13
    assert np.abs(ph.means() - broken[:, 3:].mean(axis=1)).max() <= 1e-13
    # homogeneous boundary values
    assert np.all(ph.nodal[clamp] == 0.0)


def test_displacement_reconstruction_constraints(fe):
    broken = np.random.default_rng(5).normal(size=(fe.mesh.n_cells, 6, 2))
    uh = conform_displacement(fe, broken, clamp_mask(fe.mesh))
    assert np.abs(cell_mean_quad(fe, uh) - broken[:, 3:, :].mean(axis=1)).max() <= 1e-13
    with pytest.raises(ValueError):
        conform_displacement(fe, broken[..., 0])


def test_reconstruction_is_continuous(fe):
    broken = np.random.default_rng(6).normal(size=(fe.mesh.n_cells, 6))
    ph = conform_pressure(fe, broken, clamp_mask(fe.mesh))
    m = fe.mesh
    # values on both sides of every interior edge agree at the Gauss points
    s = np.array([0.2, 0.7])
    for e in np.flatnonzero(~m.boundary_edge)[:20]:
        a, b = m.edges[e]
        vals = []
        for K in m.edge_cells[e]:
            xv = m.vertices[m.cells[K]]
            pts = [(1 - t) * m.vertices[a] + t * m.vertices[b] for t in s]
            bary = np.array([np.linalg.solve(np.vstack([xv.T, np.ones(3)]), np.r_[x, 1.0]) for x in pts])
            vals.append(ph.values(fe, bary)[K])
        assert np.allclose(vals[0], vals[1], atol=1e-12)


def test_averaging_reproduces_continuous_fields(fe):
    q = lambda x, y: x * (1 - x) * y * (1 - y)
    broken = lagrange_p2_values(fe, q)
    nodal = averaging_interpolate(fe, broken)
    assert np.allclose(nodal[fe.layout.cell_p2], broken, atol=1e-14)
    ph = conform_pressure(fe, broken)
    assert np.allclose(ph.bubble, 0.0, atol=1e-13)


def test_mean_value_identity_for_conforming_input(fe):
    # when the broken fields are already H1_0 the identity holds exactly
    rng = np.random.default_rng(7)
    bump = lambda x, y: x * (1 - x) * y * (1 - y)
    pt = [lagrange_p2_values(fe, lambda x, y, c=c: c * bump(x, y)) for c in rng.normal(size=2)]
    ut = [np.stack([lagrange_p2_values(fe, lambda x, y, c=c: c * bump(x, y))] * 2, axis=-1)
          for c in rng.normal(size=2)]
    clamp = clamp_mask(fe.mesh)
    ph = [conform_pressure(fe, p, clamp) for p in pt]
    uh = [conform_displacement(fe, u, clamp) for u in ut]
    r = check_mean_value_lemma(fe, 1.0, 1.0, 0.1, tuple(ph), tuple(uh), tuple(pt), tuple(ut))
    assert r.max() <= 1e-11


def test_divergence_integrals_agree_for_broken_and_conforming(fe):
    bump = lambda x, y: x * (1 - x) * y * (1 - y)
    ut = np.stack([lagrange_p2_values(fe, bump)] * 2, axis=-1)
    uh = conform_displacement(fe, ut, clamp_mask(fe.mesh))
    assert np.allclose(divergence_integrals(fe, uh), divergence_integrals(fe, ut), atol=1e-14)


def flow_solution(fe):
    mat = MaterialData.uniform(fe.mesh.n_cells, 1.0, c0=1, alpha=1, mu=1, lam=1)
    op = FlowOperator(fe, mat, 0.25)
    M = fe.mesh.n_cells
    inp = FlowStepInput(np.zeros(M), np.zeros(M), np.zeros(M), np.zeros(fe.layout.n_stress),
                        lambda x, y, t: 1 + x * y, 0.1, 0.1, 0.25)
    return op.step(inp)


@pytest.mark.parametrize("mode", MODES)
def test_flux_equilibration_consistent_data(fe, mode):
    w, _ = flow_solution(fe)
    R = flux_divergence_matrix(fe) @ w
    eq = FluxEquilibrator(fe, mode)
    wh = eq(w, R)
    if mode != "literal":
        assert np.abs(flux_divergence_matrix(fe) @ wh - R).max() <= 1e-12
        assert np.abs(eq.compatibility(w, R)).max() <= 1e-12
    if mode == "correction":
        assert np.abs(wh - w).max() <= 1e-12


def test_flux_equilibration_compatible_perturbation(fe):
    # perturb the data by the divergence of a flux supported one patch away from the boundary
    w, _ = flow_solution(fe)
    D = flux_divergence_matrix(fe)
    R = D @ w
    eq = FluxEquilibrator(fe, "correction")
    v = np.zeros(fe.mesh.n_edges)
    v[np.flatnonzero(fe.mesh.boundary_edge)] = 0.1
    wh = eq(w, R + D @ v)
    assert np.abs(D @ wh - (R + D @ v)).max() <= 1e-12


def mech_solution(fe):
    mat = MaterialData.uniform(fe.mesh.n_cells, 1.0, c0=1, alpha=1, mu=1, lam=1)
    op = MechOperator(fe, mat)
    f = lambda x, y, t: np.array([np.sin(3 * x), x * y])
    s, u, z = op.step(MechStepInput(np.cos(np.arange(fe.mesh.n_cells)), f, 0.0))
    from porofix.flow_step import cell_integrals
    return s, cell_integrals(fe, f, 0.0, ncomp=2)


@pytest.mark.parametrize("mode", ["correction", "hat"])
def test_stress_equilibration_balance(fe, mode):
    s, F = mech_solution(fe)
    eq = StressEquilibrator(fe, mode)
    sh = eq(s, F)
    div = (stress_divergence_matrix(fe) @ sh).reshape(-1, 2)
    assert np.abs(div + F).max() <= 1e-10 * np.abs(F).max()
    if mode == "correction":
        assert np.abs(stress_skew_matrix(fe) @ sh).max() <= 1e-10
        assert np.abs(sh - s).max() <= 1e-10


def test_stress_equilibration_perturbed_force(fe):
    s, F = mech_solution(fe)
    # compatible perturbation: the divergence of a stress living on boundary edges
    D = stress_divergence_matrix(fe)
    v = np.zeros(fe.layout.n_stress)
    for e in np.flatnonzero(fe.mesh.boundary_edge):
        v[4 * e:4 * e + 4] = 1e-3 * np.random.default_rng(e).normal(size=4)
    G = F - (D @ v).reshape(-1, 2)
    sh = StressEquilibrator(fe, "correction")(s, G)
    div = (D @ sh).reshape(-1, 2)
    assert np.abs(div + G).max() <= 1e-12


def test_unknown_mode(fe):
    with pytest.raises(ValueError):
        FluxEquilibrator(fe, "nope")
