import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pqsystem import plap
from pqsystem.mesh import Field, build_mesh, grad_energy, lp_mass, read_field, write_field
from pqsystem.problem import Domain


def test_interval_counts():
    m = build_mesh(Domain.interval(), 5)
    assert m.n_nodes == 5 and m.h == 0.25 and m.interior.sum() == 3


def test_square_counts():
    m = build_mesh(Domain.rectangle(), 4)
    assert m.n_nodes == 16 and m.n_elements == 18


def test_too_coarse_rejected():
    with pytest.raises(ValueError):
        build_mesh(Domain.interval(), 2)


@pytest.mark.parametrize("dom", [Domain.interval(-1, 2), Domain.rectangle(0, 2, -1, 0.5)])
def test_measures_sum_to_volume(dom):
    m = build_mesh(dom, 9)
    assert np.all(m.element_measure > 0)
    assert m.element_measure.sum() == pytest.approx(dom.volume, rel=1e-12)
    assert m.node_weights.sum() == pytest.approx(dom.volume, rel=1e-12)
    lo = np.array([b[0] for b in dom.bounds])
    hi = np.array([b[1] for b in dom.bounds])
    on_boundary = np.any(np.isclose(m.nodes, lo) | np.isclose(m.nodes, hi), axis=1)
    assert np.array_equal(on_boundary, ~m.interior)


def test_field_rejects_boundary_values():
    m = build_mesh(Domain.interval(), 5)
    with pytest.raises(ValueError):
        Field(np.ones(5), m)


def test_lp_mass_vertex_rule():
    m = build_mesh(Domain.interval(), 5)
    assert lp_mass(m.zero_field(), 2) == 0.0
    hat = np.zeros(5)
    hat[2] = 1.0
    assert lp_mass(Field(hat, m), 1) == pytest.approx(m.h)


def _exact_lp_1d(m, values, s, order=40):
    """Gauss-Legendre integration of |u|^s for the piecewise-linear interpolant."""
    x, w = np.polynomial.legendre.leggauss(order)
    t = 0.5 * (x + 1)
    total = 0.0
    for a, b in m.elements:
        ua, ub = values[a], values[b]
        h = m.nodes[b, 0] - m.nodes[a, 0]
        total += 0.5 * h * np.sum(w * np.abs(ua + t * (ub - ua)) ** s)
    return total


@pytest.mark.parametrize("s", [1.5, 2.0, 3.0])
def test_lp_mass_against_exact_integration(s):
    m = build_mesh(Domain.interval(), 65)
    phi = plap.first_eigenpair(m, s, tol=1e-12).fn.values
    exact = _exact_lp_1d(m, phi, s)
    assert abs(m.lp_mass(phi, s) - exact) / exact <= 5 * m.h


def test_grad_energy_unit_slopes():
    m = build_mesh(Domain.interval(), 3)
    u = Field(np.array([0.0, 0.5, 0.0]), m)
    for s in (1.5, 2.0, 4.0):
        assert grad_energy(u, s) == pytest.approx(1.0)
    assert grad_energy(m.zero_field(), 2) == 0.0


def test_grad_energy_of_sine():
    m = build_mesh(Domain.interval(), 257)
    u = m.interpolate(lambda x: np.sin(np.pi * x[:, 0]))
    assert grad_energy(u, 2) == pytest.approx(np.pi**2 / 2, rel=1e-3)


@given(t=st.floats(-50, 50).filter(lambda t: abs(t) > 1e-3), s=st.floats(1.1, 6), seed=st.integers(0, 10**6))
def test_homogeneity(t, s, seed):
    m = build_mesh(Domain.rectangle(), 6)
    rng = np.random.default_rng(seed)
    u = Field(np.where(m.interior, rng.standard_normal(m.n_nodes), 0.0), m)
    assert lp_mass(u * t, s) == pytest.approx(abs(t) ** s * lp_mass(u, s), rel=1e-12)
    assert grad_energy(u * t, s) == pytest.approx(abs(t) ** s * grad_energy(u, s), rel=1e-12)


@given(seed=st.integers(0, 10**6))
def test_zero_energy_only_for_zero_field(seed):
    m = build_mesh(Domain.rectangle(), 5)
    rng = np.random.default_rng(seed)
    vals = np.where(m.interior & (rng.random(m.n_nodes) < 0.5), rng.standard_normal(m.n_nodes), 0.0)
    u = Field(vals, m)
    assert (grad_energy(u, 2) == 0) == (not np.any(vals))


def test_fast_assembly_matches_triple_product():
    for dom in (Domain.interval(), Domain.rectangle()):
        m = build_mesh(dom, 7)
        wk = np.random.default_rng(0).random(m.n_elements)
        G = m.basis_grads
        local = np.einsum("ekd,eld->ekl", G, G) * (wk * m.element_measure)[:, None, None]
        assert abs(m.assemble(local) - m.stiffness(wk)).max() < 1e-12
        idx = m.interior_indices
        assert abs(m.assemble(local, interior_only=True) - m.stiffness(wk)[idx][:, idx]).max() < 1e-12


def test_snapshot_round_trip(tmp_path):
    m = build_mesh(Domain.rectangle(), 5)
    u = m.interpolate(lambda x: np.sin(np.pi * x[:, 0]) * x[:, 1] * (1 - x[:, 1]))
    write_field(u, tmp_path / "u.txt")
    back = read_field(tmp_path / "u.txt", m)
    assert np.array_equal(back.values, u.values)
    assert (tmp_path / "u.txt").read_text().startswith("# x y value")
