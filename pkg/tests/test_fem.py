import numpy as np
import pytest
import scipy.sparse as sp

from msfem_topopt.fem import (Assembler, MaterialError, PhysicalField, assemble, assemble_local, compliance,
                              element_sensitivities, element_stiffness_template, physical_sensitivities,
                              simp_derivative, simp_modulus, tile_sum)
from msfem_topopt.mesh import build_agglomerates, build_mesh
from msfem_topopt.spectral import direct_solve

from conftest import small_config


def quadrature_k0(nu, plane="stress"):
    """2x2 Gauss integration of B^T D B over the unit square."""
    if plane == "stress":
        D = np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]]) / (1 - nu**2)
    else:
        D = np.array([[1 - nu, nu, 0], [nu, 1 - nu, 0], [0, 0, (1 - 2 * nu) / 2]]) / ((1 + nu) * (1 - 2 * nu))
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]])
    K = np.zeros((8, 8))
    g = 1 / np.sqrt(3)
    for xi in (-g, g):
        for et in (-g, g):
            dN = 0.25 * np.array([corners[:, 0] * (1 + corners[:, 1] * et),
                                  corners[:, 1] * (1 + corners[:, 0] * xi)])  # d/dxi, d/deta
            dN *= 2.0  # unit square: x = (xi + 1) / 2
            B = np.zeros((3, 8))
            B[0, 0::2] = dN[0]
            B[1, 1::2] = dN[1]
            B[2, 0::2] = dN[1]
            B[2, 1::2] = dN[0]
            K += B.T @ D @ B * 0.25
    return K


@pytest.mark.parametrize("nu", [0.0, 0.3, 0.45])
@pytest.mark.parametrize("plane", ["stress", "strain"])
def test_k0_matches_quadrature(nu, plane):
    assert np.allclose(element_stiffness_template(nu, plane), quadrature_k0(nu, plane), atol=1e-13)


def test_k0_entry_and_rigid_modes():
    nu = 0.3
    K0 = element_stiffness_template(nu)
    assert np.isclose(K0[0, 0], (0.5 - nu / 6) / (1 - nu**2), rtol=1e-14)
    assert np.array_equal(K0, K0.T)
    assert np.allclose(K0 @ np.tile([1.0, 0.0], 4), 0, atol=1e-15)
    assert np.allclose(K0 @ np.tile([0.0, 1.0], 4), 0, atol=1e-15)
    ev = np.linalg.eigvalsh(K0)
    assert (np.abs(ev) < 1e-12 * ev.max()).sum() == 3
    assert ev.min() > -1e-14


@pytest.mark.parametrize("nu", [0.5, 0.7, -0.1])
def test_invalid_poisson(nu):
    with pytest.raises(MaterialError):
        element_stiffness_template(nu)


def test_simp():
    assert simp_modulus(0.0, 3, 1e-9, 1.0) == 1e-9
    assert simp_modulus(1.0, 3, 1e-9, 1.0) == 1.0
    assert simp_modulus(0.5, 3, 0.0, 1.0) == 0.125
    r = np.linspace(0, 1, 11)
    assert np.all(np.diff(simp_modulus(r, 3, 1e-9, 1)) > 0)
    assert simp_derivative(0.0, 3, 1e-9, 1) == 0.0
    assert np.allclose(simp_derivative(r, 1, 0.1, 1), 0.9)


def dense_assembly(mesh, E, K0):
    n = mesh.n_dofs
    K = np.zeros((n, n))
    for e, dofs in enumerate(mesh.edof):
        K[np.ix_(dofs, dofs)] += E[e] * K0
    fixed = mesh.dirichlet_dofs
    K[fixed, :] = 0
    K[:, fixed] = 0
    K[fixed, fixed] = 1
    return K


def test_assembly_all_solid_matches_dense(rng):
    mesh = build_mesh(small_config(2, 2, 3))
    K0 = element_stiffness_template()
    field = PhysicalField(np.ones(mesh.n_design))
    sys_ = assemble(mesh, field, K0)
    Kd = dense_assembly(mesh, np.ones(mesh.n_elements), K0)
    assert np.allclose(sys_.K.toarray(), Kd, atol=1e-15)
    u = direct_solve(sys_.K, sys_.f)
    ud = np.linalg.solve(Kd, sys_.f)
    assert np.linalg.norm(u - ud) <= 1e-12 * np.linalg.norm(ud)
    assert np.all(u[mesh.dirichlet_dofs] == 0)


def test_all_void_scales_free_block():
    mesh = build_mesh(small_config(2, 2, 2))
    solid = assemble(mesh, PhysicalField(np.ones(mesh.n_design), Emin=1e-9)).K.toarray()
    void = assemble(mesh, PhysicalField(np.zeros(mesh.n_design), Emin=1e-9)).K.toarray()
    free = mesh.free_dofs
    assert np.allclose(void[np.ix_(free, free)], 1e-9 * solid[np.ix_(free, free)], rtol=1e-12, atol=0)


def test_checkerboard_hand_assembly():
    cfg = small_config(1, 1, 2, supports="none", loads=[])
    mesh = build_mesh(cfg)
    rho = np.array([1.0, 0.0, 0.0, 1.0])  # tile index i*n + j
    field = PhysicalField(rho, p=3, Emin=1e-3, Emax=1.0)
    K0 = element_stiffness_template()
    E = simp_modulus(rho, 3, 1e-3, 1.0)[mesh.tile_map]
    assert np.allclose(assemble(mesh, field, K0).K.toarray(), dense_assembly(mesh, E, K0), atol=1e-15)


def test_global_matrix_symmetric_spd(rng):
    mesh = build_mesh(small_config(2, 4, 3))
    K = assemble(mesh, PhysicalField(rng.uniform(0, 1, mesh.n_design), Emin=1e-6)).K
    assert abs(K - K.T).max() == 0
    free = mesh.free_dofs
    np.linalg.cholesky(K.toarray()[np.ix_(free, free)])


def test_pattern_reused():
    mesh = build_mesh(small_config(2, 4, 3))
    asm = Assembler(mesh, element_stiffness_template())
    A = asm.assemble_matrix(np.ones(mesh.n_elements))
    B = asm.assemble_matrix(np.full(mesh.n_elements, 2.0))
    assert np.array_equal(A.indices, B.indices) and np.array_equal(A.indptr, B.indptr)


def test_local_matrix_equals_masked_global_submatrix(rng):
    mesh = build_mesh(small_config(3, 6, 3))
    K0 = element_stiffness_template()
    field = PhysicalField(rng.uniform(0, 1, mesh.n_design), 3.0, 1e-4, 1.0)
    aggs = build_agglomerates(mesh)
    asm = Assembler(mesh, K0)
    E = field.element_moduli(mesh)
    for k in rng.choice(len(aggs), 5, replace=False):
        agg = aggs[k]
        mask = np.zeros(mesh.n_elements)
        mask[agg.elements] = 1.0
        Kg = asm.assemble_matrix(E * mask)
        ref = Kg[agg.fine_dof_list][:, agg.fine_dof_list].toarray()
        Kw, w = assemble_local(mesh, field, agg, K0)
        assert np.allclose(Kw.toarray(), ref, rtol=0, atol=1e-14 * abs(ref).max())
        assert np.all(w > 0)


def _agg_at(aggs, mesh, I, J):
    return aggs[I * (mesh.Mx + 1) + J]


def test_interior_agglomerate_rigid_modes():
    mesh = build_mesh(small_config(2, 4, 3))
    aggs = build_agglomerates(mesh)
    field = PhysicalField(np.ones(mesh.n_design))
    Kw, _ = assemble_local(mesh, field, _agg_at(aggs, mesh, 2, 1))
    ev = np.linalg.eigvalsh(Kw.toarray())
    assert (ev < 1e-10 * ev.max()).sum() == 3
    Kc, _ = assemble_local(mesh, field, _agg_at(aggs, mesh, 0, 1))
    assert np.linalg.eigvalsh(Kc.toarray()).min() > 1e-8


def test_compliance_identities():
    mesh = build_mesh(small_config(2, 4, 3))
    field = PhysicalField(np.ones(mesh.n_design))
    s = assemble(mesh, field)
    u = direct_solve(s.K, s.f)
    c = compliance(s.f, u)
    assert np.isclose(c, u @ (s.K @ u), rtol=1e-10)
    assert compliance(np.zeros_like(u), u) == 0.0
    half = assemble(mesh, PhysicalField(np.ones(mesh.n_design), Emax=0.5))
    assert np.isclose(compliance(s.f, direct_solve(half.K, s.f)), 2 * c, rtol=1e-10)


def test_sensitivities_finite_difference(rng):
    mesh = build_mesh(small_config(2, 2, 4))
    K0 = element_stiffness_template()
    rho = rng.uniform(0.2, 0.9, mesh.n_design)

    def c_of(r):
        s = assemble(mesh, PhysicalField(r, 3.0, 1e-9, 1.0), K0)
        return compliance(s.f, direct_solve(s.K, s.f))

    s = assemble(mesh, PhysicalField(rho, 3.0, 1e-9, 1.0), K0)
    dc = element_sensitivities(mesh, direct_solve(s.K, s.f), PhysicalField(rho, 3.0, 1e-9, 1.0), K0)
    h = 1e-6
    for i in rng.choice(mesh.n_design, 10, replace=False):
        rp, rm = rho.copy(), rho.copy()
        rp[i] += h
        rm[i] -= h
        fd = (c_of(rp) - c_of(rm)) / (2 * h)
        assert abs(dc[i] - fd) <= 1e-5 * abs(fd)
    assert np.all(dc <= 0)


def test_zero_density_zero_sensitivity_and_tiling_sum(rng):
    mesh = build_mesh(small_config(2, 4, 3))
    rho = rng.uniform(0.1, 1, mesh.n_design)
    rho[0] = 0.0
    field = PhysicalField(rho, 3.0, 1e-9, 1.0)
    s = assemble(mesh, field)
    u = direct_solve(s.K, s.f)
    per = physical_sensitivities(mesh, u, field)
    dc = element_sensitivities(mesh, u, field)
    assert dc[0] == 0.0
    copies = np.flatnonzero(mesh.tile_map == 5)
    assert copies.size == mesh.Mx * mesh.My
    assert np.isclose(dc[5], per[copies].sum(), rtol=1e-14)
    assert np.allclose(tile_sum(mesh, per), dc)


def test_compliance_monotone_in_density(rng):
    mesh = build_mesh(small_config(1, 2, 3))
    rho = rng.uniform(0.2, 0.8, mesh.n_design)

    def c_of(r):
        s = assemble(mesh, PhysicalField(r, 3.0, 1e-9, 1.0))
        return compliance(s.f, direct_solve(s.K, s.f))

    c0 = c_of(rho)
    for i in range(mesh.n_design):
        r = rho.copy()
        r[i] = min(1.0, r[i] + 0.1)
        assert c_of(r) <= c0 * (1 + 1e-12)
