import warnings

import numpy as np
import pytest

from hosweep.assembly import (AssemblyError, CrossSections, Source, assemble, assemble_faces,
                              assemble_source, assemble_volume, dump_sparsity, face_nodes)
from hosweep.discretization import FOUR_PI, AngularQuadrature, ReferenceBasis
from hosweep.mesh import HighOrderMesh, face_to_reference
from hosweep.meshgen import generate_annulus_in_square, generate_distorted, generate_uniform
from hosweep.sweepgraph import mutual_pairs, build_graph

from oracles import composite_gauss, split_gauss


def single_direction(mu, eta):
    om = np.array([mu, eta, 0.0])
    return AngularQuadrature(np.array([FOUR_PI]), om[None, :] / np.linalg.norm(om))


def test_bilinear_mass_matrix():
    m = generate_uniform(1, 1, 1)
    _, Mt, Ms = assemble_volume(m, ReferenceBasis(1), CrossSections.constant(1.0), [[1, 0]])
    expect = np.array([[4, 2, 2, 1], [2, 4, 1, 2], [2, 1, 4, 2], [1, 2, 2, 4]]) / 36
    np.testing.assert_allclose(Mt[0], expect, atol=1e-15)
    np.testing.assert_array_equal(Ms[0], 0.0)


def test_mass_scales_with_area():
    xs = CrossSections.constant(2.0, 1.0)
    small = generate_uniform(1, 1, 2, domain=((0, 0.5), (0, 0.5)))
    big = generate_uniform(1, 1, 2, domain=((0, 1.0), (0, 1.0)))
    _, Ms_, _ = assemble_volume(small, ReferenceBasis(2), xs, [[1, 0]])
    _, Mb, _ = assemble_volume(big, ReferenceBasis(2), xs, [[1, 0]])
    np.testing.assert_allclose(Mb, 4 * Ms_, rtol=1e-13)


def test_mass_spd_on_curved_mesh():
    m = generate_annulus_in_square(0.4, 0.45, 0.6, 8, (1, 1, 1), 3)
    xs = CrossSections({1: (1.0, 0.5), 2: (3.0, 1.0), 3: (0.5, 0.0)})
    _, Mt, Ms = assemble_volume(m, ReferenceBasis(2, 2), xs, [[1, 0]])
    np.testing.assert_allclose(Mt, Mt.transpose(0, 2, 1), atol=1e-13)
    assert np.linalg.eigvalsh(Mt).min() > 0
    pos = m.regions != 3
    assert np.linalg.eigvalsh(Ms[pos]).min() > 0
    np.testing.assert_array_equal(Ms[~pos], 0.0)


def test_missing_region_cross_sections():
    m = generate_annulus_in_square(0.4, 0.45, 0.6, 8, (1, 1, 1), 2)
    with pytest.raises(AssemblyError, match=r"region\(s\) \[3\]"):
        assemble_volume(m, ReferenceBasis(1), CrossSections({1: (1, 0), 2: (1, 0)}), [[1, 0]])


def test_invalid_cross_section_table():
    with pytest.raises(ValueError):
        CrossSections({1: (1.0, 2.0)})


def test_inverted_element_assembly_error():
    m = HighOrderMesh(1, [[0, 0], [1, 0], [0, 1], [1, 1]], [[1, 0, 3, 2]], validate=False)
    with pytest.raises(AssemblyError, match="element 0"):
        assemble_volume(m, ReferenceBasis(1), CrossSections.constant(1.0), [[1, 0]])


def test_two_squares_upwind_blocks():
    m = generate_uniform(2, 1, 1, domain=((0, 2), (0, 1)))
    q = single_direction(1, 0)
    op = assemble(m, ReferenceBasis(1), q, CrossSections.constant(1.0))
    edge_mass = np.array([[2, 1], [1, 2]]) / 6
    block = op.coupling(0, 1, 0)
    right = face_nodes(1, 3)           # left edge of the right element
    left = face_nodes(1, 1)            # right edge of the left element
    np.testing.assert_allclose(block[np.ix_(right, left)], -edge_mass, atol=1e-13)
    mask = np.ones_like(block, dtype=bool)
    mask[np.ix_(right, left)] = False
    np.testing.assert_array_equal(block[mask], 0.0)
    assert op.coupling(0, 0, 1) is None
    assert np.all(block <= 0)


def test_grazing_face_has_no_coupling():
    m = generate_uniform(2, 1, 1, domain=((0, 2), (0, 1)))
    op = assemble(m, ReferenceBasis(1), single_direction(0, 1), CrossSections.constant(1.0))
    assert op.coupling(0, 1, 0) is None and op.coupling(0, 0, 1) is None


def test_reentrant_face_couples_both_ways(s4):
    m = generate_distorted(8, 8, 3, 0.025)
    op = assemble(m, ReferenceBasis(1), s4, CrossSections.constant(1.0))
    found = 0
    for d in range(len(s4)):
        for u, v in mutual_pairs(build_graph(op, d)):
            assert op.coupling(d, u, v) is not None and op.coupling(d, v, u) is not None
            found += 1
    assert found > 0


@pytest.mark.parametrize("s", [1, 2, 3])
def test_coupling_sign(s4, s):
    # bilinear shape functions are non-negative, so every entry is <= 0;
    # higher-order Lagrange functions dip below zero, but the block still
    # sums to minus the inflow integral
    m = generate_annulus_in_square(0.4, 0.45, 0.6, 8, (1, 1, 1), 3)
    op = assemble(m, ReferenceBasis(s), s4, CrossSections.constant(1.0))
    for per_d in op.couplings:
        for ups in per_d.values():
            for _, block in ups:
                assert block.sum() < 0.0
                if s == 1:
                    assert block.max() <= 0.0


def test_source_moments_unit_square():
    m = generate_uniform(1, 1, 1)
    q = single_direction(1, 0)
    moments, total, _ = assemble_source(m, ReferenceBasis(1), q, Source.constant(1.0, 0.0))
    np.testing.assert_allclose(moments[0, 0], 0.25, atol=1e-15)
    assert total[0] == pytest.approx(1.0)


def test_inflow_moments_unit_square():
    m = generate_uniform(1, 1, 1)
    q = single_direction(1, 0)
    moments, _, inflow = assemble_source(m, ReferenceBasis(1), q, Source.constant(0.0, 1.0))
    expect = np.zeros(4)
    expect[face_nodes(1, 3)] = 0.5
    np.testing.assert_allclose(moments[0, 0], expect, atol=1e-13)
    assert inflow[0] == pytest.approx(1.0)


def test_zero_source_zero_moments(s4):
    m = generate_annulus_in_square(0.4, 0.45, 0.6, 8, (1, 1, 1), 2)
    moments, _, _ = assemble_source(m, ReferenceBasis(1), s4, Source.constant(0.0, 0.0))
    np.testing.assert_array_equal(moments, 0.0)


def boundary_matrix(mesh, basis, e, omega):
    """Element-boundary matrix int (Omega.n) u_m u_n ds by composite Gauss."""
    out = 0.0
    for face in range(4):
        def f(t, face=face):
            _, n, jac = mesh.face_frame(e, face, t)
            u = basis.eval(face_to_reference(face, t))
            return ((n @ omega) * jac)[:, None, None] * u[:, :, None] * u[:, None, :]
        out = out + composite_gauss(f, 0.0, 1.0, panels=8)
    return out


@pytest.mark.parametrize("s", [1, 2])
def test_divergence_identity_curved(s4, s):
    m = generate_annulus_in_square(0.4, 0.45, 0.6, 8, (1, 1, 1), 3)
    basis = ReferenceBasis(s, extra_points=2)
    G, _, _ = assemble_volume(m, basis, CrossSections.constant(1.0), s4.streaming)
    for d in (0, 5):
        for e in (0, 9, 20):
            B = boundary_matrix(m, basis, e, s4.streaming[d])
            np.testing.assert_allclose(G[d, e] + G[d, e].T, -B, atol=1e-10)


def test_outflow_minus_inflow_is_boundary_matrix(s4):
    m = generate_distorted(4, 4, 3, 0.03)
    basis = ReferenceBasis(2)
    om = s4.streaming[:2]
    Fp = assemble_faces(m, basis, om)[0]
    Fm = assemble_faces(m, basis, -om)[0]
    for e in (0, 5, 10):
        B = boundary_matrix(m, basis, e, om[1])
        np.testing.assert_allclose(Fp[1, e] - Fm[1, e], B, atol=1e-10)


def test_affine_romberg_matches_gauss(s4):
    m = generate_uniform(3, 3, 2)
    xs = CrossSections.constant(1.0, 0.5)
    src = Source.constant(1.0, 1.0)
    a = assemble(m, ReferenceBasis(2), s4, xs, src, rule="romberg")
    b = assemble(m, ReferenceBasis(2), s4, xs, src, rule="gauss")
    np.testing.assert_allclose(a.F_diag, b.F_diag, atol=1e-12)
    np.testing.assert_allclose(a.q, b.q, atol=1e-12)
    for d in range(len(s4)):
        for e in a.couplings[d]:
            for (u, x), (v, y) in zip(a.couplings[d][e], b.couplings[d][e]):
                assert u == v
                np.testing.assert_allclose(x, y, atol=1e-12)


def test_curved_face_coupling_matches_split_gauss(s4):
    m = generate_distorted(8, 8, 3, 0.025)
    basis = ReferenceBasis(2)
    op = assemble(m, basis, s4, CrossSections.constant(1.0))
    checked = 0
    for d in range(len(s4)):
        om = s4.streaming[d]
        for rec in m.interior_faces:
            L, R = rec.elem_left, rec.elem_right
            block = op.coupling(d, L, R)
            if block is None or op.coupling(d, R, L) is None:
                continue

            def g(t, rec=rec):
                return float(m.face_frame(rec.elem_left, rec.local_face_left,
                                          np.array([t]))[1][0] @ om)

            def f(t, rec=rec):
                _, n, jac = m.face_frame(rec.elem_left, rec.local_face_left, t)
                uL = basis.eval(face_to_reference(rec.local_face_left, t))
                uR = basis.eval(face_to_reference(rec.local_face_right, rec.right_parameter(t)))
                w = np.maximum(-(n @ om), 0.0) * jac
                return -w[:, None, None] * uL[:, :, None] * uR[:, None, :]

            ref = split_gauss(f, g)
            assert np.max(np.abs(block - ref)) < 1e-8
            checked += 1
            if checked >= 6:
                return
    assert checked > 0


def test_dump_sparsity_lines():
    m = generate_uniform(2, 1, 1, domain=((0, 2), (0, 1)))
    op = assemble(m, ReferenceBasis(1), single_direction(1, 0), CrossSections.constant(1.0))
    lines = dump_sparsity(op, 0).splitlines()
    assert len(lines) == 1
    u, e, w = lines[0].split()
    assert (u, e) == ("0", "1") and float(w) == pytest.approx(1 / 3)


def test_global_matrix_shape(s4):
    m = generate_uniform(2, 2, 1)
    op = assemble(m, ReferenceBasis(1), s4, CrossSections.constant(1.0))
    A = op.global_matrix(0)
    assert A.shape == (16, 16)
    np.testing.assert_allclose(A.toarray()[:4, :4], op.local_matrix(0, 0))


def test_unconverged_face_warns():
    m = generate_distorted(4, 4, 3, 0.03)
    q = AngularQuadrature(np.array([FOUR_PI]), np.array([[0.6, 0.8, 0.0]]))
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        op = assemble(m, ReferenceBasis(1), q, CrossSections.constant(1.0), max_levels=0)
    assert op.unconverged_faces
    assert any("Romberg" in str(w.message) for w in rec)
