
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse.csgraph import floyd_warshall

from multimatch.mesh import (Mesh, MeshValidationError, check_nondegenerate, edge_graph, geodesic_distances,
                             graph_distances, mass_matrix, preprocess, stiffness_matrix, surface_area,
                             vertex_normals)
from multimatch.synthetic import grid, icosphere

from conftest import random_mesh

SQ3 = np.sqrt(3.0)


def equilateral():
    return Mesh([[0, 0, 0], [1, 0, 0], [0.5, SQ3 / 2, 0]], [[0, 1, 2]])


class TestMeshInvariants:
    def test_minimal(self):
        m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        assert m.n_vertices == 3 and m.n_triangles == 1

    def test_index_out_of_range_names_triangle(self):
        with pytest.raises(MeshValidationError, match="triangle 0"):
            Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])

    def test_repeated_index(self):
        with pytest.raises(MeshValidationError, match="repeats"):
            Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])

    def test_isolated_vertex(self):
        with pytest.raises(MeshValidationError, match="vertex 3"):
            Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]])

    def test_empty_and_nonfinite(self):
        with pytest.raises(MeshValidationError):
            Mesh(np.zeros((3, 3)), np.zeros((0, 3), int))
        with pytest.raises(MeshValidationError):
            Mesh([[0, 0, np.nan], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])

    def test_immutable(self):
        m = equilateral()
        with pytest.raises(ValueError):
            m.vertices[0, 0] = 3.0

    def test_degenerate_rejected(self):
        m = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 1, 3]])
        with pytest.raises(MeshValidationError, match="triangle 0"):
            check_nondegenerate(m)
        with pytest.raises(MeshValidationError):
            mass_matrix(m)


class TestPreprocess:
    def test_unit_area_centered(self):
        # unit square centered at the origin
        m = Mesh([[-.5, -.5, 0], [.5, -.5, 0], [.5, .5, 0], [-.5, .5, 0]], [[0, 1, 2], [0, 2, 3]])
        p = preprocess(m)
        assert np.allclose(p.vertices, m.vertices * 2 / 3, atol=1e-12)

    def test_fixed_point(self):
        m = preprocess(icosphere(1))
        assert np.allclose(preprocess(m).vertices, m.vertices, atol=1e-9)

    def test_area_nine_triangle(self):
        # right triangle with legs sqrt(18): area 9, then shift its centroid to (1, 1, 1)
        a = np.sqrt(18.0)
        v = np.array([[0, 0, 0], [a, 0, 0], [0, a, 0]])
        v = v - v.mean(0) + 1.0
        p = preprocess(Mesh(v, [[0, 1, 2]]))
        assert surface_area(p) == pytest.approx(4 / 9, rel=1e-12)
        assert np.allclose(p.vertices.mean(0), 0.0, atol=1e-12)
        assert np.array_equal(p.triangles, [[0, 1, 2]])

    @pytest.mark.parametrize("seed", range(5))
    def test_postconditions_and_idempotence(self, seed):
        m = random_mesh(seed)
        p = preprocess(m)
        assert np.sqrt(surface_area(p)) == pytest.approx(2 / 3, rel=1e-9)
        assert np.abs(p.vertices.mean(0)).max() <= 1e-9
        assert np.allclose(preprocess(p).vertices, p.vertices, atol=1e-9)

    def test_zero_area(self):
        m = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
        with pytest.raises(MeshValidationError, match="zero surface area"):
            preprocess(m)


class TestMass:
    def test_right_triangle(self):
        m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        assert np.allclose(mass_matrix(m), 1 / 6)

    def test_equilateral_heron(self):
        s = 1.5
        area = np.sqrt(s * (s - 1) ** 3)
        assert np.allclose(mass_matrix(equilateral()), area / 3, atol=1e-15)

    def test_two_triangles(self):
        v = [[0, 0, 0], [2, 0, 0], [0, 1, 0], [0, -3, 0]]
        m = Mesh(v, [[0, 1, 2], [0, 3, 1]])
        a1, a2 = 1.0, 3.0
        M = mass_matrix(m)
        assert np.allclose(M[[0, 1]], (a1 + a2) / 3)
        assert M[2] == pytest.approx(a1 / 3) and M[3] == pytest.approx(a2 / 3)

    @pytest.mark.parametrize("seed", range(10))
    def test_sum_and_positivity(self, seed):
        m = random_mesh(seed)
        M = mass_matrix(m)
        assert np.all(M > 0)
        assert M.sum() == pytest.approx(surface_area(m), rel=1e-9)


class TestStiffness:
    def test_equilateral(self):
        S = stiffness_matrix(equilateral()).toarray()
        off = S[~np.eye(3, dtype=bool)]
        assert np.allclose(off, -1 / (2 * SQ3), atol=1e-12)
        assert np.allclose(np.diag(S), 1 / SQ3, atol=1e-12)

    def test_square_split(self):
        m = Mesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
        S = stiffness_matrix(m).toarray()
        # the diagonal (0, 2) faces the two right angles: cot 90 = 0
        assert S[0, 2] == pytest.approx(0.0, abs=1e-12)
        # each side faces a single 45 degree angle
        for i, j in [(0, 1), (1, 2), (2, 3), (0, 3)]:
            assert S[i, j] == pytest.approx(-0.5, abs=1e-12)
        assert S[1, 3] == 0.0
        assert np.allclose(np.diag(S), 1.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_symmetric_constant_kernel_psd(self, seed):
        S = stiffness_matrix(random_mesh(seed))
        assert abs(S - S.T).max() == 0.0
        assert np.abs(S @ np.ones(S.shape[0])).max() <= 1e-9
        assert np.linalg.eigvalsh(S.toarray()).min() >= -1e-10


class TestNormals:
    def test_flat_ccw(self):
        n = vertex_normals(grid(4, 3))
        assert np.allclose(n, [0, 0, 1])

    def test_icosphere_radial(self):
        s = icosphere(3)
        n = vertex_normals(s)
        radial = s.vertices / np.linalg.norm(s.vertices, axis=1, keepdims=True)
        cos = np.einsum("ij,ij->i", n, radial)
        assert cos.min() >= np.cos(np.radians(5))
        assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)

    def test_winding_flip(self):
        s = icosphere(1)
        flipped = Mesh(s.vertices, s.triangles[:, ::-1])
        assert np.allclose(vertex_normals(flipped), -vertex_normals(s), atol=1e-12)

    def test_vanishing_normal(self):
        # two coincident triangles with opposite winding cancel
        m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 1]])
        with pytest.raises(MeshValidationError, match="vanishes"):
            vertex_normals(m)


def six_vertex_mesh():
    v = [[0, 0, 0], [1, 0, 0], [2, 0.2, 0], [0, 1, 0.1], [1.1, 1, 0], [2, 1.3, 0.3]]
    t = [[0, 1, 4], [0, 4, 3], [1, 2, 5], [1, 5, 4]]
    return Mesh(v, t)


class TestGeodesics:
    def test_self_zero(self):
        m = six_vertex_mesh()
        assert geodesic_distances(m, [2])[2] == 0.0

    def test_chain(self):
        g = edge_graph(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]), np.array([[0, 1], [1, 2]]))
        assert np.allclose(graph_distances(g, [0]), [0, 1, 2])

    def test_floyd_warshall_oracle(self):
        m = six_vertex_mesh()
        n = m.n_vertices
        W = np.full((n, n), np.inf)
        np.fill_diagonal(W, 0)
        for i, j in m.edges():
            W[i, j] = W[j, i] = np.linalg.norm(m.vertices[i] - m.vertices[j])
        oracle = floyd_warshall(W)
        for s in range(n):
            assert np.allclose(geodesic_distances(m, [s]), oracle[s], atol=1e-12)

    def test_disconnected_warns(self):
        v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]]
        m = Mesh(v, [[0, 1, 2], [3, 4, 5]])
        with pytest.warns(RuntimeWarning, match="3 vertices are unreachable"):
            d = geodesic_distances(m, [0])
        assert np.isinf(d[3:]).all() and np.isfinite(d[:3]).all()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_triangle_inequality(self, seed):
        m = random_mesh(seed, 6, 6)
        D = np.array([geodesic_distances(m, [s]) for s in range(m.n_vertices)])
        rng = np.random.default_rng(seed)
        for a, b, c in rng.integers(0, m.n_vertices, (200, 3)):
            assert D[a, c] <= D[a, b] + D[b, c] + 1e-12
