"""Tests for adjacency structures and lattice precision matrices."""

import numpy as np
import pytest

from gcspatial.graph import (
    GraphConnectivityError,
    LatticeMap,
    RegionGraph,
    SparsePrecision,
    icar_precision,
    knn_graph,
    read_adjacency,
    read_centroids,
    rook_lattice,
    rw2d_precision,
    snap_to_lattice,
)


def path_graph(n):
    return RegionGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


class TestRegionGraph:
    def test_from_edges_symmetry(self):
        g = RegionGraph.from_edges(4, [(0, 1), (2, 1), (2, 3)])
        assert g.neighbor_lists == ((1,), (0, 2), (1, 3), (2,))
        assert g.degrees.tolist() == [1, 2, 2, 1]
        assert g.edge_list() == [(0, 1), (1, 2), (2, 3)]

    def test_invariant_violations(self):
        with pytest.raises(ValueError):
            RegionGraph.from_edges(3, [(0, 0)])
        with pytest.raises(ValueError):
            RegionGraph.from_edges(3, [(0, 5)])
        with pytest.raises(ValueError):
            RegionGraph(n=2, neighbor_lists=((1,), ()))  # asymmetric
        with pytest.raises(ValueError):
            RegionGraph(n=2, neighbor_lists=((1, 1), (0,)))

    def test_adjacency_matrix(self):
        g = path_graph(3)
        w = g.adjacency_matrix().toarray()
        assert np.array_equal(w, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])

    def test_components(self):
        g = RegionGraph.from_edges(5, [(0, 1), (3, 4)])
        assert g.connected_components() == [[0, 1], [2], [3, 4]]

    def test_centroid_validation(self):
        with pytest.raises(ValueError):
            RegionGraph.from_edges(2, [(0, 1)], centroids=[[0.0, 0.0]])
        g = path_graph(2).with_centroids([[0.0, 0.0], [1.0, 0.5]])
        assert g.centroids.shape == (2, 2)


class TestIcarPrecision:
    def test_path3_dense_form(self):
        a = icar_precision(path_graph(3)).dense()
        assert np.array_equal(a, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])

    def test_two_cycle(self):
        a = icar_precision(RegionGraph.from_edges(2, [(0, 1)])).dense()
        assert np.array_equal(a, [[1, -1], [-1, 1]])

    def test_row_sums_and_null_space(self):
        rng = np.random.default_rng(0)
        # random connected planar-ish graph at the study scale
        pts = rng.uniform(size=(192, 2))
        g = knn_graph(pts, np.full(192, 4))
        prec = icar_precision(g)
        a = prec.matrix
        ones = np.ones(192)
        assert np.max(np.abs(a @ ones)) <= 1e-12
        assert np.max(np.abs(a.sum(axis=1))) <= 1e-12
        assert prec.rank_deficiency == 1
        assert np.array_equal(prec.constraint_vectors[0], ones)

    def test_psd_quadratic_forms(self):
        rng = np.random.default_rng(1)
        g = knn_graph(rng.uniform(size=(60, 2)), np.full(60, 3))
        a = icar_precision(g).matrix
        for _ in range(25):
            v = rng.normal(size=60)
            assert v @ (a @ v) >= -1e-10

    def test_disconnected_raises_with_components(self):
        g = RegionGraph.from_edges(5, [(0, 1), (3, 4)])
        with pytest.raises(GraphConnectivityError) as err:
            icar_precision(g)
        assert err.value.components == [[0, 1], [2], [3, 4]]
        assert "3 connected components" in str(err.value)
        assert "[2]" in str(err.value)


class TestKnnGraph:
    def test_collinear_k1(self):
        pts = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]
        g = knn_graph(pts, [1, 1, 1])
        assert g.edge_list() == [(0, 1), (1, 2)]

    def test_complete_graph(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(7, 2))
        g = knn_graph(pts, np.full(7, 6))
        assert all(len(nbrs) == 6 for nbrs in g.neighbor_lists)

    def test_union_only_adds(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(size=(100, 2))
        g = knn_graph(pts, np.full(100, 4))
        assert np.all(g.degrees >= 4)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(size=(30, 2))
        ks = rng.integers(1, 6, size=30)
        g = knn_graph(pts, ks)
        want = set()
        for i in range(30):
            d = np.hypot(*(pts - pts[i]).T)
            order = sorted(range(30), key=lambda j: (d[j], j))
            order = [j for j in order if j != i][: ks[i]]
            for j in order:
                want.add((min(i, j), max(i, j)))
        assert set(g.edge_list()) == want

    def test_tie_break_by_index(self):
        # node 0 equidistant from 1 and 2: must pick index 1
        pts = [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [5.0, 5.0]]
        g = knn_graph(pts, [1, 1, 1, 1])
        assert 1 in g.neighbor_lists[0]

    def test_duplicate_points_deterministic(self):
        pts = [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]
        g1 = knn_graph(pts, [2, 2, 2, 2])
        g2 = knn_graph(pts, [2, 2, 2, 2])
        assert g1.neighbor_lists == g2.neighbor_lists

    def test_k_validation(self):
        pts = [[0.0, 0.0], [1.0, 0.0]]
        with pytest.raises(ValueError):
            knn_graph(pts, [2, 1])
        with pytest.raises(ValueError):
            knn_graph(pts, [-1, 1])


class TestRw2dPrecision:
    def lattice(self, m1, m2):
        return LatticeMap(shape=(m1, m2),
                          cell_index=np.arange(m1 * m2))

    def test_annihilates_polynomial_trends(self):
        q = rw2d_precision(self.lattice(4, 4)).matrix
        rr, cc = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
        for v in [np.ones(16), rr.ravel().astype(float),
                  cc.ravel().astype(float),
                  1.5 - 2.0 * rr.ravel() + 0.3 * cc.ravel()]:
            assert np.max(np.abs(q @ v)) <= 1e-10

    def test_interior_stencil(self):
        m = 10
        q = rw2d_precision(self.lattice(m, m)).matrix.toarray()
        center = 5 * m + 5
        assert q[center, center] == pytest.approx(20.0)
        for off in (1, -1, m, -m):
            assert q[center, center + off] == pytest.approx(-8.0)
        for off in (m + 1, m - 1, -m + 1, -m - 1):
            assert q[center, center + off] == pytest.approx(2.0)
        for off in (2, -2, 2 * m, -2 * m):
            assert q[center, center + off] == pytest.approx(1.0)

    def test_rank_deficiency_exactly_three(self):
        prec = rw2d_precision(self.lattice(5, 6))
        assert prec.rank_deficiency == 3
        assert len(prec.constraint_vectors) == 3
        w = np.linalg.eigvalsh(prec.dense())
        assert np.sum(w < 1e-9) == 3

    def test_positive_on_trend_complement(self):
        prec = rw2d_precision(self.lattice(6, 5))
        q = prec.dense()
        basis = np.column_stack(prec.constraint_vectors)
        rng = np.random.default_rng(5)
        for _ in range(20):
            v = rng.normal(size=30)
            v -= basis @ np.linalg.lstsq(basis, v, rcond=None)[0]
            assert v @ q @ v > 1e-8 * (v @ v)

    def test_too_small_raises(self):
        with pytest.raises(ValueError):
            rw2d_precision(self.lattice(3, 8))


class TestSnapToLattice:
    def test_corners_to_distinct_cells(self):
        pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
        lat = snap_to_lattice(pts, (4, 4))
        assert len(set(lat.cell_index.tolist())) == 4

    def test_all_identical_raises(self):
        with pytest.raises(ValueError):
            snap_to_lattice([[2.0, 3.0]] * 5, (4, 4))

    def test_bounds_at_scale(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(192, 2)) * [3.0, 1.0] + [10.0, -4.0]
        lat = snap_to_lattice(pts, (20, 20))
        assert lat.cell_index.min() >= 0
        assert lat.cell_index.max() < 400
        assert lat.n_regions == 192

    def test_degenerate_single_axis_allowed(self):
        pts = [[0.0, y] for y in np.linspace(0, 1, 8)]
        lat = snap_to_lattice(pts, (8, 8))
        cols = lat.cell_index % 8
        assert np.all(cols == cols[0])

    def test_membership_matrix(self):
        lat = LatticeMap(shape=(4, 4), cell_index=np.array([0, 0, 5]))
        m = lat.membership_matrix().toarray()
        assert m.shape == (3, 16)
        assert m[0, 0] == 1 and m[1, 0] == 1 and m[2, 5] == 1
        assert m.sum() == 3

    def test_grid_too_coarse(self):
        with pytest.raises(ValueError):
            snap_to_lattice([[0, 0], [1, 1]], (3, 5))


class TestRookLattice:
    def test_degrees(self):
        g = rook_lattice(3, 4)
        d = g.degrees.reshape(3, 4)
        assert d[0, 0] == 2 and d[0, 1] == 3 and d[1, 1] == 4

    def test_study_scale(self):
        g = rook_lattice(12, 16)
        assert g.n == 192
        assert len(g.connected_components()) == 1
        assert g.centroids[17].tolist() == [1.0, 1.0]


class TestFileReaders:
    def test_adjacency_round_trip(self, tmp_path):
        f = tmp_path / "adj.txt"
        f.write_text("# comment\n0 1\n1 2\n\n0 3\n")
        g = read_adjacency(f)
        assert g.n == 4
        assert g.edge_list() == [(0, 1), (0, 3), (1, 2)]

    def test_adjacency_with_region_count(self, tmp_path):
        f = tmp_path / "adj.txt"
        f.write_text("0 1\n")
        assert read_adjacency(f, n=5).n == 5
        with pytest.raises(ValueError):
            read_adjacency(f, n=1)

    @pytest.mark.parametrize("content,fragment", [
        ("0 1 2\n", ":1:"),
        ("0 x\n", ":1:"),
        ("1 0\n", "i < j"),
        ("0 1\n0 1\n", ":2: duplicate"),
        ("0 0\n", "i < j"),
        ("-1 2\n", "negative"),
    ])
    def test_adjacency_errors_cite_lines(self, tmp_path, content, fragment):
        f = tmp_path / "bad.txt"
        f.write_text(content)
        with pytest.raises(ValueError) as err:
            read_adjacency(f)
        assert fragment in str(err.value)

    def test_centroids_round_trip(self, tmp_path):
        f = tmp_path / "cent.csv"
        f.write_text("id,x,y\nA,0.5,1.5\nB,2.0,-1.0\n")
        ids, xy = read_centroids(f)
        assert ids == ["A", "B"]
        assert np.allclose(xy, [[0.5, 1.5], [2.0, -1.0]])

    def test_centroids_errors(self, tmp_path):
        f = tmp_path / "bad.csv"
        f.write_text("x,y,id\nA,0,0\n")
        with pytest.raises(ValueError, match="header"):
            read_centroids(f)
        f.write_text("id,x,y\nA,zap,0\n")
        with pytest.raises(ValueError, match=":2:"):
            read_centroids(f)
        f.write_text("id,x,y\nA,0,0\nA,1,1\n")
        with pytest.raises(ValueError, match="duplicate ids"):
            read_centroids(f)


class TestSparsePrecision:
    def test_symmetry_enforced(self):
        from scipy import sparse
        m = sparse.csr_array(np.array([[1.0, 0.5], [0.2, 1.0]]))
        with pytest.raises(ValueError):
            SparsePrecision(matrix=m)

    def test_scaled(self):
        prec = icar_precision(path_graph(3))
        doubled = prec.scaled(2.0)
        assert np.array_equal(doubled.dense(), 2.0 * prec.dense())
        assert doubled.rank_deficiency == 1
        with pytest.raises(ValueError):
            prec.scaled(0.0)
