import csv

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from magicct.errors import ConfigError, InputError, MagicError
from magicct.patchgraph import (
    SIGMA_FLOOR,
    PatchLayout,
    SparseGraph,
    accumulate_patches,
    anchor_positions,
    assemble_patches,
    build_graph,
    degree_histogram,
    export_edges,
    extract_patches,
    normalized_laplacian,
    renormalized_propagation,
)
from oracles import brute_knn_weights


def _random_graph(rng, n, p=0.3):
    A = np.triu(rng.random((n, n)) < p, 1) * rng.random((n, n))
    A = A + A.T
    # a ring keeps every node connected
    for i in range(n):
        A[i, (i + 1) % n] = A[(i + 1) % n, i] = max(A[i, (i + 1) % n], 0.1)
    return SparseGraph.from_weights(A)


class TestAnchors:
    def test_full_size_node_count(self):
        layout = PatchLayout.create((256, 256), (6, 6), (2, 2))
        assert layout.n_nodes == 126 * 126 == 15876
        assert layout.n_features == 36

    def test_last_anchor_appended(self):
        assert anchor_positions(10, 4, 4).tolist() == [0, 4, 6]
        assert anchor_positions(10, 4, 3).tolist() == [0, 3, 6]

    @pytest.mark.parametrize("length,size,step", [(10, 11, 1), (10, 4, 5), (10, 4, 0)])
    def test_rejects(self, length, size, step):
        with pytest.raises(ConfigError):
            anchor_positions(length, size, step)

    def test_every_pixel_covered(self):
        layout = PatchLayout.create((23, 17), (5, 4), (4, 3))
        assert layout.overlap_counts.min() >= 1


class TestPatchTransform:
    @pytest.mark.parametrize("size", range(4, 11))
    def test_round_trip_all_steps(self, size, rng):
        img = rng.standard_normal((32, 29))
        for step in range(1, size + 1):
            X, layout = extract_patches(img, size, i0=step)
            back = assemble_patches(X, layout)
            assert np.max(np.abs(back - img)) <= 1e-12

    def test_rows_are_patches(self, rng):
        img = rng.standard_normal((12, 12))
        X, layout = extract_patches(img, 4, 3, i0=2, j0=3)
        for q, (r, c) in enumerate(layout.anchors):
            assert np.array_equal(X[q], img[r:r + 4, c:c + 3].ravel())

    def test_single_pixel_increment(self, rng):
        # perturbing one pixel touches exactly the patches that cover it
        img = rng.standard_normal((16, 16))
        X0, layout = extract_patches(img, 5, i0=2)
        bumped = img.copy()
        bumped[7, 9] += 1.0
        X1, _ = extract_patches(bumped, layout=layout)
        changed = np.flatnonzero(np.any(X1 != X0, axis=1))
        assert changed.size == layout.overlap_counts[7, 9]
        delta = accumulate_patches(X1 - X0, layout)
        expected = np.zeros_like(img)
        expected[7, 9] = layout.overlap_counts[7, 9]
        assert np.array_equal(delta, expected)

    def test_accumulate_is_adjoint_of_extract(self, rng):
        img = rng.standard_normal((14, 15))
        X, layout = extract_patches(img, 6, i0=4)
        Z = rng.standard_normal(X.shape)
        assert np.isclose(np.vdot(X, Z), np.vdot(img, accumulate_patches(Z, layout)), rtol=1e-12)

    def test_shape_errors(self, rng):
        layout = PatchLayout.create((8, 8), (4, 4), (2, 2))
        with pytest.raises(InputError):
            extract_patches(np.zeros((9, 8)), layout=layout)
        with pytest.raises(InputError):
            assemble_patches(np.zeros((3, 16)), layout)
        with pytest.raises(InputError):
            extract_patches(np.zeros(8), 4)

    @settings(max_examples=40, deadline=None)
    @given(m=st.integers(6, 20), n=st.integers(6, 20), s=st.integers(2, 6), data=st.data())
    def test_round_trip_property(self, m, n, s, data):
        step = data.draw(st.integers(1, s))
        img = np.random.default_rng(m * 100 + n).standard_normal((m, n))
        X, layout = extract_patches(img, s, i0=step)
        assert np.max(np.abs(assemble_patches(X, layout) - img)) <= 1e-12


class TestGraph:
    @pytest.mark.parametrize("k", [1, 3, 6])
    def test_matches_brute_force(self, k, rng):
        X = rng.standard_normal((30, 5))
        g = build_graph(X, k)
        W, sigma = brute_knn_weights(X, k)
        assert g.sigma == pytest.approx(sigma, rel=1e-12)
        assert np.allclose(g.weights.toarray(), W, rtol=1e-12, atol=0)

    def test_blocked_distances_agree(self, rng):
        X = rng.standard_normal((50, 4))
        a = build_graph(X, 5, block=7).weights
        b = build_graph(X, 5).weights
        assert abs(a - b).max() == 0

    def test_ties_prefer_lower_index(self):
        # equally spaced points on a line: both neighbours at distance 1 tie
        X = np.arange(6.0)[:, None]
        g = build_graph(X, 1)
        nbr = [int(g.weights[i].indices.min()) for i in range(6)]
        assert nbr[3] == 2

    def test_identical_nodes(self):
        g = build_graph(np.ones((5, 3)), 2)
        assert g.sigma == SIGMA_FLOOR
        assert np.all(g.weights.data == 1.0)

    def test_scale_invariant_weights(self, rng):
        X = rng.standard_normal((25, 4))
        a = build_graph(X, 4)
        b = build_graph(7.5 * X, 4)
        assert b.sigma == pytest.approx(7.5 * a.sigma)
        assert np.allclose(a.weights.toarray(), b.weights.toarray(), rtol=1e-12)

    def test_symmetric_no_self_loops(self, rng):
        g = build_graph(rng.standard_normal((40, 9)), 5)
        W = g.weights
        assert abs(W - W.T).max() == 0
        assert not W.diagonal().any()
        assert np.all(np.diff(W.indptr) >= 5)

    def test_rejects_bad_k(self, rng):
        with pytest.raises(ConfigError):
            build_graph(rng.standard_normal((5, 2)), 5)
        with pytest.raises(InputError):
            build_graph(np.zeros((1, 2)), 1)

    def test_from_weights_validation(self):
        with pytest.raises(InputError):
            SparseGraph.from_weights(np.array([[0, 1.0], [0.5, 0]]))
        with pytest.raises(InputError):
            SparseGraph.from_weights(np.array([[0, -1.0], [-1.0, 0]]))
        g = SparseGraph.from_weights(np.array([[3.0, 1.0], [1.0, 0]]))
        assert g.weights.diagonal().tolist() == [0.0, 0.0]

    def test_export_edges(self, tmp_path, rng):
        g = build_graph(rng.standard_normal((12, 3)), 3)
        path = tmp_path / "edges.csv"
        n = export_edges(g, path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert n == len(rows) == sp.triu(g.weights, 1).nnz
        for r in rows:
            i, j = int(r["i"]), int(r["j"])
            assert i < j
            assert float(r["weight"]) == g.weights[i, j]
        assert sum(degree_histogram(g).values()) == 12


class TestLaplacian:
    @pytest.mark.parametrize("seed", range(10))
    def test_spectrum_in_range(self, seed):
        rng = np.random.default_rng(seed)
        g = _random_graph(rng, int(rng.integers(5, 64)))
        lam = np.linalg.eigvalsh(normalized_laplacian(g).toarray())
        assert lam.min() >= -1e-12
        assert lam.max() <= 2 + 1e-9

    def test_null_vector(self, rng):
        g = _random_graph(rng, 20)
        v = np.sqrt(g.degrees)
        assert np.max(np.abs(normalized_laplacian(g) @ v)) <= 1e-12

    def test_bipartite_reaches_two(self):
        path = np.diag(np.ones(5), 1)
        lam = np.linalg.eigvalsh(normalized_laplacian(path + path.T).toarray())
        assert lam.max() == pytest.approx(2.0, abs=1e-12)

    def test_isolated_node(self):
        with pytest.raises(MagicError):
            normalized_laplacian(np.zeros((3, 3)))

    def test_two_node_propagation(self):
        P = renormalized_propagation(np.array([[0.0, 1.0], [1.0, 0.0]])).toarray()
        assert np.allclose(P, 0.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_propagation_spectral_radius(self, seed):
        g = _random_graph(np.random.default_rng(seed), 30)
        lam = np.linalg.eigvalsh(g.propagation.toarray())
        assert lam.max() == pytest.approx(1.0, abs=1e-12)
        assert lam.min() > -1.0
