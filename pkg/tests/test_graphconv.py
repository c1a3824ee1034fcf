import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from magicct.errors import InputError
from magicct.graphconv import (
    ChebyshevFilter,
    GraphKernels,
    activation,
    chebyshev_conv,
    chebyshev_polynomial,
    eigenbasis,
    estimate_lambda_max,
    gcn_layer,
    gcn_module_psi,
    psi_backward,
    psi_forward,
    spectral_conv_exact,
)
from magicct.patchgraph import SparseGraph, normalized_laplacian, renormalized_propagation
from oracles import central_difference


def random_adjacency(rng, n, p=0.3):
    A = np.triu(rng.random((n, n)) < p, 1) * rng.uniform(0.1, 1.0, (n, n))
    A = A + A.T
    for i in range(n):
        j = (i + 1) % n
        A[i, j] = A[j, i] = max(A[i, j], 0.2)
    return A


def path_laplacian(n):
    A = np.diag(np.ones(n - 1), 1)
    return normalized_laplacian(A + A.T)


@pytest.mark.parametrize("seed", range(10))
def test_first_order_identity(seed):
    # K = 1, lambda_max = 2 and theta0 = -theta1 collapse to theta (I + D^-1/2 W D^-1/2)
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 65))
    A = random_adjacency(rng, n)
    a = rng.standard_normal(n)
    theta = float(rng.standard_normal())
    d = A.sum(axis=1)
    expected = theta * (a + (A / np.sqrt(np.outer(d, d))) @ a)
    got = chebyshev_conv(a, normalized_laplacian(A), ChebyshevFilter((theta, -theta), 2.0))
    assert np.max(np.abs(got - expected)) <= 1e-12 * max(1.0, np.max(np.abs(expected)))


@pytest.mark.parametrize("seed", range(8))
def test_chebyshev_matches_eigenbasis(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(4, 40))
    L = normalized_laplacian(random_adjacency(rng, n))
    lam_max = float(np.linalg.eigvalsh(L.toarray()).max())
    f = ChebyshevFilter(tuple(rng.standard_normal(int(rng.integers(1, 7)))), lam_max)
    a = rng.standard_normal((n, 3))
    lam, _ = eigenbasis(L)
    exact = spectral_conv_exact(a, L, f.response(lam))
    assert np.max(np.abs(chebyshev_conv(a, L, f) - exact)) <= 1e-9


@pytest.mark.parametrize("order", [0, 1, 2, 5])
def test_k_hop_locality_on_path(order):
    n, src = 21, 10
    L = path_laplacian(n)
    impulse = np.zeros(n)
    impulse[src] = 1.0
    out = chebyshev_conv(impulse, L, ChebyshevFilter((0.3,) * order + (1.0,), 2.0))
    hops = np.abs(np.arange(n) - src)
    assert np.all(out[hops > order] == 0.0)
    assert np.all(out[hops == order] != 0.0)


def test_chebyshev_values():
    assert chebyshev_polynomial(2, 0.5) == pytest.approx(-0.5)
    b = np.linspace(-1, 1, 9)
    for k in range(6):
        assert np.allclose(chebyshev_polynomial(k, b), np.cos(k * np.arccos(b)), atol=1e-12)
    with pytest.raises(InputError):
        chebyshev_polynomial(-1, 0.0)


def test_filter_validation():
    with pytest.raises(InputError):
        ChebyshevFilter(())
    with pytest.raises(InputError):
        ChebyshevFilter((1.0,), 0.0)


def test_eigenbasis_sign_convention(rng):
    L = normalized_laplacian(random_adjacency(rng, 12))
    lam, U = eigenbasis(L)
    assert np.all(np.diff(lam) >= 0)
    assert np.allclose(U @ np.diag(lam) @ U.T, L.toarray(), atol=1e-12)
    for j in range(U.shape[1]):
        first = U[np.flatnonzero(np.abs(U[:, j]) > 1e-12)[0], j]
        assert first > 0


def test_eigenbasis_rejects_non_symmetric():
    with pytest.raises(InputError):
        eigenbasis(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_lambda_max_estimate(rng):
    L = normalized_laplacian(random_adjacency(rng, 30))
    exact = np.linalg.eigvalsh(L.toarray()).max()
    est = estimate_lambda_max(L, n_iter=500, tol=1e-12)
    assert est <= exact + 1e-12
    assert est == pytest.approx(exact, rel=1e-3)


def test_permutation_equivariance(rng):
    n, d = 15, 4
    A = random_adjacency(rng, n)
    X = rng.standard_normal((n, d))
    k = GraphKernels.init(d, 6, rng)
    perm = rng.permutation(n)
    P = renormalized_propagation(A)
    Pp = renormalized_propagation(A[np.ix_(perm, perm)])
    assert np.allclose(gcn_module_psi(X[perm], Pp, k), gcn_module_psi(X, P, k)[perm], atol=1e-12)


def test_identity_propagation_reduces_to_mlp(rng):
    X = rng.standard_normal((7, 5))
    k = GraphKernels.init(5, 3, rng)
    out = gcn_module_psi(X, sp.identity(7, format="csr"), k)
    assert np.allclose(out, np.maximum(X @ k.theta1, 0) @ k.theta2, atol=1e-14)


def test_edgeless_graph_propagation_is_identity():
    P = SparseGraph.from_weights(np.zeros((4, 4))).propagation
    assert np.array_equal(P.toarray(), np.eye(4))


def test_gcn_layer_shape_check(rng):
    P = sp.identity(4, format="csr")
    with pytest.raises(InputError):
        gcn_layer(np.zeros((4, 3)), P, np.zeros((2, 2)))
    with pytest.raises(InputError):
        GraphKernels(np.zeros((3, 2)), np.zeros((3, 2)))


@pytest.mark.parametrize("act", ["relu", "leaky_relu"])
def test_psi_gradients(act, rng):
    n, d, f = 10, 4, 5
    P = renormalized_propagation(random_adjacency(rng, n))
    X = rng.standard_normal((n, d))
    k = GraphKernels.init(d, f, rng)
    G = rng.standard_normal((n, d))
    _, cache = psi_forward(X, P, k, act)
    gX, (g1, g2) = psi_backward(cache, P, k, G, act)

    def loss(X_, t1, t2):
        return float(np.sum(G * gcn_module_psi(X_, P, GraphKernels(t1, t2), act)))

    h = 1e-6
    for (i, j) in [(0, 0), (3, 2), (9, 3)]:
        e = np.zeros_like(X)
        e[i, j] = 1.0
        fd = central_difference(lambda s: loss(X + s * e, k.theta1, k.theta2), 0.0, h)
        assert fd == pytest.approx(gX[i, j], rel=1e-5, abs=1e-8)
    for (i, j) in [(0, 0), (2, 4)]:
        e = np.zeros_like(k.theta1)
        e[i, j] = 1.0
        fd = central_difference(lambda s: loss(X, k.theta1 + s * e, k.theta2), 0.0, h)
        assert fd == pytest.approx(g1[i, j], rel=1e-5, abs=1e-8)
        e = np.zeros_like(k.theta2)
        e[j, i] = 1.0
        fd = central_difference(lambda s: loss(X, k.theta1, k.theta2 + s * e), 0.0, h)
        assert fd == pytest.approx(g2[j, i], rel=1e-5, abs=1e-8)


def test_unknown_activation():
    with pytest.raises(InputError):
        activation("tanh")


@settings(max_examples=30, deadline=None)
@given(n=st.integers(3, 30), seed=st.integers(0, 10_000))
def test_propagation_preserves_sqrt_degree_vector(n, seed):
    A = random_adjacency(np.random.default_rng(seed), n)
    d = 1.0 + A.sum(axis=1)
    P = renormalized_propagation(A)
    assert np.allclose(P @ np.sqrt(d), np.sqrt(d), atol=1e-12)
