"""Spectral graph convolution and the two-layer GCN module used in each block.

The eigenbasis and Chebyshev forms are small-graph references; the network
itself uses the first-order propagation ``P = D~^-1/2 (I + W) D~^-1/2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InputError

__all__ = [
    "GraphKernels",
    "ChebyshevFilter",
    "ACTIVATIONS",
    "activation",
    "eigenbasis",
    "spectral_conv_exact",
    "chebyshev_polynomial",
    "chebyshev_conv",
    "estimate_lambda_max",
    "gcn_layer",
    "gcn_module_psi",
    "psi_forward",
    "psi_backward",
]


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0).astype(z.dtype)


def _leaky(z):
    return np.where(z > 0, z, 0.01 * z)


def _leaky_grad(z):
    return np.where(z > 0, 1.0, 0.01)


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "leaky_relu": (_leaky, _leaky_grad),
}


def activation(name: str):
    """(function, derivative) pair for an activation name."""
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise InputError(f"unknown activation {name!r}; known: {sorted(ACTIVATIONS)}") from None


@dataclass
class GraphKernels:
    theta1: np.ndarray   # (d, F)
    theta2: np.ndarray   # (F, d)

    def __post_init__(self):
        self.theta1 = np.asarray(self.theta1, dtype=np.float64)
        self.theta2 = np.asarray(self.theta2, dtype=np.float64)
        d, f = self.theta1.shape
        if self.theta2.shape != (f, d) or f < 1:
            raise InputError(f"graph kernels must be (d, F) and (F, d); got "
                             f"{self.theta1.shape} and {self.theta2.shape}")

    @property
    def width(self) -> int:
        return self.theta1.shape[1]

    @classmethod
    def init(cls, d: int, width: int, rng: np.random.Generator) -> "GraphKernels":
        """Uniform in +-1/sqrt(fan_in)."""
        b1 = 1.0 / np.sqrt(d)
        b2 = 1.0 / np.sqrt(width)
        return cls(rng.uniform(-b1, b1, (d, width)), rng.uniform(-b2, b2, (width, d)))


@dataclass(frozen=True)
class ChebyshevFilter:
    coefficients: tuple[float, ...]
    lambda_max: float = 2.0

    def __post_init__(self):
        if len(self.coefficients) < 1:
            raise InputError("a Chebyshev filter needs at least one coefficient (order K >= 0)")
        if not self.lambda_max > 0:
            raise InputError("lambda_max must be positive")

    @property
    def order(self) -> int:
        return len(self.coefficients) - 1

    def response(self, eigenvalues) -> np.ndarray:
        """Filter gain at each (unscaled) Laplacian eigenvalue."""
        lam = np.asarray(eigenvalues, dtype=np.float64)
        scaled = 2.0 * lam / self.lambda_max - 1.0
        return sum(c * chebyshev_polynomial(k, scaled) for k, c in enumerate(self.coefficients))


def _dense(L) -> np.ndarray:
    return L.toarray() if sp.issparse(L) else np.asarray(L, dtype=np.float64)


def eigenbasis(L, atol: float = 1e-12):
    """Ascending eigenpairs of a symmetric matrix with a fixed sign convention.

    Each eigenvector is flipped so that its first entry exceeding ``atol``
    in magnitude is positive.
    """
    L = _dense(L)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise InputError(f"expected a square matrix, got {L.shape}")
    if np.max(np.abs(L - L.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(L), initial=0.0)):
        raise InputError("matrix is not symmetric")
    lam, U = np.linalg.eigh(0.5 * (L + L.T))
    for j in range(U.shape[1]):
        nz = np.flatnonzero(np.abs(U[:, j]) > atol)
        if nz.size and U[nz[0], j] < 0:
            U[:, j] = -U[:, j]
    return lam, U


def spectral_conv_exact(a, L, g_diag) -> np.ndarray:
    """``U diag(g) U^T a`` in the eigenbasis of ``L``."""
    lam, U = eigenbasis(L)
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g_diag, dtype=np.float64)
    if a.shape[0] != U.shape[0] or g.shape != (U.shape[0],):
        raise InputError("signal and filter lengths must match the number of nodes")
    return U @ (g * (U.T @ a)) if a.ndim == 1 else U @ (g[:, None] * (U.T @ a))


def chebyshev_polynomial(k: int, b):
    """T_k(b) by the three-term recurrence (scalar or array ``b``)."""
    if k < 0:
        raise InputError("polynomial order must be >= 0")
    b = np.asarray(b, dtype=np.float64)
    t_prev, t = np.ones_like(b), b
    if k == 0:
        return t_prev
    for _ in range(k - 1):
        t_prev, t = t, 2.0 * b * t - t_prev
    return t


def chebyshev_conv(a, L, f: ChebyshevFilter) -> np.ndarray:
    """``sum_k theta_k T_k(L~) a`` with ``L~ = 2 L / lambda_max - I``.

    Only matrix-vector products with ``L`` are used, so the output at a
    node depends on nodes at most ``K`` hops away.
    """
    a = np.asarray(a, dtype=np.float64)
    L = sp.csr_matrix(L) if sp.issparse(L) else np.asarray(L, dtype=np.float64)

    def scaled(v):
        return (2.0 / f.lambda_max) * (L @ v) - v

    coeffs = f.coefficients
    t_prev = a
    out = coeffs[0] * t_prev
    if f.order == 0:
        return out
    t = scaled(a)
    out = out + coeffs[1] * t
    for c in coeffs[2:]:
        t_prev, t = t, 2.0 * scaled(t) - t_prev
        out = out + c * t
    return out


def estimate_lambda_max(L, n_iter: int = 30, tol: float = 1e-6, seed: int = 0) -> float:
    """Power-iteration estimate of the largest eigenvalue of a PSD matrix."""
    n = L.shape[0]
    v = np.random.default_rng(seed).random(n) + 0.1
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_iter):
        w = L @ v
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        if abs(new - lam) <= tol * abs(new):
            return new
        lam = new
    return lam


def gcn_layer(X, P, theta) -> np.ndarray:
    """``Z = P X Theta``."""
    X = np.asarray(X, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if X.ndim != 2 or theta.ndim != 2 or X.shape[1] != theta.shape[0] or P.shape != (X.shape[0],) * 2:
        raise InputError(f"shape mismatch: P {P.shape}, X {X.shape}, Theta {theta.shape}")
    return np.asarray(P @ X) @ theta


def psi_forward(X, P, kernels: GraphKernels, act: str = "relu"):
    """Evaluate the two-layer GCN module; returns ``(output, cache)``."""
    fn, _ = activation(act)
    px = np.asarray(P @ X)
    z1 = px @ kernels.theta1
    hidden = fn(z1)
    ph = np.asarray(P @ hidden)
    return ph @ kernels.theta2, (px, z1, ph)


def psi_backward(cache, P, kernels: GraphKernels, gout, act: str = "relu"):
    """Reverse pass of :func:`psi_forward` for a symmetric ``P``.

    Returns ``(gX, (gtheta1, gtheta2))``.
    """
    _, dfn = activation(act)
    px, z1, ph = cache
    g_theta2 = ph.T @ gout
    g_hidden = np.asarray(P @ (gout @ kernels.theta2.T))
    g_z1 = g_hidden * dfn(z1)
    g_theta1 = px.T @ g_z1
    gX = np.asarray(P @ (g_z1 @ kernels.theta1.T))
    return gX, (g_theta1, g_theta2)


def gcn_module_psi(X, P, kernels: GraphKernels, act: str = "relu") -> np.ndarray:
    """Two stacked GCN layers, activation between them, none after."""
    fn, _ = activation(act)
    hidden = fn(gcn_layer(X, P, kernels.theta1))
    return gcn_layer(hidden, P, kernels.theta2)
