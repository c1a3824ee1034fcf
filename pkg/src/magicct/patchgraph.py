"""Patch-node transform of an image and the k-NN Gaussian graph over patches.

``extract_patches`` maps an ``m x n`` image to an ``N x d`` node matrix, one
row per overlapping ``s1 x s2`` patch.  ``assemble_patches`` inverts it by
averaging every pixel over the patches that cover it.  ``build_graph``
connects each patch to its nearest neighbours with Gaussian weights.
"""
from __future__ import annotations

import csv
import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.distance import cdist

from .errors import ConfigError, InputError, MagicError

__all__ = [
    "PatchLayout",
    "SparseGraph",
    "anchor_positions",
    "extract_patches",
    "accumulate_patches",
    "assemble_patches",
    "build_graph",
    "normalized_laplacian",
    "renormalized_propagation",
    "export_edges",
    "degree_histogram",
    "SIGMA_FLOOR",
]

SIGMA_FLOOR = 1e-8


def anchor_positions(length: int, size: int, step: int) -> np.ndarray:
    """0-based top-left anchors along one axis.

    ``0, step, 2*step, ...`` up to ``length - size``, with ``length - size``
    appended when the stride skips it, so the last rows/cols are covered.
    """
    if size > length:
        raise ConfigError(f"patch size {size} exceeds image extent {length}")
    if not 1 <= step <= size:
        raise ConfigError(f"step {step} must satisfy 1 <= step <= patch size {size} so patches overlap")
    last = length - size
    out = list(range(0, last + 1, step))
    if out[-1] != last:
        out.append(last)
    return np.asarray(out, dtype=np.intp)


@dataclass(frozen=True, eq=False)
class PatchLayout:
    image_shape: tuple[int, int]
    patch_shape: tuple[int, int]
    step: tuple[int, int]
    row_anchors: np.ndarray
    col_anchors: np.ndarray

    @classmethod
    def create(cls, image_shape, patch_shape, step) -> "PatchLayout":
        m, n = image_shape
        s1, s2 = patch_shape
        i0, j0 = step
        return cls(
            (int(m), int(n)),
            (int(s1), int(s2)),
            (int(i0), int(j0)),
            anchor_positions(m, s1, i0),
            anchor_positions(n, s2, j0),
        )

    @property
    def n_nodes(self) -> int:
        return self.row_anchors.size * self.col_anchors.size

    @property
    def n_features(self) -> int:
        return self.patch_shape[0] * self.patch_shape[1]

    @property
    def anchors(self) -> np.ndarray:
        """(N, 2) array of 0-based (row, col) anchors in row-major order."""
        r, c = np.meshgrid(self.row_anchors, self.col_anchors, indexing="ij")
        return np.stack([r.ravel(), c.ravel()], axis=1)

    @functools.cached_property
    def overlap_counts(self) -> np.ndarray:
        """Number of patches covering each pixel (integer, image shape)."""
        ones = np.ones((self.n_nodes, self.n_features))
        return accumulate_patches(ones, self).astype(np.int64)


def _check_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InputError(f"expected a 2-D image, got shape {img.shape}")
    return img


def extract_patches(img, s1: int | None = None, s2: int | None = None, i0: int = 1, j0: int | None = None,
                    layout: PatchLayout | None = None):
    """Stack every anchored patch of ``img`` as a row vector.

    Returns
    -------
    X : ndarray (N, s1*s2)
        Row ``q`` is the row-major vectorisation of the patch at
        ``layout.anchors[q]``.
    layout : PatchLayout
    """
    img = _check_image(img)
    if layout is None:
        s2 = s1 if s2 is None else s2
        j0 = i0 if j0 is None else j0
        layout = PatchLayout.create(img.shape, (s1, s2), (i0, j0))
    elif img.shape != layout.image_shape:
        raise InputError(f"image shape {img.shape} does not match layout {layout.image_shape}")
    windows = sliding_window_view(img, layout.patch_shape)
    sel = windows[np.ix_(layout.row_anchors, layout.col_anchors)]
    return sel.reshape(layout.n_nodes, layout.n_features).copy(), layout


def accumulate_patches(X, layout: PatchLayout) -> np.ndarray:
    """Sum patch entries back onto the image grid (transpose of extraction)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (layout.n_nodes, layout.n_features):
        raise InputError(f"node matrix has shape {X.shape}, layout expects "
                         f"{(layout.n_nodes, layout.n_features)}")
    s1, s2 = layout.patch_shape
    nr, nc = layout.row_anchors.size, layout.col_anchors.size
    cube = X.reshape(nr, nc, s1, s2)
    out = np.zeros(layout.image_shape)
    for a in range(s1):
        rows = layout.row_anchors + a
        for b in range(s2):
            # anchors are distinct, so no index repeats within one offset
            out[np.ix_(rows, layout.col_anchors + b)] += cube[:, :, a, b]
    return out


def assemble_patches(X, layout: PatchLayout) -> np.ndarray:
    """Overlap-average inverse of :func:`extract_patches`."""
    return accumulate_patches(X, layout) / layout.overlap_counts


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Symmetric weighted adjacency over patch nodes.

    ``weights`` holds no self-loops; the identity is added only by the
    renormalised propagation matrix.
    """

    weights: sp.csr_matrix
    sigma: float = float("nan")
    k: int = 0

    @classmethod
    def from_weights(cls, W, sigma: float = float("nan"), k: int = 0) -> "SparseGraph":
        W = sp.csr_matrix(W, dtype=np.float64)
        if W.shape[0] != W.shape[1]:
            raise InputError(f"adjacency must be square, got {W.shape}")
        if W.nnz and (W.data.min() < 0 or not np.all(np.isfinite(W.data))):
            raise InputError("adjacency weights must be finite and nonnegative")
        if abs(W - W.T).max() > 0:
            raise InputError("adjacency must be symmetric")
        W.setdiag(0.0)
        W.eliminate_zeros()
        W.sort_indices()
        return cls(W, float(sigma), int(k))

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.weights.sum(axis=1)).ravel()

    @functools.cached_property
    def propagation(self) -> sp.csr_matrix:
        return renormalized_propagation(self)


def _knn_select(dist, k):
    """Columns of the ``k`` smallest entries per row, ordered by (value, column).

    Equivalent to ``argsort(dist, kind="stable")[:, :k]`` but linear per row:
    everything strictly below the k-th value is kept, then ties at the k-th
    value are filled in column order.
    """
    kth = np.partition(dist, k - 1, axis=1)[:, k - 1:k]
    below = dist < kth
    tied = dist == kth
    need = k - below.sum(axis=1, keepdims=True)
    keep = below | (tied & (np.cumsum(tied, axis=1) <= need))
    cols = np.nonzero(keep)[1].reshape(dist.shape[0], k)
    vals = np.take_along_axis(dist, cols, axis=1)
    return np.take_along_axis(cols, np.argsort(vals, axis=1, kind="stable"), axis=1)


def build_graph(X, k: int = 8, block: int = 512) -> SparseGraph:
    """Gaussian-weighted k-nearest-neighbour graph over the rows of ``X``.

    Each node keeps its ``k`` closest other nodes (Euclidean distance, ties
    to the lower index).  The scale ``sigma`` is the median of all retained
    neighbour distances, floored at :data:`SIGMA_FLOOR`.  Edge weights are
    ``exp(-dist**2 / sigma**2)``, symmetrised by elementwise max.
    Distances are computed exactly in row blocks of ``block`` nodes.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError(f"node matrix must be 2-D, got shape {X.shape}")
    n = X.shape[0]
    if n < 2:
        raise InputError("a graph needs at least two nodes")
    if not 1 <= k < n:
        raise ConfigError(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    nbrs = np.empty((n, k), dtype=np.intp)
    d2 = np.empty((n, k))
    for start in range(0, n, block):
        stop = min(n, start + block)
        dist = cdist(X[start:stop], X, "sqeuclidean")
        dist[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = _knn_select(dist, k)
        nbrs[start:stop] = order
        d2[start:stop] = np.take_along_axis(dist, order, axis=1)
    sigma = max(float(np.median(np.sqrt(d2))), SIGMA_FLOOR)
    w = np.exp(-d2 / sigma**2)
    rows = np.repeat(np.arange(n), k)
    W = sp.csr_matrix((w.ravel(), (rows, nbrs.ravel())), shape=(n, n))
    W = W.maximum(W.T).tocsr()
    W.sort_indices()
    return SparseGraph(W, sigma, k)


def _weights(g) -> sp.csr_matrix:
    return g.weights if isinstance(g, SparseGraph) else sp.csr_matrix(g)


def normalized_laplacian(g) -> sp.csr_matrix:
    """``L = I - D^-1/2 W D^-1/2``."""
    W = _weights(g)
    deg = np.asarray(W.sum(axis=1)).ravel()
    if np.any(deg <= 0):
        raise MagicError("graph has an isolated node; the normalised Laplacian is undefined")
    inv = sp.diags(1.0 / np.sqrt(deg))
    return (sp.identity(W.shape[0], format="csr") - inv @ W @ inv).tocsr()


def renormalized_propagation(g) -> sp.csr_matrix:
    """``D~^-1/2 (I + W) D~^-1/2`` with ``D~`` the row sums of ``I + W``."""
    W = _weights(g)
    wt = (sp.identity(W.shape[0], format="csr") + W).tocsr()
    deg = np.asarray(wt.sum(axis=1)).ravel()
    inv = sp.diags(1.0 / np.sqrt(deg))
    P = (inv @ wt @ inv).tocsr()
    P.sort_indices()
    return P


def export_edges(g: SparseGraph, path) -> int:
    """Write the upper-triangle edge list as CSV ``i,j,weight``; returns the edge count."""
    W = sp.triu(g.weights, k=1).tocoo()
    order = np.lexsort((W.col, W.row))
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["i", "j", "weight"])
        for idx in order:
            out.writerow([int(W.row[idx]), int(W.col[idx]), repr(float(W.data[idx]))])
    return int(order.size)


def degree_histogram(g: SparseGraph) -> dict[int, int]:
    """Map from neighbour count to the number of nodes having it."""
    counts = np.diff(g.weights.indptr)
    values, freq = np.unique(counts, return_counts=True)
    return {int(v): int(f) for v, f in zip(values, freq)}
