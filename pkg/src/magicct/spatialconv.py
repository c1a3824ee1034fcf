"""Same-size 2-D convolution and the three-layer CNN module of each block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .graphconv import activation

__all__ = [
    "SpatialKernels",
    "conv2d",
    "conv2d_backward",
    "cnn_module_phi",
    "phi_forward",
    "phi_backward",
]


@dataclass
class SpatialKernels:
    w1: np.ndarray  # (c, 1, 3, 3)
    w2: np.ndarray  # (c, c, 3, 3)
    w3: np.ndarray  # (1, c, 3, 3)

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.w3 = np.asarray(self.w3, dtype=np.float64)
        c = self.w1.shape[0]
        k = self.w1.shape[-1]
        ok = (
            c >= 1 and k % 2 == 1
            and self.w1.shape == (c, 1, k, k)
            and self.w2.shape == (c, c, k, k)
            and self.w3.shape == (1, c, k, k)
        )
        if not ok:
            raise InputError(
                f"inconsistent spatial kernels {self.w1.shape}, {self.w2.shape}, {self.w3.shape}"
            )

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, size: int = 3) -> "SpatialKernels":
        def uniform(shape):
            bound = 1.0 / np.sqrt(shape[1] * shape[2] * shape[3])
            return rng.uniform(-bound, bound, shape)

        return cls(
            uniform((channels, 1, size, size)),
            uniform((channels, channels, size, size)),
            uniform((1, channels, size, size)),
        )


def _padded_flat(x, ph, pw):
    """Zero-pad ``x`` and flatten each channel, with ``ph`` spare rows at the end.

    In this layout the input window for kernel offset ``(a, b)`` is the
    contiguous slice starting at ``a * (n + 2 pw) + b``, so every offset is a
    plain matrix product without copying.
    """
    c, m, n = x.shape
    width = n + 2 * pw
    xp = np.zeros((c, m + 2 * ph + 1, width))
    xp[:, ph:ph + m, pw:pw + n] = x
    return xp.reshape(c, -1), width


def _check(x, w):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise InputError(f"conv2d shape mismatch: input {x.shape}, kernels {w.shape}")
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise InputError("kernel sides must be odd for same-size output")
    return x, w


def conv2d(x, w) -> np.ndarray:
    """Cross-correlate a ``(C_in, m, n)`` stack with ``(C_out, C_in, k, k)`` kernels.

    Zero padding keeps the output at ``(C_out, m, n)``.
    """
    x, w = _check(x, w)
    _, m, n = x.shape
    c_out, _, kh, kw = w.shape
    flat, width = _padded_flat(x, kh // 2, kw // 2)
    length = m * width
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    out = np.zeros((c_out, length))
    for a in range(kh):
        for b in range(kw):
            off = a * width + b
            out += taps[a, b] @ flat[:, off:off + length]
    return out.reshape(c_out, m, width)[:, :, :n].copy()


def conv2d_backward(x, w, gout):
    """Gradients of ``sum(gout * conv2d(x, w))`` with respect to ``x`` and ``w``."""
    x, w = _check(x, w)
    _, m, n = x.shape
    c_out, c_in, kh, kw = w.shape
    flat, width = _padded_flat(x, kh // 2, kw // 2)
    length = m * width
    g = np.zeros((c_out, m, width))
    g[:, :, :n] = gout
    g = g.reshape(c_out, length)
    gw = np.empty((kh, kw, c_out, c_in))
    for a in range(kh):
        for b in range(kw):
            off = a * width + b
            gw[a, b] = g @ flat[:, off:off + length].T
    gw = gw.transpose(2, 3, 0, 1).copy()
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = conv2d(gout, flipped)
    return gx, gw


def phi_forward(x, kernels: SpatialKernels, act: str = "relu"):
    """Evaluate the CNN module; returns ``(output image, cache)``."""
    fn, _ = activation(act)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InputError(f"expected a 2-D image, got {x.shape}")
    x0 = x[None]
    h1 = conv2d(x0, kernels.w1)
    a1 = fn(h1)
    h2 = conv2d(a1, kernels.w2)
    a2 = fn(h2)
    out = conv2d(a2, kernels.w3)[0]
    return out, (x0, h1, a1, h2, a2)


def phi_backward(cache, kernels: SpatialKernels, gout, act: str = "relu"):
    """Reverse pass of :func:`phi_forward`; returns ``(gx, (gw1, gw2, gw3))``."""
    _, dfn = activation(act)
    x0, h1, a1, h2, a2 = cache
    ga2, gw3 = conv2d_backward(a2, kernels.w3, gout[None])
    gh2 = ga2 * dfn(h2)
    ga1, gw2 = conv2d_backward(a1, kernels.w2, gh2)
    gh1 = ga1 * dfn(h1)
    gx, gw1 = conv2d_backward(x0, kernels.w1, gh1)
    return gx[0], (gw1, gw2, gw3)


def cnn_module_phi(x, kernels: SpatialKernels, act: str = "relu") -> np.ndarray:
    """``w3 * act(w2 * act(w1 * x))`` with no outer activation."""
    return phi_forward(x, kernels, act)[0]
