"""Fan-beam scan geometry and a distance-driven projector pair.

Images are ``(rows, cols)`` arrays of linear attenuation in 1/mm, row 0 at
the top (largest y).  Sinograms are ``(n_views, n_detectors)`` arrays of
dimensionless line integrals.  The detector is an equiangular arc centred
on the source.

The projector follows the distance-driven scheme: for every view the image
is sliced into lines (rows or columns, whichever is closer to perpendicular
to the central ray), the detector cell boundaries are mapped onto each
line, and the line's piecewise-constant profile is averaged over every
cell footprint.  The transpose reuses exactly the same overlap weights, so
``back_project`` is the adjoint of ``forward_project`` to rounding error.
"""
from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import ConfigError, InputError

__all__ = [
    "ScanGeometry",
    "paper_geometry",
    "desk_geometry",
    "forward_project",
    "back_project",
    "normal_operator_norm",
]


@dataclass(frozen=True)
class ScanGeometry:
    """Fan-beam acquisition and reconstruction grid.

    Lengths are in millimetres, angles in radians.  ``detector_pitch`` is
    the arc length of one detector cell at the detector radius
    ``source_to_center + detector_to_center``.
    """

    source_to_center: float
    detector_to_center: float
    n_detectors: int
    detector_pitch: float
    n_views: int
    image_rows: int
    image_cols: int
    pixel_size: float
    angular_span: float = 2 * math.pi
    start_angle: float = 0.0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("invalid scan geometry: " + "; ".join(problems))

    def problems(self) -> list[str]:
        """Every violated constraint, as human-readable strings."""
        out = []
        for name in ("source_to_center", "detector_to_center", "detector_pitch", "pixel_size"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                out.append(f"{name} must be > 0 (got {value})")
        for name in ("n_detectors", "n_views", "image_rows", "image_cols"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                out.append(f"{name} must be an integer >= 1 (got {value})")
        if not (0 < self.angular_span <= 2 * math.pi + 1e-12):
            out.append(f"angular_span must lie in (0, 2*pi] (got {self.angular_span})")
        if out:
            return out
        half_fan = 0.5 * self.n_detectors * self.fan_angle_step
        if half_fan >= math.pi / 4:
            out.append(
                f"fan half-angle {half_fan:.4f} rad must stay below pi/4 for the distance-driven slicing"
            )
        half_extent = 0.5 * self.pixel_size * max(self.image_rows, self.image_cols)
        if self.source_to_center * math.sqrt(0.5) <= half_extent:
            out.append("source trajectory passes too close to the image grid")
        inscribed = 0.5 * self.pixel_size * min(self.image_rows, self.image_cols)
        if self.fov_radius < inscribed:
            out.append(
                f"field of view radius {self.fov_radius:.2f} mm does not cover the "
                f"inscribed circle of the image grid ({inscribed:.2f} mm)"
            )
        return out

    @property
    def source_to_detector(self) -> float:
        return self.source_to_center + self.detector_to_center

    @property
    def fan_angle_step(self) -> float:
        """Angular width of one detector cell seen from the source."""
        return self.detector_pitch / self.source_to_detector

    @property
    def fov_radius(self) -> float:
        half_fan = 0.5 * self.n_detectors * self.fan_angle_step
        return self.source_to_center * math.sin(half_fan)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_rows, self.image_cols)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_views, self.n_detectors)

    @property
    def view_angles(self) -> np.ndarray:
        step = self.angular_span / self.n_views
        return self.start_angle + step * np.arange(self.n_views)

    @property
    def detector_angles(self) -> np.ndarray:
        """Fan angle of every detector cell centre, relative to the central ray."""
        return (np.arange(self.n_detectors) - 0.5 * (self.n_detectors - 1)) * self.fan_angle_step

    @property
    def boundary_angles(self) -> np.ndarray:
        return (np.arange(self.n_detectors + 1) - 0.5 * self.n_detectors) * self.fan_angle_step

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) coordinates in mm of every pixel centre, each of image shape."""
        m, n = self.image_shape
        y = (0.5 * (m - 1) - np.arange(m)) * self.pixel_size
        x = (np.arange(n) - 0.5 * (n - 1)) * self.pixel_size
        return np.meshgrid(x, y)

    def source_position(self, view: int) -> tuple[float, float]:
        beta = self.view_angles[view]
        return (self.source_to_center * math.cos(beta), self.source_to_center * math.sin(beta))

    def ray_direction(self, view: int, gamma: float) -> tuple[float, float]:
        """Unit vector of the ray leaving the source at fan angle ``gamma``."""
        phi = self.view_angles[view] + math.pi + gamma
        return (math.cos(phi), math.sin(phi))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown geometry keys: {sorted(unknown)}")
        kw = dict(d)
        for name in ("n_detectors", "n_views", "image_rows", "image_cols"):
            if name in kw:
                kw[name] = int(kw[name])
        return cls(**kw)


def paper_geometry() -> ScanGeometry:
    """The 256x256 acquisition used for the clinical simulations."""
    return ScanGeometry(
        source_to_center=250.0,
        detector_to_center=250.0,
        n_detectors=512,
        detector_pitch=0.72,
        n_views=1024,
        image_rows=256,
        image_cols=256,
        pixel_size=0.6641,
    )


def desk_geometry(size: int = 64, n_views: int = 180) -> ScanGeometry:
    """Same physical field of view as :func:`paper_geometry`, coarser sampling.

    Two detector cells per image column, as in the full-size protocol.
    """
    return ScanGeometry(
        source_to_center=250.0,
        detector_to_center=250.0,
        n_detectors=2 * size,
        detector_pitch=0.72 * 512 / (2 * size),
        n_views=n_views,
        image_rows=size,
        image_cols=size,
        pixel_size=0.6641 * 256 / size,
    )


# --------------------------------------------------------------------------
# distance-driven kernels

@numba.njit(cache=True, inline="always")
def _cum_at(cum, r, u, b0, pitch, q):
    pos = (u - b0) / pitch
    if pos <= 0.0:
        return 0.0
    if pos >= q:
        return cum[r, q]
    i = int(pos)
    t = pos - i
    return cum[r, i] + t * (cum[r, i + 1] - cum[r, i])


@numba.njit(cache=True, inline="always")
def _scatter_at(dcum, r, u, w, b0, pitch, q):
    pos = (u - b0) / pitch
    if pos <= 0.0:
        return
    if pos >= q:
        dcum[r, q] += w
        return
    i = int(pos)
    t = pos - i
    dcum[r, i] += w * (1.0 - t)
    dcum[r, i + 1] += w * t


@numba.njit(cache=True)
def _dd_forward(lines, centers, b0, pitch, s_ln, s_al, ratio, weight, out):
    n_lines, q = lines.shape
    n_views, n_det = weight.shape
    cum = np.zeros((n_lines, q + 1))
    for r in range(n_lines):
        acc = 0.0
        for j in range(q):
            acc += lines[r, j] * pitch
            cum[r, j + 1] = acc
    for v in range(n_views):
        for r in range(n_lines):
            dist = centers[r] - s_ln[v]
            u_prev = s_al[v] + dist * ratio[v, 0]
            f_prev = _cum_at(cum, r, u_prev, b0, pitch, q)
            for k in range(n_det):
                u = s_al[v] + dist * ratio[v, k + 1]
                f = _cum_at(cum, r, u, b0, pitch, q)
                out[v, k] += (f - f_prev) / (u - u_prev) * weight[v, k]
                u_prev = u
                f_prev = f


@numba.njit(cache=True)
def _dd_adjoint(sino, centers, b0, pitch, s_ln, s_al, ratio, weight, n_lines, q):
    n_views, n_det = weight.shape
    dcum = np.zeros((n_lines, q + 1))
    u = np.empty(n_det + 1)
    for v in range(n_views):
        for r in range(n_lines):
            dist = centers[r] - s_ln[v]
            for k in range(n_det + 1):
                u[k] = s_al[v] + dist * ratio[v, k]
            # boundary k receives +h[k-1] and -h[k]
            h_prev = 0.0
            for k in range(n_det + 1):
                if k < n_det:
                    h = sino[v, k] * weight[v, k] / (u[k + 1] - u[k])
                else:
                    h = 0.0
                _scatter_at(dcum, r, u[k], h_prev - h, b0, pitch, q)
                h_prev = h
    grad = np.empty((n_lines, q))
    for r in range(n_lines):
        acc = 0.0
        for j in range(q - 1, -1, -1):
            acc += dcum[r, j + 1]
            grad[r, j] = acc * pitch
    return grad


@dataclass(frozen=True)
class _Group:
    views: np.ndarray        # sinogram rows handled by this slicing
    by_rows: bool            # slice along image rows (else columns)
    centers: np.ndarray      # line positions along the slicing axis
    b0: float                # first pixel boundary along the line
    s_ln: np.ndarray
    s_al: np.ndarray
    ratio: np.ndarray        # (views, n_det + 1) along/line direction ratios
    weight: np.ndarray       # (views, n_det) path length through one line

    def lines(self, img):
        if self.by_rows:
            return np.ascontiguousarray(img)
        return np.ascontiguousarray(img[::-1, :].T)

    def unlines(self, grad):
        if self.by_rows:
            return grad
        return grad.T[::-1, :]


@functools.lru_cache(maxsize=16)
def _groups(geom: ScanGeometry) -> tuple[_Group, ...]:
    m, n = geom.image_shape
    p = geom.pixel_size
    beta = geom.view_angles
    sx = geom.source_to_center * np.cos(beta)
    sy = geom.source_to_center * np.sin(beta)
    phi_b = beta[:, None] + np.pi + geom.boundary_angles[None, :]
    phi_c = beta[:, None] + np.pi + geom.detector_angles[None, :]
    by_rows = np.abs(np.sin(beta)) >= np.abs(np.cos(beta))
    groups = []
    for rows in (True, False):
        views = np.flatnonzero(by_rows == rows)
        if views.size == 0:
            continue
        if rows:
            centers = (0.5 * (m - 1) - np.arange(m)) * p
            b0 = -0.5 * n * p
            s_ln, s_al = sy[views], sx[views]
            ratio = np.cos(phi_b[views]) / np.sin(phi_b[views])
            weight = p / np.abs(np.sin(phi_c[views]))
        else:
            centers = (np.arange(n) - 0.5 * (n - 1)) * p
            b0 = -0.5 * m * p
            s_ln, s_al = sx[views], sy[views]
            ratio = np.sin(phi_b[views]) / np.cos(phi_b[views])
            weight = p / np.abs(np.cos(phi_c[views]))
        groups.append(_Group(views, rows, centers, b0, s_ln, s_al, ratio, weight))
    return tuple(groups)


def _as_float_array(a, shape, what):
    a = np.asarray(a, dtype=np.float64)
    if a.shape != tuple(shape):
        raise ConfigError(f"{what} has shape {a.shape}, geometry expects {tuple(shape)}")
    if not np.isfinite(a).all():
        raise InputError(f"{what} contains non-finite values")
    return a


def forward_project(img, geom: ScanGeometry) -> np.ndarray:
    """Apply the system operator: image (1/mm) -> sinogram of line integrals."""
    img = _as_float_array(img, geom.image_shape, "image")
    sino = np.zeros(geom.sino_shape)
    p = geom.pixel_size
    for g in _groups(geom):
        out = np.zeros((g.views.size, geom.n_detectors))
        _dd_forward(g.lines(img), g.centers, g.b0, p, g.s_ln, g.s_al, g.ratio, g.weight, out)
        sino[g.views] = out
    return sino


def back_project(sino, geom: ScanGeometry) -> np.ndarray:
    """Apply the transpose of :func:`forward_project`."""
    sino = _as_float_array(sino, geom.sino_shape, "sinogram")
    img = np.zeros(geom.image_shape)
    p = geom.pixel_size
    m, n = geom.image_shape
    for g in _groups(geom):
        n_lines, q = (m, n) if g.by_rows else (n, m)
        part = np.ascontiguousarray(sino[g.views])
        grad = _dd_adjoint(part, g.centers, g.b0, p, g.s_ln, g.s_al, g.ratio, g.weight, n_lines, q)
        img += g.unlines(grad)
    return img


@functools.lru_cache(maxsize=16)
def normal_operator_norm(geom: ScanGeometry, n_iter: int = 30, tol: float = 1e-6) -> float:
    """Power-iteration estimate of the largest eigenvalue of A^T A."""
    rng = np.random.default_rng(0)
    v = rng.random(geom.image_shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_iter):
        w = back_project(forward_project(v, geom), geom)
        new = float(np.vdot(v, w))
        v = w / np.linalg.norm(w)
        if abs(new - lam) <= tol * abs(new):
            lam = new
            break
        lam = new
    return lam

