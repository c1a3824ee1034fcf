"""Phantoms, the raw image format, PNG export and dataset splits.

Raw files are a short ASCII header followed by little-endian float32 or
float64 pixels in row-major order::

    MAGICRAW 1
    dims 64 64
    dtype float32
    pixel_size 2.656
    dose 10%
    end
    <rows * cols * itemsize bytes>

Header lines are ``key value...``; ``dims`` is mandatory, ``dtype``
defaults to float32 and other keys are kept as strings.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError

__all__ = [
    "PHANTOM_KINDS",
    "SHEPP_LOGAN",
    "make_phantom",
    "shepp_logan",
    "random_ellipses",
    "ellipse_image",
    "write_raw",
    "read_raw",
    "load_image",
    "save_image",
    "to_display",
    "save_png",
    "Dataset",
    "split_dataset",
    "save_manifest",
    "load_manifest",
]

MAGIC = b"MAGICRAW 1\n"
MAX_HEADER = 4096
DTYPES = {"float32": "<f4", "float64": "<f8"}

# (intensity, semi-axis a, semi-axis b, centre x, centre y, rotation in degrees)
# with the higher-contrast intensities commonly used for display.
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)

PHANTOM_KINDS = ("shepp-logan", "random-ellipses")


def _unit_grid(rows, cols):
    """Pixel-centre coordinates on [-1, 1]^2, y pointing up (row 0 at the top)."""
    x = (2.0 * np.arange(cols) + 1.0) / cols - 1.0
    y = 1.0 - (2.0 * np.arange(rows) + 1.0) / rows
    return np.meshgrid(x, y)


def ellipse_image(ellipses, rows: int, cols: int | None = None) -> np.ndarray:
    """Sum of constant-intensity ellipses sampled at pixel centres.

    Parameters
    ----------
    ellipses : iterable of (value, a, b, x0, y0, phi_deg)
    """
    cols = rows if cols is None else cols
    if rows < 1 or cols < 1:
        raise ConfigError("phantom size must be positive")
    X, Y = _unit_grid(rows, cols)
    img = np.zeros((rows, cols))
    for value, a, b, x0, y0, phi in ellipses:
        t = math.radians(phi)
        c, s = math.cos(t), math.sin(t)
        u = (X - x0) * c + (Y - y0) * s
        v = -(X - x0) * s + (Y - y0) * c
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    return img


def shepp_logan(rows: int, cols: int | None = None) -> np.ndarray:
    return np.clip(ellipse_image(SHEPP_LOGAN, rows, cols), 0.0, 1.0)


def random_ellipses(rows: int, cols: int | None, rng: np.random.Generator,
                    n_ellipses: tuple[int, int] = (5, 12)) -> np.ndarray:
    """Body ellipse plus random inner structures, clamped to [0, 1].

    The total ellipse count (body included) is drawn uniformly from the
    inclusive range ``n_ellipses``.
    """
    lo, hi = n_ellipses
    count = int(rng.integers(lo, hi + 1))
    body = (0.5, rng.uniform(0.75, 0.9), rng.uniform(0.7, 0.88), 0.0, 0.0, rng.uniform(-15, 15))
    shapes = [body]
    for _ in range(count - 1):
        r = 0.55 * math.sqrt(rng.uniform())
        t = rng.uniform(0, 2 * math.pi)
        shapes.append((
            rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.5),
            rng.uniform(0.04, 0.25),
            rng.uniform(0.04, 0.25),
            r * math.cos(t),
            r * math.sin(t),
            rng.uniform(0, 180),
        ))
    return np.clip(ellipse_image(shapes, rows, cols), 0.0, 1.0)


def make_phantom(kind: str, m: int, n: int | None = None, seed: int = 0) -> np.ndarray:
    """``m x n`` phantom (square when ``n`` is omitted) with values in [0, 1]."""
    n = m if n is None else n
    if m < 16 or n < 16:
        raise ConfigError(f"phantoms need at least 16 x 16 pixels, got {m} x {n}")
    if kind == "shepp-logan":
        return shepp_logan(m, n)
    if kind == "random-ellipses":
        return random_ellipses(m, n, np.random.default_rng(seed))
    raise ConfigError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")


def write_raw(path, img, dtype: str = "float32", **tags) -> None:
    """Write ``img`` with a header; ``tags`` become extra header lines."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise InputError(f"raw images are 2-D, got shape {img.shape}")
    if dtype not in DTYPES:
        raise InputError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    lines = [f"dims {img.shape[0]} {img.shape[1]}", f"dtype {dtype}"]
    for key, value in tags.items():
        if value is None:
            continue
        text = str(value)
        if not key.isidentifier() or "\n" in text:
            raise InputError(f"header tag {key!r} is not representable")
        lines.append(f"{key} {text}")
    header = MAGIC + ("\n".join(lines) + "\nend\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(img, dtype=DTYPES[dtype]).tobytes())


def read_raw(path):
    """Read a raw image; returns ``(array, header dict)``.

    Raises :class:`FormatError` with the byte offset of the first problem.
    """
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        n = next((i for i, (a, b) in enumerate(zip(data, MAGIC)) if a != b), min(len(data), len(MAGIC)))
        raise FormatError("not a MAGICRAW file (bad signature)", n)
    pos = len(MAGIC)
    meta: dict[str, str] = {}
    while True:
        nl = data.find(b"\n", pos, pos + MAX_HEADER)
        if nl < 0:
            raise FormatError("unterminated header line", pos)
        try:
            line = data[pos:nl].decode("ascii")
        except UnicodeDecodeError:
            raise FormatError("non-ASCII header line", pos) from None
        if line == "end":
            pos = nl + 1
            break
        key, _, value = line.partition(" ")
        if not key or not value:
            raise FormatError(f"malformed header line {line!r}", pos)
        if key in meta:
            raise FormatError(f"duplicate header key {key!r}", pos)
        if key == "dims":
            parts = value.split()
            if len(parts) != 2 or not all(p.isdigit() and int(p) > 0 for p in parts):
                raise FormatError(f"dims must be two positive integers, got {value!r}", pos)
        if key == "dtype" and value not in DTYPES:
            raise FormatError(f"unsupported dtype {value!r}", pos)
        meta[key] = value
        pos = nl + 1
    if "dims" not in meta:
        raise FormatError("header has no dims line", pos)
    rows, cols = (int(p) for p in meta["dims"].split())
    dtype = np.dtype(DTYPES[meta.get("dtype", "float32")])
    expected = rows * cols * dtype.itemsize
    if len(data) - pos != expected:
        raise FormatError(f"expected {expected} payload bytes, found {len(data) - pos}", pos)
    img = np.frombuffer(data, dtype=dtype, count=rows * cols, offset=pos).reshape(rows, cols)
    return img.astype(dtype.newbyteorder("=")), meta


def load_image(path) -> np.ndarray:
    return read_raw(path)[0]


def save_image(path, img, pixel_size: float | None = None, dose: str | None = None,
               dtype: str = "float32", **tags) -> None:
    write_raw(path, img, dtype=dtype, pixel_size=pixel_size, dose=dose, **tags)


def to_display(img, window=(-160.0, 240.0), calibration=None) -> np.ndarray:
    """Map values through ``slope * v + intercept`` (if given) and a display window to uint8."""
    lo, hi = window
    if not hi > lo:
        raise ConfigError(f"window upper bound must exceed lower bound, got {window}")
    v = np.asarray(img, dtype=np.float64)
    if calibration is not None:
        slope, intercept = calibration
        v = slope * v + intercept
    scaled = (np.clip(v, lo, hi) - lo) / (hi - lo) * 255.0
    return np.round(scaled).astype(np.uint8)


def save_png(path, img, window=(-160.0, 240.0), calibration=None) -> None:
    from PIL import Image

    Image.fromarray(to_display(img, window, calibration), mode="L").save(path)


@dataclass
class Dataset:
    """Shuffled train/test partition with labelled flags on the training items."""

    ids: list[str]
    train: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    labeled: set[str] = field(default_factory=set)

    def entries(self) -> list[dict]:
        out = []
        for i in self.train:
            out.append({"id": i, "split": "train", "labeled": i in self.labeled})
        for i in self.test:
            out.append({"id": i, "split": "test", "labeled": False})
        return out


def split_dataset(ids, train_fraction: float = 0.8, labeled_fraction: float = 1.0, seed: int = 0) -> Dataset:
    """Seeded split; the first ``ceil(labeled_fraction * |train|)`` training items are labelled."""
    ids = [str(i) for i in ids]
    if not ids:
        raise InputError("cannot split an empty dataset")
    if len(set(ids)) != len(ids):
        raise InputError("dataset ids must be unique")
    if not 0 <= train_fraction <= 1:
        raise ConfigError(f"train fraction must be in [0, 1], got {train_fraction}")
    if not 0 <= labeled_fraction <= 1:
        raise ConfigError(f"labeled fraction must be in [0, 1], got {labeled_fraction}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(math.floor(train_fraction * len(ids) + 0.5))
    train, test = shuffled[:n_train], shuffled[n_train:]
    # a small tolerance keeps e.g. 0.3 * 10 from rounding up to 4
    n_lab = int(math.ceil(labeled_fraction * len(train) - 1e-9))
    return Dataset(ids, train, test, set(train[:n_lab]))


def save_manifest(path, dataset: Dataset, paths: dict[str, str] | None = None, extra: dict | None = None) -> None:
    entries = dataset.entries()
    for e in entries:
        if paths is not None:
            e["path"] = paths[e["id"]]
    doc = {"entries": entries}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path):
    """Returns ``(Dataset, entries, document)``."""
    try:
        doc = json.loads(Path(path).read_text())
        entries = doc["entries"]
        ids = [e["id"] for e in entries]
        train = [e["id"] for e in entries if e["split"] == "train"]
        test = [e["id"] for e in entries if e["split"] == "test"]
        labeled = {e["id"] for e in entries if e.get("labeled")}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid manifest {path}: {exc}", 0) from None
    return Dataset(ids, train, test, labeled), entries, doc
