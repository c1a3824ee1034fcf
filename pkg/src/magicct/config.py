"""Experiment configuration: TOML file, presets, ``key=value`` overrides and validation.

A configuration is a flat mapping of dotted keys (``network.n_blocks``)
backed by :data:`SCHEMA`.  Files use ordinary TOML tables::

    preset = "desk"
    seed = 0

    [network]
    n_blocks = 6
    n_coarse = 3

Every key missing from the file and the overrides is filled from the
preset and reported as an applied default.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import toml

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .geometry import ScanGeometry, desk_geometry, paper_geometry
from .noise import DOSE_PRESETS

__all__ = [
    "SCHEMA", "PRESETS", "SWEEPABLE", "Config", "load_config", "parse_override", "validate",
    "validate_config", "describe_defaults",
]

_NUM = (int, float)
_OPTIONAL = object()  # default marker: key may stay unset

# key -> (accepted types, desk default, help)
SCHEMA: dict[str, tuple] = {
    "preset": (str, "desk", "base preset: desk or paper"),
    "seed": (int, 0, "master seed for phantoms, noise, init and sample order"),
    "geometry.kind": (str, "desk", "desk (scaled by size/n_views) or paper"),
    "geometry.size": (int, 64, "image side in pixels for the desk geometry"),
    "geometry.n_views": (int, 180, "projection views for the desk geometry"),
    "geometry.source_to_center": (_NUM, _OPTIONAL, "mm"),
    "geometry.detector_to_center": (_NUM, _OPTIONAL, "mm"),
    "geometry.n_detectors": (int, _OPTIONAL, "detector cells"),
    "geometry.detector_pitch": (_NUM, _OPTIONAL, "mm at the detector arc"),
    "geometry.pixel_size": (_NUM, _OPTIONAL, "mm"),
    "geometry.angular_span": (_NUM, _OPTIONAL, "radians"),
    "data.phantom": (str, "random-ellipses", "shepp-logan, random-ellipses or images"),
    "data.image_dir": (str, "", "directory of raw images used when phantom = 'images'"),
    "data.n_images": (int, 25, "phantoms to generate"),
    "data.train_fraction": (_NUM, 0.8, "fraction of images used for training"),
    "data.labeled_fraction": (_NUM, 1.0, "fraction of training images with labels"),
    "data.attenuation_scale": (_NUM, 0.04, "1/mm per unit phantom value"),
    "data.hu_calibration": (list, _OPTIONAL, "[slope, intercept] mapping attenuation to HU"),
    "dose.tiers": (list, ["10%"], "dose presets (e.g. '10%') or incident photon counts"),
    "dose.train_tier": (str, "10%", "tier used for training and evaluation"),
    "dose.electronic_variance": (_NUM, 10.0, "electronic noise variance in counts^2"),
    "fbp.filter": (str, "ramp", "ramp or hann"),
    "network.n_blocks": (int, 6, "unrolled blocks N_t"),
    "network.n_coarse": (int, 3, "blocks on the coarse graph N_c"),
    "network.channels": (int, 48, "CNN channel width"),
    "network.graph_width": (int, 64, "GCN hidden width F"),
    "network.patch_size": (int, 6, "patch side"),
    "network.patch_step": (int, 2, "patch stride"),
    "network.k": (int, 8, "graph neighbours per node"),
    "network.activation": (str, "relu", "relu or leaky_relu"),
    "network.use_graph": (bool, True, "false gives the LEARN baseline"),
    "training.epochs": (int, 100, "passes over the training set"),
    "training.max_steps": (int, 2000, "optimizer step cap, 0 for none"),
    "training.lr": (_NUM, 1e-4, "Adam learning rate"),
    "training.batch_size": (int, 1, "samples per step"),
    "training.loss": (str, "mse", "mse (supervised) or semi"),
    "training.proj_weight": (_NUM, 1.0, "weight of the projection term in the semi loss"),
    "training.clip_norm": (_NUM, 10.0, "global gradient-norm clip, 0 to disable"),
    "training.graph_lr_scale": (_NUM, 0.1, "learning-rate multiplier for the graph kernels"),
    "evaluate.peak": (_NUM, _OPTIONAL, "PSNR peak / SSIM range; default is the reference range"),
    "evaluate.rois": (list, _OPTIONAL, "ROIs as [row, col, height, width]; default is a central square"),
    "evaluate.window": (list, [-160.0, 240.0], "display window for difference images"),
    "sweep.parameter": (str, "patch_size", "n_blocks, patch_size, graph_width or labeled_fraction"),
    "sweep.values": (list, [4, 5, 6, 7, 8, 9, 10], "values to sweep"),
}

PRESETS = {
    "desk": {},
    "paper": {
        "geometry.kind": "paper",
        "data.n_images": 500,
        "network.n_blocks": 50,
        "network.n_coarse": 25,
        "training.max_steps": 0,
    },
}

SWEEPABLE = {
    "n_blocks": "network.n_blocks",
    "patch_size": "network.patch_size",
    "graph_width": "network.graph_width",
    "labeled_fraction": "data.labeled_fraction",
}


@dataclass
class Config:
    values: dict
    defaults: list[str] = field(default_factory=list)
    source: str = "<defaults>"

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def with_overrides(self, **updates) -> "Config":
        values = dict(self.values)
        for key, value in updates.items():
            values[key.replace("__", ".")] = value
        return Config(values, list(self.defaults), self.source)

    def nested(self) -> dict:
        out: dict = {}
        for key in sorted(self.values):
            *parents, leaf = key.split(".")
            node = out
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = self.values[key]
        return out

    def to_toml(self) -> str:
        return toml.dumps(self.nested())

    def rois(self) -> list[list[int]]:
        """Configured ROIs, or one central square an eighth of the image side."""
        if self.get("evaluate.rois") is not None:
            return self["evaluate.rois"]
        m, n = self.geometry().image_shape
        side = max(1, min(m, n) // 8)
        return [[(m - side) // 2, (n - side) // 2, side, side]]

    # ------------------------------------------------------------------
    def geometry(self) -> ScanGeometry:
        kind = self["geometry.kind"]
        base = paper_geometry() if kind == "paper" else desk_geometry(self["geometry.size"], self["geometry.n_views"])
        d = base.to_dict()
        for name in ("source_to_center", "detector_to_center", "n_detectors", "detector_pitch",
                     "pixel_size", "angular_span"):
            v = self.get(f"geometry.{name}")
            if v is not None:
                d[name] = v
        return ScanGeometry.from_dict(d)


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def parse_override(text: str) -> tuple[str, object]:
    """``"a.b=3"`` -> ``("a.b", 3)``; values are TOML literals, bare words are strings."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    raw = raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def _typecheck(key, value, types):
    if types is bool:
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    return isinstance(value, types)


def validate(values: dict) -> list[str]:
    """All schema and consistency violations (empty when valid)."""
    problems = []
    mistyped = set()
    for key, value in values.items():
        if key not in SCHEMA:
            problems.append(f"{key}: unknown key")
            continue
        types = SCHEMA[key][0]
        if value is not None and not _typecheck(key, value, types):
            problems.append(f"{key}: expected {getattr(types, '__name__', 'number')}, got {value!r}")
            mistyped.add(key)
    # keep checking the well-typed keys, with stand-ins for the broken ones
    preset = values.get("preset") if "preset" not in mistyped else None
    v, _ = _resolve({k: x for k, x in values.items()
                     if k in SCHEMA and k not in mistyped and (k != "preset" or x in PRESETS)})
    if preset is not None:
        v["preset"] = preset

    def bad(key, msg):
        if key not in mistyped:
            problems.append(f"{key}: {msg}")

    if v["preset"] not in PRESETS:
        bad("preset", f"must be one of {sorted(PRESETS)}")
    if v["geometry.kind"] not in ("desk", "paper"):
        bad("geometry.kind", "must be 'desk' or 'paper'")
    if v["geometry.size"] < 16:
        bad("geometry.size", "must be >= 16")
    if v["geometry.n_views"] < 1:
        bad("geometry.n_views", "must be >= 1")
    geom = None
    if not any(p.startswith("geometry") for p in problems):
        try:
            geom = Config(dict(v)).geometry()
        except ConfigError as exc:
            bad("geometry", f"invalid scan geometry ({exc})")
    if v["data.phantom"] not in ("shepp-logan", "random-ellipses", "images"):
        bad("data.phantom", "must be shepp-logan, random-ellipses or images")
    if v["data.phantom"] == "images" and not v["data.image_dir"]:
        bad("data.image_dir", "required when data.phantom = 'images'")
    if v["data.n_images"] < 1:
        bad("data.n_images", "must be >= 1")
    for key in ("data.train_fraction", "data.labeled_fraction"):
        if not 0 <= v[key] <= 1:
            bad(key, "must lie in [0, 1]")
    if not v["data.attenuation_scale"] > 0:
        bad("data.attenuation_scale", "must be > 0")
    cal = v.get("data.hu_calibration")
    if cal is not None and (len(cal) != 2 or not all(_typecheck("", c, _NUM) for c in cal)):
        bad("data.hu_calibration", "must be [slope, intercept]")
    tiers = v["dose.tiers"]
    if not tiers:
        bad("dose.tiers", "at least one dose tier is required")
    for t in tiers:
        if isinstance(t, str):
            if t not in DOSE_PRESETS:
                bad("dose.tiers", f"unknown dose preset {t!r}; known: {sorted(DOSE_PRESETS)}")
        elif not (_typecheck("", t, _NUM) and t > 0):
            bad("dose.tiers", f"incident photon count must be > 0, got {t!r}")
    if v["dose.train_tier"] not in [str(t) for t in tiers]:
        bad("dose.train_tier", "must be one of dose.tiers")
    if not v["dose.electronic_variance"] >= 0:
        bad("dose.electronic_variance", "must be >= 0")
    if v["fbp.filter"] not in ("ramp", "hann"):
        bad("fbp.filter", "must be ramp or hann")
    nt, nc = v["network.n_blocks"], v["network.n_coarse"]
    if nt < 1:
        bad("network.n_blocks", "must be >= 1")
    if not 1 <= nc <= nt:
        bad("network.n_coarse", f"stage split needs 1 <= N_c <= N_t (N_c={nc}, N_t={nt})")
    for key in ("network.channels", "network.graph_width", "network.patch_size", "network.patch_step",
                "network.k"):
        if v[key] < 1:
            bad(key, "must be >= 1")
    size, step = v["network.patch_size"], v["network.patch_step"]
    if step > size:
        bad("network.patch_step", f"step {step} exceeds patch size {size}; patches must overlap "
                                  "(step <= patch size)")
    if geom is not None:
        m, n = geom.image_shape
        if size > min(m, n):
            bad("network.patch_size", f"patch size {size} exceeds the {m}x{n} image")
        elif 1 <= step <= size:
            nodes = (len(range(0, m - size + 1, step)) + ((m - size) % step != 0)) * \
                    (len(range(0, n - size + 1, step)) + ((n - size) % step != 0))
            if v["network.k"] >= nodes:
                bad("network.k", f"must be smaller than the number of patch nodes ({nodes})")
    if v["network.activation"] not in ("relu", "leaky_relu"):
        bad("network.activation", "must be relu or leaky_relu")
    if v["training.epochs"] < 1:
        bad("training.epochs", "must be >= 1")
    if v["training.max_steps"] < 0:
        bad("training.max_steps", "must be >= 0")
    if not v["training.lr"] >= 0:
        bad("training.lr", "must be >= 0")
    if v["training.batch_size"] < 1:
        bad("training.batch_size", "must be >= 1")
    if v["training.loss"] not in ("mse", "semi"):
        bad("training.loss", "must be mse or semi")
    if not v["training.proj_weight"] >= 0:
        bad("training.proj_weight", "must be >= 0")
    if not v["training.graph_lr_scale"] >= 0:
        bad("training.graph_lr_scale", "must be >= 0")
    if not v["training.clip_norm"] >= 0:
        bad("training.clip_norm", "must be >= 0")
    peak = v.get("evaluate.peak")
    if peak is not None and not peak > 0:
        bad("evaluate.peak", "must be > 0")
    for roi in v["evaluate.rois"] or []:
        ok = isinstance(roi, list) and len(roi) == 4 and all(isinstance(r, int) for r in roi)
        if not ok or roi[2] < 1 or roi[3] < 1:
            bad("evaluate.rois", f"each roi must be [row, col, height, width] with positive size, got {roi!r}")
        elif geom is not None and (roi[0] < 0 or roi[1] < 0 or roi[0] + roi[2] > geom.image_rows
                                   or roi[1] + roi[3] > geom.image_cols):
            bad("evaluate.rois", f"roi {roi} lies outside the image")
    win = v["evaluate.window"]
    if len(win) != 2 or not all(_typecheck("", w, _NUM) for w in win) or not win[1] > win[0]:
        bad("evaluate.window", "must be [low, high] with high > low")
    if v["sweep.parameter"] not in SWEEPABLE:
        bad("sweep.parameter", f"must be one of {sorted(SWEEPABLE)}")
    if not v["sweep.values"]:
        bad("sweep.values", "at least one value is required")
    return problems


def _resolve(explicit: dict) -> tuple[dict, list[str]]:
    preset = explicit.get("preset", SCHEMA["preset"][1])
    base = {k: spec[1] for k, spec in SCHEMA.items() if spec[1] is not _OPTIONAL}
    base.update(PRESETS.get(preset, {}))
    values = dict(base)
    values.update(explicit)
    for key, spec in SCHEMA.items():
        if spec[1] is _OPTIONAL:
            values.setdefault(key, None)
    defaults = sorted(k for k in base if k not in explicit)
    return values, defaults


def load_config(path=None, overrides=(), seed: int | None = None) -> Config:
    """Read, merge and validate a configuration.

    Raises
    ------
    ConfigError
        Listing every violation, one per line.
    """
    explicit: dict = {}
    source = "<defaults>"
    if path is not None:
        source = str(path)
        text = Path(path).read_text()
        if not text.strip():
            raise ConfigError(f"{path}: configuration file is empty")
        try:
            explicit = _flatten(tomllib.loads(text))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: TOML parse error: {exc}") from None
    for item in overrides:
        key, value = parse_override(item)
        explicit[key] = value
    if seed is not None:
        explicit["seed"] = seed
    # allow integers where a float is expected, but keep the declared float type in the echo
    for key, value in list(explicit.items()):
        spec = SCHEMA.get(key)
        if spec and spec[0] is _NUM and isinstance(value, int) and not isinstance(value, bool):
            if isinstance(spec[1], float):
                explicit[key] = float(value)
    values, defaults = _resolve(explicit)
    problems = validate(values)
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return Config(values, defaults, source)


def validate_config(path=None, overrides=()) -> tuple[bool, list[str]]:
    """Report lines for the ``validate`` command: applied defaults or every violation."""
    try:
        cfg = load_config(path, overrides)
    except ConfigError as exc:
        return False, str(exc).splitlines()
    lines = describe_defaults(cfg)
    lines.append(f"ok: {cfg.source} is valid")
    return True, lines


def describe_defaults(cfg: Config) -> list[str]:
    return [f"default {k} = {cfg[k]!r}" for k in cfg.defaults]
