"""End-to-end pipelines: simulate a dataset, train, evaluate, compare and sweep.

Everything a pipeline needs comes from a :class:`~magicct.config.Config`;
results land in a run directory.  The simulated dataset layout is::

    data/manifest.json
    data/<id>_gt.raw                 ground truth (attenuation, 1/mm)
    data/<id>_<tier>_sino.raw        noisy sinogram
    data/<id>_<tier>_fbp.raw         FBP of the noisy sinogram
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SWEEPABLE, Config
from .data import load_image, load_manifest, make_phantom, save_image, save_manifest, save_png, split_dataset
from .errors import ConfigError, InputError
from .fbp import fbp_reconstruct
from .geometry import ScanGeometry, forward_project
from .metrics import format_psnr, psnr, roi_stats, ssim
from .noise import DOSE_PRESETS, DoseModel, simulate_lowdose
from .training import Sample, TrainConfig, train
from .unrolled import MagicNetwork, PatchConfig, load_checkpoint, reconstruct, save_checkpoint

__all__ = [
    "Item",
    "tier_tag",
    "simulate_dataset",
    "load_items",
    "build_network",
    "train_from_config",
    "evaluate_methods",
    "write_metrics",
    "summarize",
    "compare",
    "sweep",
    "reconstruct_file",
]

log = logging.getLogger(__name__)


def tier_tag(tier) -> str:
    """File-name safe tag: ``"10%"`` -> ``"10pct"``, ``25000`` -> ``"I25000"``."""
    if isinstance(tier, str):
        return tier.replace("%", "pct").replace(".", "p")
    return f"I{tier:g}"


def _photons(tier) -> float:
    return DOSE_PRESETS[tier] if isinstance(tier, str) else float(tier)


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _ground_truths(cfg: Config, geom: ScanGeometry) -> list[np.ndarray]:
    kind = cfg["data.phantom"]
    m, n = geom.image_shape
    if kind == "images":
        folder = Path(cfg["data.image_dir"])
        files = sorted(folder.glob("*.raw"))
        if not files:
            raise InputError(f"no .raw images found in {folder}")
        images = [load_image(f).astype(np.float64) for f in files]
        for f, img in zip(files, images):
            if img.shape != (m, n):
                raise InputError(f"{f} has shape {img.shape}, geometry expects {(m, n)}")
    else:
        images = [make_phantom(kind, m, n, seed=_seed(cfg["seed"], 1, i)) for i in range(cfg["data.n_images"])]
    return [img * cfg["data.attenuation_scale"] for img in images]


def simulate_dataset(cfg: Config, out_dir) -> Path:
    """Generate ground truths, noisy sinograms and FBPs for every dose tier.

    Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geom = cfg.geometry()
    gts = _ground_truths(cfg, geom)
    ids = [f"img{i:03d}" for i in range(len(gts))]
    ds = split_dataset(ids, cfg["data.train_fraction"], cfg["data.labeled_fraction"], seed=_seed(cfg["seed"], 2))
    paths: dict[str, str] = {}
    for idx, (key, gt) in enumerate(zip(ids, gts)):
        save_image(out / f"{key}_gt.raw", gt, pixel_size=geom.pixel_size)
        paths[key] = f"{key}_gt.raw"
        clean = forward_project(gt, geom)
        for t_idx, tier in enumerate(cfg["dose.tiers"]):
            tag = tier_tag(tier)
            model = DoseModel(_photons(tier), cfg["dose.electronic_variance"], seed=_seed(cfg["seed"], 3, idx, t_idx))
            # round through the on-disk precision so FBP sees exactly what a reload sees
            y = simulate_lowdose(clean, model).astype(np.float32)
            save_image(out / f"{key}_{tag}_sino.raw", y, dose=str(tier))
            x0 = fbp_reconstruct(y.astype(np.float64), geom, cfg["fbp.filter"])
            save_image(out / f"{key}_{tag}_fbp.raw", x0, pixel_size=geom.pixel_size, dose=str(tier))
        log.info("simulated %s", key)
    extra = {
        "train_order": ds.train,
        "geometry": geom.to_dict(),
        "tiers": [str(t) for t in cfg["dose.tiers"]],
        "attenuation_scale": cfg["data.attenuation_scale"],
        "fbp_filter": cfg["fbp.filter"],
    }
    manifest = out / "manifest.json"
    save_manifest(manifest, ds, paths, extra)
    return manifest


@dataclass
class Item:
    id: str
    split: str
    labeled: bool
    gt: np.ndarray
    y: np.ndarray
    x0: np.ndarray


def load_items(data_dir, tier, labeled_fraction: float | None = None) -> tuple[list[Item], ScanGeometry]:
    """Read a simulated dataset.  ``labeled_fraction`` re-derives the labelled flags."""
    data_dir = Path(data_dir)
    ds, entries, doc = load_manifest(data_dir / "manifest.json")
    geom = ScanGeometry.from_dict(doc["geometry"])
    if str(tier) not in doc["tiers"]:
        raise InputError(f"dose tier {tier!r} was not simulated (have {doc['tiers']})")
    labeled = ds.labeled
    if labeled_fraction is not None:
        order = doc["train_order"]
        labeled = set(order[:int(math.ceil(labeled_fraction * len(order) - 1e-9))])
    tag = tier_tag(tier)
    items = []
    for e in entries:
        key = e["id"]
        items.append(Item(
            key, e["split"], key in labeled,
            load_image(data_dir / e["path"]).astype(np.float64),
            load_image(data_dir / f"{key}_{tag}_sino.raw").astype(np.float64),
            load_image(data_dir / f"{key}_{tag}_fbp.raw").astype(np.float64),
        ))
    return items, geom


def build_network(cfg: Config, geom: ScanGeometry, use_graph: bool | None = None) -> MagicNetwork:
    patch = PatchConfig(cfg["network.patch_size"], cfg["network.patch_step"], cfg["network.k"])
    return MagicNetwork.init(
        geom,
        n_blocks=cfg["network.n_blocks"],
        n_coarse=cfg["network.n_coarse"],
        channels=cfg["network.channels"],
        graph_width=cfg["network.graph_width"],
        patch=patch,
        activation=cfg["network.activation"],
        use_graph=cfg["network.use_graph"] if use_graph is None else use_graph,
        seed=_seed(cfg["seed"], 4),
    )


def train_config(cfg: Config) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["training.epochs"],
        max_steps=cfg["training.max_steps"] or None,
        lr=cfg["training.lr"],
        batch_size=cfg["training.batch_size"],
        loss=cfg["training.loss"],
        proj_weight=cfg["training.proj_weight"],
        clip_norm=cfg["training.clip_norm"] or None,
        graph_lr_scale=cfg["training.graph_lr_scale"],
        seed=_seed(cfg["seed"], 5),
    )


def training_samples(items: list[Item], loss: str) -> list[Sample]:
    train_items = [it for it in items if it.split == "train"]
    if loss == "mse":
        train_items = [it for it in train_items if it.labeled]
        if not train_items:
            raise InputError("supervised training needs at least one labelled training image")
    return [Sample(it.y, it.x0, it.gt if it.labeled else None, it.id) for it in train_items]


def train_from_config(cfg: Config, data_dir, run_dir, use_graph: bool | None = None, name: str = "model",
                      labeled_fraction: float | None = None) -> MagicNetwork:
    """Train one network; writes ``<name>.npz`` and ``<name>_loss.csv`` into ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    items, geom = load_items(data_dir, cfg["dose.train_tier"], labeled_fraction)
    if geom != cfg.geometry():
        raise ConfigError("dataset geometry differs from the configured geometry")
    net = build_network(cfg, geom, use_graph)
    tc = train_config(cfg)
    samples = training_samples(items, tc.loss)
    log.info("training %s on %d samples (%s loss, graph=%s)", name, len(samples), tc.loss, net.use_graph)
    result = train(net, samples, tc, curve_path=run_dir / f"{name}_loss.csv", checkpoint_dir=run_dir)
    save_checkpoint(net, run_dir / f"{name}.npz", {"steps": result.steps, "train_config": vars(tc),
                                                   "seed": cfg["seed"]})
    return net


def evaluate_methods(cfg: Config, items: list[Item], methods: dict, out_dir=None) -> list[dict]:
    """Score FBP and every network in ``methods`` on the test items.

    ``methods`` maps a tag to a :class:`MagicNetwork` or to a dict of
    precomputed predictions keyed by item id.
    """
    peak = cfg.get("evaluate.peak")
    rois = cfg.rois()
    cal = cfg.get("data.hu_calibration")
    diff_dir = None
    if out_dir is not None:
        diff_dir = Path(out_dir) / "diff"
        diff_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    test = [it for it in items if it.split == "test"]
    if not test:
        raise InputError("the dataset has no test images")
    for it in test:
        preds = {"FBP": it.x0}
        for tag, m in methods.items():
            preds[tag] = m[it.id] if isinstance(m, dict) else reconstruct(m, it.x0, it.y)
        for tag, pred in preds.items():
            row = {"image_id": it.id, "method": tag, "psnr": psnr(pred, it.gt, peak),
                   "ssim": ssim(pred, it.gt, peak)}
            for r, roi in enumerate(rois):
                row[f"roi{r}_mean"], row[f"roi{r}_sd"] = roi_stats(pred, roi)
            rows.append(row)
            if diff_dir is not None:
                diff = np.abs(pred - it.gt)
                if cal is not None:
                    save_png(diff_dir / f"{it.id}_{tag}.png", diff, cfg["evaluate.window"], (cal[0], 0.0))
                else:
                    save_png(diff_dir / f"{it.id}_{tag}.png", diff, (0.0, 0.25 * cfg["data.attenuation_scale"]))
    return rows


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{v:.6f}" if abs(v) >= 1e-3 or v == 0 else f"{v:.6e}"


def write_metrics(rows: list[dict], path) -> None:
    if not rows:
        raise InputError("no metric rows to write")
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([format_psnr(row[k]) if k == "psnr" else _fmt(row[k]) for k in fields])


def summarize(rows: list[dict]) -> dict[str, dict[str, float]]:
    """Per-method mean and SD of PSNR and SSIM (identical images are skipped in PSNR)."""
    out = {}
    for tag in dict.fromkeys(r["method"] for r in rows):
        ps = [r["psnr"] for r in rows if r["method"] == tag and math.isfinite(r["psnr"])]
        ss = [r["ssim"] for r in rows if r["method"] == tag]
        out[tag] = {
            "psnr": float(np.mean(ps)) if ps else math.inf,
            "psnr_sd": float(np.std(ps, ddof=1)) if len(ps) > 1 else 0.0,
            "ssim": float(np.mean(ss)),
            "ssim_sd": float(np.std(ss, ddof=1)) if len(ss) > 1 else 0.0,
        }
    return out


def write_summary(summary: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "psnr", "psnr_sd", "ssim", "ssim_sd"])
        for tag, s in summary.items():
            w.writerow([tag, format_psnr(s["psnr"]), _fmt(s["psnr_sd"]), _fmt(s["ssim"]), _fmt(s["ssim_sd"])])


def compare(cfg: Config, run_dir, data_dir=None) -> dict:
    """Train MAGIC and the graph-free LEARN baseline on one dataset and score both against FBP.

    Writes ``metrics.csv`` and ``summary.csv``; returns the summary.
    """
    run_dir = Path(run_dir)
    if data_dir is None:
        data_dir = run_dir / "data"
        simulate_dataset(cfg, data_dir)
    magic = train_from_config(cfg, data_dir, run_dir, use_graph=True, name="magic")
    learn = train_from_config(cfg, data_dir, run_dir, use_graph=False, name="learn")
    items, _ = load_items(data_dir, cfg["dose.train_tier"])
    rows = evaluate_methods(cfg, items, {"LEARN": learn, "MAGIC": magic}, run_dir)
    write_metrics(rows, run_dir / "metrics.csv")
    summary = summarize(rows)
    write_summary(summary, run_dir / "summary.csv")
    return summary


def sweep(cfg: Config, run_dir, data_dir=None) -> list[dict]:
    """Train and score one MAGIC network per value of ``sweep.parameter``.

    Writes ``sweep.csv`` with columns ``(<parameter>, psnr, psnr_sd, ssim, ssim_sd)``.
    """
    run_dir = Path(run_dir)
    param = cfg["sweep.parameter"]
    key = SWEEPABLE[param]
    if data_dir is None:
        data_dir = run_dir / "data"
        simulate_dataset(cfg, data_dir)
    table = []
    for value in cfg["sweep.values"]:
        sub = cfg.with_overrides(**{key.replace(".", "__"): value})
        if param == "n_blocks":
            sub = sub.with_overrides(network__n_coarse=max(1, value // 2))
        fraction = None
        if param == "labeled_fraction":
            fraction = float(value)
            sub = sub.with_overrides(training__loss="semi")
        name = f"{param}_{value}"
        net = train_from_config(sub, data_dir, run_dir / name, name="magic", labeled_fraction=fraction)
        items, _ = load_items(data_dir, cfg["dose.train_tier"], fraction)
        rows = evaluate_methods(sub, items, {"MAGIC": net})
        write_metrics(rows, run_dir / name / "metrics.csv")
        s = summarize([r for r in rows if r["method"] == "MAGIC"])["MAGIC"]
        table.append({param: value, **s})
    with open(run_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([param, "psnr", "psnr_sd", "ssim", "ssim_sd"])
        for row in table:
            w.writerow([row[param], format_psnr(row["psnr"]), _fmt(row["psnr_sd"]), _fmt(row["ssim"]),
                        _fmt(row["ssim_sd"])])
    return table


def reconstruct_file(checkpoint, sino_path, out_path, fbp_filter: str = "ramp") -> np.ndarray:
    """Checkpoint + raw sinogram -> raw reconstruction."""
    net = load_checkpoint(checkpoint)
    y = load_image(sino_path).astype(np.float64)
    if y.shape != net.geometry.sino_shape:
        raise InputError(f"sinogram shape {y.shape} does not match the checkpoint geometry "
                         f"{net.geometry.sino_shape}")
    x0 = fbp_reconstruct(y, net.geometry, fbp_filter)
    x = reconstruct(net, x0, y)
    save_image(out_path, x, pixel_size=net.geometry.pixel_size)
    return x
