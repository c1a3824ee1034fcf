"""Losses, the Adam optimiser and the supervised / semi-supervised training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, InputError
from .geometry import ScanGeometry, back_project, forward_project, normal_operator_norm
from .unrolled import MagicNetwork, backward_pass, forward_pass, save_checkpoint

__all__ = [
    "Sample",
    "Batch",
    "mse_loss",
    "projection_loss",
    "semi_loss",
    "batch_loss",
    "Adam",
    "TrainConfig",
    "TrainResult",
    "train",
]

log = logging.getLogger(__name__)


@dataclass
class Sample:
    y: np.ndarray
    x0: np.ndarray
    label: np.ndarray | None = None
    id: str = ""

    @property
    def labeled(self) -> bool:
        return self.label is not None


@dataclass
class Batch:
    """Samples processed in one optimiser step.

    ``labeled`` (S1) and ``unlabeled`` (S2) partition the sample indices.
    """

    samples: list[Sample]

    def __post_init__(self):
        if not self.samples:
            raise InputError("empty batch")

    @property
    def labeled(self) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.labeled]

    @property
    def unlabeled(self) -> list[int]:
        return [i for i, s in enumerate(self.samples) if not s.labeled]


def _pairs(a, b, what):
    if len(a) != len(b):
        raise InputError(f"{what}: got {len(a)} predictions and {len(b)} targets")
    if not a:
        raise InputError(f"{what}: no samples")


def mse_loss(preds, labels) -> float:
    """``(1/N) sum_i ||x_i - label_i||^2``."""
    _pairs(preds, labels, "mse_loss")
    total = 0.0
    for x, t in zip(preds, labels):
        r = np.asarray(x, dtype=np.float64) - np.asarray(t, dtype=np.float64)
        total += float(np.vdot(r, r))
    return total / len(preds)


def _mse_with_grads(preds, labels):
    n = len(preds)
    grads = [2.0 * (np.asarray(x) - np.asarray(t)) / n for x, t in zip(preds, labels)]
    return mse_loss(preds, labels), grads


def projection_loss(preds, sinos, geom: ScanGeometry) -> float:
    """``(1/N) sum_i ||A x_i - y_i||^2``."""
    return _projection_with_grads(preds, sinos, geom)[0]


def _projection_with_grads(preds, sinos, geom):
    _pairs(preds, sinos, "projection_loss")
    n = len(preds)
    total = 0.0
    grads = []
    for x, y in zip(preds, sinos):
        r = forward_project(x, geom) - np.asarray(y, dtype=np.float64)
        total += float(np.vdot(r, r))
        grads.append(2.0 * back_project(r, geom) / n)
    return total / n, grads


def batch_loss(batch: Batch, preds, geom: ScanGeometry, mode: str = "semi", proj_weight: float = 1.0):
    """Loss terms and per-sample gradients with respect to ``preds``.

    ``mode="mse"`` requires every sample to be labelled.  ``mode="semi"``
    averages the MSE over the labelled set and the projection loss over the
    unlabelled set separately and sums them; a term whose set is empty is
    dropped.

    Returns
    -------
    (mse_term, proj_term, total, grads) where absent terms are ``None``.
    """
    if len(preds) != len(batch.samples):
        raise InputError("one prediction per sample is required")
    grads = [None] * len(preds)
    if mode == "mse":
        if batch.unlabeled:
            raise InputError("supervised loss needs a label for every sample")
        s1, s2 = list(range(len(preds))), []
    elif mode == "semi":
        s1, s2 = batch.labeled, batch.unlabeled
    else:
        raise ConfigError(f"unknown loss mode {mode!r}")
    mse_term = proj_term = None
    total = 0.0
    if s1:
        mse_term, g = _mse_with_grads([preds[i] for i in s1], [batch.samples[i].label for i in s1])
        total += mse_term
        for i, gi in zip(s1, g):
            grads[i] = gi
    if s2:
        proj_term, g = _projection_with_grads([preds[i] for i in s2], [batch.samples[i].y for i in s2], geom)
        total += proj_weight * proj_term
        for i, gi in zip(s2, g):
            grads[i] = proj_weight * gi
    return mse_term, proj_term, total, grads


def semi_loss(batch: Batch, preds, geom: ScanGeometry, proj_weight: float = 1.0) -> float:
    """Labelled-set MSE plus unlabelled-set projection loss."""
    return batch_loss(batch, preds, geom, "semi", proj_weight)[2]


class Adam:
    """Adaptive-moment gradient descent over a dict of arrays.

    ``lr_scale(name)`` multiplies the learning rate of one parameter.
    """

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, lr_scale=None):
        self.lr = lr
        self.lr_scale = lr_scale or (lambda name: 1.0)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for name in sorted(params):
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = params[name] - self.lr * self.lr_scale(name) * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


@dataclass
class TrainConfig:
    epochs: int = 100
    max_steps: int | None = None
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    loss: str = "mse"          # "mse" (supervised) or "semi"
    proj_weight: float = 1.0
    clip_norm: float | None = 10.0
    graph_lr_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            problems.append("max_steps must be >= 0")
        if self.lr < 0:
            problems.append("learning rate must be >= 0")
        if self.graph_lr_scale < 0:
            problems.append("graph_lr_scale must be >= 0")
        if not 1 <= self.batch_size:
            problems.append("batch_size must be >= 1")
        if self.loss not in ("mse", "semi"):
            problems.append(f"loss must be 'mse' or 'semi' (got {self.loss!r})")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class TrainResult:
    net: MagicNetwork
    curve: list[dict] = field(default_factory=list)
    steps: int = 0


CURVE_FIELDS = ("epoch", "step", "mse_term", "proj_term", "total")


def _to_opt_space(params, scale):
    return {k: (v * scale if k.endswith(".alpha") else v) for k, v in params.items()}


def _from_opt_space(params, scale):
    return {k: (v / scale if k.endswith(".alpha") else v) for k, v in params.items()}


def _clip(grads, max_norm):
    if not max_norm:
        return grads
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


def _lr_scale(name, config):
    return config.graph_lr_scale if name.endswith((".theta1", ".theta2")) else 1.0


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def train(net: MagicNetwork, samples: list[Sample], config: TrainConfig,
          curve_path=None, checkpoint_dir=None, callback=None) -> TrainResult:
    """Optimise ``net`` in place on ``samples``.

    Each epoch visits the samples in a seeded random order, ``batch_size``
    at a time.  Step sizes are optimised in units of ``1/||A^T A||`` so that
    Adam's absolute step is commensurate with the kernels.  The graph
    kernels learn at ``graph_lr_scale`` times the base rate.  One curve row
    per epoch holds the epoch-mean of each loss term.
    """
    if not samples:
        raise InputError("training set is empty")
    if config.loss == "mse" and any(not s.labeled for s in samples):
        raise InputError("supervised training needs labels on every sample")
    rng = np.random.default_rng(config.seed)
    geom = net.geometry
    scale = normal_operator_norm(geom)
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps, lambda name: _lr_scale(name, config))
    result = TrainResult(net)
    writer = None
    fh = None
    if curve_path is not None:
        fh = open(curve_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CURVE_FIELDS)
    step = 0
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(samples))
            terms = []
            for start in range(0, len(order), config.batch_size):
                if config.max_steps is not None and step >= config.max_steps:
                    break
                batch = Batch([samples[i] for i in order[start:start + config.batch_size]])
                preds, tapes = [], []
                for s in batch.samples:
                    out, tape = forward_pass(net, s.x0, s.y)
                    preds.append(out)
                    tapes.append(tape)
                mse_t, proj_t, total, loss_grads = batch_loss(batch, preds, geom, config.loss,
                                                              config.proj_weight)
                if not math.isfinite(total):
                    if checkpoint_dir is not None:
                        save_checkpoint(net, Path(checkpoint_dir) / "diverged.npz",
                                        {"epoch": epoch, "step": step, "loss": repr(total)})
                    raise DivergenceError(f"non-finite loss {total!r} at epoch {epoch}, step {step}")
                grads = None
                for tape, g in zip(tapes, loss_grads):
                    sample_grads = backward_pass(net, tape, g)
                    if grads is None:
                        grads = sample_grads
                    else:
                        grads = {k: grads[k] + sample_grads[k] for k in grads}
                grads = _clip(_to_opt_space(grads, 1.0 / scale), config.clip_norm)
                params = _to_opt_space(net.get_params(), scale)
                net.set_params(_from_opt_space(opt.step(params, grads), scale))
                step += 1
                terms.append((mse_t, proj_t, total))
                if callback is not None:
                    callback(step, mse_t, proj_t, total)
            if not terms:
                break
            row = {
                "epoch": epoch,
                "step": step,
                "mse_term": _mean([t[0] for t in terms]),
                "proj_term": _mean([t[1] for t in terms]),
                "total": _mean([t[2] for t in terms]),
            }
            result.curve.append(row)
            if writer is not None:
                writer.writerow(["" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                                 for k in CURVE_FIELDS])
                fh.flush()
            log.info("epoch %d step %d loss %.6g", epoch, step, row["total"])
    finally:
        if fh is not None:
            fh.close()
    result.steps = step
    return result
