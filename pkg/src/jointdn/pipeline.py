"""Blind-spot denoising, segmentation pretraining and the two joint schemes."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .blindspot import apply_mask, derive_seed, make_mask_plan, masked_mse
from .nn import Network

log = logging.getLogger(__name__)

MODES = ("n2v", "supervised_joint", "unsupervised_joint", "pretrain_seg")
DEFAULT_WEIGHTS = {
    "n2v": (1.0, 0.0),
    "supervised_joint": (1.0, 1.5),
    "unsupervised_joint": (9.0, 1.0),
    "pretrain_seg": (0.0, 1.0),
}


@dataclass
class TrainConfig:
    mode: str = "n2v"
    lr: float = 7e-4
    steps: int = 300
    mask_count: int = 169
    mask_position: str = "random"
    w1: float | None = None
    w2: float | None = None
    seed: int = 0
    weak_fraction: float = 0.2
    log_every: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        d1, d2 = DEFAULT_WEIGHTS[self.mode]
        self.w1 = d1 if self.w1 is None else float(self.w1)
        self.w2 = d2 if self.w2 is None else float(self.w2)
        if not 1e-6 <= self.lr <= 1.0:
            raise ValueError(f"lr must lie in [1e-6, 1], got {self.lr}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.w1 < 0 or self.w2 < 0 or (self.w1 == 0 and self.w2 == 0):
            raise ValueError(f"weights must be >= 0 and not both zero, got w1={self.w1}, w2={self.w2}")
        if not 0.0 < self.weak_fraction <= 1.0:
            raise ValueError(f"weak_fraction must lie in (0, 1], got {self.weak_fraction}")
        if self.mask_count < 1:
            raise ValueError(f"mask_count must be >= 1, got {self.mask_count}")
        if self.log_every < 1:
            raise ValueError(f"log_every must be >= 1, got {self.log_every}")


@dataclass
class TrainLog:
    w1: float
    w2: float
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def add(self, step: int, l1: float, l2: float, combined: float | None = None) -> None:
        """Append a row; ``combined`` is the value computed on the tape."""
        self.rows.append((step, l1, l2, self.w1 * l1 + self.w2 * l2 if combined is None else combined))

    def losses(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "l1", "l2", "combined"])
            for step, l1, l2, comb in self.rows:
                w.writerow([step, repr(l1), repr(l2), repr(comb)])


def _as_image(a: np.ndarray) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    return Tensor(a[None, None] if a.ndim == 2 else a)


def _check_finite(value: float, step: int, what: str) -> None:
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {what} at step {step}")


def _masked_step(denoiser: Network, image: np.ndarray, idx: int, step: int, cfg: TrainConfig):
    """Masked forward of the denoiser; returns (output, l1 tensor)."""
    x = _as_image(image)
    plan = make_mask_plan(x.shape[2], x.shape[3], cfg.mask_count, derive_seed(cfg.seed, idx, step),
                          cfg.mask_position)
    out = denoiser(apply_mask(x, plan), "train")
    return out, masked_mse(out, x, plan)


def _pick(n: int, cfg: TrainConfig, step: int) -> int:
    return (cfg.seed + step) % n


def train_n2v(denoiser: Network, images: Sequence[np.ndarray], cfg: TrainConfig) -> tuple[Network, TrainLog]:
    """Blind-spot training on noisy images alone."""
    if cfg.mode != "n2v":
        raise ValueError(f"train_n2v needs mode 'n2v', got {cfg.mode!r}")
    if not len(images):
        raise ValueError("train_n2v: empty dataset")
    params = denoiser.param_list
    state = AdamState.for_params(params)
    trace = TrainLog(1.0, 0.0)
    for step in range(cfg.steps):
        idx = _pick(len(images), cfg, step)
        with Tape() as tape:
            _, l1 = _masked_step(denoiser, images[idx], idx, step, cfg)
        loss = l1.item()
        _check_finite(loss, step, "loss")
        ad.backward(l1, tape, params)
        ad.adam_step(params, state, cfg.lr)
        if step % cfg.log_every == 0:
            trace.add(step, loss, 0.0)
    return denoiser, trace


def pretrain_segmentation(seg: Network, pairs: Sequence[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig,
                          objective: str = "bce") -> Network:
    """Train the segmentation network on (image, label) pairs.

    ``objective="bce"`` is the weak pretraining for supervised joint training:
    only ``weak_fraction * steps`` updates. ``objective="mse"`` trains the
    style branch for unsupervised joint training for all ``steps`` and
    returns it frozen.
    """
    if objective not in ("bce", "mse"):
        raise ValueError(f"objective must be 'bce' or 'mse', got {objective!r}")
    if not len(pairs):
        raise ValueError("pretrain_segmentation: empty dataset")
    for i, (img, lab) in enumerate(pairs):
        if np.shape(img) != np.shape(lab):
            raise ValueError(f"pair {i}: image shape {np.shape(img)} != label shape {np.shape(lab)}")
    if seg.frozen:
        raise ValueError("pretrain_segmentation: network is frozen")
    n_updates = int(round(cfg.weak_fraction * cfg.steps)) if objective == "bce" else cfg.steps
    loss_fn = ad.bce_loss if objective == "bce" else ad.mse_loss
    params = seg.param_list
    state = AdamState.for_params(params)
    rng_offset = derive_seed(cfg.seed, 104729) % len(pairs)
    for step in range(n_updates):
        img, lab = pairs[(rng_offset + step) % len(pairs)]
        with Tape() as tape:
            loss = loss_fn(seg(_as_image(img), "train"), _as_image(lab))
        _check_finite(loss.item(), step, "pretraining loss")
        ad.backward(loss, tape, params)
        ad.adam_step(params, state, cfg.lr)
    if objective == "mse":
        seg.freeze()
    return seg


def train_supervised_joint(denoiser: Network, seg: Network, data: Sequence[tuple[np.ndarray, np.ndarray]],
                           cfg: TrainConfig) -> tuple[Network, Network, TrainLog]:
    """Joint training on l = w1 * masked_mse + w2 * BCE(seg(denoised), label).

    ``data`` holds (noisy, label) pairs. A single backward pass through both
    networks feeds two independent Adam states.
    """
    if cfg.mode != "supervised_joint":
        raise ValueError(f"train_supervised_joint needs mode 'supervised_joint', got {cfg.mode!r}")
    if not len(data):
        raise ValueError("train_supervised_joint: empty dataset")
    for i, pair in enumerate(data):
        if len(pair) < 2 or pair[1] is None:
            raise ValueError(f"train_supervised_joint: sample {i} has no label")
    if seg.frozen:
        raise ValueError("train_supervised_joint: segmentation network must be trainable")
    dn_params, seg_params = denoiser.param_list, seg.param_list
    dn_state, seg_state = AdamState.for_params(dn_params), AdamState.for_params(seg_params)
    trace = TrainLog(cfg.w1, cfg.w2)
    for step in range(cfg.steps):
        idx = _pick(len(data), cfg, step)
        noisy, label = data[idx][0], data[idx][1]
        with Tape() as tape:
            out, l1 = _masked_step(denoiser, noisy, idx, step, cfg)
            pred = seg(ad.clamp_st(out), "train")
            l2 = ad.bce_loss(pred, _as_image(label))
            loss = ad.add(ad.scale(l1, cfg.w1), ad.scale(l2, cfg.w2))
        v1, v2, total = l1.item(), l2.item(), loss.item()
        _check_finite(total, step, "loss")
        ad.backward(loss, tape, dn_params + seg_params)
        ad.adam_step(dn_params, dn_state, cfg.lr)
        ad.adam_step(seg_params, seg_state, cfg.lr)
        if step % cfg.log_every == 0:
            trace.add(step, v1, v2, total)
    return denoiser, seg, trace


def train_unsupervised_joint(denoiser: Network, frozen_seg: Network, images: Sequence[np.ndarray],
                             cfg: TrainConfig) -> tuple[Network, TrainLog]:
    """Joint training on l = w1 * masked_mse + w2 * MSE(d, seg(d)), d = denoised.

    Gradients pass through the frozen segmentation branch (eval mode) into
    the denoiser; the branch itself is never updated.
    """
    if cfg.mode != "unsupervised_joint":
        raise ValueError(f"train_unsupervised_joint needs mode 'unsupervised_joint', got {cfg.mode!r}")
    if not frozen_seg.frozen:
        raise ValueError("train_unsupervised_joint: segmentation branch must be frozen")
    if not len(images):
        raise ValueError("train_unsupervised_joint: empty dataset")
    params = denoiser.param_list
    state = AdamState.for_params(params)
    trace = TrainLog(cfg.w1, cfg.w2)
    for step in range(cfg.steps):
        idx = _pick(len(images), cfg, step)
        with Tape() as tape:
            out, l1 = _masked_step(denoiser, images[idx], idx, step, cfg)
            d = ad.clamp_st(out)
            l2 = ad.mse_loss(d, frozen_seg(d, "eval"))
            loss = ad.add(ad.scale(l1, cfg.w1), ad.scale(l2, cfg.w2))
        v1, v2, total = l1.item(), l2.item(), loss.item()
        _check_finite(total, step, "loss")
        ad.backward(loss, tape, params)
        ad.adam_step(params, state, cfg.lr)
        if step % cfg.log_every == 0:
            trace.add(step, v1, v2, total)
    return denoiser, trace


def denoise(denoiser: Network, image: np.ndarray) -> np.ndarray:
    """Eval-mode forward of one H×W image."""
    return denoiser(_as_image(image), "eval").values[0, 0]


def segment(seg: Network, image: np.ndarray) -> np.ndarray:
    return seg(_as_image(np.clip(image, 0.0, 1.0)), "eval").values[0, 0]
