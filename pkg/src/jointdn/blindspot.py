"""Full-image blind-spot masking and the masked squared-error loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, record


@dataclass(frozen=True)
class MaskPlan:
    image_shape: tuple[int, int]
    grid: tuple[int, int]
    masked: np.ndarray  # (k, 2) int rows/cols
    replacement: np.ndarray  # (k, 2)

    def __len__(self) -> int:
        return len(self.masked)

    @property
    def entries(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        return [((int(a), int(b)), (int(c), int(d))) for (a, b), (c, d) in zip(self.masked, self.replacement)]


def derive_seed(*parts: int) -> int:
    """Deterministic 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def grid_edges(length: int, cells: int) -> list[int]:
    step = length // cells
    return [i * step for i in range(cells)] + [length]


POSITIONS = ("center", "random")


def make_mask_plan(height: int, width: int, mask_count: int, seed: int, position: str = "center") -> MaskPlan:
    """Mask one pixel in each of the first ``mask_count`` grid cells.

    The image is tiled by a ceil(sqrt(k)) × ceil(sqrt(k)) grid, last row and
    column absorbing the remainder. The masked pixel is the cell centre
    (``position="center"``) or a uniformly drawn cell pixel
    (``position="random"``); its value is taken from a uniformly drawn other
    pixel of the same cell.
    """
    if position not in POSITIONS:
        raise ValueError(f"position must be one of {POSITIONS}, got {position!r}")
    if mask_count < 1:
        raise ValueError(f"mask_count must be >= 1, got {mask_count}")
    g = math.isqrt(mask_count - 1) + 1
    if height // g < 1 or width // g < 1:
        raise ValueError(f"mask_count {mask_count} needs a {g}×{g} grid, too fine for a {height}×{width} image")
    rows = grid_edges(height, g)
    cols = grid_edges(width, g)
    rng = np.random.default_rng(seed)
    masked = np.empty((mask_count, 2), dtype=np.int64)
    repl = np.empty((mask_count, 2), dtype=np.int64)
    for idx in range(mask_count):
        r, c = divmod(idx, g)
        r0, h = rows[r], rows[r + 1] - rows[r]
        c0, w = cols[c], cols[c + 1] - cols[c]
        if h * w < 2:
            raise ValueError(f"mask_count {mask_count} exceeds cell capacity: cell ({r},{c}) has a single pixel")
        centre = (h // 2) * w + (w // 2) if position == "center" else int(rng.integers(h * w))
        pick = int(rng.integers(h * w - 1))
        if pick >= centre:
            pick += 1
        masked[idx] = (r0 + centre // w, c0 + centre % w)
        repl[idx] = (r0 + pick // w, c0 + pick % w)
    return MaskPlan((height, width), (g, g), masked, repl)


def _image_hw(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) != 4:
        raise ValueError(f"expected an N×C×H×W tensor, got shape {shape}")
    return shape[2], shape[3]


def apply_mask(image: Tensor, plan: MaskPlan) -> Tensor:
    """Copy of ``image`` with each masked pixel replaced by its source pixel."""
    if _image_hw(image.shape) != plan.image_shape:
        raise ValueError(f"plan is for {plan.image_shape}, image is {image.shape[2:]}")
    out = image.values.copy()
    mr, mc = plan.masked.T
    rr, rc = plan.replacement.T
    out[:, :, mr, mc] = image.values[:, :, rr, rc]
    return Tensor(out)


def masked_mse(pred: Tensor, target: Tensor, plan: MaskPlan) -> Tensor:
    """Mean of (pred - target)^2 over the plan's masked coordinates only."""
    if len(plan) == 0:
        raise ValueError("masked_mse: empty mask plan")
    if pred.shape != target.shape:
        raise ValueError(f"masked_mse: shape mismatch {pred.shape} vs {target.shape}")
    if _image_hw(pred.shape) != plan.image_shape:
        raise ValueError(f"masked_mse: plan is for {plan.image_shape}, tensors are {pred.shape[2:]}")
    mr, mc = plan.masked.T
    diff = pred.values[:, :, mr, mc] - target.values[:, :, mr, mc]
    n = diff.size
    out = np.array(np.mean(diff * diff))

    def _backward(g):
        gd = (2.0 * float(g) / n) * diff
        gp = np.zeros_like(pred.values)
        gp[:, :, mr, mc] = gd
        gt = None
        if target.requires_grad:
            gt = np.zeros_like(target.values)
            gt[:, :, mr, mc] = -gd
        return gp, gt

    return record("masked_mse", out, (pred, target), _backward)
