"""Grad-CAM saliency over patch tokens and heat-map overlays."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from PIL import Image

from . import tensor as T
from .data import resize
from .errors import ContractError


@dataclass(frozen=True)
class SaliencyMap:
    grid: np.ndarray      # (g, g), max-normalised, nonnegative
    overlay: np.ndarray   # (H, W) bilinear upsampling of ``grid``, max-normalised
    target_class: int


def _max_normalise(x: np.ndarray) -> np.ndarray:
    peak = float(x.max()) if x.size else 0.0
    return x / peak if peak > 0 else np.zeros_like(x)


def grad_cam(model, image: np.ndarray, target_class: int) -> SaliencyMap:
    """Saliency of ``target_class`` from the normalised tokens entering the last block's attention.

    The score is the pre-softmax logit, so the map does not depend on any
    per-image constant added to all logits.
    """
    n_classes = model.config.n_classes
    if not isinstance(target_class, (int, np.integer)) or not 0 <= target_class < n_classes:
        raise ContractError(f"target class must be an integer in [0, {n_classes}), got {target_class!r}")
    images = np.asarray(image)[None]
    model.zero_grad()
    try:
        logits = model.logits(images, capture=True)
        acts = model.captured_patch_activations()
        T.backward(logits[0, int(target_class)])
        rows = model.patch_rows()
        a = acts.data[0, rows].astype(np.float64)
        g = np.zeros_like(a) if acts.grad is None else acts.grad[0, rows].astype(np.float64)
    finally:
        model.zero_grad()
    weights = g.mean(axis=0)
    cam = np.maximum(a @ weights, 0.0)
    side = model.config.grid
    grid = _max_normalise(cam.reshape(side, side))
    h, w = images.shape[1:3]
    overlay = _max_normalise(np.maximum(resize(grid, h, w), 0.0))
    return SaliencyMap(grid, overlay, int(target_class))


@lru_cache(maxsize=1)
def jet_table() -> np.ndarray:
    text = resources.files("retina_eit").joinpath("resources/jet256.txt").read_text()
    table = np.loadtxt(text.splitlines(), dtype=np.int64, comments="#")
    if table.shape != (256, 3):
        raise RuntimeError("colormap table must have 256 rgb rows")
    return table.astype(np.uint8)


def colorize(values: np.ndarray) -> np.ndarray:
    idx = np.clip(np.floor(np.asarray(values, dtype=np.float64) * 255 + 0.5), 0, 255).astype(np.int64)
    return jet_table()[idx]


def blend(image: np.ndarray, values: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    image = np.asarray(image)
    if image.shape[:2] != np.shape(values):
        raise ContractError(f"map shape {np.shape(values)} does not match image {image.shape[:2]}")
    mixed = (1 - alpha) * image.astype(np.float64) + alpha * colorize(values).astype(np.float64)
    return np.clip(np.floor(mixed + 0.5), 0, 255).astype(np.uint8)


def overlay_png(image: np.ndarray, saliency, path) -> None:
    """Write ``image`` blended half-and-half with the jet-coloured map."""
    values = saliency.overlay if isinstance(saliency, SaliencyMap) else saliency
    Image.fromarray(blend(image, values)).save(path, format="PNG")
