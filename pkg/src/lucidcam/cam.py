"""Grad-CAM and CAM heatmaps, localization scoring, and top-loss ranking.

Both maps are rectified at feature-map resolution, then upsampled with
align-corners bilinear interpolation, then min-max normalized. With that
order, CAM and last-layer Grad-CAM agree exactly for a GAP+linear head,
because there the gradient at every cell of channel k is w[c, k] / (h*w).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .data import stack_images
from .errors import ArgumentError, DataError
from .model import ModelSpec, Parameters, backward_from_logit, forward_with_capture, predict_logits
from .tensor import bilinear_resize, minmax_normalize


@dataclass
class Heatmap:
    values: np.ndarray
    class_index: int
    layer_id: int
    all_zero: bool
    raw_max: float


def heatmap_from_coarse(coarse: np.ndarray, out_h: int, out_w: int, class_index: int, layer_id: int) -> Heatmap:
    rect = np.maximum(coarse, 0.0)
    raw_max = float(rect.max())
    if not raw_max > 0:
        return Heatmap(np.zeros((out_h, out_w), dtype=np.float32), class_index, layer_id, True, raw_max)
    up = bilinear_resize(rect.astype(np.float32), out_h, out_w)
    values = minmax_normalize(up)
    return Heatmap(values, class_index, layer_id, not values.any(), raw_max)


def weighted_map(activations: np.ndarray, gradients: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(alpha, sum_k alpha_k A_k) with alpha_k the spatial mean of channel k's gradient."""
    alpha = gradients.astype(np.float64).mean(axis=(1, 2))
    coarse = np.tensordot(alpha, activations.astype(np.float64), axes=(0, 0))
    return alpha, coarse


def grad_cam(spec: ModelSpec, params: Parameters, image: np.ndarray, class_index: int,
             layer_id: int | None = None) -> Heatmap:
    layer_id = spec.last_conv if layer_id is None else layer_id
    if class_index not in (0, 1):
        raise ArgumentError(f"class_index must be 0 or 1, got {class_index}")
    _, saved = forward_with_capture(spec, params, image, layer_id)
    capture, _ = backward_from_logit(saved, class_index, want=[])
    _, coarse = weighted_map(capture.activations, capture.gradients)
    return heatmap_from_coarse(coarse, image.shape[1], image.shape[2], class_index, layer_id)


def cam_gap_head(spec: ModelSpec, params: Parameters, image: np.ndarray, class_index: int) -> Heatmap:
    """Classic CAM: head weights times the last block's feature maps, no gradients."""
    if spec.head_kind != "gap_linear":
        raise ArgumentError("CAM needs a gap_linear head")
    if class_index not in (0, 1):
        raise ArgumentError(f"class_index must be 0 or 1, got {class_index}")
    layer_id = spec.last_conv
    _, saved = forward_with_capture(spec, params, image, layer_id)
    acts = saved.outputs[saved.capture_at][0]
    w = params[spec.head_param_names()[0]][class_index].astype(np.float64)
    coarse = np.tensordot(w, acts.astype(np.float64), axes=(0, 0))
    return heatmap_from_coarse(coarse, image.shape[1], image.shape[2], class_index, layer_id)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a (2r+1) x (2r+1) square."""
    m = mask > 0.5
    if radius <= 0:
        return m
    h, w = m.shape
    p = np.pad(m, radius)
    rows = np.zeros((h + 2 * radius, w), dtype=bool)
    for dx in range(2 * radius + 1):
        rows |= p[:, dx:dx + w]
    out = np.zeros((h, w), dtype=bool)
    for dy in range(2 * radius + 1):
        out |= rows[dy:dy + h]
    return out


def localization_score(heatmap: Heatmap | np.ndarray, mask: np.ndarray, dilation_px: int = 8) -> tuple[float, bool]:
    """(heat mass inside the dilated mask / total heat, argmax-in-mask)."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if values.shape != mask.shape:
        raise ArgumentError(f"heatmap {values.shape} and mask {mask.shape} extents differ")
    region = dilate(mask, dilation_px)
    total = float(values.sum(dtype=np.float64))
    if not total > 0:
        return 0.0, False
    mass = float(values[region].sum(dtype=np.float64)) / total
    hit = bool(region.reshape(-1)[int(np.argmax(values))])
    return mass, hit


@dataclass
class LossEntry:
    id: str
    predicted: int
    actual: int
    loss: float
    probability: float
    index: int


def top_losses(spec: ModelSpec, params: Parameters, dataset, k: int = 9) -> list[LossEntry]:
    """Samples ranked by cross-entropy (descending, ties by id); k is clamped to |dataset|."""
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if not dataset:
        raise DataError("top_losses needs a non-empty dataset")
    logits = predict_logits(spec, params, stack_images(dataset))
    labels = np.array([s.label for s in dataset])
    losses = L.per_sample_cross_entropy(logits, labels)
    probs = L.softmax(logits)
    pred = np.argmax(logits, axis=1)
    entries = [LossEntry(s.id, int(pred[i]), int(labels[i]), float(losses[i]), float(probs[i, pred[i]]), i)
               for i, s in enumerate(dataset)]
    entries.sort(key=lambda e: (-e.loss, e.id))
    return entries[:k]
