"""Grad-CAM heatmaps and colormapped overlay rendering.

The class activation map comes from one forward pass that captures the
tagged convolution output and one backward pass seeded from the raw class
logit (not the softmax probability).  Channel weights are the spatial means
of those gradients; the weighted activation sum is rectified, scaled so its
maximum is 1, and bilinearly upsampled to the input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import Sample, bilinear_resize
from .exceptions import InvalidClass, MissingTargetLayer, ShapeMismatch, WriteFailure
from .layers import Model, softmax
from .tensor import DTYPE, Graph, Tensor, backward, mul, reduce

__all__ = [
    "Heatmap",
    "OverlayImage",
    "grad_cam",
    "cam_from_activations",
    "bilinear_upsample",
    "colormap_overlay",
    "emit_png",
    "predict_probabilities",
]

IMAGE_SIZE = 32


@dataclass
class Heatmap:
    """Normalized [0, 1] importance map at input resolution.

    ``raw_max`` keeps the pre-normalization peak; when it is 0 the rectified
    weighted sum vanished everywhere and ``values`` is exactly zero.
    """

    values: np.ndarray
    target_class: int
    raw_max: float


@dataclass
class OverlayImage:
    """8-bit RGB blend of a grayscale input with a colormapped heatmap."""

    pixels: np.ndarray


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation; constants stay constant."""
    return bilinear_resize(np.asarray(grid, dtype=DTYPE), out_h, out_w)


def cam_from_activations(activations: np.ndarray, grads: np.ndarray,
                         target_class: int) -> Heatmap:
    """Activation-map weighting: spatial-mean gradients per channel, then
    a rectified weighted sum, max-normalized and upsampled to 32x32."""
    alphas = grads.mean(axis=(1, 2))
    weighted = np.tensordot(alphas, activations, axes=(0, 0))
    raw = np.maximum(weighted, 0.0).astype(DTYPE)
    raw_max = float(raw.max())
    if raw_max > 0.0:
        heat = raw / raw_max
    else:
        heat = np.zeros_like(raw)
    return Heatmap(
        values=bilinear_upsample(heat, IMAGE_SIZE, IMAGE_SIZE),
        target_class=target_class,
        raw_max=raw_max,
    )


def grad_cam(model: Model, sample: Sample, target_class: int,
             layer: str | None = None) -> Heatmap:
    """Compute the class activation heatmap for one sample.

    Runs in eval mode and restores the model's mode and gradient buffers
    afterwards, so parameters, BN statistics, and any in-flight training
    state are left bitwise unchanged.
    """
    if not 0 <= target_class < model.config.num_classes:
        raise InvalidClass(f"target class {target_class} outside [0, {model.config.num_classes})")
    tag = layer if layer is not None else model.last_conv_tag

    prev_mode = model.mode
    saved_grads = {name: (None if t.grad is None else t.grad.copy())
                   for name, t in model.params.items()}
    model.eval()
    try:
        x = Tensor(sample.image.data[None])
        onehot = np.zeros((1, model.config.num_classes), dtype=DTYPE)
        onehot[0, target_class] = 1.0
        with Graph() as g:
            logits = model.forward(x, capture=tag)
            if tag not in model.captured:
                raise MissingTargetLayer(f"forward pass produced no activation tagged {tag!r}")
            act = model.captured[tag]
            act.zero_grad()  # retain this interior gradient during backward
            score = reduce("sum", mul(logits, Tensor(onehot)))
        backward(score, g)
        grads = act.grad[0].copy()
        activations = act.data[0]
        return cam_from_activations(activations, grads, target_class)
    finally:
        model.mode = prev_mode
        for name, t in model.params.items():
            t.grad = saved_grads[name]


def predict_probabilities(model: Model, image: np.ndarray) -> np.ndarray:
    """Softmax class probabilities for one preprocessed 1x32x32 image."""
    prev_mode = model.mode
    model.eval()
    try:
        logits = model.forward(Tensor(image[None]))
        return softmax(logits).data[0].copy()
    finally:
        model.mode = prev_mode


# five-stop blue->cyan->green->yellow->red map, linear between stops
_STOPS = np.array(
    [
        [0, 0, 255],
        [0, 255, 255],
        [0, 255, 0],
        [255, 255, 0],
        [255, 0, 0],
    ],
    dtype=np.float64,
)


def _colormap(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    pos = t * (len(_STOPS) - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, len(_STOPS) - 1)
    frac = (pos - lo)[..., None]
    return _STOPS[lo] * (1.0 - frac) + _STOPS[hi] * frac


def colormap_overlay(image, heatmap: Heatmap, alpha: float = 0.4) -> OverlayImage:
    """Blend the grayscale image with the colormapped heatmap at weight alpha."""
    gray = image.data[0] if isinstance(image, Tensor) else np.asarray(image)
    if gray.ndim == 3:
        gray = gray[0]
    if gray.shape != heatmap.values.shape:
        raise ShapeMismatch(f"image {gray.shape} vs heatmap {heatmap.values.shape}")
    gray_rgb = (gray.astype(np.float64) * 255.0)[..., None]
    colored = _colormap(heatmap.values)
    blended = (1.0 - alpha) * gray_rgb + alpha * colored
    pixels = np.clip(np.round(blended), 0, 255).astype(np.uint8)
    return OverlayImage(pixels=pixels)


def emit_png(overlay: OverlayImage, path, scale: int = 1) -> None:
    """Write the overlay as an 8-bit RGB PNG, nearest-neighbor upscaled."""
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    pixels = overlay.pixels
    if scale > 1:
        pixels = pixels.repeat(scale, axis=0).repeat(scale, axis=1)
    try:
        Image.fromarray(pixels, mode="RGB").save(Path(path), format="PNG")
    except OSError as e:
        raise WriteFailure(f"could not write {path}: {e}") from None
