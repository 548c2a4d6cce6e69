"""Gradient-weighted class activation maps for the damage class.

The pipeline is: capture the feature layer during a forward pass, take the
gradient of the damage logit w.r.t. it, average that gradient spatially to get
one weight per channel, ReLU the weighted channel sum to get a coarse grid,
then bilinearly upsample the grid to the image resolution.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .network import DAMAGE_CLASS, Network, backward_class_to_layer, forward

# jet-style colormap anchors (position, RGB) and overlay weight
JET_ANCHORS = np.array([
    [0.000, 0.0, 0.0, 0.5],
    [0.125, 0.0, 0.0, 1.0],
    [0.375, 0.0, 1.0, 1.0],
    [0.625, 1.0, 1.0, 0.0],
    [0.875, 1.0, 0.0, 0.0],
    [1.000, 0.5, 0.0, 0.0],
])
HEATMAP_ALPHA = 0.5
DEFAULT_FRACTION = 0.2


def channel_weights(grads: np.ndarray) -> np.ndarray:
    """Spatial mean of the gradient per channel: ``K x H x W -> K``."""
    if grads.ndim != 3:
        raise T.ShapeError(f"expected K x H x W gradients, got shape {grads.shape}")
    return grads.astype(np.float64).mean(axis=(1, 2))


def saliency_grid(feature_maps: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """ReLU of the weight-combined feature maps."""
    if feature_maps.ndim != 3:
        raise T.ShapeError(f"expected K x H x W feature maps, got shape {feature_maps.shape}")
    if weights.shape != (feature_maps.shape[0],):
        raise T.ShapeError(
            f"channel count mismatch: {feature_maps.shape[0]} feature maps, {weights.shape} weights"
        )
    combined = np.tensordot(weights, feature_maps.astype(np.float64), axes=(0, 0))
    return np.maximum(combined, 0.0)


def damage_detection_map(network: Network, image: np.ndarray, class_index: int = DAMAGE_CLASS,
                         layer: str | None = None):
    """Saliency for ``class_index`` on one C x H x W image.

    Returns ``(grid, upsampled)``: the grid at feature-layer resolution and the
    same map bilinearly resized to the image's H x W.
    """
    if image.ndim != 3:
        raise T.ShapeError(f"expected a single C x H x W image, got shape {image.shape}")
    layer = layer or network.config.feature_layer()
    _, trace = forward(network, image[None], capture=[layer])
    grads = backward_class_to_layer(network, trace, class_index, layer)[0]
    feats = trace.activations[layer][0]
    grid = saliency_grid(feats, channel_weights(grads))
    return grid, T.bilinear_resize(grid, image.shape[1], image.shape[2])


def batch_detection_maps(network: Network, images: np.ndarray, class_index: int = DAMAGE_CLASS,
                         layer: str | None = None) -> np.ndarray:
    """Saliency grids for N images (N x H_f x W_f).

    Runs one image at a time so every grid is bit-identical to the
    single-image path regardless of batch composition.
    """
    return np.stack([damage_detection_map(network, x, class_index, layer)[0] for x in images])


def binary_mask(saliency_map: np.ndarray, fraction: float = DEFAULT_FRACTION) -> np.ndarray:
    """255 where the map is strictly above ``fraction * max``, else 0."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    cutoff = fraction * saliency_map.max()
    return np.where(saliency_map > cutoff, 255, 0).astype(np.uint8)


def jet(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB floats in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)
    return np.stack([np.interp(v, JET_ANCHORS[:, 0], JET_ANCHORS[:, c]) for c in (1, 2, 3)], axis=-1)


def render_heatmap(saliency_map: np.ndarray, base_image: np.ndarray) -> np.ndarray:
    """Overlay the max-normalised map on ``base_image`` (H x W x 3 uint8).

    Returns an H x W x 3 uint8 image.
    """
    if base_image.shape != saliency_map.shape + (3,):
        raise T.ShapeError(f"base image {base_image.shape} does not match map {saliency_map.shape}")
    m = saliency_map.astype(np.float64)
    peak = m.max()
    if peak > 0:
        m = m / peak
    colors = jet(m) * 255.0
    blended = HEATMAP_ALPHA * colors + (1 - HEATMAP_ALPHA) * base_image.astype(np.float64)
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)
