"""Class-activation heatmaps over a chosen conv block of a view branch,
plus heatmap-on-image overlay rendering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autonn as nn
from .autonn import ParamStore
from .errors import InvalidLayer
from .imgproc import GrayImage, RasterImage
from .model import ModelConfig, forward_batch


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # [0,1], activation-layer resolution
    view: str
    target_class: int
    all_zero: bool


def _activation_and_gradient(store: ParamStore, views_x: np.ndarray,
                             config: ModelConfig, target_class, view: str,
                             block: int):
    if view not in config.views or not (0 <= block < len(config.branch_channels)):
        raise InvalidLayer(f"no activation for view={view!r} block={block}")
    logits, _, acts = forward_batch(store, views_x[None], config,
                                    capture_acts=True)
    if target_class == "predicted":
        target_class = int(logits.data[0].argmax())
    act = acts[(view, block)]
    score = nn.pick(logits, (0, int(target_class)))
    score.backward()
    a = act.data[0]  # (channels, h, w)
    g = act.grad[0] if act.grad is not None else np.zeros_like(a)
    return a, g, int(target_class)


def _normalize(cam: np.ndarray, view: str, target: int) -> Heatmap:
    cam = np.maximum(cam, 0.0)
    peak = cam.max()
    if peak > 0.0:
        return Heatmap(values=cam / peak, view=view, target_class=target,
                       all_zero=False)
    return Heatmap(values=np.zeros_like(cam), view=view, target_class=target,
                   all_zero=True)


def grad_cam(store: ParamStore, views_x: np.ndarray, config: ModelConfig,
             target_class="predicted", view: str = "straight",
             block: int | None = None) -> Heatmap:
    """Channel weights are spatial means of the target-logit gradient."""
    if block is None:
        block = len(config.branch_channels) - 1
    a, g, target = _activation_and_gradient(store, views_x, config,
                                            target_class, view, block)
    weights = g.mean(axis=(1, 2))
    cam = np.tensordot(weights, a, axes=1)
    return _normalize(cam, view, target)


def grad_cam_pp(store: ParamStore, views_x: np.ndarray, config: ModelConfig,
                target_class="predicted", view: str = "straight",
                block: int | None = None) -> Heatmap:
    """Grad-CAM++ under the ReLU-network closed form: per-pixel weights
    alpha = g^2 / (2 g^2 + sum_spatial(A) * g^3), zero where the denominator
    vanishes; channel weight = sum_spatial(alpha * relu(g)).

    With a piecewise-linear network after the chosen block, the second and
    third derivatives of exp(logit) are exp(logit) * g^2 and exp(logit) * g^3,
    so this alpha is exactly the exponentiated-score formula with the
    exp factors cancelled.
    """
    if block is None:
        block = len(config.branch_channels) - 1
    a, g, target = _activation_and_gradient(store, views_x, config,
                                            target_class, view, block)
    g2 = g ** 2
    denom = 2.0 * g2 + a.sum(axis=(1, 2), keepdims=True) * g ** 3
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = np.where(denom != 0.0, g2 / denom, 0.0)
    weights = (alpha * np.maximum(g, 0.0)).sum(axis=(1, 2))
    cam = np.tensordot(weights, a, axes=1)
    return _normalize(cam, view, target)


def upsample_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = values.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = values[np.ix_(y0, x0)] * (1 - wx) + values[np.ix_(y0, x1)] * wx
    bot = values[np.ix_(y1, x0)] * (1 - wx) + values[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def colormap_blue_red(values: np.ndarray) -> np.ndarray:
    """Linear blue (0) -> red (1) map through purple; returns float RGB."""
    r = 255.0 * values
    b = 255.0 * (1.0 - values)
    g = np.zeros_like(values)
    return np.stack([r, g, b], axis=-1)


def overlay(heatmap: Heatmap, base: GrayImage, alpha: float) -> RasterImage:
    """Blend the colormapped heatmap over the grayscale base image."""
    hm = upsample_bilinear(heatmap.values, base.height, base.width)
    color = colormap_blue_red(np.clip(hm, 0.0, 1.0))
    gray_rgb = np.repeat((base.data * 255.0)[:, :, None], 3, axis=2)
    blend = (1.0 - alpha) * gray_rgb + alpha * color
    data = np.clip(np.rint(blend), 0, 255).astype(np.uint8)
    return RasterImage(width=base.width, height=base.height, channels=3, data=data)
