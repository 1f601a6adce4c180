"""Grad-CAM, guided backpropagation and their product, plus rendering.

All gradients are obtained with ``torch.autograd.grad`` on call-local tensors;
no hooks are registered on the model, so concurrent calls against one loaded
model do not share gradient state.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image as PILImage

from .dataset import IrisAnnotation, Label
from .errors import ConsistencyError, LoadError, ParameterError
from .model import CLASS_INDEX, CONV_INDEX, LAST_CONV, TrainedModel
from .preprocess import IMAGENET_STD, NetworkInput, crop_offset, crop_side

GUTTER = 4
OVERLAY_ALPHA = 0.5
COLORMAP = "jet"


@dataclass
class Heatmap:
    values: np.ndarray
    target_class: Label
    layer_id: str
    input_digest: str = ""


@dataclass
class SaliencyMap:
    values: np.ndarray
    target_class: Label
    input_digest: str = ""


def input_digest(inp: NetworkInput) -> str:
    return hashlib.sha1(inp.tensor.detach().float().contiguous().numpy().tobytes()).hexdigest()


def _feature_end(layer_id: str) -> int:
    """Index in ``net.features`` of the ReLU that rectifies ``layer_id``."""
    if layer_id not in CONV_INDEX:
        raise ParameterError(f"unknown layer {layer_id!r}; expected one of {', '.join(CONV_INDEX)}")
    return CONV_INDEX[layer_id] + 1


def _as_batch(model: TrainedModel, inp: NetworkInput) -> torch.Tensor:
    dtype = next(model.net.parameters()).dtype
    return inp.tensor.detach().to(dtype)[None]


def feature_maps(model: TrainedModel, inp: NetworkInput, layer_id: str = LAST_CONV) -> torch.Tensor:
    """Rectified activations of ``layer_id`` for one input, shape (1, C, h, w)."""
    end = _feature_end(layer_id)
    model.net.eval()
    with torch.no_grad():
        return model.net.features[:end + 1](_as_batch(model, inp))


def class_score(model: TrainedModel, activations: torch.Tensor, layer_id: str, target_class: Label) -> torch.Tensor:
    """Pre-softmax score of ``target_class`` computed from ``layer_id`` activations onward."""
    end = _feature_end(layer_id)
    net = model.net
    return net.head(net.features[end + 1:](activations))[0, CLASS_INDEX[Label(target_class)]]


def class_score_gradient(model: TrainedModel, activations: torch.Tensor, layer_id: str,
                         target_class: Label) -> torch.Tensor:
    model.net.eval()
    a = activations.detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(class_score(model, a, layer_id, target_class), a)
    return grad


def grad_cam(model: TrainedModel, inp: NetworkInput, target_class: Label, layer_id: str = LAST_CONV) -> Heatmap:
    target_class = Label(target_class)
    acts = feature_maps(model, inp, layer_id)
    grad = class_score_gradient(model, acts, layer_id, target_class)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = torch.relu((weights * acts).sum(dim=1))[0]
    return Heatmap(
        values=cam.detach().double().numpy(),
        target_class=target_class,
        layer_id=layer_id,
        input_digest=input_digest(inp),
    )


class GuidedReLU(torch.autograd.Function):
    """ReLU whose backward pass keeps only positive gradients at positive inputs."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.clamp(min=0)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        return grad_output.clamp(min=0) * (x > 0).to(grad_output.dtype)


def _forward(net: nn.Module, x: torch.Tensor, guided: bool) -> torch.Tensor:
    def run(seq, h):
        for m in seq:
            h = GuidedReLU.apply(h) if guided and isinstance(m, nn.ReLU) else m(h)
        return h

    h = run(net.features, x)
    h = torch.flatten(net.avgpool(h), 1)
    return run(net.classifier, h)


def input_gradient(model: TrainedModel, inp: NetworkInput, target_class: Label, guided: bool) -> torch.Tensor:
    model.net.eval()
    x = _as_batch(model, inp).requires_grad_(True)
    score = _forward(model.net, x, guided)[0, CLASS_INDEX[Label(target_class)]]
    (grad,) = torch.autograd.grad(score, x)
    return grad[0]


def _to_gray_gradient(grad: torch.Tensor) -> np.ndarray:
    # The three channels are normalized copies of one gray image; chain rule back to it.
    std = torch.tensor(IMAGENET_STD, dtype=grad.dtype)[:, None, None]
    return (grad / std).sum(dim=0).detach().double().numpy()


def guided_backprop(model: TrainedModel, inp: NetworkInput, target_class: Label) -> SaliencyMap:
    target_class = Label(target_class)
    grad = input_gradient(model, inp, target_class, guided=True)
    return SaliencyMap(values=_to_gray_gradient(grad), target_class=target_class, input_digest=input_digest(inp))


def vanilla_backprop(model: TrainedModel, inp: NetworkInput, target_class: Label) -> SaliencyMap:
    target_class = Label(target_class)
    grad = input_gradient(model, inp, target_class, guided=False)
    return SaliencyMap(values=_to_gray_gradient(grad), target_class=target_class, input_digest=input_digest(inp))


def _resample_axis(arr: np.ndarray, size: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    if n == size:
        return arr
    src = (np.arange(size) + 0.5) * (n / size) - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    t = src - i0
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = size
    # a + t*(b - a) keeps constant fields exact.
    return a + t.reshape(shape) * (b - a)


def resize_bilinear(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with half-pixel centers (``align_corners=False``)."""
    arr = np.asarray(arr, dtype=np.float64)
    return _resample_axis(_resample_axis(arr, shape[0], 0), shape[1], 1)


def guided_grad_cam(heatmap: Heatmap, saliency: SaliencyMap) -> SaliencyMap:
    if heatmap.target_class != saliency.target_class:
        raise ConsistencyError(
            f"heatmap is for {heatmap.target_class.value}, saliency for {saliency.target_class.value}"
        )
    if heatmap.input_digest and saliency.input_digest and heatmap.input_digest != saliency.input_digest:
        raise ConsistencyError("heatmap and saliency map were computed for different inputs")
    up = resize_bilinear(heatmap.values, saliency.values.shape)
    return SaliencyMap(values=up * saliency.values, target_class=saliency.target_class,
                       input_digest=saliency.input_digest)


def normalize_heatmap(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    return values / peak if peak > 0 else np.zeros_like(values)


def mass_fraction_in_box(heatmap: Heatmap, box, input_size: int) -> float:
    """Share of heatmap mass (after upsampling to the input) inside ``box = (x0, y0, x1, y1)``."""
    up = resize_bilinear(heatmap.values, (input_size, input_size))
    total = up.sum()
    if total <= 0:
        return 0.0
    x0, y0, x1, y1 = box
    cols = (np.arange(input_size) + 0.5)[None, :]
    rows = (np.arange(input_size) + 0.5)[:, None]
    inside = (cols >= x0) & (cols <= x1) & (rows >= y0) & (rows <= y1)
    return float(up[inside].sum() / total)


def project_box(box, annotation: IrisAnnotation, input_size: int, margin_factor: float = 1.2):
    """Map a source-image box (x0, y0, x1, y1) into network-input coordinates."""
    top, left = crop_offset(annotation, margin_factor)
    scale = input_size / crop_side(annotation.radius_Ri, margin_factor)
    x0, y0, x1, y1 = box
    return ((x0 - left) * scale, (y0 - top) * scale, (x1 - left) * scale, (y1 - top) * scale)


def dilate_box(box, factor: float):
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = (x1 - x0) * factor / 2, (y1 - y0) * factor / 2
    return (cx - hw, cy - hh, cx + hw, cy + hh)


def _colorize(values01: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    return colormaps[COLORMAP](values01)[..., :3]


def _gray_rgb(image: np.ndarray) -> np.ndarray:
    g = np.asarray(image, dtype=np.float64) / 255.0
    return np.repeat(g[..., None], 3, axis=2)


def overlay_rgb(image: np.ndarray, heatmap: Heatmap) -> np.ndarray:
    """Colorized, max-normalized heatmap alpha-blended over the gray image, in [0, 1]."""
    h = normalize_heatmap(resize_bilinear(heatmap.values, image.shape))
    return (1 - OVERLAY_ALPHA) * _gray_rgb(image) + OVERLAY_ALPHA * _colorize(h)


def saliency_rgb(values: np.ndarray, shape) -> np.ndarray:
    v = resize_bilinear(values, shape)
    peak = np.abs(v).max()
    v = 0.5 + 0.5 * v / peak if peak > 0 else np.full(v.shape, 0.5)
    return np.repeat(v[..., None], 3, axis=2)


def _save_rgb(rgb: np.ndarray, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray(np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise LoadError(f"cannot write {path}: {exc}") from None
    return path


def render_overlay(image: np.ndarray, heatmap: Heatmap, output_path) -> Path:
    return _save_rgb(overlay_rgb(image, heatmap), output_path)


def panel_rgb(image: np.ndarray, heatmap: Heatmap, saliency: SaliencyMap, combined: SaliencyMap) -> np.ndarray:
    """Original | Grad-CAM | guided backprop | guided Grad-CAM, separated by white gutters."""
    panels = [
        _gray_rgb(image),
        overlay_rgb(image, heatmap),
        saliency_rgb(saliency.values, image.shape),
        saliency_rgb(combined.values, image.shape),
    ]
    gutter = np.ones((image.shape[0], GUTTER, 3))
    parts = []
    for i, p in enumerate(panels):
        if i:
            parts.append(gutter)
        parts.append(p)
    return np.concatenate(parts, axis=1)


def render_panel(image, heatmap, saliency, combined, output_path) -> Path:
    return _save_rgb(panel_rgb(image, heatmap, saliency, combined), output_path)


def explain_input(model: TrainedModel, inp: NetworkInput, target_class: Label, layer_id: str = LAST_CONV):
    heatmap = grad_cam(model, inp, target_class, layer_id)
    saliency = guided_backprop(model, inp, target_class)
    return heatmap, saliency, guided_grad_cam(heatmap, saliency)


def write_explanation(output_dir, sample_id: str, image: np.ndarray, heatmap: Heatmap,
                      saliency: SaliencyMap, combined: SaliencyMap) -> dict[str, Path]:
    """Write the four ``<sample_id>__<class>__*.png`` renders and return their paths."""
    output_dir = Path(output_dir)
    stem = f"{sample_id}__{heatmap.target_class.value}"
    files = {
        "cam": render_overlay(image, heatmap, output_dir / f"{stem}__cam.png"),
        "gbp": _save_rgb(saliency_rgb(saliency.values, image.shape), output_dir / f"{stem}__gbp.png"),
        "guided_cam": _save_rgb(saliency_rgb(combined.values, image.shape), output_dir / f"{stem}__guided_cam.png"),
        "panel": render_panel(image, heatmap, saliency, combined, output_dir / f"{stem}__panel.png"),
    }
    meta = {"sample_id": sample_id, "target_class": heatmap.target_class.value, "layer_id": heatmap.layer_id,
            "heatmap_shape": list(heatmap.values.shape), "files": {k: v.name for k, v in files.items()}}
    (output_dir / f"{stem}__meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return files

