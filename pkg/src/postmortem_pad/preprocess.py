"""Iris crop/mask and conversion to network input tensors."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .dataset import IrisAnnotation
from .errors import ConsistencyError, LoadError, ParameterError

# ImageNet statistics used by the torchvision VGG-16 weights.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
NORMALIZATION_TAG = (
    "resize=bilinear(align_corners=False);scale=1/255;gray->rgb;"
    "mean=0.485,0.456,0.406;std=0.229,0.224,0.225"
)
DEFAULT_MARGIN = 1.2


@dataclass
class NetworkInput:
    tensor: torch.Tensor  # (3, S, S) float32
    normalization_tag: str = NORMALIZATION_TAG


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit single-channel image as a (height, width) uint8 array."""
    try:
        with PILImage.open(path) as im:
            if im.mode != "L":
                raise LoadError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except OSError as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from None


def save_image(pixels: np.ndarray, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path, format="PNG")
    return path


def crop_side(radius: float, margin_factor: float = DEFAULT_MARGIN) -> int:
    # Rounded before ceil so that e.g. 2*1.2*100 does not become 241.
    return math.ceil(round(2.0 * margin_factor * radius, 9))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def recentered_annotation(annotation: IrisAnnotation, margin_factor: float = DEFAULT_MARGIN) -> IrisAnnotation:
    """Annotation of the same iris in the coordinates of the cropped image."""
    half = crop_side(annotation.radius_Ri, margin_factor) // 2
    return IrisAnnotation(center_x=float(half), center_y=float(half), radius_Ri=annotation.radius_Ri)


def crop_offset(annotation: IrisAnnotation, margin_factor: float = DEFAULT_MARGIN) -> tuple[int, int]:
    """(row, col) in the source image of the crop's top-left pixel."""
    half = crop_side(annotation.radius_Ri, margin_factor) // 2
    return _round_half_up(annotation.center_y) - half, _round_half_up(annotation.center_x) - half


def crop_and_mask(image: np.ndarray, annotation: IrisAnnotation, margin_factor: float = DEFAULT_MARGIN) -> np.ndarray:
    """Square crop around the iris with everything beyond ``margin_factor * R`` zeroed.

    The square has side ``ceil(2 * margin_factor * R)``; the rounded iris center
    maps to pixel ``(side // 2, side // 2)`` of the output. Parts of the square
    that fall outside the source frame are zero-filled. The pupil is left as is.
    """
    if margin_factor < 1:
        raise ParameterError(f"margin_factor must be >= 1, got {margin_factor}")
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ParameterError(f"expected a non-empty 2-D image, got shape {image.shape}")
    height, width = image.shape
    if not annotation.radius_Ri > 0:
        raise ConsistencyError(f"radius_Ri must be positive, got {annotation.radius_Ri}")
    if not (0 <= annotation.center_x < width and 0 <= annotation.center_y < height):
        raise ConsistencyError(
            f"iris center ({annotation.center_x}, {annotation.center_y}) outside {width}x{height} image"
        )

    side = crop_side(annotation.radius_Ri, margin_factor)
    half = side // 2
    top, left = crop_offset(annotation, margin_factor)

    out = np.zeros((side, side), dtype=image.dtype)
    src_r0, src_r1 = max(top, 0), min(top + side, height)
    src_c0, src_c1 = max(left, 0), min(left + side, width)
    if src_r0 < src_r1 and src_c0 < src_c1:
        out[src_r0 - top:src_r1 - top, src_c0 - left:src_c1 - left] = image[src_r0:src_r1, src_c0:src_c1]

    rr, cc = np.ogrid[:side, :side]
    outside = (rr - half) ** 2 + (cc - half) ** 2 > (margin_factor * annotation.radius_Ri) ** 2
    out[outside] = 0
    return out


def prepare_for_network(image: np.ndarray, target_size: int) -> NetworkInput:
    """Bilinear resize, replicate to three channels and apply ImageNet normalization."""
    if not isinstance(target_size, (int, np.integer)) or target_size <= 0:
        raise ParameterError(f"target_size must be a positive integer, got {target_size!r}")
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ParameterError(f"expected a non-empty 2-D image, got shape {image.shape}")

    x = torch.from_numpy(image.astype(np.float32) / 255.0)[None, None]
    if x.shape[-2:] != (target_size, target_size):
        x = F.interpolate(x, size=(target_size, target_size), mode="bilinear", align_corners=False)
    x = x[0].expand(3, -1, -1)
    mean = torch.tensor(IMAGENET_MEAN, dtype=torch.float32)[:, None, None]
    std = torch.tensor(IMAGENET_STD, dtype=torch.float32)[:, None, None]
    return NetworkInput(tensor=((x - mean) / std).contiguous())


def preprocess_record(record, target_size: int, margin_factor: float = DEFAULT_MARGIN) -> NetworkInput:
    image = load_image(record.image_path)
    return prepare_for_network(crop_and_mask(image, record.annotation, margin_factor), target_size)


def write_cropped_masked(dataset, source_root: str | os.PathLike, output_root: str | os.PathLike,
                         margin_factor: float = DEFAULT_MARGIN) -> list[Path]:
    """Mirror ``cropped_masked`` versions of all images under ``output_root``.

    Paths below ``source_root`` are kept; images are always written as PNG.
    """
    source_root = Path(source_root).resolve()
    output_root = Path(output_root)
    written = []
    for rec in dataset.records:
        src = Path(rec.image_path).resolve()
        try:
            rel = src.relative_to(source_root)
        except ValueError:
            rel = Path(src.name)
        dst = (output_root / rel).with_suffix(".png")
        written.append(save_image(crop_and_mask(load_image(src), rec.annotation, margin_factor), dst))
    return written
