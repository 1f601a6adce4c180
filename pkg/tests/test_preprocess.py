import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from postmortem_pad.dataset import IrisAnnotation
from postmortem_pad.errors import ConsistencyError, LoadError, ParameterError
from postmortem_pad.preprocess import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    NORMALIZATION_TAG,
    crop_and_mask,
    crop_side,
    load_image,
    prepare_for_network,
    recentered_annotation,
    save_image,
)


def crop_oracle(image, ann, m=1.2):
    """Pixel-by-pixel reference: output (r, c) samples source (top + r, left + c)."""
    side = math.ceil(round(2 * m * ann.radius_Ri, 9))
    half = side // 2
    cy = math.floor(ann.center_y + 0.5)
    cx = math.floor(ann.center_x + 0.5)
    out = np.zeros((side, side), dtype=image.dtype)
    for r in range(side):
        for c in range(side):
            if (r - half) ** 2 + (c - half) ** 2 > (m * ann.radius_Ri) ** 2:
                continue
            sr, sc = cy - half + r, cx - half + c
            if 0 <= sr < image.shape[0] and 0 <= sc < image.shape[1]:
                out[r, c] = image[sr, sc]
    return out


@settings(max_examples=60, deadline=None)
@given(
    h=st.integers(8, 60),
    w=st.integers(8, 60),
    fx=st.floats(0, 0.999),
    fy=st.floats(0, 0.999),
    radius=st.floats(1.0, 40.0),
    seed=st.integers(0, 1000),
)
def test_crop_matches_pixel_oracle(h, w, fx, fy, radius, seed):
    image = np.random.default_rng(seed).integers(1, 256, (h, w), dtype=np.uint8)
    ann = IrisAnnotation(center_x=fx * w, center_y=fy * h, radius_Ri=radius)
    out = crop_and_mask(image, ann)
    assert out.shape == (crop_side(radius), crop_side(radius))
    np.testing.assert_array_equal(out, crop_oracle(image, ann))


def test_crop_side_exact_products():
    assert crop_side(100) == 240
    assert crop_side(10.5) == math.ceil(2.4 * 10.5)
    assert crop_side(1) == 3


def test_crop_rejects_bad_inputs():
    img = np.ones((10, 10), dtype=np.uint8)
    with pytest.raises(ParameterError):
        crop_and_mask(img, IrisAnnotation(5, 5, 3), margin_factor=0.9)
    with pytest.raises(ConsistencyError):
        crop_and_mask(img, IrisAnnotation(10, 5, 3))


def test_recentered_annotation_points_at_center():
    ann = IrisAnnotation(40.2, 30.7, 11.0)
    rc = recentered_annotation(ann)
    assert rc.center_x == rc.center_y == crop_side(11.0) // 2
    assert rc.radius_Ri == 11.0


def test_prepare_for_network_normalization():
    img = np.full((20, 20), 128, dtype=np.uint8)
    inp = prepare_for_network(img, 32)
    assert inp.tensor.shape == (3, 32, 32) and inp.tensor.dtype == torch.float32
    for c in range(3):
        expected = (128 / 255 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]
        assert torch.allclose(inp.tensor[c], torch.tensor(expected, dtype=torch.float32), atol=1e-6)
    assert inp.normalization_tag == NORMALIZATION_TAG
    with pytest.raises(ParameterError):
        prepare_for_network(img, 0)


def test_image_io_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (17, 23), dtype=np.uint8)
    path = save_image(img, tmp_path / "x.png")
    np.testing.assert_array_equal(load_image(path), img)
    with pytest.raises(LoadError):
        load_image(tmp_path / "missing.png")
