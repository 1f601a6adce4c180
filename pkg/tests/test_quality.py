import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage, signal, stats

from postmortem_pad.errors import ParameterError
from postmortem_pad.quality import (
    average_intensity,
    boxplot_stats,
    grayscale_utilization,
    log_kernel,
    log_response,
    midranks,
    quality_metrics,
    quality_report,
    sharpness,
    wilcoxon_rank_sum,
)
from postmortem_pad.dataset import load_manifest


def test_uniform_histogram_entropy_is_eight_bits():
    img = np.arange(256, dtype=np.uint8).reshape(16, 16)
    assert grayscale_utilization(img) == 8.0
    assert grayscale_utilization(np.tile(img, (3, 3))) == 8.0


def test_two_level_entropy_is_one_bit():
    img = np.zeros((4, 4), dtype=np.uint8)
    img[:2] = 200
    assert grayscale_utilization(img) == 1.0


@pytest.mark.parametrize("value", [0, 1, 77, 255])
def test_constant_image(value):
    img = np.full((40, 40), value, dtype=np.uint8)
    m = quality_metrics(img)
    assert m.average_intensity == value
    assert m.entropy == 0.0
    assert m.sharpness == 0.0


def test_masked_metrics_ignore_outside_pixels():
    img = np.full((40, 40), 50, dtype=np.uint8)
    img[:5] = 250
    mask = np.zeros_like(img, dtype=bool)
    mask[10:, :] = True
    assert average_intensity(img, mask) == 50
    assert grayscale_utilization(img, mask) == 0.0
    assert sharpness(img, mask=mask) == 0.0
    with pytest.raises(ParameterError):
        average_intensity(img, np.zeros_like(mask))


def kernel_oracle(sigma, hw):
    k = np.empty((2 * hw + 1, 2 * hw + 1))
    for i in range(-hw, hw + 1):
        for j in range(-hw, hw + 1):
            r2 = i * i + j * j
            k[i + hw, j + hw] = -(1 - r2 / (2 * sigma**2)) * math.exp(-r2 / (2 * sigma**2)) / (math.pi * sigma**4)
    return k - k.mean()


@settings(max_examples=25, deadline=None)
@given(sigma=st.floats(0.6, 3.0), seed=st.integers(0, 1000))
def test_log_response_matches_direct_correlation(sigma, seed):
    img = np.random.default_rng(seed).integers(0, 256, (40, 37)).astype(np.uint8)
    hw = int(round(4 * sigma))
    k = kernel_oracle(sigma, hw)
    np.testing.assert_allclose(log_kernel(sigma), k, rtol=0, atol=1e-15)
    assert abs(k.sum()) < 1e-12
    direct = signal.correlate2d(img / 255.0, k, mode="valid").ravel()
    np.testing.assert_allclose(log_response(img, sigma), direct, rtol=0, atol=1e-10)


def test_blur_reduces_sharpness_on_random_textures():
    rng = np.random.default_rng(0)
    for _ in range(20):
        base = ndimage.gaussian_filter(rng.normal(size=(64, 64)), rng.uniform(0.3, 1.5))
        tex = np.clip(128 + 60 * base / base.std(), 0, 255)
        sharp = np.rint(tex).astype(np.uint8)
        blurred = np.rint(ndimage.gaussian_filter(tex, 2.0)).astype(np.uint8)
        assert sharpness(blurred) < sharpness(sharp)


def test_kernel_validation():
    with pytest.raises(ParameterError):
        log_kernel(0)
    with pytest.raises(ParameterError):
        log_response(np.zeros((5, 5)), sigma=1.4)


def test_midranks():
    np.testing.assert_array_equal(midranks([10, 20, 20, 30]), [1, 2.5, 2.5, 4])
    np.testing.assert_array_equal(midranks([3, 1, 2]), [3, 1, 2])


def permutation_p_value(a, b):
    """Two-sided p from full enumeration of rank assignments."""
    pooled = np.concatenate([a, b])
    ranks = stats.rankdata(pooled)
    w = ranks[:len(a)].sum()
    sums = [sum(c) for c in itertools.combinations(ranks, len(a))]
    lo = sum(s <= w + 1e-9 for s in sums) / len(sums)
    hi = sum(s >= w - 1e-9 for s in sums) / len(sums)
    return min(1.0, 2 * min(lo, hi))


def test_exact_rank_sum_matches_enumeration_for_all_small_sizes():
    rng = np.random.default_rng(1)
    for n in range(2, 13):
        for n_a in range(1, n):
            for _ in range(3):
                pooled = rng.permutation(n) + rng.uniform(0, 0.5)
                a, b = pooled[:n_a], pooled[n_a:]
                r = wilcoxon_rank_sum(a, b)
                assert r.method == "exact"
                assert abs(r.p_value - permutation_p_value(a, b)) <= 1e-12


def test_known_exact_values():
    # Complete separation of 3 vs 3: p = 2 / C(6, 3).
    r = wilcoxon_rank_sum([1, 2, 3], [4, 5, 6])
    assert r.statistic == 6 and r.p_value == pytest.approx(0.1, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(
    a=st.lists(st.integers(0, 20), min_size=3, max_size=30),
    b=st.lists(st.integers(0, 20), min_size=3, max_size=30),
)
def test_normal_approximation_matches_scipy(a, b):
    if len(a) + len(b) <= 12 and len(set(a + b)) == len(a + b):
        return
    r = wilcoxon_rank_sum(a, b)
    assert r.method == "normal_approximation"
    if len(set(a + b)) == 1:
        assert r.p_value == 1.0
        return
    ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    assert r.p_value == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-15)


def test_rank_sum_p_is_symmetric_in_sample_order():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=15), rng.normal(0.5, size=20)
    assert wilcoxon_rank_sum(a, b).p_value == pytest.approx(wilcoxon_rank_sum(b, a).p_value, rel=1e-12)


def test_boxplot_fences_and_outliers():
    s = boxplot_stats([1, 2, 3, 4, 100])
    assert (s.q1, s.median, s.q3) == (2, 3, 4)
    assert (s.whisker_low, s.whisker_high) == (-1, 7)
    assert s.outliers == [100]
    assert boxplot_stats([]).n == 0


def test_quality_report_on_synthetic_blur(small_corpus):
    ds = load_manifest(small_corpus / "manifest.csv")
    rep = quality_report(ds)
    assert len(rep.per_image) == len(ds)
    assert set(rep.per_class) == {"live", "post_mortem"}
    # The planted cue is blur: post-mortem images are less sharp.
    assert rep.per_class["post_mortem"]["sharpness"].median < rep.per_class["live"]["sharpness"].median
    assert rep.significant()["sharpness"]
    d = rep.to_dict()
    assert d["schema_version"] == 1 and d["settings"]["alpha"] == 0.05

    masked = quality_report(ds, preprocessed=True)
    assert masked.settings["preprocessed"] is True

    live_only = type(ds)(records=[r for r in ds.records if r.label.value == "live"])
    single = quality_report(live_only)
    assert single.rank_sum is None and single.warnings
