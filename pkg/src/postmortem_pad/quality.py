"""Image-quality covariates and the live vs. post-mortem rank-sum comparison.

Three covariates are computed per image: average intensity, grayscale
utilization (entropy of the 256-bin histogram, in bits) and sharpness (mean
squared response to a Laplacian-of-Gaussian filter).
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from .dataset import Dataset, Label
from .errors import ParameterError
from .preprocess import DEFAULT_MARGIN, crop_and_mask, load_image

log = logging.getLogger(__name__)

ALPHA = 0.05
DEFAULT_SIGMA = 1.4
EXACT_MAX_N = 12
COVARIATES = ("average_intensity", "entropy", "sharpness")


@dataclass(frozen=True)
class QualityMetrics:
    average_intensity: float
    entropy: float
    sharpness: float


@dataclass(frozen=True)
class HistogramStats:
    counts: np.ndarray
    p: np.ndarray


@dataclass(frozen=True)
class RankSumResult:
    statistic: float  # rank sum of sample_a
    p_value: float
    method: str  # "exact" | "normal_approximation"
    z: float | None = None


def _pixels(image, mask=None) -> np.ndarray:
    image = np.asarray(image)
    if image.size == 0:
        raise ParameterError("image is empty")
    if mask is not None:
        image = image[np.asarray(mask, dtype=bool)]
        if image.size == 0:
            raise ParameterError("mask selects no pixels")
    return image


def average_intensity(image, mask=None) -> float:
    return float(np.mean(_pixels(image, mask), dtype=np.float64))


def histogram(image, mask=None) -> HistogramStats:
    px = _pixels(image, mask).astype(np.int64).ravel()
    if px.min() < 0 or px.max() > 255:
        raise ParameterError("intensities must lie in [0, 255]")
    counts = np.bincount(px, minlength=256)
    return HistogramStats(counts=counts, p=counts / px.size)


def grayscale_utilization(image, mask=None) -> float:
    """Shannon entropy (bits) of the 256-level intensity histogram."""
    p = histogram(image, mask).p
    nz = p[p > 0]
    h = float(-np.sum(nz * np.log2(nz)))
    return h if h > 0 else 0.0


def log_kernel(sigma: float = DEFAULT_SIGMA, halfwidth: int | None = None) -> np.ndarray:
    """Discrete Laplacian-of-Gaussian kernel, shifted to zero mean."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if halfwidth is None:
        halfwidth = int(round(4 * sigma))
    if halfwidth < 1:
        raise ParameterError(f"kernel halfwidth must be >= 1, got {halfwidth}")
    ax = np.arange(-halfwidth, halfwidth + 1, dtype=np.float64)
    r2 = ax[:, None] ** 2 + ax[None, :] ** 2
    k = -1.0 / (math.pi * sigma**4) * (1.0 - r2 / (2 * sigma**2)) * np.exp(-r2 / (2 * sigma**2))
    return k - k.mean()


def log_response(image, sigma: float = DEFAULT_SIGMA, halfwidth: int | None = None, mask=None) -> np.ndarray:
    """Valid-region LoG filter responses for an image scaled to [0, 1].

    Each response is computed as ``sum(k * (window - window_center))``, which
    equals the plain correlation for a zero-sum kernel but is exactly zero on
    flat regions. With ``mask`` only windows lying entirely inside the mask
    are returned.
    """
    k = log_kernel(sigma, halfwidth)
    size = k.shape[0]
    hw = size // 2
    img = np.asarray(image, dtype=np.float64) / 255.0
    if img.ndim != 2 or img.shape[0] < size or img.shape[1] < size:
        raise ParameterError(f"image of shape {img.shape} is smaller than the {size}x{size} kernel")

    out_h, out_w = img.shape[0] - size + 1, img.shape[1] - size + 1
    center = img[hw:hw + out_h, hw:hw + out_w]
    resp = np.zeros((out_h, out_w))
    for i in range(size):
        for j in range(size):
            if k[i, j] != 0.0:
                resp += k[i, j] * (img[i:i + out_h, j:j + out_w] - center)

    if mask is None:
        return resp.ravel()
    mask = np.asarray(mask, dtype=bool)
    inside = np.ones((out_h, out_w), dtype=bool)
    for i in range(size):
        for j in range(size):
            inside &= mask[i:i + out_h, j:j + out_w]
    return resp[inside]


def sharpness(image, sigma: float = DEFAULT_SIGMA, halfwidth: int | None = None, mask=None) -> float:
    """Mean squared LoG response over the valid region."""
    resp = log_response(image, sigma, halfwidth, mask)
    if resp.size == 0:
        raise ParameterError("no kernel-sized window fits inside the masked region")
    return float(np.mean(resp * resp))


def quality_metrics(image, sigma: float = DEFAULT_SIGMA, halfwidth: int | None = None, mask=None) -> QualityMetrics:
    return QualityMetrics(
        average_intensity=average_intensity(image, mask),
        entropy=grayscale_utilization(image, mask),
        sharpness=sharpness(image, sigma, halfwidth, mask),
    )


def midranks(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _rank_sum_distribution(n_a: int, n: int) -> np.ndarray:
    """counts[s] = number of n_a-subsets of {1..n} whose elements sum to s."""
    max_sum = n * (n + 1) // 2
    # ways[k][s]: subsets of size k with sum s, built one rank at a time.
    ways = np.zeros((n_a + 1, max_sum + 1), dtype=object)
    ways[0][0] = 1
    for r in range(1, n + 1):
        for k in range(min(r, n_a), 0, -1):
            ways[k][r:] = ways[k][r:] + ways[k - 1][:max_sum + 1 - r]
    return ways[n_a]


def wilcoxon_rank_sum(sample_a, sample_b) -> RankSumResult:
    """Two-sided Wilcoxon rank-sum test.

    Exact null distribution when the pooled size is at most 12 and there are
    no ties; otherwise the normal approximation with tie and continuity
    corrections.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ParameterError("both samples must be non-empty")
    n_a, n_b = a.size, b.size
    n = n_a + n_b
    pooled = np.concatenate([a, b])
    ranks = midranks(pooled)
    w = float(ranks[:n_a].sum())
    tie_sizes = [t for t in Counter(pooled.tolist()).values() if t > 1]

    if n <= EXACT_MAX_N and not tie_sizes:
        counts = _rank_sum_distribution(n_a, n)
        total = sum(counts)
        w_int = int(round(w))
        lower = sum(counts[:w_int + 1])
        upper = sum(counts[w_int:])
        p = min(1.0, 2.0 * float(min(lower, upper)) / float(total))
        return RankSumResult(statistic=w, p_value=p, method="exact")

    mean = n_a * (n + 1) / 2.0
    tie_term = sum(t**3 - t for t in tie_sizes) / (n * (n - 1)) if n > 1 else 0.0
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return RankSumResult(statistic=w, p_value=1.0, method="normal_approximation", z=0.0)
    dev = max(abs(w - mean) - 0.5, 0.0)
    z = dev / math.sqrt(var)
    p = float(min(1.0, 2.0 * ndtr(-z)))
    return RankSumResult(statistic=w, p_value=p, method="normal_approximation", z=math.copysign(z, w - mean))


@dataclass
class BoxplotStats:
    n: int
    median: float | None
    q1: float | None
    q3: float | None
    whisker_low: float | None
    whisker_high: float | None
    outliers: list[float] = field(default_factory=list)
    mean: float | None = None
    std: float | None = None


def boxplot_stats(values) -> BoxplotStats:
    """Median, quartiles, whiskers at Q1 - 1.5 IQR and Q3 + 1.5 IQR, outliers beyond them."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return BoxplotStats(n=0, median=None, q1=None, q3=None, whisker_low=None, whisker_high=None)
    q1, med, q3 = (float(x) for x in np.percentile(v, [25, 50, 75]))
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    return BoxplotStats(
        n=int(v.size),
        median=med,
        q1=q1,
        q3=q3,
        whisker_low=lo,
        whisker_high=hi,
        outliers=sorted(float(x) for x in v if x < lo or x > hi),
        mean=float(v.mean()),
        std=float(v.std()),
    )


@dataclass
class QualityReport:
    per_image: list[dict]
    per_class: dict[str, dict[str, BoxplotStats]]
    rank_sum: dict[str, RankSumResult] | None
    settings: dict
    warnings: list[str] = field(default_factory=list)

    def significant(self, alpha: float | None = None) -> dict[str, bool] | None:
        if self.rank_sum is None:
            return None
        alpha = self.settings.get("alpha", ALPHA) if alpha is None else alpha
        return {k: r.p_value < alpha for k, r in self.rank_sum.items()}

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "settings": self.settings,
            "per_image": self.per_image,
            "per_class": {
                label: {cov: asdict(stats) for cov, stats in covs.items()} for label, covs in self.per_class.items()
            },
            "rank_sum": None if self.rank_sum is None else {k: asdict(r) for k, r in self.rank_sum.items()},
            "significant_at_alpha": self.significant(),
            "warnings": self.warnings,
        }


def quality_report(
    dataset: Dataset,
    preprocessed: bool = False,
    sigma: float = DEFAULT_SIGMA,
    halfwidth: int | None = None,
    margin_factor: float = DEFAULT_MARGIN,
    alpha: float = ALPHA,
) -> QualityReport:
    """Covariates per image, per-class boxplot statistics and rank-sum tests.

    By default metrics use the full frame. With ``preprocessed=True`` they are
    computed on the cropped/masked image over its nonzero pixels only.
    """
    rows = []
    by_class: dict[str, dict[str, list[float]]] = {}
    for rec in dataset.records:
        image = load_image(rec.image_path)
        mask = None
        if preprocessed:
            image = crop_and_mask(image, rec.annotation, margin_factor)
            mask = image > 0
        m = quality_metrics(image, sigma, halfwidth, mask)
        rows.append({"image_path": str(rec.image_path), "subject_id": rec.subject_id,
                     "label": rec.label.value, **asdict(m)})
        covs = by_class.setdefault(rec.label.value, {c: [] for c in COVARIATES})
        for c in COVARIATES:
            covs[c].append(getattr(m, c))

    per_class = {label: {c: boxplot_stats(v) for c, v in covs.items()} for label, covs in sorted(by_class.items())}

    warnings = []
    rank_sum = None
    if Label.LIVE.value in by_class and Label.POST_MORTEM.value in by_class:
        rank_sum = {
            c: wilcoxon_rank_sum(by_class[Label.LIVE.value][c], by_class[Label.POST_MORTEM.value][c])
            for c in COVARIATES
        }
    else:
        msg = f"only one class present ({', '.join(sorted(by_class))}); rank-sum tests skipped"
        log.warning(msg)
        warnings.append(msg)

    settings = {
        "preprocessed": preprocessed,
        "log_sigma": sigma,
        "log_halfwidth": halfwidth if halfwidth is not None else int(round(4 * sigma)),
        "log_kernel": "mean-subtracted, valid region",
        "margin_factor": margin_factor,
        "alpha": alpha,
    }
    return QualityReport(per_image=rows, per_class=per_class, rank_sum=rank_sum, settings=settings, warnings=warnings)
