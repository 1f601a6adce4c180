"""Synthetic two-class iris-like corpus with controllable liveness cues.

Every subject gets its own texture seed, so a classifier cannot recognise a
test subject from its texture. Post-mortem images carry one of three cues
whose strength grows with the assigned hours since death:

* ``blur``: Gaussian blur of the whole frame,
* ``boundary_fade``: a softened iris/sclera boundary,
* ``planted_patch``: a bright square inside the iris (for CAM localization).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import Dataset, Eye, IrisAnnotation, Label, SampleRecord, write_manifest
from .errors import ConfigurationError, LoadError
from .preprocess import save_image

CUES = ("blur", "boundary_fade", "planted_patch")
MANIFEST_NAME = "manifest.csv"
META_NAME = "synth_meta.json"


@dataclass
class SynthConfig:
    n_subjects_per_class: int = 4
    images_per_subject: int = 5
    image_size: int = 128
    cue: str = "blur"
    hours_range: tuple[float, float] = (5.0, 814.0)
    rng_seed: int = 0
    # Cue strength runs from cue_floor at hours_range[0] to 1 at hours_range[1].
    cue_floor: float = 0.4
    max_blur_sigma: float = 2.5
    max_fade_fraction: float = 0.35
    patch_fraction: float = 0.45
    noise_sigma: float = 3.0
    workers: int = 1

    def validate(self) -> None:
        if self.n_subjects_per_class < 1 or self.images_per_subject < 1:
            raise ConfigurationError("subject and image counts must be positive")
        if self.image_size < 32:
            raise ConfigurationError(f"image_size must be at least 32, got {self.image_size}")
        if self.cue not in CUES:
            raise ConfigurationError(f"cue must be one of {CUES}, got {self.cue!r}")
        lo, hi = self.hours_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"hours_range must satisfy 0 < min <= max, got {self.hours_range}")
        if not 0 <= self.cue_floor <= 1:
            raise ConfigurationError(f"cue_floor must lie in [0, 1], got {self.cue_floor}")


def cue_strength(hours: float, config: SynthConfig) -> float:
    """Non-decreasing map from hours since death to a cue strength in [cue_floor, 1]."""
    if hours <= 0:
        return 0.0
    lo, hi = config.hours_range
    if hi == lo:
        return 1.0
    t = math.log(hours / lo) / math.log(hi / lo)
    t = min(max(t, 0.0), 1.0)
    return config.cue_floor + (1.0 - config.cue_floor) * t


def _texture_map(rng: np.random.Generator, n_theta: int = 256, n_r: int = 48) -> np.ndarray:
    # Polar texture: radial furrows plus smoothed crypt-like blobs, wrapped in angle.
    theta = np.linspace(0, 2 * np.pi, n_theta, endpoint=False)[None, :]
    rad = np.linspace(0, 1, n_r)[:, None]
    tex = np.zeros((n_r, n_theta))
    for _ in range(6):
        freq = rng.integers(8, 40)
        tex += rng.uniform(0.3, 1.0) * np.sin(freq * theta + rng.uniform(0, 2 * np.pi) + rng.uniform(-3, 3) * rad)
    blobs = ndimage.gaussian_filter(rng.normal(size=(n_r, n_theta)), sigma=(2.0, 3.0), mode=("nearest", "wrap"))
    tex = tex / 3.0 + 4.0 * blobs
    tex += 0.6 * np.sin(2 * np.pi * rad * rng.uniform(1.5, 3.5) + rng.uniform(0, 6))
    return (tex - tex.mean()) / (tex.std() + 1e-12)


def _render_eye(rng: np.random.Generator, texture: np.ndarray, size: int, fade_fraction: float):
    cx = size / 2 + rng.uniform(-0.05, 0.05) * size
    cy = size / 2 + rng.uniform(-0.05, 0.05) * size
    radius = size * rng.uniform(0.26, 0.30)
    pupil = radius * rng.uniform(0.35, 0.45)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    r = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)

    n_r, n_theta = texture.shape
    ri = np.clip((r - pupil) / max(radius - pupil, 1e-6), 0, 1) * (n_r - 1)
    ti = theta / (2 * np.pi) * n_theta
    tex = ndimage.map_coordinates(texture, [ri, ti], order=1, mode="grid-wrap")

    iris_level = rng.uniform(80, 105)
    sclera_level = rng.uniform(150, 185)
    pupil_level = rng.uniform(12, 25)

    sclera = sclera_level + 12.0 * (yy / size - 0.5) + rng.normal(0, 1.0)
    iris = iris_level + 22.0 * tex
    # Smooth step across the limbus; a wider fade softens the boundary.
    width = 0.75 + fade_fraction * radius
    w_iris = 1.0 / (1.0 + np.exp((r - radius) / (width / 2.0)))
    w_pupil = 1.0 / (1.0 + np.exp((r - pupil) / 0.5))
    img = sclera * (1 - w_iris) + iris * w_iris
    img = img * (1 - w_pupil) + pupil_level * w_pupil
    return img, IrisAnnotation(center_x=float(cx), center_y=float(cy), radius_Ri=float(radius))


def _plant_patch(rng, img, ann: IrisAnnotation, fraction: float, strength: float):
    side = max(2, int(round(fraction * ann.radius_Ri)))
    # Keep the whole square within 0.95 R so the crop/mask never clips it.
    limit = 0.95 * ann.radius_Ri - side / math.sqrt(2)
    for _ in range(100):
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0, max(limit, 0))
        px = ann.center_x + dist * math.cos(ang)
        py = ann.center_y + dist * math.sin(ang)
        x0, y0 = int(round(px - side / 2)), int(round(py - side / 2))
        corners = [(x0, y0), (x0 + side, y0), (x0, y0 + side), (x0 + side, y0 + side)]
        if all(math.hypot(x - ann.center_x, y - ann.center_y) <= 0.95 * ann.radius_Ri for x, y in corners):
            break
    level = 180.0 + 75.0 * strength
    img[y0:y0 + side, x0:x0 + side] = level
    return [x0, y0, x0 + side, y0 + side]


def _subject_samples(config: SynthConfig, label: Label, index: int, seed_seq: np.random.SeedSequence,
                     image_dir: Path) -> tuple[list[SampleRecord], list[dict]]:
    rng = np.random.default_rng(seed_seq)
    prefix = "live" if label is Label.LIVE else "pm"
    subject_id = f"{prefix}_{index:03d}"
    textures = {Eye.LEFT: _texture_map(rng), Eye.RIGHT: _texture_map(rng)}

    lo, hi = config.hours_range
    if label is Label.POST_MORTEM:
        hours = np.sort(np.exp(rng.uniform(math.log(lo), math.log(hi), config.images_per_subject)))
        hours = [round(float(h), 3) for h in hours]
    else:
        hours = [0.0] * config.images_per_subject

    records, meta = [], []
    for k in range(config.images_per_subject):
        eye = Eye.LEFT if k % 2 == 0 else Eye.RIGHT
        h = hours[k]
        strength = cue_strength(h, config) if label is Label.POST_MORTEM else 0.0
        fade = config.max_fade_fraction * strength if config.cue == "boundary_fade" else 0.0
        img, ann = _render_eye(rng, textures[eye], config.image_size, fade)
        img = img * rng.uniform(0.92, 1.08)

        info = {"cue_strength": strength, "blur_sigma": 0.0, "patch_box": None}
        if config.cue == "planted_patch" and label is Label.POST_MORTEM:
            info["patch_box"] = _plant_patch(rng, img, ann, config.patch_fraction, strength)
        if config.cue == "blur" and strength > 0:
            sigma = config.max_blur_sigma * strength
            img = ndimage.gaussian_filter(img, sigma=sigma, mode="reflect")
            info["blur_sigma"] = sigma

        img = img + rng.normal(0, config.noise_sigma, img.shape)
        pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        path = image_dir / f"{subject_id}_{eye.value}_{k:02d}.png"
        save_image(pixels, path)

        records.append(SampleRecord(path, subject_id, eye, label, h, ann))
        meta.append({"image": path.name, "subject_id": subject_id, "label": label.value,
                     "hours_post_mortem": h, **info})
    return records, meta


def generate(config: SynthConfig, output_dir: str | os.PathLike) -> Dataset:
    """Write images, ``manifest.csv`` and ``synth_meta.json`` under ``output_dir``."""
    config.validate()
    output_dir = Path(output_dir)
    image_dir = output_dir / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise LoadError(f"cannot create output directory {output_dir}: {exc}") from None
    if not os.access(image_dir, os.W_OK):
        raise LoadError(f"output directory not writable: {output_dir}")

    root = np.random.SeedSequence(config.rng_seed)
    live_seeds, pm_seeds = root.spawn(2)
    jobs = [(Label.LIVE, i, s) for i, s in enumerate(live_seeds.spawn(config.n_subjects_per_class))]
    jobs += [(Label.POST_MORTEM, i, s) for i, s in enumerate(pm_seeds.spawn(config.n_subjects_per_class))]

    def run(job):
        return _subject_samples(config, job[0], job[1], job[2], image_dir)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    records = [rec for recs, _ in results for rec in recs]
    meta = [m for _, ms in results for m in ms]
    dataset = Dataset(records=records, source_tag="synthetic")
    write_manifest(dataset, output_dir / MANIFEST_NAME)

    cfg = asdict(config)
    cfg["hours_range"] = list(config.hours_range)
    cfg.pop("workers")
    (output_dir / META_NAME).write_text(
        json.dumps({"config": cfg, "samples": meta}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return dataset


def load_meta(output_dir: str | os.PathLike) -> dict:
    """Per-image generation metadata keyed by image file name."""
    path = Path(output_dir) / META_NAME
    if not path.is_file():
        raise LoadError(f"synthetic metadata not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    return {m["image"]: m for m in doc["samples"]}
