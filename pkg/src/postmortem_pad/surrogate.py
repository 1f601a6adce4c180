"""Stand-in pretraining for the VGG-16 backbone when ImageNet weights are unavailable.

A width-reduced VGG-16 is trained on an 8-way classification of procedural
images (power-law noise of three spectral slopes, two grating orientations,
disks, rectangles, checkerboards). This gives the fine-tuning stage generic
low-level features to start from, playing the role ImageNet plays for the
full-size network. The result is cached on disk, keyed by its settings.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .preprocess import IMAGENET_MEAN, IMAGENET_STD

log = logging.getLogger(__name__)

N_PROXY_CLASSES = 8
SURROGATE_VERSION = 1
DEFAULTS = {"image_size": 64, "steps": 600, "batch_size": 32, "learning_rate": 3e-4, "seed": 1}


def cache_dir() -> Path:
    return Path(os.environ.get("POSTMORTEM_PAD_CACHE", Path.home() / ".cache" / "postmortem_pad"))


def proxy_image(rng: np.random.Generator, kind: int, size: int) -> np.ndarray:
    """One procedural image in [0, 1] for proxy class ``kind``."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    if kind < 3:
        slope = (1.0, 2.0, 3.0)[kind]
        f2 = np.fft.fftfreq(size)[:, None] ** 2 + np.fft.fftfreq(size)[None, :] ** 2
        f2[0, 0] = 1.0
        spectrum = (rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size))) / f2 ** (slope / 2)
        spectrum[0, 0] = 0
        x = np.real(np.fft.ifft2(spectrum))
    elif kind < 5:
        angle = (0.0, np.pi / 2)[kind - 3] + rng.normal(0, 0.2)
        freq = rng.uniform(3, 10)
        x = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + rng.uniform(0, 6))
    elif kind == 5:
        x = np.zeros((size, size))
        for _ in range(rng.integers(1, 5)):
            cx, cy = rng.uniform(0, 1, 2)
            r = rng.uniform(0.05, 0.25)
            x[(xx - cx) ** 2 + (yy - cy) ** 2 < r * r] = rng.uniform(0.3, 1)
    elif kind == 6:
        x = np.zeros((size, size))
        lo = max(2, size // 16)
        for _ in range(rng.integers(1, 5)):
            x0, y0 = rng.integers(0, size - 2 * lo, 2)
            w, h = rng.integers(lo, size * 3 // 8, 2)
            x[y0:y0 + h, x0:x0 + w] = rng.uniform(0.3, 1)
    else:
        n = rng.integers(3, 9)
        x = ((np.floor(xx * n) + np.floor(yy * n)) % 2).astype(np.float64)
    x = x + rng.normal(0, 0.05, x.shape) * rng.uniform(0, 1)
    x = (x - x.min()) / (np.ptp(x) + 1e-9)
    return x * rng.uniform(0.4, 1) + rng.uniform(0, 0.3)


def proxy_batch(rng: np.random.Generator, n: int, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    kinds = rng.integers(0, N_PROXY_CLASSES, n)
    x = torch.tensor(np.stack([proxy_image(rng, int(k), size) for k in kinds]), dtype=torch.float32)
    x = x[:, None].expand(-1, 3, -1, -1)
    mean = torch.tensor(IMAGENET_MEAN)[:, None, None]
    std = torch.tensor(IMAGENET_STD)[:, None, None]
    return (x - mean) / std, torch.from_numpy(kinds).long()


def pretrain(width_divisor: int, pool_size: int, image_size: int, steps: int, batch_size: int,
             learning_rate: float, seed: int) -> tuple[dict, float]:
    """Train the proxy task; returns the state dict and held-out proxy accuracy."""
    from .model import VGG16

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = VGG16(num_classes=N_PROXY_CLASSES, width_divisor=width_divisor, pool_size=pool_size)
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    for step in range(steps):
        x, y = proxy_batch(rng, batch_size, image_size)
        net.train()
        opt.zero_grad(set_to_none=True)
        loss = F.cross_entropy(net(x), y)
        loss.backward()
        opt.step()
        if step % 100 == 0:
            log.info("surrogate pretraining step %d loss %.4f", step, loss.item())
    net.eval()
    x, y = proxy_batch(np.random.default_rng(seed + 10_000), 256, image_size)
    with torch.no_grad():
        acc = float((net(x).argmax(1) == y).float().mean())
    return net.state_dict(), acc


def _key(settings: dict) -> str:
    blob = json.dumps({"version": SURROGATE_VERSION, **settings}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_or_pretrain(width_divisor: int = 4, pool_size: int = 2, **overrides) -> dict:
    settings = {**DEFAULTS, **overrides, "width_divisor": width_divisor, "pool_size": pool_size}
    path = cache_dir() / f"vgg16_surrogate_{_key(settings)}.pt"
    if path.is_file():
        try:
            return torch.load(path, map_location="cpu", weights_only=True)["state_dict"]
        except Exception:
            log.warning("ignoring unreadable surrogate cache %s", path)
    log.info("pretraining surrogate backbone (%s); cached at %s", settings, path)
    state, acc = pretrain(**settings)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    torch.save({"state_dict": state, "settings": settings, "proxy_accuracy": acc}, tmp)
    os.replace(tmp, path)
    return state

