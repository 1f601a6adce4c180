"""VGG-16 live/post-mortem classifier: construction, fine-tuning, scoring, persistence."""

from __future__ import annotations

import copy
import hashlib
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import Dataset, IrisAnnotation, Label
from .errors import (
    BackboneUnavailableError,
    ConfigurationError,
    IntegrityError,
    ModelVersionError,
    TrainingDivergenceError,
)
from .evaluation import ScoredSample
from .preprocess import (
    DEFAULT_MARGIN,
    NORMALIZATION_TAG,
    crop_and_mask,
    load_image,
    prepare_for_network,
)

log = logging.getLogger(__name__)

FORMAT_NAME = "postmortem_pad.model"
FORMAT_VERSION = 1
BACKBONES = ("vgg16_imagenet", "vgg16_surrogate")
CLASSES = (Label.LIVE, Label.POST_MORTEM)
CLASS_INDEX = {label: i for i, label in enumerate(CLASSES)}

VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")
CONV_NAMES = (
    "conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3",
    "conv4_1", "conv4_2", "conv4_3", "conv5_1", "conv5_2", "conv5_3",
)
LAST_CONV = "conv5_3"


def _conv_indices() -> dict[str, int]:
    out, idx, n = {}, 0, 0
    for v in VGG16_CFG:
        if v == "M":
            idx += 1
        else:
            out[CONV_NAMES[n]] = idx
            n += 1
            idx += 2  # conv + ReLU
    return out


CONV_INDEX = _conv_indices()


@dataclass
class ModelConfig:
    backbone: str = "vgg16_imagenet"
    num_classes: int = 2
    input_size: int = 224
    # Channel and hidden-width divisor; 1 is the standard VGG-16.
    width_divisor: int = 1
    pool_size: int = 7
    dropout: float = 0.5
    tail_init_std: float = 0.01
    weights_path: str | None = None
    replaced_tail: str = "classifier.6 (final fully-connected layer) -> 2 outputs, softmax over live/post_mortem"

    def validate(self) -> None:
        if self.num_classes != 2:
            raise ConfigurationError(f"num_classes must be 2, got {self.num_classes}")
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.input_size < 32:
            raise ConfigurationError(f"input_size must be >= 32, got {self.input_size}")
        if self.width_divisor < 1 or 64 % self.width_divisor:
            raise ConfigurationError(f"width_divisor must divide 64, got {self.width_divisor}")
        if self.backbone == "vgg16_imagenet" and (self.width_divisor != 1 or self.pool_size != 7):
            raise ConfigurationError("the ImageNet backbone needs width_divisor=1 and pool_size=7")

    @classmethod
    def surrogate(cls, input_size: int = 64, **kw) -> "ModelConfig":
        kw.setdefault("width_divisor", 4)
        kw.setdefault("pool_size", 2)
        return cls(backbone="vgg16_surrogate", input_size=input_size, **kw)


@dataclass
class TrainingConfig:
    optimizer: str = "sgd"
    momentum: float = 0.9
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 10
    rng_seed: int = 0

    def validate(self) -> None:
        if self.optimizer != "sgd":
            raise ConfigurationError(f"only 'sgd' is supported, got {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be non-negative, got {self.epochs}")


@dataclass(frozen=True)
class LivenessScore:
    p_live: float
    p_post_mortem: float

    @property
    def predicted_label(self) -> Label:
        # Ties go to post_mortem.
        return Label.LIVE if self.p_live > self.p_post_mortem else Label.POST_MORTEM


class VGG16(nn.Module):
    """VGG-16 layer graph with torchvision's module names (``features.N``, ``classifier.N``)."""

    def __init__(self, num_classes: int = 2, width_divisor: int = 1, pool_size: int = 7, dropout: float = 0.5):
        super().__init__()
        layers: list[nn.Module] = []
        channels = 3
        for v in VGG16_CFG:
            if v == "M":
                layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
            else:
                out = v // width_divisor
                layers += [nn.Conv2d(channels, out, kernel_size=3, padding=1), nn.ReLU(inplace=False)]
                channels = out
        hidden = 4096 // width_divisor
        self.features = nn.Sequential(*layers)
        self.avgpool = nn.AdaptiveAvgPool2d((pool_size, pool_size))
        self.classifier = nn.Sequential(
            nn.Linear(channels * pool_size * pool_size, hidden),
            nn.ReLU(inplace=False),
            nn.Dropout(p=dropout),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=False),
            nn.Dropout(p=dropout),
            nn.Linear(hidden, num_classes),
        )
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, 0, 0.01)
                nn.init.zeros_(m.bias)

    def head(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(torch.flatten(self.avgpool(x), 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class TrainedModel:
    net: VGG16
    config: ModelConfig
    training_config: TrainingConfig | None = None
    history: list[dict] = field(default_factory=list)
    normalization_tag: str = NORMALIZATION_TAG

    def probabilities(self, batch: torch.Tensor) -> np.ndarray:
        self.net.eval()
        with torch.no_grad():
            return F.softmax(self.net(batch), dim=1).double().numpy()


def _architecture(config: ModelConfig) -> VGG16:
    return VGG16(config.num_classes, config.width_divisor, config.pool_size, config.dropout)


def _imagenet_state(config: ModelConfig) -> dict:
    if config.weights_path:
        try:
            return torch.load(config.weights_path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError) as exc:
            raise BackboneUnavailableError(f"cannot read VGG-16 weights from {config.weights_path}: {exc}") from None
    try:
        from torchvision.models import VGG16_Weights

        return VGG16_Weights.IMAGENET1K_V1.get_state_dict(progress=False)
    except Exception as exc:  # network errors surface as assorted exception types
        raise BackboneUnavailableError(
            "ImageNet VGG-16 weights are not available "
            f"({type(exc).__name__}: {exc}). Download vgg16-397923af.pth from "
            "https://download.pytorch.org/models/ and pass it via --weights "
            "(ModelConfig.weights_path), place it in $TORCH_HOME/hub/checkpoints, "
            "or use the 'vgg16_surrogate' backbone."
        ) from None


def _backbone_state(config: ModelConfig) -> dict:
    if config.backbone == "vgg16_imagenet":
        return _imagenet_state(config)
    if config.weights_path:
        try:
            return torch.load(config.weights_path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError) as exc:
            raise BackboneUnavailableError(f"cannot read surrogate weights from {config.weights_path}: {exc}") from None
    from .surrogate import load_or_pretrain

    return load_or_pretrain(width_divisor=config.width_divisor, pool_size=config.pool_size)


def init_tail(layer: nn.Linear, std: float, rng_seed: int) -> None:
    gen = torch.Generator().manual_seed(rng_seed)
    with torch.no_grad():
        layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen) * std)
        layer.bias.zero_()


def build_model(config: ModelConfig, rng_seed: int = 0) -> TrainedModel:
    """Backbone with pretrained weights and a freshly initialized two-class tail."""
    config.validate()
    net = _architecture(config)
    state = {k: v for k, v in _backbone_state(config).items() if not k.startswith("classifier.6.")}
    missing, unexpected = net.load_state_dict(state, strict=False)
    if unexpected or set(missing) != {"classifier.6.weight", "classifier.6.bias"}:
        raise BackboneUnavailableError(
            f"backbone weights do not fit the VGG-16 graph (missing={missing}, unexpected={unexpected})"
        )
    init_tail(net.classifier[6], config.tail_init_std, rng_seed)
    net.eval()
    return TrainedModel(net=net, config=config)


def make_optimizer(params, training_config: TrainingConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(params, lr=training_config.learning_rate, momentum=training_config.momentum)


def preprocess_dataset(dataset: Dataset, input_size: int, margin_factor: float = DEFAULT_MARGIN) -> torch.Tensor:
    tensors = [
        prepare_for_network(crop_and_mask(load_image(r.image_path), r.annotation, margin_factor), input_size).tensor
        for r in dataset.records
    ]
    return torch.stack(tensors)


def train(model: TrainedModel, train_set: Dataset, training_config: TrainingConfig,
          inputs: torch.Tensor | None = None, progress=None) -> TrainedModel:
    """Fine-tune every layer for ``training_config.epochs`` epochs.

    Returns a new model; ``model`` itself is not modified. ``inputs`` may hold
    the already preprocessed tensors of ``train_set`` (same order).
    ``progress`` is called with one ``epoch,mean_loss,train_accuracy`` line
    per epoch.
    """
    training_config.validate()
    if train_set.labels() != set(CLASSES):
        raise ConfigurationError("training set must contain both live and post-mortem samples")

    out = TrainedModel(
        net=copy.deepcopy(model.net),
        config=model.config,
        training_config=training_config,
        history=list(model.history),
        normalization_tag=model.normalization_tag,
    )
    if training_config.epochs == 0:
        return out

    if inputs is None:
        inputs = preprocess_dataset(train_set, model.config.input_size)
    targets = torch.tensor([CLASS_INDEX[r.label] for r in train_set.records], dtype=torch.long)

    torch.manual_seed(training_config.rng_seed)
    shuffle = torch.Generator().manual_seed(training_config.rng_seed)
    net = out.net
    for p in net.parameters():
        p.requires_grad_(True)
    opt = make_optimizer(net.parameters(), training_config)
    n = len(targets)
    bs = training_config.batch_size
    first_epoch = len(out.history) + 1

    for epoch in range(first_epoch, first_epoch + training_config.epochs):
        net.train()
        order = torch.randperm(n, generator=shuffle)
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, n, bs), start=1):
            idx = order[start:start + bs]
            opt.zero_grad(set_to_none=True)
            logits = net(inputs[idx])
            loss = F.cross_entropy(logits, targets[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergenceError(epoch, b, value)
            loss.backward()
            opt.step()
            total_loss += value * len(idx)
            correct += int((logits.argmax(1) == targets[idx]).sum())
        entry = {"epoch": epoch, "mean_loss": total_loss / n, "train_accuracy": correct / n}
        out.history.append(entry)
        line = f"{epoch},{entry['mean_loss']:.6f},{entry['train_accuracy']:.4f}"
        log.info(line)
        if progress is not None:
            progress(line)
    net.eval()
    return out


def _to_score(row) -> LivenessScore:
    return LivenessScore(p_live=float(row[CLASS_INDEX[Label.LIVE]]), p_post_mortem=float(row[CLASS_INDEX[Label.POST_MORTEM]]))


def predict_tensors(model: TrainedModel, inputs: torch.Tensor, batch_size: int = 32) -> list[LivenessScore]:
    scores = []
    for start in range(0, len(inputs), batch_size):
        scores += [_to_score(row) for row in model.probabilities(inputs[start:start + batch_size])]
    return scores


def predict(model: TrainedModel, image: np.ndarray, annotation: IrisAnnotation,
            margin_factor: float = DEFAULT_MARGIN) -> LivenessScore:
    x = prepare_for_network(crop_and_mask(image, annotation, margin_factor), model.config.input_size).tensor
    return _to_score(model.probabilities(x[None])[0])


def predict_batch(model: TrainedModel, images, annotations, batch_size: int = 32,
                  margin_factor: float = DEFAULT_MARGIN) -> list[LivenessScore]:
    inputs = torch.stack([
        prepare_for_network(crop_and_mask(img, ann, margin_factor), model.config.input_size).tensor
        for img, ann in zip(images, annotations)
    ])
    return predict_tensors(model, inputs, batch_size)


def score_dataset(model: TrainedModel, dataset: Dataset, split_index: int = 0,
                  inputs: torch.Tensor | None = None, batch_size: int = 32) -> list[ScoredSample]:
    if inputs is None:
        inputs = preprocess_dataset(dataset, model.config.input_size)
    scores = predict_tensors(model, inputs, batch_size)
    return [
        ScoredSample(
            p_live=min(max(s.p_live, 0.0), 1.0),
            true_label=r.label,
            hours_post_mortem=r.hours_post_mortem,
            subject_id=r.subject_id,
            split_index=split_index,
            sample_id=r.sample_id,
            image_path=str(r.image_path),
        )
        for r, s in zip(dataset.records, scores)
    ]


def _state_digest(state: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(state):
        h.update(key.encode())
        h.update(state[key].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_model(model: TrainedModel, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.net.state_dict().items()}
    doc = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.config),
        "training_config": asdict(model.training_config) if model.training_config else None,
        "history": model.history,
        "normalization_tag": model.normalization_tag,
        "state_dict": state,
        "sha256": _state_digest(state),
    }
    buf = io.BytesIO()
    torch.save(doc, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_model(path: str | os.PathLike) -> TrainedModel:
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"model file not found: {path}")
    try:
        doc = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # truncated/corrupt archives raise several exception types
        raise IntegrityError(f"cannot read model file {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise IntegrityError(f"{path} is not a {FORMAT_NAME} file")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelVersionError(f"{path}: format version {doc.get('format_version')}, expected {FORMAT_VERSION}")

    state = doc["state_dict"]
    if _state_digest(state) != doc.get("sha256"):
        raise IntegrityError(f"{path}: weight checksum mismatch")
    try:
        config = ModelConfig(**doc["model_config"])
        config.validate()
        net = _architecture(config)
        net.load_state_dict(state, strict=True)
    except (TypeError, RuntimeError, ConfigurationError) as exc:
        raise ModelVersionError(f"{path}: stored configuration does not match the weights: {exc}") from None
    net.eval()
    tc = doc.get("training_config")
    return TrainedModel(
        net=net,
        config=config,
        training_config=TrainingConfig(**tc) if tc else None,
        history=list(doc.get("history") or []),
        normalization_tag=doc.get("normalization_tag", NORMALIZATION_TAG),
    )
