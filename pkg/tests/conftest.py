from pathlib import Path

import numpy as np
import pytest
import torch

from postmortem_pad.dataset import Dataset, Eye, IrisAnnotation, Label, SampleRecord
from postmortem_pad.model import ModelConfig, TrainedModel, VGG16
from postmortem_pad.synth import SynthConfig, generate

# Filled by tests/test_acceptance.py, printed at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_records(n_subjects_per_class=4, images_per_subject=2, root="/nonexistent"):
    """In-memory records (images are not touched)."""
    recs = []
    for label in Label:
        for s in range(n_subjects_per_class):
            sid = f"{label.value}_{s:02d}"
            for k in range(images_per_subject):
                recs.append(SampleRecord(
                    image_path=Path(f"{root}/{sid}_{k}.png"),
                    subject_id=sid,
                    eye=Eye.LEFT,
                    label=label,
                    hours_post_mortem=0.0 if label is Label.LIVE else 5.0 + 10 * k,
                    annotation=IrisAnnotation(32.0, 32.0, 20.0),
                ))
    return Dataset(records=recs)


def tiny_model(input_size=32, seed=0, dtype=torch.float32) -> TrainedModel:
    """Randomly initialized narrow VGG-16 (no backbone download or pretraining)."""
    torch.manual_seed(seed)
    config = ModelConfig(backbone="vgg16_surrogate", input_size=input_size, width_divisor=16, pool_size=1, dropout=0.0)
    net = VGG16(width_divisor=16, pool_size=1, dropout=0.0).to(dtype)
    # Larger linear weights than the default init so that scores are not flat.
    for m in net.classifier:
        if isinstance(m, torch.nn.Linear):
            torch.nn.init.normal_(m.weight, 0, 0.3)
    net.eval()
    return TrainedModel(net=net, config=config)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(n_subjects_per_class=4, images_per_subject=3, image_size=64, cue="blur", rng_seed=3)
    generate(cfg, out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
