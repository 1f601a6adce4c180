import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from postmortem_pad.dataset import Label, load_manifest
from postmortem_pad.errors import ConfigurationError
from postmortem_pad.preprocess import load_image
from postmortem_pad.synth import SynthConfig, cue_strength, generate, load_meta


@settings(max_examples=100, deadline=None)
@given(h1=st.floats(0.01, 2000), h2=st.floats(0.01, 2000))
def test_cue_strength_is_monotone_and_bounded(h1, h2):
    cfg = SynthConfig()
    lo, hi = sorted((h1, h2))
    assert cue_strength(lo, cfg) <= cue_strength(hi, cfg)
    assert cfg.cue_floor <= cue_strength(h1, cfg) <= 1.0
    assert cue_strength(0.0, cfg) == 0.0


def test_generation_is_deterministic(tmp_path):
    cfg = SynthConfig(n_subjects_per_class=2, images_per_subject=2, image_size=48, rng_seed=5)
    generate(cfg, tmp_path / "a")
    cfg.workers = 3
    generate(cfg, tmp_path / "b")
    for name in ["manifest.csv", "synth_meta.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for p in sorted((tmp_path / "a" / "images").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / "images" / p.name).read_bytes()


def test_blur_corpus_manifest_and_meta(small_corpus):
    ds = load_manifest(small_corpus / "manifest.csv")
    assert ds.source_tag == "synthetic"
    assert len(ds.subjects(Label.LIVE)) == 4 and len(ds.subjects(Label.POST_MORTEM)) == 4
    meta = load_meta(small_corpus)
    for rec in ds.records:
        m = meta[rec.image_path.name]
        if rec.label is Label.LIVE:
            assert rec.hours_post_mortem == 0 and m["blur_sigma"] == 0
        else:
            assert rec.hours_post_mortem > 0 and m["blur_sigma"] > 0
            assert m["cue_strength"] == pytest.approx(cue_strength(rec.hours_post_mortem, SynthConfig()))


def test_planted_patch_inside_iris(tmp_path):
    cfg = SynthConfig(n_subjects_per_class=2, images_per_subject=4, image_size=96, cue="planted_patch", rng_seed=1)
    ds = generate(cfg, tmp_path)
    meta = load_meta(tmp_path)
    for rec in ds.records:
        box = meta[rec.image_path.name]["patch_box"]
        if rec.label is Label.LIVE:
            assert box is None
            continue
        a = rec.annotation
        x0, y0, x1, y1 = box
        for x, y in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]:
            assert math.hypot(x - a.center_x, y - a.center_y) <= 0.95 * a.radius_Ri + 1e-9
        img = load_image(rec.image_path)
        assert img[y0:y1, x0:x1].mean() > 170


def test_invalid_config(tmp_path):
    with pytest.raises(ConfigurationError):
        generate(SynthConfig(cue="glitter"), tmp_path)
    with pytest.raises(ConfigurationError):
        generate(SynthConfig(hours_range=(10, 1)), tmp_path)
