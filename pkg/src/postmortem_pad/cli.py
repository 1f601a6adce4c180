"""Command-line orchestration: synth, quality, train, evaluate, explain.

Exit codes: 0 success, 2 configuration or file errors, 3 training
divergence, 4 internal invariant breach.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import multiprocessing
import platform
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .dataset import Label, load_manifest, make_splits, materialize_split, write_splits
from .errors import ConfigurationError, InputError, PadError
from .preprocess import NORMALIZATION_TAG

log = logging.getLogger("postmortem_pad")

EXIT_OK = 0
EXIT_INTERNAL = 4


@dataclass
class RunConfig:
    manifest: str | None = None
    out: str = "pad_run"
    seed: int = 0
    # Protocol and training defaults follow the published setup.
    splits: int = 20
    test_subjects: int = 3
    epochs: int = 10
    lr: float = 1e-4
    momentum: float = 0.9
    batch: int = 16
    min_hours: list[float] = field(default_factory=lambda: [0.0, 16.0])
    bin_edges: list[float] | None = None
    layer: str = "conv5_3"
    backbone: str = "vgg16_imagenet"
    input_size: int = 224
    weights: str | None = None
    workers: int = 1
    # explain
    model: str | None = None
    sample_ids: list[str] = field(default_factory=list)
    per_class: int = 2
    target: str = "predicted"
    # quality
    preprocessed: bool = False
    # synth
    cue: str = "blur"
    subjects: int = 8
    images_per_subject: int = 10
    image_size: int = 128
    hours_min: float = 5.0
    hours_max: float = 814.0


CONFIG_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicitly given flags."""
    values: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse config file {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping")
        unknown = set(doc) - CONFIG_FIELDS
        if unknown:
            raise ConfigurationError(f"unknown config keys in {path}: {sorted(unknown)}")
        values.update(doc)
    for name in CONFIG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def _code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5, check=True,
        ).stdout.strip()
        return f"{__version__}+g{rev}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def _json_dump(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def write_run_record(command: str, cfg: RunConfig, out: Path, seeds: dict, produced: list[Path]) -> None:
    """Reproducibility record plus the list of files this command produced."""
    import torch

    record = {
        "command": command,
        "argv": sys.argv[1:],
        "config": asdict(cfg),
        "seeds": seeds,
        "code_version": _code_version(),
        "normalization_tag": NORMALIZATION_TAG,
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__},
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    rec_path = _json_dump(record, out / f"run_record_{command}.json")
    files = sorted(str(p.relative_to(out)) for p in [*produced, rec_path])
    _json_dump({"command": command, "files": files}, out / f"outputs_{command}.json")


def _model_config(cfg: RunConfig):
    from .model import ModelConfig

    if cfg.backbone == "vgg16_surrogate":
        mc = ModelConfig.surrogate(input_size=cfg.input_size)
    else:
        mc = ModelConfig(backbone=cfg.backbone, input_size=cfg.input_size, weights_path=cfg.weights)
    mc.validate()
    return mc


def _training_config(cfg: RunConfig, split_index: int):
    from .model import TrainingConfig

    tc = TrainingConfig(momentum=cfg.momentum, learning_rate=cfg.lr, batch_size=cfg.batch,
                        epochs=cfg.epochs, rng_seed=cfg.seed + split_index)
    tc.validate()
    return tc


def _require_manifest(cfg: RunConfig):
    if not cfg.manifest:
        raise ConfigurationError("--manifest is required")
    return load_manifest(cfg.manifest)


# ---------------------------------------------------------------- synth

def cmd_synth(cfg: RunConfig) -> int:
    from .synth import MANIFEST_NAME, META_NAME, SynthConfig, generate

    sc = SynthConfig(
        n_subjects_per_class=cfg.subjects, images_per_subject=cfg.images_per_subject, image_size=cfg.image_size,
        cue=cfg.cue, hours_range=(cfg.hours_min, cfg.hours_max), rng_seed=cfg.seed, workers=cfg.workers,
    )
    out = Path(cfg.out)
    ds = generate(sc, out)
    produced = [out / MANIFEST_NAME, out / META_NAME, *(r.image_path for r in ds.records)]
    write_run_record("synth", cfg, out, {"synth": cfg.seed}, produced)
    print(f"wrote {len(ds)} images and {out / MANIFEST_NAME}")
    return EXIT_OK


# -------------------------------------------------------------- quality

def cmd_quality(cfg: RunConfig) -> int:
    from .plots import quality_boxplots
    from .quality import quality_report

    ds = _require_manifest(cfg)
    report = quality_report(ds, preprocessed=cfg.preprocessed)
    out = Path(cfg.out) / "quality"
    produced = [
        _json_dump(report.to_dict(), out / "quality_report.json"),
        quality_boxplots(report, out / "quality_boxplots.svg"),
    ]
    write_run_record("quality", cfg, Path(cfg.out), {}, produced)
    if report.rank_sum is not None:
        for cov, r in report.rank_sum.items():
            print(f"{cov}: p = {r.p_value:.4g} ({r.method})")
    return EXIT_OK


# ---------------------------------------------------------------- train

_INPUT_CACHE: dict = {}


def _dataset_inputs(manifest: str, input_size: int):
    """Preprocessed tensors for the whole corpus, indexed by image path; cached per process."""
    from .model import preprocess_dataset

    key = (str(Path(manifest).resolve()), input_size)
    if key not in _INPUT_CACHE:
        ds = load_manifest(manifest)
        tensors = preprocess_dataset(ds, input_size)
        _INPUT_CACHE[key] = (ds, {r.image_path: i for i, r in enumerate(ds.records)}, tensors)
    return _INPUT_CACHE[key]


def _train_split(job: dict) -> dict:
    """One split: train from the backbone, score the test subjects, persist everything."""
    import torch

    from .dataset import SplitSpec
    from .evaluation import write_scores
    from .model import build_model, save_model, score_dataset, train

    if job["single_thread"]:
        torch.set_num_threads(1)
    cfg = RunConfig(**job["config"])
    split = SplitSpec.from_dict(job["split"])
    out = Path(cfg.out)
    ds, index, tensors = _dataset_inputs(cfg.manifest, cfg.input_size)
    train_set, test_set = materialize_split(ds, split)

    def rows(subset):
        return tensors[[index[r.image_path] for r in subset.records]]

    k = split.split_index
    tc = _training_config(cfg, k)
    base = build_model(_model_config(cfg), rng_seed=tc.rng_seed)
    lines = ["epoch,mean_loss,train_accuracy"]
    model = train(base, train_set, tc, inputs=rows(train_set), progress=lines.append)
    scored = score_dataset(model, test_set, split_index=k, inputs=rows(test_set))

    log_path = out / "logs" / f"train_split_{k:02d}.csv"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths = [
        save_model(model, out / "models" / f"split_{k:02d}.pt"),
        write_scores(scored, out / "scores" / f"split_{k:02d}.csv"),
        log_path,
    ]
    acc = float(np.mean([(s.p_live >= 0.5) == (s.true_label is Label.LIVE) for s in scored]))
    return {"split_index": k, "paths": [str(p) for p in paths], "accuracy": acc, "training_seed": tc.rng_seed}


def cmd_train(cfg: RunConfig) -> int:
    ds = _require_manifest(cfg)
    _model_config(cfg)
    _training_config(cfg, 0)
    out = Path(cfg.out)
    splits = make_splits(ds, cfg.splits, cfg.test_subjects, cfg.seed)
    produced = [write_splits(splits, out / "splits.yaml")]
    jobs = [{"config": asdict(cfg), "split": s.to_dict(), "single_thread": cfg.workers > 1} for s in splits]

    if cfg.workers > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=cfg.workers, mp_context=ctx) as pool:
            results = list(pool.map(_train_split, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_train_split(job))
            print(f"split {results[-1]['split_index']:02d}: test accuracy {results[-1]['accuracy']:.4f}")

    produced += [Path(p) for r in results for p in r["paths"]]
    seeds = {"splits": cfg.seed, "training": {r["split_index"]: r["training_seed"] for r in results}}
    write_run_record("train", cfg, out, seeds, produced)
    return EXIT_OK


# ------------------------------------------------------------- evaluate

def cmd_evaluate(cfg: RunConfig) -> int:
    from .evaluation import aggregate_splits, evaluate_split, read_scores
    from .plots import evaluation_plots

    out = Path(cfg.out)
    files = sorted((out / "scores").glob("split_*.csv"))
    if not files:
        raise InputError(f"no scored samples found under {out / 'scores'}; run 'train' first")
    per_split = [evaluate_split(read_scores(f), cfg.bin_edges, cfg.min_hours) for f in files]
    report = aggregate_splits(per_split, cfg.bin_edges, cfg.min_hours)

    eval_dir = out / "eval"
    produced = [_json_dump(report.to_dict(), eval_dir / "eval_report.json")]
    produced += evaluation_plots(report, eval_dir)
    write_run_record("evaluate", cfg, out, {}, produced)
    print(f"mean accuracy {report.mean_accuracy:.4f}, pooled AUC {report.auc:.4f}")
    for op in report.zero_apcer:
        print(f"min_hours {op.min_hours:g}: APCER {op.apcer:.4f} at BPCER {op.bpcer:.4f} (AUC {op.auc:.4f})")
    return EXIT_OK


# -------------------------------------------------------------- explain

def _select_samples(ds, cfg: RunConfig):
    if cfg.sample_ids:
        by_id = {r.sample_id: r for r in ds.records}
        missing = [s for s in cfg.sample_ids if s not in by_id]
        if missing:
            raise ConfigurationError(f"sample ids not in manifest: {missing}")
        return [by_id[s] for s in cfg.sample_ids]
    chosen = []
    for label in (Label.LIVE, Label.POST_MORTEM):
        recs = sorted((r for r in ds.records if r.label is label), key=lambda r: r.sample_id)
        chosen += recs[:cfg.per_class]
    return chosen


def cmd_explain(cfg: RunConfig) -> int:
    from .explain import explain_input, write_explanation
    from .model import load_model, predict_tensors
    from .preprocess import crop_and_mask, load_image, prepare_for_network

    if cfg.target not in ("predicted", "both", *(lbl.value for lbl in Label)):
        raise ConfigurationError(f"--target must be predicted, both, live or post_mortem, got {cfg.target!r}")
    ds = _require_manifest(cfg)
    out = Path(cfg.out)
    model_path = Path(cfg.model) if cfg.model else out / "models" / "split_01.pt"
    model = load_model(model_path)
    produced = []
    for rec in _select_samples(ds, cfg):
        image = crop_and_mask(load_image(rec.image_path), rec.annotation)
        inp = prepare_for_network(image, model.config.input_size)
        if cfg.target == "predicted":
            targets = [predict_tensors(model, inp.tensor[None])[0].predicted_label]
        elif cfg.target == "both":
            targets = [Label.LIVE, Label.POST_MORTEM]
        else:
            targets = [Label(cfg.target)]
        for target in targets:
            heatmap, saliency, combined = explain_input(model, inp, target, cfg.layer)
            files = write_explanation(out / "explain", rec.sample_id, image, heatmap, saliency, combined)
            produced += list(files.values())
            produced.append(out / "explain" / f"{rec.sample_id}__{target.value}__meta.json")
    write_run_record("explain", cfg, out, {}, produced)
    print(f"wrote {len(produced)} files to {out / 'explain'}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "quality": cmd_quality,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # Every option defaults to None so that unset flags do not mask the config file.
    common.add_argument("--config", help="YAML file with RunConfig keys; flags override it")
    common.add_argument("--manifest", help="sample manifest (CSV)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="base random seed")
    common.add_argument("--splits", type=int, help="number of subject-disjoint splits (default 20)")
    common.add_argument("--test-subjects", dest="test_subjects", type=int,
                        help="test subjects per class per split (default 3)")
    common.add_argument("--epochs", type=int, help="training epochs (default 10)")
    common.add_argument("--lr", type=float, help="SGD learning rate (default 1e-4)")
    common.add_argument("--momentum", type=float, help="SGD momentum (default 0.9)")
    common.add_argument("--batch", type=int, help="mini-batch size (default 16)")
    common.add_argument("--min-hours", dest="min_hours", type=float, action="append",
                        help="post-mortem interval filter for the zero-APCER analysis; repeatable")
    common.add_argument("--bin-edges", dest="bin_edges", type=float, nargs="+",
                        help="hours bin edges for the time-horizon analysis (default: one bin per value)")
    common.add_argument("--layer", help="convolutional layer for Grad-CAM (default conv5_3)")
    common.add_argument("--backbone", choices=("vgg16_imagenet", "vgg16_surrogate"))
    common.add_argument("--weights", help="local VGG-16 ImageNet weights file")
    common.add_argument("--input-size", dest="input_size", type=int, help="network input side (default 224)")
    common.add_argument("--workers", type=int, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="postmortem-pad", description="Post-mortem iris liveness detection toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus with a planted cue")
    p.add_argument("--cue", choices=("blur", "boundary_fade", "planted_patch"))
    p.add_argument("--subjects", type=int, help="subjects per class")
    p.add_argument("--images-per-subject", dest="images_per_subject", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--hours-min", dest="hours_min", type=float)
    p.add_argument("--hours-max", dest="hours_max", type=float)

    p = sub.add_parser("quality", parents=[common], help="quality covariates and rank-sum tests")
    p.add_argument("--preprocessed", action="store_const", const=True,
                   help="measure cropped/masked images instead of full frames")

    sub.add_parser("train", parents=[common], help="train and score every split")
    sub.add_parser("evaluate", parents=[common], help="metrics and plots from scored samples")

    p = sub.add_parser("explain", parents=[common], help="Grad-CAM and guided backprop renders")
    p.add_argument("--model", help="model file (default <out>/models/split_01.pt)")
    p.add_argument("--sample-id", dest="sample_ids", action="append", help="sample to explain; repeatable")
    p.add_argument("--per-class", dest="per_class", type=int, help="samples per class when no ids are given")
    p.add_argument("--target", help="predicted (default), both, live or post_mortem")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except PadError as exc:
        kind = type(exc).__name__
        print(f"error [{kind}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"error [internal]: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
