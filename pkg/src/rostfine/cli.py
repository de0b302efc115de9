"""Command-line entry point.

Subcommands cover the whole pipeline: ``synth`` builds a synthetic
dataset, ``track`` turns a raw PPM-frame video into a tracked clip,
``train`` fits a model and writes a checkpoint plus a per-epoch CSV log,
``eval`` prints an evaluation report as JSON, ``visualize`` exports
per-frame attention heatmaps, ``gradcheck`` verifies analytic gradients
against central differences, and ``report`` renders figures from the
training log and evaluation JSON.

Configuration is a JSON file with ``model``, ``train`` and ``loss``
sections mirroring the config dataclasses; ``--set section.key=value``
overrides individual entries and ``--seed`` pins all randomness.  The
``ROSTFINE_THREADS`` environment variable caps worker processes.

Exit codes: 0 success, 1 validation or I/O failure, 2 usage errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from rostfine.datapipe import (
    DatasetError,
    Sample,
    SynthSpec,
    build_clip,
    prepare_clip,
    read_clip,
    read_dataset,
    read_ppm_video,
    synthesize_dataset,
    synthesize_range,
    track_template,
    write_clip,
    write_dataset,
)
from rostfine.encoder import ModelConfig, patchify
from rostfine.metrics import build_report, dataset_metrics, mse_value
from rostfine.model import RoSTFine
from rostfine.netpbm import NetpbmError
from rostfine.objectives import LossConfig, total_loss
from rostfine.rollout import RolloutError, attention_rollout, export_heatmap
from rostfine.tensor import grad_check_sampled
from rostfine.trainer import (
    CheckpointError,
    TrainConfig,
    fit,
    kfold_split,
    load_checkpoint,
    load_into_model,
    save_model,
)

LOG_COLUMNS = ["epoch", "loss", "cos_gs", "cos_gt", "cos_st"]


class CliError(Exception):
    """Validation failure reported with exit code 1."""


def worker_count() -> int:
    raw = os.environ.get("ROSTFINE_THREADS", "1")
    try:
        value = int(raw)
    except ValueError as exc:
        raise CliError(f"ROSTFINE_THREADS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise CliError("ROSTFINE_THREADS must be >= 1")
    return value


# -- configuration -----------------------------------------------------------------


def _build_section(cls, values: dict, section: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - fields
    if unknown:
        raise CliError(f"unknown {section} config field: {sorted(unknown)[0]}")
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid {section} config: {exc}") from exc


def load_run_config(path, overrides, seed):
    """(ModelConfig, TrainConfig, LossConfig) from file + flag overrides."""
    sections = {"model": {}, "train": {}, "loss": {}}
    if path is not None:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise CliError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError("config must be a JSON object")
        unknown = set(loaded) - set(sections) - {"data"}
        if unknown:
            raise CliError(f"unknown config section: {sorted(unknown)[0]}")
        for name in sections:
            sections[name].update(loaded.get(name, {}))
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise CliError(f"--set expects section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in sections:
            raise CliError(f"unknown config section: {section}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        sections[section][key] = value
    if seed is not None:
        sections["model"]["seed"] = seed
        sections["train"]["seed"] = seed
    if "features" in sections["model"]:
        sections["model"]["features"] = tuple(sections["model"]["features"])
    mcfg = _build_section(ModelConfig, sections["model"], "model")
    tcfg = _build_section(TrainConfig, sections["train"], "train")
    loss_values = dict(sections["loss"])
    loss_values.setdefault("loss_kind", mcfg.loss_kind)
    loss_values.setdefault("alpha", mcfg.alpha)
    lcfg = _build_section(LossConfig, loss_values, "loss")
    return mcfg, tcfg, lcfg


def config_snapshot(mcfg, tcfg, lcfg) -> str:
    return json.dumps(
        {
            "model": dataclasses.asdict(mcfg),
            "train": dataclasses.asdict(tcfg),
            "loss": dataclasses.asdict(lcfg),
        },
        sort_keys=True,
    )


def configs_from_snapshot(text: str):
    data = json.loads(text)
    model = dict(data["model"])
    model["features"] = tuple(model["features"])
    return (
        ModelConfig(**model),
        TrainConfig(**data["train"]),
        LossConfig(**data["loss"]),
    )


def prepare_samples(samples: list[Sample], mcfg: ModelConfig) -> None:
    for sample in samples:
        clip = prepare_clip(sample.clip, mcfg.frames, mcfg.height, mcfg.width)
        sample.patches = patchify(clip, mcfg.patch)


# -- subcommands ------------------------------------------------------------------------


def _render_chunk(args):
    spec_values, seed, lo, hi = args
    spec = SynthSpec(**spec_values)
    return synthesize_range(spec, seed, lo, hi)


def cmd_synth(args) -> int:
    try:
        with open(args.spec) as fh:
            spec_values = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read spec: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"spec is not valid JSON: {exc}") from exc
    try:
        spec = SynthSpec(**spec_values)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid synth spec: {exc}") from exc
    workers = worker_count()
    if workers > 1 and spec.samples >= 4 * workers:
        bounds = np.linspace(0, spec.samples, workers + 1, dtype=int)
        chunks = [(spec_values, args.seed, int(lo), int(hi))
                  for lo, hi in zip(bounds[:-1], bounds[1:])]
        samples = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_render_chunk, chunks):
                samples.extend(part)
    else:
        samples = synthesize_dataset(spec, args.seed)
    write_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_track(args) -> int:
    try:
        box = tuple(int(v) for v in args.box.split(","))
    except ValueError as exc:
        raise CliError(f"--box expects x,y,w,h integers, got {args.box!r}") from exc
    if len(box) != 4:
        raise CliError(f"--box expects 4 values, got {len(box)}")
    frames = read_ppm_video(args.video)
    trajectory = track_template(frames, box, search_radius=args.search_radius)
    clip = build_clip(frames, trajectory, out_frames=args.frames, crop=args.crop)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_clip(out / "clip.bin", clip)
    with open(out / "trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame", "cx", "cy", "flagged"])
        for i, (center, flag) in enumerate(zip(trajectory.centers, trajectory.flags)):
            writer.writerow([i, f"{center[0]:.2f}", f"{center[1]:.2f}", int(flag)])
    flagged = int(trajectory.flags.sum())
    print(f"tracked {len(frames)} frames ({flagged} flagged); clip at {out / 'clip.bin'}")
    return 0


def _write_train_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for entry in history:
            row = [entry.epoch, f"{entry.loss:.10g}"]
            for pair in ("gs", "gt", "st"):
                value = entry.cosines.get(pair)
                row.append("" if value is None else f"{value:.10g}")
            writer.writerow(row)


def cmd_train(args) -> int:
    mcfg, tcfg, lcfg = load_run_config(args.config, args.set, args.seed)
    samples = read_dataset(args.data)
    prepare_samples(samples, mcfg)
    if args.fold is not None:
        if not 0 <= args.fold < tcfg.folds:
            raise CliError(f"--fold must lie in [0, {tcfg.folds})")
        folds = kfold_split(
            [s.probs for s in samples], tcfg.folds, tcfg.seed,
            sample_ids=[s.sample_id for s in samples],
        )
        train_set = [s for s, f in zip(samples, folds) if f != args.fold]
    else:
        train_set = samples
    if not train_set:
        raise CliError("training split is empty")

    def progress(stats):
        if args.verbose:
            cos = " ".join(f"{k}={v:.3f}" for k, v in stats.cosines.items())
            print(f"epoch {stats.epoch}: loss {stats.loss:.6f} {cos}".rstrip(), file=sys.stderr)

    model = RoSTFine(mcfg)
    history = fit(model, train_set, tcfg, lcfg, on_epoch=progress)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, model, config_snapshot(mcfg, tcfg, lcfg))
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    _write_train_log(log_path, history)
    final = history[-1].loss if history else float("nan")
    print(f"trained {len(train_set)} samples for {tcfg.epochs} epochs "
          f"(final loss {final:.6f}); checkpoint at {out}, log at {log_path}")
    return 0


def _model_from_checkpoint(path):
    checkpoint = load_checkpoint(path)
    mcfg, tcfg, lcfg = configs_from_snapshot(checkpoint.config_text)
    model = RoSTFine(mcfg)
    load_into_model(checkpoint, model)
    return model, mcfg, tcfg, lcfg


def _predict(model, samples) -> list[np.ndarray]:
    return [model.forward(s.patches).final.data.copy() for s in samples]


def cmd_eval(args) -> int:
    model, mcfg, tcfg, _ = _model_from_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    prepare_samples(samples, mcfg)
    predictions = _predict(model, samples)
    labels = [s.probs for s in samples]

    sample_rows = []
    fold_results = []
    if args.folds:
        assignment = kfold_split(labels, tcfg.folds, tcfg.seed,
                                 sample_ids=[s.sample_id for s in samples])
        for fold in range(tcfg.folds):
            test_idx = [i for i, f in enumerate(assignment) if f == fold]
            train_idx = [i for i, f in enumerate(assignment) if f != fold]
            baseline = np.mean([labels[i] for i in train_idx], axis=0)
            result = dataset_metrics([predictions[i] for i in test_idx],
                                     [labels[i] for i in test_idx])
            result["fold"] = fold
            result["baseline_mse"] = float(
                np.mean([mse_value(baseline, labels[i]) for i in test_idx])
            )
            fold_results.append(result)
            for i in test_idx:
                sample_rows.append(_sample_row(samples[i], predictions[i], fold))
    else:
        baseline = np.mean(labels, axis=0)
        result = dataset_metrics(predictions, labels)
        result["fold"] = 0
        result["baseline_mse"] = float(np.mean([mse_value(baseline, y) for y in labels]))
        fold_results.append(result)
        sample_rows = [_sample_row(s, p, 0) for s, p in zip(samples, predictions)]

    report = build_report(fold_results, sample_rows)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _sample_row(sample, prediction, fold):
    return {
        "id": sample.sample_id,
        "fold": fold,
        "prediction": [float(v) for v in prediction],
        "label": [float(v) for v in sample.probs],
    }


def cmd_visualize(args) -> int:
    model, mcfg, _, _ = _model_from_checkpoint(args.ckpt)
    clip = read_clip(args.clip)
    prepared = prepare_clip(clip, mcfg.frames, mcfg.height, mcfg.width)
    out = model.forward(patchify(prepared, mcfg.patch))
    grid = (mcfg.height // mcfg.patch, mcfg.width // mcfg.patch)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for frame in range(mcfg.frames):
        stack = [layer[frame] for layer in out.attn]
        heat = attention_rollout(stack)
        export_heatmap(heat, grid, mcfg.patch, out_dir / f"frame_{frame:02d}.pgm")
    print(f"wrote {mcfg.frames} heatmaps to {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    mcfg, _, lcfg = load_run_config(args.config, args.set, args.seed)
    model = RoSTFine(mcfg)
    params = model.parameters()
    names = sorted(params)
    rng = np.random.default_rng(mcfg.seed)
    clip = rng.random((mcfg.frames, mcfg.height, mcfg.width, 3))
    raw = rng.random(5) + 0.05
    label = raw / raw.sum()
    patches = patchify(clip, mcfg.patch)

    def f():
        return total_loss(model.forward(patches), label, lcfg)

    error, checked = grad_check_sampled(
        f, [params[n] for n in names], h=1e-5,
        per_tensor=args.per_tensor, seed=mcfg.seed,
    )
    print(f"max relative gradient error: {error:.3e} ({checked} coordinates over {len(names)} tensors)")
    return 0 if error < args.threshold else 1


def cmd_report(args) -> int:
    eval_report = None
    if args.eval:
        try:
            with open(args.eval) as fh:
                eval_report = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read eval report: {exc}") from exc
    try:
        written = render_report_lazy(args.log, args.out, eval_report)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot render report: {exc}") from exc
    print(f"wrote {', '.join(written)} to {args.out}")
    return 0


def render_report_lazy(log, out, eval_report):
    # matplotlib import lives in rostfine.report; keep CLI startup light
    from rostfine.report import render_report

    return render_report(log, out, eval_report)


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rostfine",
        description="Sperm-video grade-distribution pipeline: synthesize, track, train, evaluate, visualize.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON file with SynthSpec fields")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("track", help="track a target in a raw PPM-frame video")
    p.add_argument("--video", required=True, help="directory of P6 PPM frames")
    p.add_argument("--box", required=True, help="initial box as x,y,w,h")
    p.add_argument("--out", required=True, help="output directory for the tracked clip")
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--crop", type=int, default=150)
    p.add_argument("--search-radius", type=int, default=20)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON config file (model/train/loss sections)")
    p.add_argument("--fold", type=int, help="hold out this fold; train on the rest")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="per-epoch CSV log path (default: <out>.log.csv)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; JSON report on stdout")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--folds", action="store_true", help="report per cross-validation fold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="export per-frame attention heatmaps as PGM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True, help="clip.bin file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("gradcheck", help="compare analytic gradients to central differences")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--per-tensor", type=int, default=10,
                   help="coordinates sampled per parameter tensor")
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render figures from a train log and eval JSON")
    p.add_argument("--log", required=True, help="per-epoch CSV written by train")
    p.add_argument("--eval", help="evaluation report JSON (from eval)")
    p.add_argument("--out", required=True, help="output directory for figures")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (CliError, DatasetError, CheckpointError, NetpbmError, RolloutError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
