"""Command-line front end: gen, fuse, train, tune, eval, predict, compare.

Exit status is 0 on success, 1 on invalid input (bad flags, bad config,
malformed files, misaligned rasters) and 2 on runtime failure. Every command
writes a JSON manifest beside its output.
"""

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time

import numpy as np

from . import data as D
from . import kernels, metrics
from .config import ConfigError, RunConfig, load_config
from .fusion import AlignmentError, denoise, fuse
from .model import (
    BudgetTracker,
    TrainingDiverged,
    build_fcn,
    fit_input_normalization,
    predict,
    train,
)
from .modelio import load_model, round_to_float32, save_model
from .pso import AllEvaluationsFailed, position_fragment, trace_csv
from .raster import FormatError, read_raster, write_labels, write_raster
from .synthgen import SceneSpec, generate_scene, write_scene
from .tuning import default_space, evaluate_fcn_fitness, tune

MANIFEST_SUFFIX = ".manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _log(msg):
    print(msg, file=sys.stderr)


def _write_manifest(path, command, argv, config=None, seeds=None, inputs=(), outputs=(), started=0.0, macs=0, extra=None):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config or {},
        "seeds": seeds or {},
        "inputs": {p: D.file_digest(p) for p in inputs},
        "outputs": {p: D.file_digest(p) for p in outputs},
        "wall_seconds": time.perf_counter() - started,
        "mac_count": int(macs),
        "kernel_backend": kernels.BACKEND,
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return manifest


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _parent(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


def _size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from None
    return w, h


# --- gen -----------------------------------------------------------------------


def cmd_gen(args, argv):
    started = time.perf_counter()
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    w, h = args.size
    template = SceneSpec(
        width=w,
        height=h,
        building_count=args.buildings,
        road_count=args.roads,
        vegetation_blobs=args.vegetation,
    )
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for k in range(args.count):
        spec = SceneSpec(**{**template.__dict__, "seed": args.seed + k})
        scene_dir = os.path.join(args.out, f"scene_{k}")
        write_scene(generate_scene(spec), scene_dir)
        outputs += [os.path.join(scene_dir, n) for n in ("lidar.gfr", "sar.gfr", "optical.gfr", "labels.gfl")]
    _write_manifest(
        os.path.join(args.out, "manifest.json"),
        "gen",
        argv,
        config={**template.__dict__, "seed": None},
        seeds={"base_seed": args.seed, "count": args.count},
        outputs=outputs,
        started=started,
    )
    _log(f"wrote {args.count} scenes to {args.out}")
    return 0


# --- fuse ----------------------------------------------------------------------


def cmd_fuse(args, argv):
    started = time.perf_counter()
    lidar, sar, optical = (read_raster(p) for p in (args.lidar, args.sar, args.optical))
    if args.denoise:
        lidar, sar, optical = denoise(lidar), denoise(sar), denoise(optical)
    fused = fuse(lidar, sar, optical)
    _parent(args.out)
    write_raster(fused, args.out)
    _write_manifest(
        args.out + MANIFEST_SUFFIX,
        "fuse",
        argv,
        config={"denoise": args.denoise},
        inputs=[args.lidar, args.sar, args.optical],
        outputs=[args.out],
        started=started,
    )
    return 0


# --- train / tune --------------------------------------------------------------


def _load_split(data_dir, cfg):
    scenes = D.load_scenes(data_dir)
    images, labels = D.to_arrays(scenes, cfg.modality, cfg.denoise)
    tr, va, te = D.split_indices(len(scenes), cfg.seed, cfg.train_frac, cfg.val_frac)
    names = [os.path.basename(s.path) for s in scenes]
    return images, labels, (tr, va, te), names


def _config_with_overrides(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    return cfg


def cmd_train(args, argv):
    started = time.perf_counter()
    cfg = _config_with_overrides(args)
    if args.budget_seconds is not None:
        cfg = cfg.with_values(budget_seconds=float(args.budget_seconds))
    if args.budget_macs is not None:
        cfg = cfg.with_values(budget_macs=float(args.budget_macs))
    images, labels, (tr, va, te), names = _load_split(args.data, cfg)
    fcfg = cfg.fcn_config(images.shape[1])
    fcfg.check_extent(*images.shape[2:])
    model = fit_input_normalization(build_fcn(fcfg), images[tr])
    budget = BudgetTracker(cfg.budget_seconds, cfg.budget_macs)
    model, history = train(model, (images[tr], labels[tr]), (images[va], labels[va]), budget, cfg.augment)
    model = round_to_float32(model)
    _parent(args.out)
    save_model(model, args.out)
    train_seconds = budget.elapsed()
    _log(
        f"trained {len(history.records)} epochs in {train_seconds:.1f}s, "
        f"{budget.mac_count:.3e} MACs, best epoch {history.best_epoch}"
    )
    if not history.complete:
        _log("warning: budget exhausted before the first epoch; the initial model was saved")
    _write_manifest(
        args.out + MANIFEST_SUFFIX,
        "train",
        argv,
        config=cfg.as_dict(),
        seeds={"seed": cfg.seed},
        inputs=[os.path.join(args.data, n, f) for n in names for f in ("lidar.gfr", "sar.gfr", "optical.gfr", "labels.gfl")],
        outputs=[args.out],
        started=started,
        macs=budget.mac_count,
        extra={
            "train_seconds": train_seconds,
            "complete": history.complete,
            "best_epoch": history.best_epoch,
            "initial_train_loss": history.initial_train_loss,
            "history": [r.__dict__ for r in history.records],
            "split": {"train": [names[i] for i in tr], "val": [names[i] for i in va], "test": [names[i] for i in te]},
            "modality": cfg.modality,
            "denoise": cfg.denoise,
        },
    )
    return 0


def tune_datasets(images, labels, split, cfg):
    tr, va, _ = split
    if len(va) == 0:
        raise ConfigError("tuning needs a non-empty validation split (val_frac > 0)")
    tr = tr[: cfg.tune_train_tiles]
    va = va[: cfg.tune_val_tiles]
    return (images[tr], labels[tr]), (images[va], labels[va])


def cmd_tune(args, argv):
    started = time.perf_counter()
    cfg = _config_with_overrides(args)
    changes = {}
    if args.swarm is not None:
        changes["swarm_particles"] = args.swarm
    if args.iters is not None:
        changes["swarm_iters"] = args.iters
    if args.seed is not None:
        changes["swarm_seed"] = args.seed
    cfg = cfg.with_values(**changes).validate()
    images, labels, split, _ = _load_split(args.data, cfg)
    datasets = tune_datasets(images, labels, split, cfg)
    space = default_space()
    base = cfg.fcn_config(images.shape[1])
    base.check_extent(*images.shape[2:])

    def progress(state):
        _log(f"iter {state.iteration}: best fitness {state.global_best_fitness:.6f}")

    _, result = tune(space, cfg.swarm_config(), datasets, base, cfg.tune_epochs, progress)
    default_point = np.array([getattr(base, d.name) for d in space.dims], dtype=np.float64)
    default_fitness = evaluate_fcn_fitness(default_point, space, datasets, base, cfg.tune_epochs, cfg.cost_penalty)
    tuned = cfg.with_values(**space.named(result.best_position))
    _parent(args.out)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("# swarm-tuned hyperparameters\n")
        fh.writelines(f"# tuned: {line}\n" for line in position_fragment(space, result.best_position).splitlines())
        fh.write(tuned.to_text())
    trace_path = args.out + ".trace.csv"
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write(trace_csv(result.trace))
    _write_manifest(
        args.out + MANIFEST_SUFFIX,
        "tune",
        argv,
        config=cfg.as_dict(),
        seeds={"swarm_seed": cfg.swarm_seed, "seed": cfg.seed},
        outputs=[args.out, trace_path],
        started=started,
        extra={
            "best_fitness": result.best_fitness,
            "default_fitness": default_fitness,
            "evaluations": result.state.evaluations,
            "iterations": result.state.iteration,
            "converged": result.state.converged,
            "best": space.named(result.best_position),
        },
    )
    _log(f"best fitness {result.best_fitness:.6f} (default config: {default_fitness:.6f})")
    return 0


# --- eval / predict --------------------------------------------------------------


def _model_manifest(model_path):
    p = model_path + MANIFEST_SUFFIX
    if os.path.exists(p):
        with open(p, encoding="utf-8") as fh:
            return json.load(fh)
    return {}


def _resolve_modality(cfg, manifest, channels):
    if "modality" in cfg.explicit:
        return cfg.modality, cfg.denoise
    if manifest.get("modality"):
        return manifest["modality"], bool(manifest.get("denoise", False))
    guess = {5: "fused", 3: "optical"}.get(channels)
    if guess is None:
        raise ConfigError(f"cannot infer the input modality of a {channels}-channel model; set modality= in the thresholds file")
    return guess, cfg.denoise


def cmd_eval(args, argv):
    started = time.perf_counter()
    cfg = load_config(args.thresholds)
    model = load_model(args.model)
    manifest = _model_manifest(args.model)
    modality, denoised = _resolve_modality(cfg, manifest, model.config.in_channels)
    cfg = cfg.with_values(modality=modality, denoise=denoised)
    scenes = D.load_scenes(args.data)
    names = [os.path.basename(s.path) for s in scenes]
    if cfg.eval_split != "all":
        tr, va, te = D.split_indices(len(scenes), cfg.seed, cfg.train_frac, cfg.val_frac)
        keep = {"train": tr, "val": va, "test": te}[cfg.eval_split]
        scenes = [scenes[i] for i in sorted(keep)]
        names = [names[i] for i in sorted(keep)]
    if not scenes:
        raise ConfigError("no scenes selected for evaluation")
    images, labels = D.to_arrays(scenes, modality, denoised)
    if images.shape[1] != model.config.in_channels:
        raise ConfigError(f"{modality} input has {images.shape[1]} channels but the model expects {model.config.in_channels}")
    report, preds = metrics.full_report(model, images, labels, cfg.thresholds(), dataset=cfg.dataset or None)
    label_paths = [os.path.join(args.data, n, "labels.gfl") for n in names]
    test_digest = hashlib.sha256("".join(D.file_digest(p) for p in label_paths).encode()).hexdigest()
    report.extra.update(
        {
            "model": os.path.basename(args.model),
            "modality": modality,
            "tiles": len(scenes),
            "test_set_digest": test_digest,
            "model_digest": D.file_digest(args.model),
        }
    )
    if "mac_count" in manifest:
        report.extra["train_macs"] = int(manifest["mac_count"])
    _parent(args.report)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(report.to_kv())
    with open(args.report + ".txt", "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    pred_dir = args.report + ".pred"
    os.makedirs(pred_dir, exist_ok=True)
    pred_paths = []
    for name, pred in zip(names, preds):
        p = os.path.join(pred_dir, f"{name}.gfl")
        write_labels(pred, p)
        pred_paths.append(p)
    _write_manifest(
        args.report + MANIFEST_SUFFIX,
        "eval",
        argv,
        config=cfg.as_dict(),
        inputs=[args.model, args.thresholds, *label_paths],
        outputs=[args.report, args.report + ".txt", *pred_paths],
        started=started,
    )
    _log(report.to_text())
    return 0


def cmd_predict(args, argv):
    started = time.perf_counter()
    model = load_model(args.model)
    raster = read_raster(args.input)
    labels = predict(model, raster)
    _parent(args.out)
    write_labels(labels, args.out)
    _write_manifest(
        args.out + MANIFEST_SUFFIX,
        "predict",
        argv,
        inputs=[args.model, args.input],
        outputs=[args.out],
        started=started,
    )
    return 0


# --- compare -------------------------------------------------------------------

COMPARE_COLUMNS = (
    "model",
    "pixel_accuracy",
    "mean_iou",
    "macro_f1",
    "recall",
    "precision",
    "train_seconds",
    "macs",
)


def read_report(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                out[k] = v
    return out


def _find_one(directory, suffix, exclude=()):
    hits = sorted(
        f for f in os.listdir(directory) if f.endswith(suffix) and not any(f.endswith(e) for e in exclude)
    )
    return os.path.join(directory, hits[0]) if hits else None


def compare_rows(run_dirs):
    rows, digests = [], {}
    for d in run_dirs:
        report_path = _find_one(d, ".kv")
        if report_path is None:
            raise ConfigError(f"no .kv report in run directory {d}")
        rep = read_report(report_path)
        model_manifest = _find_one(d, ".gfm" + MANIFEST_SUFFIX)
        seconds, macs = math.nan, int(rep.get("train_macs", 0))
        if model_manifest:
            with open(model_manifest, encoding="utf-8") as fh:
                m = json.load(fh)
            seconds = float(m.get("train_seconds", math.nan))
            macs = int(m.get("mac_count", macs))
        digests[d] = rep.get("test_set_digest", "")
        rows.append(
            {
                "model": rep.get("dataset") or os.path.basename(os.path.normpath(d)),
                "pixel_accuracy": float(rep["pixel_accuracy"]),
                "mean_iou": float(rep["mean_iou"]),
                "macro_f1": float(rep["macro_f1"]),
                "recall": float(rep["mean_recall"]),
                "precision": float(rep["mean_precision"]),
                "train_seconds": seconds,
                "macs": macs,
            }
        )
    if len(set(digests.values())) > 1:
        detail = ", ".join(f"{k}: {v[:12]}" for k, v in digests.items())
        raise ConfigError(f"runs were evaluated on different test sets ({detail})")
    return rows


def format_compare(rows):
    text = io.StringIO()
    text.write(
        f"{'model':<24} {'accuracy':>9} {'mIoU':>7} {'F1':>7} {'recall':>7} {'precision':>9} {'train s':>9} {'MACs':>12}\n"
    )
    for r in rows:
        text.write(
            f"{r['model']:<24} {r['pixel_accuracy']:>9.4f} {r['mean_iou']:>7.4f} {r['macro_f1']:>7.4f} "
            f"{r['recall']:>7.4f} {r['precision']:>9.4f} {r['train_seconds']:>9.1f} {r['macs']:>12.3e}\n"
        )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in COMPARE_COLUMNS])
    return text.getvalue(), buf.getvalue()


def cmd_compare(args, argv):
    started = time.perf_counter()
    if len(args.runs) < 2:
        raise ConfigError("compare needs at least two run directories")
    rows = compare_rows(args.runs)
    text, table = format_compare(rows)
    _parent(args.out)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(args.out + ".csv", "w", encoding="utf-8") as fh:
        fh.write(table)
    _write_manifest(args.out + MANIFEST_SUFFIX, "compare", argv, outputs=[args.out, args.out + ".csv"], started=started)
    sys.stdout.write(text)
    return 0


# --- entry point -----------------------------------------------------------------


def build_parser():
    p = _Parser(prog="geofcn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic scenes")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=_size, default=(64, 64))
    g.add_argument("--out", required=True)
    g.add_argument("--buildings", type=int, default=SceneSpec.building_count)
    g.add_argument("--roads", type=int, default=SceneSpec.road_count)
    g.add_argument("--vegetation", type=int, default=SceneSpec.vegetation_blobs)

    f = sub.add_parser("fuse", help="stack co-registered lidar, SAR and optical rasters")
    f.add_argument("--lidar", required=True)
    f.add_argument("--sar", required=True)
    f.add_argument("--optical", required=True)
    f.add_argument("--denoise", action="store_true")
    f.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train an FCN on a scene directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--budget-seconds", type=float)
    t.add_argument("--budget-macs", type=float)
    t.add_argument("--out", required=True)

    u = sub.add_parser("tune", help="swarm search over FCN hyperparameters")
    u.add_argument("--data", required=True)
    u.add_argument("--config")
    u.add_argument("--swarm", type=int)
    u.add_argument("--iters", type=int)
    u.add_argument("--seed", type=int)
    u.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score a model on a scene directory")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--thresholds", required=True)
    e.add_argument("--report", required=True)

    r = sub.add_parser("predict", help="label a raster")
    r.add_argument("--model", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--out", required=True)

    c = sub.add_parser("compare", help="tabulate several evaluated runs")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--out", required=True)
    return p


COMMANDS = {
    "gen": cmd_gen,
    "fuse": cmd_fuse,
    "train": cmd_train,
    "tune": cmd_tune,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "compare": cmd_compare,
}


def run_command(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "geofcn: error: a subcommand is required")
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        _log(str(exc))
        return 1
    except AlignmentError as exc:
        _log(f"error: {exc}")
        return 1
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        _log(f"error: {exc}")
        return 1
    except (TrainingDiverged, AllEvaluationsFailed, OSError, FloatingPointError) as exc:
        _log(f"runtime failure: {exc}")
        return 2


def main(argv=None):
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
