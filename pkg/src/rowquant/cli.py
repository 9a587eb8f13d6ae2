"""Command-line entry point: ``rowquant <command> [options]``.

Commands: train-baseline, quantize, sweep, eval, cost, export.

Every option can also come from ``--config FILE`` (``key = value`` lines,
keys named like the long options with ``_`` for ``-``); flags override the
file, the file overrides ``ROWQUANT_SEED`` and built-in defaults. Commands
that take ``--out`` write their fully resolved options to ``config.txt``
there, so ``rowquant <command> --config DIR/config.txt`` repeats the run.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from xml.sax.saxutils import escape

import numpy as np

from . import checkpoint
from .assignment import AssignmentWarning, RatioConfig
from .data import DataFormatError, Dataset, load_csv, load_idx_dir, synth_gaussians, train_val_split
from .hwmodel import SHAPES, InfeasibleError, load_profile, model_shape, report, speedup
from .kernels import IntegerEngine
from .models import ARCHITECTURES, build_model
from .qat import QuantizedModel, TrainConfig, TrainingDiverged, evaluate, topk_accuracy, train, write_metrics

CHECKPOINT_NAME = "model"
SEED_ENV = "ROWQUANT_SEED"


class UsageError(Exception):
    """Bad flags, config keys or input paths (exit code 2)."""


class RunError(Exception):
    """Failure while running a valid command (exit code 1)."""


# ---------------------------------------------------------------------------
# option tables
# ---------------------------------------------------------------------------

def _ratio(text):
    try:
        return str(RatioConfig.parse(text))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _int_list(text):
    try:
        vals = [int(v) for v in str(text).replace(" ", "").split(",") if v != ""]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc
    return ",".join(str(v) for v in vals)


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _choice(*options):
    def conv(text):
        if text not in options:
            raise UsageError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return conv


_TRAIN = {
    "dataset": (str, None, "IDX directory, CSV file, or synth:CLASSES:DIMS:N_PER_CLASS"),
    "epochs": (int, 10, "training epochs"),
    "lr": (float, 0.05, "peak learning rate (cosine schedule)"),
    "batch_size": (int, 32, "minibatch size"),
    "val_fraction": (float, 0.0, "held-out share of the training data for per-epoch val_acc"),
    "seed": (int, 0, "random seed (default from $ROWQUANT_SEED)"),
    "out": (str, None, "output directory"),
}

COMMANDS = {
    "train-baseline": {
        **_TRAIN,
        "arch": (_choice(*ARCHITECTURES), "cnn-small", "model preset"),
    },
    "quantize": {
        **_TRAIN,
        "checkpoint": (str, None, "baseline checkpoint (directory or base path)"),
        "ratio": (_ratio, "65:30:5", "PoT-W4A4 : Fixed-W4A4 : Fixed-W8A4 percentages"),
        "lr": (float, 0.01, "peak learning rate (cosine schedule)"),
        "reassign_interval": (int, 10, "epochs between row reassignments"),
    },
    "sweep": {
        **_TRAIN,
        "checkpoint": (str, None, "baseline checkpoint (directory or base path)"),
        "lr": (float, 0.01, "peak learning rate (cosine schedule)"),
        "pot_ratios": (_int_list, "0,50,60,70,80,90", "PoT percentages to sweep"),
        "w8": (_choice("on", "off", "both"), "both", "include 5%% Fixed-W8A4 rows"),
        "reassign_interval": (int, 10, "epochs between row reassignments"),
        "jobs": (int, 1, "parallel worker processes"),
    },
    "eval": {
        "checkpoint": (str, None, "checkpoint (directory or base path)"),
        "dataset": (str, None, "evaluation data (the test split of an IDX directory or synth spec)"),
        "engine": (_choice("float", "integer"), "float", "inference path"),
        "split": (_choice("train", "test"), "test", "which split of the dataset to score"),
        "seed": (int, 0, "random seed (default from $ROWQUANT_SEED)"),
        "out": (str, None, "optional output directory for eval.txt"),
    },
    "cost": {
        "checkpoint": (str, None, "checkpoint whose layer shapes are costed"),
        "shape": (_choice(*SHAPES), None, "named layer shape instead of a checkpoint"),
        "device_profile": (str, "xc7z045", "profile file or shipped profile name"),
        "ratio": (_ratio, "65:30:5", "PoT-W4A4 : Fixed-W4A4 : Fixed-W8A4 percentages"),
        "first_last_8bit": (_bool, False, "run the first and last layer on the Fixed-8 core"),
        "baseline_ratio": (_ratio, "0:100:0", "ratio the speedup is measured against"),
        "seed": (int, 0, "unused; recorded for uniformity"),
        "out": (str, None, "optional output directory for cost.csv"),
    },
    "export": {
        "checkpoint": (str, None, "quantized checkpoint"),
        "seed": (int, 0, "unused; recorded for uniformity"),
        "out": (str, None, "output directory"),
    },
}

REQUIRED = {
    "train-baseline": ("dataset", "out"),
    "quantize": ("dataset", "checkpoint", "out"),
    "sweep": ("dataset", "checkpoint", "out"),
    "eval": ("dataset", "checkpoint"),
    "cost": (),
    "export": ("checkpoint", "out"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rowquant", description="Row-wise mixed-scheme quantization toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override it")
        for key, (conv, default, helptext) in opts.items():
            flag = "--" + key.replace("_", "-")
            if conv is _bool:
                p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=helptext)
            else:
                shown = f" (default {default})" if default is not None else ""
                p.add_argument(flag, dest=key, default=None, help=helptext + shown)
    return ap


def read_config(path) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def resolve(command: str, flags: dict, config_path=None) -> dict:
    """Merge defaults < $ROWQUANT_SEED < config file < flags, converting types."""
    opts = COMMANDS[command]
    raw = {k: default for k, (_, default, _) in opts.items()}
    if os.environ.get(SEED_ENV, "").strip():
        raw["seed"] = os.environ[SEED_ENV].strip()
    if config_path:
        file_vals = read_config(config_path)
        recorded = file_vals.pop("command", command)
        if recorded != command:
            raise UsageError(f"config {config_path} was recorded for '{recorded}', not '{command}'")
        unknown = sorted(set(file_vals) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        raw.update({k: (None if v == "" else v) for k, v in file_vals.items()})
    raw.update({k: v for k, v in flags.items() if k in opts and v is not None})
    resolved = {}
    for key, (conv, _, _) in opts.items():
        value = raw.get(key)
        if value is None:
            resolved[key] = None
            continue
        try:
            resolved[key] = conv(value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"--{key.replace('_', '-')}: {exc}") from exc
    missing = [k for k in REQUIRED[command] if resolved.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{command}: missing required option(s) " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return resolved


def write_config(command: str, cfg: dict, out_dir: str) -> None:
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"command = {command}\n")
        for key, value in cfg.items():
            fh.write(f"{key} = {'' if value is None else value}\n")


def _make_out(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from exc
    return path


# ---------------------------------------------------------------------------
# datasets and checkpoints
# ---------------------------------------------------------------------------

def load_dataset(spec: str, split: str = "train", seed: int = 0) -> Dataset:
    """Resolve a dataset spec to one split.

    ``synth:C:D:N`` draws the train split with the given seed and the test
    split from an independent stream; a CSV file serves both splits.
    """
    if spec.startswith("synth:"):
        parts = spec.split(":")[1:]
        try:
            classes, dims, n = (int(p) for p in parts)
        except ValueError:
            raise UsageError(f"synthetic dataset spec must be synth:CLASSES:DIMS:N, got {spec!r}") from None
        try:
            return synth_gaussians(classes, dims, n, seed=seed if split == "train" else seed + 7919)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if not os.path.exists(spec):
        raise UsageError(f"dataset not found: {spec}")
    if os.path.isdir(spec):
        try:
            train_set, test_set = load_idx_dir(spec)
        except FileNotFoundError as exc:
            raise UsageError(f"dataset {spec}: missing IDX file {exc.filename}") from exc
        return train_set if split == "train" else test_set
    return load_csv(spec)


def _fit_normalizer(data: Dataset):
    """Flat feature data is standardized; image data is used as-is."""
    if data.features.ndim != 2 or len(data) == 0:
        return None
    mean = data.features.mean(axis=0)
    std = np.maximum(data.features.std(axis=0), 1e-8)
    return {"mean": mean.tolist(), "std": std.tolist()}


def _apply_normalizer(data: Dataset, norm) -> Dataset:
    if not norm:
        return data
    mean, std = np.asarray(norm["mean"]), np.asarray(norm["std"])
    if data.features.ndim != 2 or data.features.shape[1] != mean.shape[0]:
        raise UsageError(f"dataset has feature shape {data.sample_shape}, model expects ({mean.shape[0]},)")
    return Dataset((data.features - mean) / std, data.labels, data.class_count)


def checkpoint_base(path: str) -> str:
    if os.path.isdir(path):
        path = os.path.join(path, CHECKPOINT_NAME)
    if not os.path.exists(path + ".manifest"):
        raise UsageError(f"checkpoint not found: {path}.manifest")
    return path


def load_checkpoint(path: str) -> QuantizedModel:
    try:
        return checkpoint.load(checkpoint_base(path))
    except checkpoint.CheckpointError as exc:
        raise RunError(f"cannot load checkpoint {path}: {exc}") from exc


def _check_compat(qm: QuantizedModel, data: Dataset) -> None:
    model = qm.model
    if tuple(data.sample_shape) != tuple(model.input_shape):
        raise UsageError(f"dataset sample shape {data.sample_shape} does not match model input {tuple(model.input_shape)}")
    if data.class_count > model.num_classes:
        raise UsageError(f"dataset has {data.class_count} classes, model has {model.num_classes}")


def _progress(prefix):
    def log(row):
        print(f"{prefix} epoch {row['epoch']}: loss {row['train_loss']:.4f} "
              f"train_acc {row['train_acc']:.4f} val_acc {row['val_acc']:.4f}", file=sys.stderr)
    return log


def _split_train(data: Dataset, cfg: dict):
    if cfg["val_fraction"] and cfg["val_fraction"] > 0:
        if not cfg["val_fraction"] < 1:
            raise UsageError("--val-fraction must be below 1")
        return train_val_split(data, cfg["val_fraction"], cfg["seed"])
    return data, None


def _train_config(cfg: dict, ratio) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"], seed=cfg["seed"],
            ratio=ratio, reassign_interval=cfg.get("reassign_interval") or 10,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _meta(command: str, cfg: dict) -> dict:
    """Run description stored in checkpoints (output paths excluded)."""
    return {"command": command, **{k: v for k, v in cfg.items() if k not in ("out", "jobs")}}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train_baseline(cfg: dict) -> dict:
    data = load_dataset(cfg["dataset"], "train", cfg["seed"])
    if len(data) == 0:
        raise UsageError(f"dataset {cfg['dataset']} is empty")
    norm = _fit_normalizer(data)
    data = _apply_normalizer(data, norm)
    try:
        model = build_model(cfg["arch"], data.sample_shape, data.class_count, seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(f"dataset/arch mismatch: {exc}") from exc
    train_set, val_set = _split_train(data, cfg)
    qm = QuantizedModel(model, seed=cfg["seed"])
    train(qm, train_set, _train_config(cfg, None), val_set, log=_progress("baseline"))
    qm.meta = {**_meta("train-baseline", cfg), "normalize": norm}
    out = _make_out(cfg["out"])
    checkpoint.save(qm, os.path.join(out, CHECKPOINT_NAME))
    write_metrics(qm.metrics, os.path.join(out, "metrics.csv"))
    final = qm.metrics[-1]
    print(f"train_acc {final['train_acc']:.4f}  checkpoint {os.path.join(out, CHECKPOINT_NAME)}")
    return final


def write_assignment_summary(qm: QuantizedModel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "rows", "pot_w4a4", "fixed_w4a4", "fixed_w8a4"])
        for row in qm.assignment.summary():
            w.writerow(row)


def run_quantize(cfg: dict, out: str) -> dict:
    """Quantize a baseline checkpoint; returns test accuracy of the result."""
    base = load_checkpoint(cfg["checkpoint"])
    if base.is_quantized:
        raise UsageError(f"{cfg['checkpoint']} is already quantized; pass a float baseline")
    norm = base.meta.get("normalize")
    data = _apply_normalizer(load_dataset(cfg["dataset"], "train", cfg["seed"]), norm)
    test = _apply_normalizer(load_dataset(cfg["dataset"], "test", cfg["seed"]), norm)
    _check_compat(base, data)
    ratio = RatioConfig.parse(cfg["ratio"])
    train_set, val_set = _split_train(data, cfg)
    qm = QuantizedModel(base.model, seed=cfg["seed"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", AssignmentWarning)
        train(qm, train_set, _train_config(cfg, ratio), val_set, log=_progress(f"quantize {ratio}"))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    qm.meta = {**_meta("quantize", cfg), "normalize": norm}
    os.makedirs(out, exist_ok=True)
    checkpoint.save(qm, os.path.join(out, CHECKPOINT_NAME))
    write_metrics(qm.metrics, os.path.join(out, "metrics.csv"))
    write_assignment_summary(qm, os.path.join(out, "assignment.csv"))
    result = {"ratio": str(ratio), **(evaluate(qm, test) if len(test) else {})}
    with open(os.path.join(out, "result.txt"), "w") as fh:
        for k, v in result.items():
            fh.write(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n")
    return result


def cmd_quantize(cfg: dict) -> dict:
    out = _make_out(cfg["out"])
    result = run_quantize(cfg, out)
    print(" ".join(f"{k} {v:.4f}" if isinstance(v, float) else f"{k} {v}" for k, v in result.items()))
    return result


def sweep_ratios(pot_ratios, w8: str) -> list:
    """(pot percentage, with_w8, RatioConfig) for each requested run."""
    if not pot_ratios:
        raise UsageError("sweep needs at least one PoT ratio")
    settings = {"on": (True,), "off": (False,), "both": (False, True)}[w8]
    runs = []
    for p in pot_ratios:
        for with_w8 in settings:
            c = 5 if with_w8 else 0
            if not 0 <= p <= 100 - c:
                raise UsageError(f"PoT ratio {p} leaves no room for {c}% Fixed-W8A4")
            runs.append((p, with_w8, RatioConfig(p, 100 - p - c, c)))
    return runs


def _sweep_job(args):
    cfg, out = args
    return run_quantize(cfg, out)


def svg_plot(series: dict, path, baseline=None, title="Top-1 accuracy vs PoT-W4A4 ratio") -> None:
    """Self-contained SVG line chart; ``series`` maps label → [(x, y), ...] with x in percent."""
    width, height, left, right, top, bottom = 560, 360, 64, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    ys = [y for pts in series.values() for _, y in pts] + ([baseline] if baseline is not None else [])
    lo, hi = min(ys), max(ys)
    pad = max((hi - lo) * 0.1, 0.005)
    lo, hi = lo - pad, hi + pad

    def sx(x):
        return left + pw * x / 100.0

    def sy(y):
        return top + ph * (1.0 - (y - lo) / (hi - lo))

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for x in range(0, 101, 20):
        parts.append(f'<text x="{sx(x):.1f}" y="{top + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{x}</text>')
    for i in range(5):
        y = lo + (hi - lo) * i / 4
        parts.append(f'<text x="{left - 6}" y="{sy(y) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{100 * y:.1f}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">PoT-W4A4 rows (%)</text>')
    parts.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {top + ph / 2})">top-1 (%)</text>')
    if baseline is not None:
        parts.append(f'<line x1="{left}" y1="{sy(baseline):.1f}" x2="{left + pw}" y2="{sy(baseline):.1f}" stroke="gray" stroke-dasharray="4 3"/>')
        parts.append(f'<text x="{left + pw + 8}" y="{sy(baseline) + 4:.1f}" font-family="sans-serif" font-size="11">float baseline</text>')
    for i, (label, pts) in enumerate(series.items()):
        pts = sorted(pts)
        color = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>')
        ly = top + 16 * i + 8
        parts.append(f'<line x1="{left + pw + 8}" y1="{ly + 20}" x2="{left + pw + 24}" y2="{ly + 20}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 28}" y="{ly + 24}" font-family="sans-serif" font-size="11">{escape(label)}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


SWEEP_FIELDS = ("pot_ratio", "with_w8", "ratio", "top1", "baseline_top1", "drop")


def cmd_sweep(cfg: dict) -> list:
    pots = [int(v) for v in cfg["pot_ratios"].split(",") if v]
    runs = sweep_ratios(pots, cfg["w8"])
    if cfg["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    base = load_checkpoint(cfg["checkpoint"])
    test = _apply_normalizer(load_dataset(cfg["dataset"], "test", cfg["seed"]), base.meta.get("normalize"))
    if len(test) == 0:
        raise UsageError("sweep needs a non-empty test split")
    _check_compat(base, test)
    baseline = evaluate(base, test)["top1"]
    out = _make_out(cfg["out"])
    jobs = []
    for p, with_w8, ratio in runs:
        sub = {**cfg, "ratio": str(ratio)}
        jobs.append((sub, os.path.join(out, "runs", str(ratio).replace(":", "-"))))
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    rows = []
    for (p, with_w8, ratio), res in zip(runs, results):
        rows.append({"pot_ratio": p, "with_w8": int(with_w8), "ratio": str(ratio), "top1": res["top1"],
                     "baseline_top1": baseline, "drop": baseline - res["top1"]})
    with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in SWEEP_FIELDS])
    series = {}
    for r in rows:
        label = "with 5% Fixed-W8A4" if r["with_w8"] else "no Fixed-W8A4"
        series.setdefault(label, []).append((r["pot_ratio"], r["top1"]))
    svg_plot(series, os.path.join(out, "sweep.svg"), baseline)
    for r in rows:
        print(f"{r['ratio']:>9}  top1 {r['top1']:.4f}  drop {100 * r['drop']:+.2f} pts")
    return rows


def cmd_eval(cfg: dict) -> dict:
    qm = load_checkpoint(cfg["checkpoint"])
    data = _apply_normalizer(load_dataset(cfg["dataset"], cfg["split"], cfg["seed"]), qm.meta.get("normalize"))
    if len(data) == 0:
        raise RunError(f"evaluation set {cfg['dataset']} ({cfg['split']}) is empty")
    _check_compat(qm, data)
    if cfg["engine"] == "integer":
        if not qm.is_quantized:
            raise UsageError("the integer engine needs a quantized checkpoint")
        logits = IntegerEngine(qm).predict(data.features)
        result = {"top1": topk_accuracy(logits, data.labels, 1)}
        if data.class_count >= 5:
            result["top5"] = topk_accuracy(logits, data.labels, 5)
    else:
        result = evaluate(qm, data)
    result = {"engine": cfg["engine"], "samples": len(data), **result}
    text = "\n".join(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in result.items())
    print(text)
    if cfg["out"]:
        with open(os.path.join(_make_out(cfg["out"]), "eval.txt"), "w") as fh:
            fh.write(text + "\n")
    return result


def cmd_cost(cfg: dict):
    if (cfg["checkpoint"] is None) == (cfg["shape"] is None):
        raise UsageError("cost needs exactly one of --checkpoint or --shape")
    try:
        profile = load_profile(cfg["device_profile"])
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except ValueError as exc:
        raise UsageError(f"bad device profile: {exc}") from exc
    if cfg["shape"]:
        shape = SHAPES[cfg["shape"]]()
    else:
        shape = model_shape(load_checkpoint(cfg["checkpoint"]).model)
    ratio = RatioConfig.parse(cfg["ratio"])
    try:
        rep = report(shape, ratio, profile, cfg["first_last_8bit"])
        base = report(shape, RatioConfig.parse(cfg["baseline_ratio"]), profile, cfg["first_last_8bit"])
    except InfeasibleError as exc:
        raise RunError(f"infeasible: {exc}") from exc
    print(rep.table())
    print(f"speedup vs {base.ratio}: {speedup(rep, base):.2f}x")
    if cfg["out"]:
        out = _make_out(cfg["out"])
        with open(os.path.join(out, "cost.csv"), "w") as fh:
            fh.write(rep.to_csv())
        with open(os.path.join(out, "cost.txt"), "w") as fh:
            fh.write(rep.table() + "\n")
    return rep


def cmd_export(cfg: dict):
    qm = load_checkpoint(cfg["checkpoint"])
    if not qm.is_quantized:
        raise UsageError("only quantized checkpoints can be exported")
    out = _make_out(cfg["out"])
    checkpoint.export(qm, os.path.join(out, CHECKPOINT_NAME))
    print(f"wrote {os.path.join(out, CHECKPOINT_NAME)}.codes")


HANDLERS = {
    "train-baseline": cmd_train_baseline,
    "quantize": cmd_quantize,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "cost": cmd_cost,
    "export": cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on malformed flags
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = resolve(args.command, flags, args.config)
        if cfg.get("out"):
            write_config(args.command, cfg, _make_out(cfg["out"]))
        HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"rowquant {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RunError, TrainingDiverged, InfeasibleError, DataFormatError, checkpoint.CheckpointError, OSError) as exc:
        print(f"rowquant {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
