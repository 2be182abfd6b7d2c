"""Command-line driver: train, prune, recalibrate, diagnose and report.

Every subcommand reads one strict JSON config (unknown keys are errors),
writes its artifacts under the output directory and exits with

* 0 on success,
* 1 on a configuration, input or format problem (message names the config line),
* 2 on a numeric failure mid-run (partial artifacts are kept next to a
  ``FAILED`` marker file).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import time
import types
import typing
import uuid
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset, gen_blobs, gen_spirals, load_idx
from .diagnostics import normalized_hamming, prediction_histogram, probe_batch, variance_ratio_report
from .errors import CollapseLabError, ConfigError, NumericError
from .model import Model, ModelConfig, accuracy, init_model, load_checkpoint, save_checkpoint
from .core_math import make_rng
from .pruning import (FisherConfig, ScoreMethod, UpdateMode, estimate_fisher, needs_fisher,
                      prune_pipeline)
from .reflow import (CalibrationMode, CalibrationSpec, SweepDirection, calibration_batches,
                     collect_bn_stats, layerwise_recalibration_sweep, reflow)
from .training import TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
FAILURE_MARKER = "FAILED"
THREADS_ENV = "COLLAPSE_LAB_THREADS"

METRICS_COLUMNS = ["run_id", "method", "update_mode", "reflow", "sparsity", "accuracy_pct",
                   "modal_fraction", "final_variance_ratio", "wall_ms"]
ROW_KEY = ["sparsity", "method", "update_mode", "reflow"]
VARIANCE_COLUMNS = ROW_KEY + ["layer_index", "mean_orig", "var_orig", "mean_pruned", "var_pruned", "ratio"]
PREDICTION_COLUMNS = ROW_KEY + ["class_index", "count", "fraction"]
HAMMING_COLUMNS = ["sparsity", "mask_a", "mask_b", "raw", "normalized"]
SWEEP_COLUMNS = ["sparsity", "step_k", "layer_index", "direction", "cumulative_accuracy_pct"]
ABLATION_COLUMNS = ["kind", "sparsity", "batch_count", "batch_size", "accuracy_pct"]
HISTORY_COLUMNS = ["epoch", "loss", "accuracy_pct"]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class DataSection:
    kind: str = "blobs"
    n_per_class: int = 500
    eval_per_class: int = 100
    separation: float = 6.0
    noise_sigma: float = 1.0
    turns: float = 1.5
    train_images: str | None = None
    train_labels: str | None = None
    eval_images: str | None = None
    eval_labels: str | None = None
    normalize: bool = True


@dataclass
class TrainSection:
    epochs: int = 30
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 128
    grad_clip: float | None = 5.0
    final_stats_pass: bool = True


@dataclass
class PruneSection:
    methods: list[str] = field(default_factory=lambda: ["magnitude", "obd"])
    update_modes: list[str] = field(default_factory=lambda: ["selection", "fisher_update"])
    sparsities: list[float] = field(default_factory=lambda: [0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    fisher_samples: int = 512
    damping_rel: float = 1e-4


@dataclass
class ReflowSection:
    enabled: bool = True
    batch_count: int = 50
    batch_size: int = 128
    mode: str = "batch_stat_propagation"
    sweep_directions: list[str] = field(default_factory=lambda: ["forward", "backward"])
    sweep_sparsities: list[float] = field(default_factory=lambda: [0.8])


@dataclass
class AblationSection:
    sparsity: float = 0.8
    batch_counts: list[int] = field(default_factory=lambda: [1, 5, 10, 50, 100])
    batch_sizes: list[int] = field(default_factory=lambda: [32, 64, 128, 256])


@dataclass
class ExperimentConfig:
    seed: int = 42
    output_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    prune: PruneSection = field(default_factory=PruneSection)
    reflow: ReflowSection = field(default_factory=ReflowSection)
    ablations: AblationSection = field(default_factory=AblationSection)

    def train_config(self) -> TrainConfig:
        fields_ = asdict(self.train)
        fields_.pop("final_stats_pass")
        return TrainConfig(seed=self.seed, **fields_)

    def fisher_config(self) -> FisherConfig:
        return FisherConfig(self.prune.fisher_samples, self.prune.damping_rel, self.seed)

    def calibration(self, batch_count: int | None = None, batch_size: int | None = None) -> CalibrationSpec:
        return CalibrationSpec(
            self.reflow.batch_count if batch_count is None else batch_count,
            self.reflow.batch_size if batch_size is None else batch_size,
            CalibrationMode(self.reflow.mode),
            self.seed,
        )


def _line_of(text: str, path: list[str]) -> int | None:
    """Best-effort line number of the key at ``path`` in the JSON source."""
    pos = 0
    for key in path:
        idx = text.find(json.dumps(key), pos)
        if idx < 0:
            return None
        pos = idx
    return text.count("\n", 0, pos) + 1


class _Loader:
    def __init__(self, text: str, source: str):
        self.text = text
        self.source = source

    def fail(self, path: list[str], message: str):
        line = _line_of(self.text, path) if path else None
        where = f"{self.source}:{line}" if line else self.source
        dotted = ".".join(path) if path else "<root>"
        raise ConfigError(f"{where}: {dotted}: {message}")

    def value(self, tp, raw, path: list[str]):
        origin = typing.get_origin(tp)
        if origin in (typing.Union, types.UnionType):
            args = typing.get_args(tp)
            if raw is None and type(None) in args:
                return None
            inner = [a for a in args if a is not type(None)]
            return self.value(inner[0], raw, path)
        if origin is list:
            if not isinstance(raw, list):
                self.fail(path, f"expected a list, got {type(raw).__name__}")
            (item,) = typing.get_args(tp)
            return [self.value(item, v, path) for v in raw]
        if dataclasses.is_dataclass(tp):
            return self.section(tp, raw, path)
        if tp is bool:
            if not isinstance(raw, bool):
                self.fail(path, f"expected true/false, got {raw!r}")
            return raw
        if tp is int:
            if isinstance(raw, bool) or not isinstance(raw, int):
                self.fail(path, f"expected an integer, got {raw!r}")
            return raw
        if tp is float:
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                self.fail(path, f"expected a number, got {raw!r}")
            return float(raw)
        if tp is str:
            if not isinstance(raw, str):
                self.fail(path, f"expected a string, got {raw!r}")
            return raw
        raise TypeError(f"unsupported config type {tp!r}")

    def section(self, cls, raw, path: list[str]):
        if not isinstance(raw, dict):
            self.fail(path, f"expected an object, got {type(raw).__name__}")
        hints = typing.get_type_hints(cls)
        names = [f.name for f in dataclasses.fields(cls)]
        for key in raw:
            if key not in names:
                self.fail(path + [key], f"unknown key (allowed: {', '.join(names)})")
        kwargs = {k: self.value(hints[k], v, path + [k]) for k, v in raw.items()}
        return cls(**kwargs)


def _check_choice(loader: _Loader, path: list[str], value: str, enum_cls) -> None:
    allowed = [m.value for m in enum_cls]
    if value not in allowed:
        loader.fail(path, f"{value!r} is not one of {allowed}")


def _check_sparsities(loader: _Loader, path: list[str], values) -> None:
    for v in values if isinstance(values, list) else [values]:
        if not 0.0 <= v <= 1.0:
            loader.fail(path, f"sparsity {v!r} outside [0, 1]")


def validate_config(cfg: ExperimentConfig, loader: _Loader | None = None) -> ExperimentConfig:
    """Range, choice and path checks that the type-level loader cannot express."""
    loader = loader or _Loader("", "<config>")
    try:
        cfg.model.validate()
    except ConfigError as exc:
        loader.fail(["model"], str(exc))
    try:
        cfg.train_config().validate()
    except ConfigError as exc:
        loader.fail(["train"], str(exc))
    d = cfg.data
    if d.kind not in ("blobs", "spirals", "idx"):
        loader.fail(["data", "kind"], f"{d.kind!r} is not one of ['blobs', 'spirals', 'idx']")
    if d.kind == "idx":
        for name in ("train_images", "train_labels", "eval_images", "eval_labels"):
            value = getattr(d, name)
            if value is None:
                loader.fail(["data"], f"kind 'idx' needs {name}")
            if not Path(value).is_file():
                loader.fail(["data", name], f"no such file: {value}")
    else:
        if d.n_per_class < 1 or d.eval_per_class < 1:
            loader.fail(["data"], "n_per_class and eval_per_class must be positive")
        if d.noise_sigma < 0:
            loader.fail(["data", "noise_sigma"], "must be >= 0")
        if d.kind == "spirals" and cfg.model.input_dim < 2:
            loader.fail(["model", "input_dim"], "spirals need input_dim >= 2")
    for m in cfg.prune.methods:
        _check_choice(loader, ["prune", "methods"], m, ScoreMethod)
    for u in cfg.prune.update_modes:
        _check_choice(loader, ["prune", "update_modes"], u, UpdateMode)
    if not cfg.prune.methods or not cfg.prune.update_modes:
        loader.fail(["prune"], "methods and update_modes must be non-empty")
    _check_sparsities(loader, ["prune", "sparsities"], cfg.prune.sparsities)
    _check_sparsities(loader, ["reflow", "sweep_sparsities"], cfg.reflow.sweep_sparsities)
    _check_sparsities(loader, ["ablations", "sparsity"], cfg.ablations.sparsity)
    if cfg.prune.fisher_samples < 1:
        loader.fail(["prune", "fisher_samples"], "must be >= 1")
    if not cfg.prune.damping_rel > 0:
        loader.fail(["prune", "damping_rel"], "must be positive")
    _check_choice(loader, ["reflow", "mode"], cfg.reflow.mode, CalibrationMode)
    for direction in cfg.reflow.sweep_directions:
        _check_choice(loader, ["reflow", "sweep_directions"], direction, SweepDirection)
    if cfg.reflow.batch_count < 1 or cfg.reflow.batch_size < 2:
        loader.fail(["reflow"], "batch_count must be >= 1 and batch_size >= 2")
    if any(n < 1 for n in cfg.ablations.batch_counts):
        loader.fail(["ablations", "batch_counts"], "batch counts must be >= 1")
    if any(b < 2 for b in cfg.ablations.batch_sizes):
        loader.fail(["ablations", "batch_sizes"], "batch sizes must be >= 2")
    return cfg


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate a JSON config document."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    loader = _Loader(text, source)
    cfg = loader.section(ExperimentConfig, raw, [])
    return validate_config(cfg, loader)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def format_value(value) -> str:
    """Deterministic CSV cell text: shortest round-trip repr for floats."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row[c]) for c in columns])
    path.write_bytes(buf.getvalue().encode("utf-8"))
    return path


def thread_limit():
    """Context capping BLAS threads from the environment, if requested."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass
class RunArtifacts:
    run_id: str
    output_dir: Path
    checkpoints: dict[str, Path] = field(default_factory=dict)
    reports: dict[str, Path] = field(default_factory=dict)
    config_snapshot: Path | None = None

    def all_paths(self) -> list[Path]:
        paths = list(self.checkpoints.values()) + list(self.reports.values())
        return paths + ([self.config_snapshot] if self.config_snapshot else [])


STAGES = ("train", "prune", "reflow", "diagnose", "experiment")


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d, m = cfg.data, cfg.model
    if d.kind == "blobs":
        return (gen_blobs(d.n_per_class, m.num_classes, m.input_dim, d.separation, d.noise_sigma, cfg.seed, "train"),
                gen_blobs(d.eval_per_class, m.num_classes, m.input_dim, d.separation, d.noise_sigma, cfg.seed, "eval"))
    if d.kind == "spirals":
        return (gen_spirals(d.n_per_class, m.num_classes, d.turns, d.noise_sigma, cfg.seed, m.input_dim, "train"),
                gen_spirals(d.eval_per_class, m.num_classes, d.turns, d.noise_sigma, cfg.seed, m.input_dim, "eval"))
    train_set, stats = load_idx(d.train_images, d.train_labels, d.normalize, num_classes=m.num_classes)
    eval_set, _ = load_idx(d.eval_images, d.eval_labels, d.normalize, reference=stats,
                           num_classes=m.num_classes, split="eval")
    if train_set.input_dim != m.input_dim:
        raise ConfigError(f"IDX images have {train_set.input_dim} pixels but model.input_dim is {m.input_dim}")
    return train_set, eval_set


def train_baseline(cfg: ExperimentConfig, trainset: Dataset):
    """Train the baseline; with ``train.final_stats_pass`` finalise its BN statistics.

    The moving averages kept during training lag behind the final weights.
    Finalising replaces them with statistics measured exactly as recalibration
    measures them (same calibration spec), so original and recalibrated
    networks are normalised on equal terms and recalibrating an unpruned
    network is a no-op.
    """
    init = init_model(cfg.model, make_rng(cfg.seed, "init"))
    baseline, history = train(init, trainset.features, trainset.labels, cfg.train_config())
    if cfg.train.final_stats_pass:
        baseline, _ = reflow(baseline, trainset.features, cfg.calibration())
    return baseline, history


def _key(k: float) -> str:
    return repr(float(k))


class _Run:
    """State shared by the pipeline stages of one invocation."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.ckpt_dir = out / "checkpoints"
        self.artifacts = RunArtifacts(uuid.uuid4().hex[:12], out)
        self.metrics: list[dict] = []
        self.variance: list[dict] = []
        self.predictions: list[dict] = []
        self.probe: np.ndarray | None = None

    def save(self, name: str, model: Model) -> None:
        path = self.ckpt_dir / f"{name}.ckpt"
        save_checkpoint(model, path)
        self.artifacts.checkpoints[name] = path

    def record(self, model: Model, baseline: Model, evalset: Dataset, method: str, update_mode: str,
               reflowed: bool, sparsity: float, wall_ms: float, diagnose: bool) -> dict:
        hist = prediction_histogram(model, evalset.features, evalset.num_classes)
        if self.probe is None:
            self.probe = probe_batch(evalset.features, seed=self.cfg.seed)
        report = variance_ratio_report(baseline, model, self.probe)
        key = {"sparsity": sparsity, "method": method, "update_mode": update_mode, "reflow": reflowed}
        row = {
            "run_id": self.artifacts.run_id, "method": method, "update_mode": update_mode,
            "reflow": reflowed, "sparsity": sparsity,
            "accuracy_pct": accuracy(model, evalset.features, evalset.labels),
            "modal_fraction": float(hist.modal_fraction),
            "final_variance_ratio": float(report.final_ratio), "wall_ms": wall_ms,
        }
        self.metrics.append(row)
        if diagnose:
            for layer in report.layers:
                self.variance.append({**key, "layer_index": layer.layer_index, "mean_orig": layer.mean_orig,
                                      "var_orig": layer.var_orig, "mean_pruned": layer.mean_pruned,
                                      "var_pruned": layer.var_pruned, "ratio": layer.ratio})
            for c, (count, frac) in enumerate(zip(hist.counts, hist.fractions)):
                self.predictions.append({**key, "class_index": c, "count": int(count), "fraction": float(frac)})
        return row


def run_pipeline(cfg: ExperimentConfig, stage: str = "experiment", out: Path | None = None,
                 checkpoint: Path | None = None) -> RunArtifacts:
    """Run the pipeline up to ``stage`` and write its artifacts under ``out``.

    ``train`` writes the baseline; ``prune`` adds one pruned model per
    (method, update mode, sparsity); ``reflow`` recalibrates each of them;
    ``diagnose`` adds per-layer variance and prediction reports plus mask
    distances; ``experiment`` additionally runs the layer-wise sweeps and
    the calibration ablations. A baseline ``checkpoint`` skips training.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    level = STAGES.index(stage)
    out = Path(cfg.output_dir if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out)
    run.ckpt_dir.mkdir(exist_ok=True)
    (out / FAILURE_MARKER).unlink(missing_ok=True)
    snapshot = out / "emitted-config.json"
    snapshot.write_text(config_to_json(cfg), encoding="utf-8", newline="\n")
    run.artifacts.config_snapshot = snapshot

    trainset, evalset = build_datasets(cfg)
    t0 = time.perf_counter()
    if checkpoint is not None:
        baseline = load_checkpoint(checkpoint)
        if baseline.config != cfg.model:
            raise ConfigError(f"checkpoint {checkpoint} does not match the configured model")
    else:
        baseline, history = train_baseline(cfg, trainset)
        run.artifacts.reports["train_history"] = write_csv(
            out / "train_history.csv", HISTORY_COLUMNS,
            [{"epoch": r.epoch, "loss": r.loss, "accuracy_pct": r.accuracy_pct} for r in history.records])
    train_ms = (time.perf_counter() - t0) * 1e3
    run.save("baseline", baseline)
    diagnose = level >= STAGES.index("diagnose")
    run.record(baseline, baseline, evalset, "none", "none", False, 0.0, train_ms, diagnose)

    try:
        if level >= STAGES.index("prune"):
            _prune_stages(run, baseline, trainset, evalset, level)
    finally:
        run.artifacts.reports["metrics"] = write_csv(out / "metrics.csv", METRICS_COLUMNS, run.metrics)
        if diagnose:
            run.artifacts.reports["variance_report"] = write_csv(out / "variance_report.csv", VARIANCE_COLUMNS,
                                                                 run.variance)
            run.artifacts.reports["predictions"] = write_csv(out / "predictions.csv", PREDICTION_COLUMNS,
                                                             run.predictions)
    return run.artifacts


def _prune_stages(run: _Run, baseline: Model, trainset: Dataset, evalset: Dataset, level: int) -> None:
    cfg, out = run.cfg, run.out
    T = (trainset.features, trainset.labels)
    E = (evalset.features, evalset.labels)
    diagnose = level >= STAGES.index("diagnose")
    do_reflow = cfg.reflow.enabled and level >= STAGES.index("reflow")
    fisher = None
    fisher_ms = 0.0
    if any(needs_fisher(m, u) for m in cfg.prune.methods for u in cfg.prune.update_modes):
        t0 = time.perf_counter()
        fc = cfg.fisher_config()
        fisher = estimate_fisher(baseline, *T, fc.n_samples, fc.damping_rel, seed=fc.seed)
        fisher_ms = (time.perf_counter() - t0) * 1e3
    hamming_rows = []
    for k in cfg.prune.sparsities:
        masks = {}
        for method in cfg.prune.methods:
            for mode in cfg.prune.update_modes:
                pruned, rep = prune_pipeline(baseline, method, k, mode, T, None, cfg.fisher_config(),
                                             fisher=fisher, seed=cfg.seed)
                masks.setdefault(method, rep.mask)
                name = f"{method}-{mode}-k{_key(k)}"
                wall = rep.wall_ms + (fisher_ms if rep.fisher is not None else 0.0)
                run.save(f"pruned-{name}", pruned)
                run.record(pruned, baseline, evalset, method, mode, False, k, wall, diagnose)
                if do_reflow:
                    t0 = time.perf_counter()
                    reflowed, _ = reflow(pruned, trainset.features, cfg.calibration())
                    wall_rf = (time.perf_counter() - t0) * 1e3
                    run.save(f"reflowed-{name}", reflowed)
                    run.record(reflowed, baseline, evalset, method, mode, True, k, wall_rf, diagnose)
        if diagnose:
            names = list(masks)
            for i, a in enumerate(names):
                for b in names[i + 1 :]:
                    h = normalized_hamming(masks[a], masks[b])
                    hamming_rows.append({"sparsity": k, "mask_a": a, "mask_b": b, "raw": h.raw,
                                         "normalized": h.normalized})
    if diagnose:
        run.artifacts.reports["hamming"] = write_csv(out / "hamming.csv", HAMMING_COLUMNS, hamming_rows)
    if level < STAGES.index("experiment") or not cfg.reflow.enabled:
        return
    method, mode = cfg.prune.methods[0], cfg.prune.update_modes[0]

    def pruned_at(k):
        return prune_pipeline(baseline, method, k, mode, T, None, cfg.fisher_config(), fisher=fisher,
                              seed=cfg.seed)[0]

    sweep_rows = []
    for k in cfg.reflow.sweep_sparsities:
        pruned = pruned_at(k)
        spec = cfg.calibration()
        stats = collect_bn_stats(pruned, calibration_batches(trainset.features, spec.batch_size, spec.seed), spec)
        for direction in cfg.reflow.sweep_directions:
            for p in layerwise_recalibration_sweep(pruned, stats, *E, direction):
                sweep_rows.append({"sparsity": k, "step_k": p.step_k, "layer_index": p.layer_index,
                                   "direction": p.direction.value,
                                   "cumulative_accuracy_pct": p.cumulative_accuracy_pct})
    run.artifacts.reports["sweep"] = write_csv(out / "sweep.csv", SWEEP_COLUMNS, sweep_rows)

    ablation_rows = []
    k = cfg.ablations.sparsity
    pruned = pruned_at(k)
    for n in cfg.ablations.batch_counts:
        model, _ = reflow(pruned, trainset.features, cfg.calibration(batch_count=n))
        ablation_rows.append({"kind": "batch_count", "sparsity": k, "batch_count": n,
                              "batch_size": cfg.reflow.batch_size, "accuracy_pct": accuracy(model, *E)})
    for b in cfg.ablations.batch_sizes:
        if b > trainset.features.shape[0]:
            raise ConfigError(f"ablation batch size {b} exceeds the {trainset.features.shape[0]} training samples")
        model, _ = reflow(pruned, trainset.features, cfg.calibration(batch_size=b))
        ablation_rows.append({"kind": "batch_size", "sparsity": k, "batch_count": cfg.reflow.batch_count,
                              "batch_size": b, "accuracy_pct": accuracy(model, *E)})
    run.artifacts.reports["ablation"] = write_csv(out / "ablation.csv", ABLATION_COLUMNS, ablation_rows)


def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> RunArtifacts:
    """Full grid: train, prune, recalibrate, diagnose, sweep and ablate."""
    return run_pipeline(cfg, "experiment", out)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def summarize(run_dir) -> dict:
    """Group metrics.csv rows by sparsity; raises ConfigError on a missing or corrupt file."""
    path = Path(run_dir) / "metrics.csv"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or list(reader.fieldnames) != METRICS_COLUMNS:
        raise ConfigError(f"{path}: header does not match {','.join(METRICS_COLUMNS)}")
    rows = []
    for lineno, raw in enumerate(reader, start=2):
        try:
            rows.append({
                "method": raw["method"], "update_mode": raw["update_mode"],
                "reflow": {"true": True, "false": False}[raw["reflow"]],
                "sparsity": float(raw["sparsity"]), "accuracy_pct": float(raw["accuracy_pct"]),
                "modal_fraction": float(raw["modal_fraction"]),
                "final_variance_ratio": float(raw["final_variance_ratio"]),
            })
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"{path}:{lineno}: malformed row") from None
    groups: dict[float, list] = {}
    for row in rows:
        groups.setdefault(row["sparsity"], []).append(row)
    return {
        "run_dir": str(run_dir),
        "row_count": len(rows),
        "groups": [{"sparsity": k, "rows": groups[k]} for k in sorted(groups)],
    }


def render_summary(summary: dict) -> str:
    if summary["row_count"] == 0:
        return "no rows\n"
    lines = []
    for group in summary["groups"]:
        lines.append(f"sparsity {group['sparsity']:g}")
        lines.append(f"  {'method':<10} {'update':<14} {'reflow':<6} {'acc%':>7} {'modal':>6} {'ratio':>8}")
        for r in group["rows"]:
            lines.append(f"  {r['method']:<10} {r['update_mode']:<14} {str(r['reflow']).lower():<6} "
                         f"{r['accuracy_pct']:>7.2f} {r['modal_fraction']:>6.3f} {r['final_variance_ratio']:>8.4f}")
    return "\n".join(lines) + "\n"


def report(run_dir, out=None, stream=None) -> dict:
    summary = summarize(run_dir)
    target = Path(run_dir if out is None else out)
    target.mkdir(parents=True, exist_ok=True)
    (target / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8", newline="\n")
    (stream or sys.stdout).write(render_summary(summary))
    return summary


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collapse-lab",
                                     description="One-shot pruning, signal collapse and BN recalibration lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train the baseline network",
        "prune": "train (or load) a baseline and prune it",
        "reflow": "prune and recalibrate BN statistics",
        "diagnose": "prune, recalibrate and write variance/prediction/mask reports",
        "experiment": "full grid including layer-wise sweeps and calibration ablations",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="JSON config (defaults are used when omitted)")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if name != "train":
            p.add_argument("--checkpoint", type=Path, help="baseline checkpoint to use instead of training")
    p = sub.add_parser("report", help="summarise a run directory's metrics.csv")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--config", type=Path, help="accepted for symmetry; unused")
    p.add_argument("--out", type=Path, help="where to write summary.json (default: run_dir)")
    p.add_argument("--seed", type=int, help="accepted for symmetry; unused")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = None
    try:
        with thread_limit():
            if args.command == "report":
                report(args.run_dir, args.out)
                return EXIT_OK
            cfg = _resolve_config(args)
            out = Path(args.out if args.out is not None else cfg.output_dir)
            arts = run_pipeline(cfg, args.command, out, getattr(args, "checkpoint", None))
            print(f"run {arts.run_id}: wrote {len(arts.all_paths())} files to {out}")
            return EXIT_OK
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / FAILURE_MARKER).write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CollapseLabError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
