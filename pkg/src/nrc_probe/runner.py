"""Experiment orchestration: config loading, runs, sweeps, report files.

Run directory layout:

    config.json     normalized config (defaults resolved; hash source)
    manifest.json   reproducibility record, written before and after the run
    report.json     manifest + loss history + nested collapse reports
    layers.csv      epoch, layer, nrc1, nrc2, nrc3, nrc4_mse,
                    stable_rank_H, stable_rank_W, first_collapsed
    loss.csv        epoch, train_mse, test_mse
    lowrank.csv     intrinsic-rank rows (only when metrics.r is set)
    checkpoint.bin  final parameters
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, nn, nrc
from .data import (
    PRNG_NAME,
    CsvSchema,
    Dataset,
    GeneratorSpec,
    SplitDataset,
    generate,
    load_csv,
    split_front,
    standardize,
)

log = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1
LAYERS_CSV_COLUMNS = ("epoch", "layer", "nrc1", "nrc2", "nrc3", "nrc4_mse",
                      "stable_rank_H", "stable_rank_W", "first_collapsed")
LOSS_CSV_COLUMNS = ("epoch", "train_mse", "test_mse")
LOWRANK_CSV_COLUMNS = ("epoch", "layer", "rank_r_noise", "signal_alignment",
                       "noise_alignment", "stable_rank_H")


class ConfigError(ValueError):
    """Invalid experiment config; .path points at the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class RunnerError(RuntimeError):
    """A run stage failed; .stage names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def _load_schema(name: str) -> dict:
    text = resources.files("nrc_probe").joinpath(f"schemas/{name}").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class MetricConfig:
    k: int
    tau: float = 0.05
    r: int | None = None
    split: str = "train"
    nrc3_mode: str = "incoming"
    center_nrc4: bool = True
    include_input_nrc3: bool = False


@dataclass(frozen=True)
class DatasetConfig:
    kind: str
    split_fraction: float = 0.8
    standardize_inputs: bool = False
    generator: GeneratorSpec | None = None
    csv_path: str | None = None
    csv_schema: CsvSchema | None = None

    @property
    def d(self) -> int:
        if self.generator is not None:
            return self.generator.d
        return len(self.csv_schema.input_columns)

    @property
    def t(self) -> int:
        if self.generator is not None:
            return self.generator.t
        return len(self.csv_schema.target_columns)

    @property
    def seed(self) -> int:
        return self.generator.seed if self.generator is not None else 0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    output_dir: str
    dataset: DatasetConfig
    arch: nn.MlpArchitecture
    schedule: nn.TrainSchedule
    metrics: MetricConfig
    raw: dict

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def default_milestones(epochs: int) -> list[int]:
    """Steps at 1/3 and 2/3 of the run (multi-step schedule shape)."""
    ms = sorted({round(epochs / 3), round(2 * epochs / 3)})
    return [m for m in ms if 0 < m < epochs]


def default_metric_epochs(epochs: int) -> list[int]:
    """0, 10, 50, 100, then every 100, always including the final epoch."""
    eps = {0, 10, 50, 100}
    eps.update(range(100, epochs + 1, 100))
    eps.add(epochs)
    return sorted(e for e in eps if e <= epochs)


def config_from_dict(doc: dict, seed_override: int | None = None) -> ExperimentConfig:
    """Validate a config document against the shipped schema and resolve
    defaults. Unknown keys are rejected."""
    validator = jsonschema.Draft202012Validator(_load_schema("config.schema.json"))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(".".join(str(p) for p in e.absolute_path), e.message)

    doc = json.loads(json.dumps(doc))  # private copy
    ds = doc["dataset"]
    sched = doc["schedule"]
    if seed_override is not None:
        if ds.get("kind") != "csv":
            ds["seed"] = seed_override
        sched["seed"] = seed_override

    if ds["kind"] == "csv":
        if set(ds["input_columns"]) & set(ds["target_columns"]):
            raise ConfigError("dataset.target_columns",
                              "input and target columns overlap")
        schema = CsvSchema(
            input_columns=tuple(ds["input_columns"]),
            target_columns=tuple(ds["target_columns"]),
            has_header=ds.setdefault("has_header", True),
            target_log_transform=ds.setdefault("target_log_transform", False),
            delimiter=ds.setdefault("delimiter", ","),
        )
        dataset = DatasetConfig(
            kind="csv",
            split_fraction=ds.setdefault("split_fraction", 0.8),
            standardize_inputs=ds.setdefault("standardize_inputs", False),
            csv_path=ds["path"], csv_schema=schema,
        )
    else:
        try:
            spec = GeneratorSpec(kind=ds["kind"], n=ds["n"], d=ds["d"], t=ds["t"],
                                 r=ds["r"], seed=ds["seed"], name=doc["name"])
        except ValueError as exc:
            raise ConfigError("dataset", str(exc)) from exc
        dataset = DatasetConfig(
            kind=ds["kind"],
            split_fraction=ds.setdefault("split_fraction", 0.8),
            standardize_inputs=ds.setdefault("standardize_inputs", False),
            generator=spec,
        )

    arch_doc = doc["architecture"]
    arch = nn.MlpArchitecture(
        input_dim=arch_doc["input_dim"],
        hidden_widths=tuple(arch_doc["hidden_widths"]),
        output_dim=arch_doc["output_dim"],
        hidden_activation=arch_doc.setdefault("hidden_activation", "relu"),
    )
    if arch.input_dim != dataset.d:
        raise ConfigError("architecture.input_dim",
                          f"{arch.input_dim} does not match dataset d={dataset.d}")
    if arch.output_dim != dataset.t:
        raise ConfigError("architecture.output_dim",
                          f"{arch.output_dim} does not match dataset t={dataset.t}")

    epochs = sched["epochs"]
    sched.setdefault("milestones", default_milestones(epochs))
    sched.setdefault("metric_epochs", default_metric_epochs(epochs))
    sched.setdefault("decay_factor", 0.1)
    sched.setdefault("momentum", 0.9)
    sched.setdefault("weight_decay", 0.0)
    try:
        schedule = nn.TrainSchedule(
            initial_lr=sched["initial_lr"], epochs=epochs,
            batch_size=sched["batch_size"], seed=sched["seed"],
            milestones=tuple(sched["milestones"]),
            decay_factor=sched["decay_factor"], momentum=sched["momentum"],
            weight_decay=sched["weight_decay"],
            metric_epochs=tuple(sorted(set(sched["metric_epochs"]))),
        )
    except ValueError as exc:
        raise ConfigError("schedule", str(exc)) from exc
    if any(m > epochs for m in schedule.metric_epochs):
        raise ConfigError("schedule.metric_epochs", f"entries exceed epochs={epochs}")

    met = doc.setdefault("metrics", {})
    met.setdefault("k", dataset.t)
    met.setdefault("r", None)
    met.setdefault("tau", 0.05)
    met.setdefault("split", "train")
    met.setdefault("nrc3_mode", "incoming")
    met.setdefault("center_nrc4", True)
    met.setdefault("include_input_nrc3", False)
    metrics = MetricConfig(k=met["k"], tau=met["tau"], r=met["r"], split=met["split"],
                           nrc3_mode=met["nrc3_mode"], center_nrc4=met["center_nrc4"],
                           include_input_nrc3=met["include_input_nrc3"])
    min_width = min(arch.hidden_widths)
    if metrics.k > min_width:
        raise ConfigError("metrics.k", f"k={metrics.k} exceeds narrowest hidden width {min_width}")
    if metrics.include_input_nrc3 and metrics.k > dataset.d:
        raise ConfigError("metrics.k", f"k={metrics.k} exceeds input dim {dataset.d}")
    if metrics.r is not None:
        if metrics.r >= min_width:
            raise ConfigError("metrics.r",
                              f"r={metrics.r} must be below narrowest hidden width {min_width}")

    return ExperimentConfig(name=doc["name"], output_dir=doc["output_dir"],
                            dataset=dataset, arch=arch, schedule=schedule,
                            metrics=metrics, raw=doc)


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("", f"{path}: {exc}") from exc
    return config_from_dict(doc, seed_override=seed_override)


def prepare_data(cfg: DatasetConfig) -> SplitDataset:
    if cfg.kind == "csv":
        ds = load_csv(cfg.csv_path, cfg.csv_schema)
    else:
        ds = generate(cfg.generator)
    split = split_front(ds, cfg.split_fraction)
    if cfg.standardize_inputs:
        split, _ = standardize(split)
    return split


# --- serialization helpers -------------------------------------------------

def _layer_row_dict(m: nrc.LayerMetrics) -> dict:
    return {
        "layer": m.layer_index, "nrc1": m.nrc1_noise, "nrc2": m.nrc2_cka,
        "nrc3": m.nrc3_alignment, "nrc4_mse": m.nrc4_mse,
        "stable_rank_H": m.stable_rank_H, "stable_rank_W": m.stable_rank_W,
        "eigen_tie_flag": m.eigen_tie_flag, "degenerate": m.degenerate,
    }


def collapse_report_to_dict(rep: nrc.CollapseReport,
                            lowrank: list[nrc.LowRankMetrics] | None,
                            r: int | None) -> dict:
    out = {
        "epoch": rep.epoch, "k": rep.subspace_dim, "tau": rep.tau,
        "nrc3_mode": rep.nrc3_mode, "model_train_mse": rep.model_train_mse,
        "target_stable_rank": rep.target_stable_rank,
        "first_collapsed_layer": rep.first_collapsed_layer,
        "output_nrc3": rep.output_nrc3,
        "output_stable_rank_w": rep.output_stable_rank_w,
        "layers": [_layer_row_dict(m) for m in rep.layers],
        "lowrank": None,
    }
    if lowrank is not None and r is not None:
        out["lowrank"] = {"r": r, "layers": [
            {"layer": m.layer_index, "rank_r_noise": m.rank_r_noise,
             "signal_alignment": m.signal_alignment,
             "noise_alignment": m.noise_alignment,
             "stable_rank_H": m.stable_rank_H}
            for m in lowrank]}
    return out


def _fmt_cell(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, columns, rows) -> None:
    lines = [",".join(columns)]
    lines.extend(",".join(_fmt_cell(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def emit_report(run_dir, fmt: str = "all") -> list[Path]:
    """Regenerate plot-ready files from a completed run's report.json."""
    run_dir = Path(run_dir)
    report_path = run_dir / "report.json"
    if not report_path.exists():
        raise FileNotFoundError(f"{run_dir}: no report.json (incomplete run?)")
    doc = json.loads(report_path.read_text())
    written = []
    if fmt in ("json", "all"):
        written.append(report_path)
    if fmt in ("csv", "all"):
        layer_rows = []
        lowrank_rows = []
        for rep in doc["reports"]:
            first = rep["first_collapsed_layer"]
            for row in rep["layers"]:
                layer_rows.append((rep["epoch"], row["layer"], row["nrc1"],
                                   row["nrc2"], row["nrc3"], row["nrc4_mse"],
                                   row["stable_rank_H"], row["stable_rank_W"],
                                   row["layer"] == first))
            if rep.get("lowrank"):
                for row in rep["lowrank"]["layers"]:
                    lowrank_rows.append((rep["epoch"], row["layer"],
                                         row["rank_r_noise"], row["signal_alignment"],
                                         row["noise_alignment"], row["stable_rank_H"]))
        layers_csv = run_dir / "layers.csv"
        _write_csv(layers_csv, LAYERS_CSV_COLUMNS, layer_rows)
        written.append(layers_csv)
        loss_csv = run_dir / "loss.csv"
        _write_csv(loss_csv, LOSS_CSV_COLUMNS,
                   [(h["epoch"], h["train_mse"], h["test_mse"]) for h in doc["loss"]])
        written.append(loss_csv)
        if lowrank_rows:
            lowrank_csv = run_dir / "lowrank.csv"
            _write_csv(lowrank_csv, LOWRANK_CSV_COLUMNS, lowrank_rows)
            written.append(lowrank_csv)
    if fmt not in ("csv", "json", "all"):
        raise ValueError(f"unknown report format {fmt!r}")
    return written


# --- run orchestration ------------------------------------------------------

def _manifest_skeleton(config: ExperimentConfig) -> dict:
    m = config.metrics
    s = config.schedule
    return {
        "name": config.name,
        "config_hash": config.config_hash(),
        "software_version": __version__,
        "status": "running",
        "stage": None,
        "error": None,
        "seeds": {"dataset": config.dataset.seed, "schedule": s.seed},
        "dataset_fingerprint": {},
        "decisions": {
            "k": m.k, "r": m.r, "tau": m.tau,
            "metric_split": m.split, "nrc3_mode": m.nrc3_mode,
            "center_nrc4": m.center_nrc4,
            "include_input_nrc3": m.include_input_nrc3,
            "hidden_activation": config.arch.hidden_activation,
            "milestones": list(s.milestones),
            "decay_factor": s.decay_factor,
            "metric_epochs": list(s.metric_epochs),
            "standardize_inputs": config.dataset.standardize_inputs,
            "split_fraction": config.dataset.split_fraction,
            "prng": PRNG_NAME,
            "layer_convention": "L-layer MLP = L-1 hidden layers + linear output",
            "weight_decay_coupling": "coupled L2 in the gradient, biases exempt",
        },
        "timings": {},
        "final": {},
        "threads_env": os.environ.get("NRC_PROBE_THREADS"),
    }


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


class _MetricCollector:
    """Gathers (CollapseReport, LowRankMetrics) pairs during training."""

    def __init__(self, config: ExperimentConfig, split: SplitDataset):
        self.config = config
        self.split = split
        self.entries: list[dict] = []

    def __call__(self, epoch: int, params: nn.MlpParameters,
                 trace: nn.ActivationTrace) -> None:
        m = self.config.metrics
        if m.split == "test":
            trace = nn.forward_capture(params, self.split.test.inputs)
            y = self.split.test.targets
        else:
            y = self.split.train.targets
        model_mse = nn.mse_loss(trace.predictions, y)
        rep = nrc.full_report(
            trace, params, y, k=m.k, tau=m.tau, model_train_mse=model_mse,
            nrc3_mode=m.nrc3_mode, include_input_nrc3=m.include_input_nrc3,
            center_nrc4=m.center_nrc4, epoch=epoch,
        )
        low = nrc.lowrank_report(trace, params, m.r,
                                 include_input=m.include_input_nrc3) if m.r else None
        self.entries.append(collapse_report_to_dict(rep, low, m.r))
        log.info("metrics @ epoch %d: first_collapsed=%s", epoch, rep.first_collapsed_layer)


def run_experiment(config: ExperimentConfig) -> Path:
    """Prepare data, train, measure at each metric epoch, write artifacts.

    Returns the run directory. Any stage failure marks the manifest as
    failed with the stage name and re-raises as RunnerError.
    """
    run_dir = Path(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json", config.raw)
    manifest = _manifest_skeleton(config)
    _write_json(run_dir / "manifest.json", manifest)
    t_start = time.time()
    stage = "prepare_data"
    try:
        split = prepare_data(config.dataset)
        manifest["dataset_fingerprint"] = {
            "sha256": split.train.fingerprint(),
            "sha256_test": split.test.fingerprint(),
            "n_train": split.train.n, "n_test": split.test.n,
            "d": split.train.d, "t": split.train.t,
        }
        _write_json(run_dir / "manifest.json", manifest)

        stage = "train"
        collector = _MetricCollector(config, split)
        t_train = time.time()
        params, history = nn.train(config.arch, config.schedule, split,
                                   metric_callback=collector)
        train_seconds = time.time() - t_train

        stage = "report"
        nn.save_checkpoint(run_dir / "checkpoint.bin", params, config.arch,
                           config.schedule, epoch=config.schedule.epochs)
        report_doc = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "manifest": manifest,
            "loss": [{"epoch": h.epoch, "train_mse": h.train_mse,
                      "test_mse": h.test_mse} for h in history],
            "reports": collector.entries,
        }
        manifest["timings"] = {
            "started_unix": t_start, "finished_unix": time.time(),
            "wall_seconds": time.time() - t_start,
            "train_seconds": train_seconds,
            "mean_epoch_seconds": (train_seconds / config.schedule.epochs
                                   if config.schedule.epochs else None),
        }
        manifest["final"] = {"epoch": history[-1].epoch,
                             "train_mse": history[-1].train_mse,
                             "test_mse": history[-1].test_mse}
        manifest["status"] = "complete"
        report_doc["manifest"] = manifest
        _write_json(run_dir / "report.json", report_doc)
        emit_report(run_dir, "csv")
        _write_json(run_dir / "manifest.json", manifest)
        return run_dir
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["stage"] = stage
        manifest["error"] = str(exc)
        _write_json(run_dir / "manifest.json", manifest)
        raise RunnerError(stage, exc) from exc


def _with_weight_decay(config: ExperimentConfig, lam: float, run_dir: Path,
                       index: int) -> ExperimentConfig:
    raw = json.loads(json.dumps(config.raw))
    raw["schedule"]["weight_decay"] = lam
    raw["name"] = f"{config.name}-wd{lam!r}"
    raw["output_dir"] = str(run_dir)
    return config_from_dict(raw)


def _sweep_worker(raw: dict) -> str | None:
    try:
        run_experiment(config_from_dict(raw))
        return None
    except Exception as exc:  # isolate per-run failures
        return f"{type(exc).__name__}: {exc}"


def sweep_weight_decay(config: ExperimentConfig, lambdas, jobs: int = 1) -> Path:
    """Independent runs sharing data and init seeds, differing only in the
    weight decay. Emits sweep_summary.csv with final-epoch nrc1 / nrc3 /
    stable_rank_W per layer per lambda. Per-run failures are isolated."""
    lambdas = [float(v) for v in lambdas]
    if len(lambdas) < 2:
        raise ConfigError("lambdas", "a sweep needs at least 2 weight decay values")
    if any(v < 0 for v in lambdas):
        raise ConfigError("lambdas", "weight decay must be nonnegative")
    sweep_dir = Path(config.output_dir)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    subconfigs = []
    for i, lam in enumerate(lambdas):
        run_dir = sweep_dir / f"run{i:02d}_wd{lam!r}"
        subconfigs.append((lam, run_dir, _with_weight_decay(config, lam, run_dir, i)))

    errors: dict[int, str | None] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, err in enumerate(pool.map(_sweep_worker,
                                             [c.raw for _, _, c in subconfigs])):
                errors[i] = err
    else:
        for i, (_, _, sub) in enumerate(subconfigs):
            errors[i] = _sweep_worker(sub.raw)

    rows = []
    results = []
    for i, (lam, run_dir, _) in enumerate(subconfigs):
        entry = {"lambda": lam, "run_dir": str(run_dir), "error": errors[i]}
        results.append(entry)
        if errors[i] is not None:
            log.warning("sweep run %d (wd=%r) failed: %s", i, lam, errors[i])
            continue
        doc = json.loads((run_dir / "report.json").read_text())
        final = doc["reports"][-1]
        for row in final["layers"]:
            rows.append((lam, row["layer"], row["nrc1"], row["nrc3"],
                         row["stable_rank_W"]))
    _write_csv(sweep_dir / "sweep_summary.csv",
               ("lambda", "layer", "nrc1", "nrc3", "stable_rank_W"), rows)
    _write_json(sweep_dir / "sweep_manifest.json", {
        "base_name": config.name, "lambdas": lambdas, "runs": results,
        "base_config_hash": config.config_hash(),
    })
    return sweep_dir


def measure_checkpoint(config: ExperimentConfig, checkpoint_path,
                       out_path=None) -> dict:
    """Recompute the collapse report for a saved model on the config's data.

    Produces the same values as the in-training snapshot at the checkpoint's
    epoch. Writes measure_report.json next to the checkpoint unless out_path
    is given; returns the report dict."""
    params, arch, _, epoch = nn.load_checkpoint(checkpoint_path)
    if arch != config.arch:
        raise ConfigError("architecture",
                          f"checkpoint arch {arch} does not match config {config.arch}")
    split = prepare_data(config.dataset)
    m = config.metrics
    if m.split == "test":
        trace = nn.forward_capture(params, split.test.inputs)
        y = split.test.targets
    else:
        trace = nn.forward_capture(params, split.train.inputs)
        y = split.train.targets
    model_mse = nn.mse_loss(trace.predictions, y)
    rep = nrc.full_report(trace, params, y, k=m.k, tau=m.tau,
                          model_train_mse=model_mse, nrc3_mode=m.nrc3_mode,
                          include_input_nrc3=m.include_input_nrc3,
                          center_nrc4=m.center_nrc4, epoch=epoch)
    low = nrc.lowrank_report(trace, params, m.r,
                             include_input=m.include_input_nrc3) if m.r else None
    doc = collapse_report_to_dict(rep, low, m.r)
    target = Path(out_path) if out_path else Path(checkpoint_path).parent / "measure_report.json"
    _write_json(target, doc)
    return doc
