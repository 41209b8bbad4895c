"""Synthetic regression dataset generators, CSV ingestion, splitting.

Generators are pure functions of (spec, seed) via numpy's PCG64 generator,
so outputs are byte-identical across runs of the same build.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .linalg import ensure_matrix

log = logging.getLogger(__name__)

GENERATOR_KINDS = ("linear_lowrank", "nonlinear_mlp")
PRNG_NAME = "numpy-pcg64"


@dataclass(frozen=True)
class Dataset:
    """Paired inputs (N x d) and targets (N x t) with provenance."""

    inputs: np.ndarray
    targets: np.ndarray
    name: str
    seed: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        x = ensure_matrix(self.inputs, "inputs")
        y = ensure_matrix(self.targets, "targets")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"row mismatch: {x.shape[0]} inputs vs {y.shape[0]} targets")
        if x.shape[0] < 2:
            raise ValueError("dataset needs at least 2 samples")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def t(self) -> int:
        return self.targets.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs, "<f8").tobytes())
        h.update(np.ascontiguousarray(self.targets, "<f8").tobytes())
        h.update(repr((self.inputs.shape, self.targets.shape)).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class GeneratorSpec:
    """Declarative description of a synthetic dataset."""

    kind: str
    n: int
    d: int
    t: int
    r: int
    seed: int
    name: str = ""

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if min(self.n, self.d, self.t, self.r) < 1:
            raise ValueError("n, d, t, r must all be positive")
        if self.kind == "linear_lowrank" and self.r > self.t:
            raise ValueError(f"linear generator needs r <= t, got r={self.r}, t={self.t}")
        if not self.name:
            object.__setattr__(self, "name", f"{self.kind}-n{self.n}-d{self.d}-t{self.t}-r{self.r}-s{self.seed}")


@dataclass(frozen=True)
class SplitDataset:
    """Front/back split of a dataset; train precedes test in original order."""

    train: Dataset
    test: Dataset
    split_fraction: float


def gaussian_inputs(n: int, d: int, seed: int) -> np.ndarray:
    """n x d matrix of independent standard-normal draws, seeded."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    return np.random.default_rng(seed).standard_normal((n, d))


def linear_lowrank_targets(x, t: int, r: int, seed: int) -> np.ndarray:
    """Y = X (B C) with B (d x r) and C (r x t) seeded standard-normal.

    The product B C has rank exactly r (checked numerically).
    """
    x = ensure_matrix(x, "X")
    if r > t:
        raise ValueError(f"need r <= t, got r={r}, t={t}")
    rng = np.random.default_rng(seed)
    b = rng.standard_normal((x.shape[1], r))
    c = rng.standard_normal((r, t))
    a = b @ c
    s = np.linalg.svd(a, compute_uv=False)
    if r < min(a.shape) and s[r] > 1e-10 * s[0]:
        raise RuntimeError("low-rank map construction failed its rank check")
    return x @ a


def nonlinear_targets(x, t: int, r: int, seed: int, activation: str = "relu") -> np.ndarray:
    """Targets from a fixed random 2-hidden-layer network d -> r -> r -> t.

    Weights are standard-normal scaled by 1/sqrt(fan_in) so outputs stay
    O(1) regardless of r; biases are standard-normal. The final layer is
    linear, so centered targets have rank at most r.
    """
    x = ensure_matrix(x, "X")
    if t < 1 or r < 1:
        raise ValueError("t and r must be positive")
    rng = np.random.default_rng(seed)
    dims = [x.shape[1], r, r, t]
    h = x
    for i in range(3):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        b = rng.standard_normal(fan_out)
        h = h @ w.T + b
        if i < 2:
            h = _activate(h, activation)
    return h


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {kind!r}")


def generate(spec: GeneratorSpec) -> Dataset:
    """Materialize a GeneratorSpec. Input seed is spec.seed, target map seed
    is spec.seed + 1."""
    x = gaussian_inputs(spec.n, spec.d, spec.seed)
    if spec.kind == "linear_lowrank":
        y = linear_lowrank_targets(x, spec.t, spec.r, spec.seed + 1)
    else:
        y = nonlinear_targets(x, spec.t, spec.r, spec.seed + 1)
    prov = {"generator": {
        "kind": spec.kind, "n": spec.n, "d": spec.d, "t": spec.t,
        "r": spec.r, "seed": spec.seed, "prng": PRNG_NAME,
    }}
    return Dataset(inputs=x, targets=y, name=spec.name, seed=spec.seed, provenance=prov)


def split_front(ds: Dataset, fraction: float) -> SplitDataset:
    """First floor(fraction * N) rows become train, the rest test. No shuffle."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n_train = int(np.floor(fraction * ds.n))
    if n_train < 1 or n_train >= ds.n:
        raise ValueError(f"split produces an empty side (N={ds.n}, fraction={fraction})")
    train = Dataset(ds.inputs[:n_train].copy(), ds.targets[:n_train].copy(),
                    f"{ds.name}/train", ds.seed, {**ds.provenance, "split": "train"})
    test = Dataset(ds.inputs[n_train:].copy(), ds.targets[n_train:].copy(),
                   f"{ds.name}/test", ds.seed, {**ds.provenance, "split": "test"})
    return SplitDataset(train=train, test=test, split_fraction=fraction)


@dataclass(frozen=True)
class CsvSchema:
    """Which columns of a delimiter-separated file feed inputs and targets."""

    input_columns: tuple[int, ...]
    target_columns: tuple[int, ...]
    has_header: bool = True
    target_log_transform: bool = False
    delimiter: str = ","

    def __post_init__(self):
        object.__setattr__(self, "input_columns", tuple(self.input_columns))
        object.__setattr__(self, "target_columns", tuple(self.target_columns))
        if not self.input_columns or not self.target_columns:
            raise ValueError("input_columns and target_columns must be non-empty")
        if set(self.input_columns) & set(self.target_columns):
            raise ValueError("input and target columns overlap")


def load_csv(path, schema: CsvSchema, name: str | None = None) -> Dataset:
    """Read numeric rows from a delimited text file.

    Ragged rows, non-numeric cells, and missing columns raise with the
    offending 1-based data row index. Provenance records the file's sha256
    and row count.
    """
    path = Path(path)
    wanted = max(max(schema.input_columns), max(schema.target_columns)) + 1
    xs, ys = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        rows = iter(reader)
        if schema.has_header:
            next(rows, None)
        width = None
        for i, row in enumerate(rows, start=1):
            if not row:
                continue
            if width is None:
                width = len(row)
                if width < wanted:
                    raise ValueError(
                        f"{path}: row {i} has {width} columns, need at least {wanted}")
            elif len(row) != width:
                raise ValueError(f"{path}: ragged row {i} ({len(row)} vs {width} columns)")
            try:
                xs.append([float(row[c]) for c in schema.input_columns])
                ys.append([float(row[c]) for c in schema.target_columns])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}: bad numeric cell at row {i}: {exc}") from exc
    if len(xs) < 2:
        raise ValueError(f"{path}: fewer than 2 data rows")
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if schema.target_log_transform:
        if (y <= 0).any():
            raise ValueError(f"{path}: log transform requires positive targets")
        y = np.log(y)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    prov = {"file": {
        "path": str(path), "sha256": digest, "rows": x.shape[0],
        "input_columns": list(schema.input_columns),
        "target_columns": list(schema.target_columns),
        "target_log_transform": schema.target_log_transform,
    }}
    return Dataset(inputs=x, targets=y, name=name or path.stem, seed=0, provenance=prov)


@dataclass(frozen=True)
class ColumnScaler:
    """Train-split input statistics applied to both splits."""

    mean: np.ndarray
    std: np.ndarray
    kept_columns: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "kept_columns": list(self.kept_columns)}


def standardize(split: SplitDataset) -> tuple[SplitDataset, ColumnScaler]:
    """Zero-mean unit-variance inputs, fitted on train only, applied to both.

    Constant input columns are dropped with a warning; targets are left
    untouched (metrics center internally).
    """
    x_train = split.train.inputs
    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    keep = std > 0.0
    if not keep.any():
        raise ValueError("every input column is constant on the train split")
    if not keep.all():
        dropped = np.flatnonzero(~keep).tolist()
        warnings.warn(f"dropping constant input columns {dropped}", stacklevel=2)
    scaler = ColumnScaler(mean=mean[keep], std=std[keep],
                          kept_columns=tuple(np.flatnonzero(keep).tolist()))

    def apply(ds: Dataset) -> Dataset:
        x = (ds.inputs[:, keep] - scaler.mean) / scaler.std
        prov = {**ds.provenance, "scaler": scaler.to_dict()}
        return Dataset(x, ds.targets, ds.name, ds.seed, prov)

    out = SplitDataset(train=apply(split.train), test=apply(split.test),
                       split_fraction=split.split_fraction)
    return out, scaler


def save_dataset(ds: Dataset, stem) -> tuple[Path, Path]:
    """Write <stem>.bin (inputs then targets, shape-prefixed float64) and a
    <stem>.json provenance sidecar."""
    stem = Path(stem)
    bin_path = stem.with_suffix(".bin")
    json_path = stem.with_suffix(".json")
    binio.write_container(bin_path, [ds.inputs, ds.targets])
    sidecar = {
        "name": ds.name, "seed": ds.seed, "d": ds.d, "t": ds.t, "N": ds.n,
        "provenance": ds.provenance, "fingerprint": ds.fingerprint(),
    }
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return bin_path, json_path


def load_dataset(stem) -> Dataset:
    stem = Path(stem)
    _, arrays = binio.read_container(stem.with_suffix(".bin"))
    if len(arrays) != 2:
        raise ValueError(f"{stem}: expected 2 tensors, found {len(arrays)}")
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    ds = Dataset(inputs=arrays[0], targets=arrays[1], name=sidecar["name"],
                 seed=sidecar["seed"], provenance=sidecar.get("provenance", {}))
    if ds.fingerprint() != sidecar.get("fingerprint"):
        raise ValueError(f"{stem}: dataset bytes do not match recorded fingerprint")
    return ds
