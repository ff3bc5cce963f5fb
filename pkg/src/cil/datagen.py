"""Deterministic dataset generators and loaders.

Every dataset is a triple (x, y, t): features, class labels, and a continuous
domain index per sample. Generators are pure functions of (config, seed), so
the same call always yields byte-identical arrays.
"""

from __future__ import annotations

import csv as _csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "SchemaError",
    "Schedule",
    "Dataset",
    "p_s",
    "gen_logit",
    "load_idx",
    "colorize_mnist",
    "load_csv",
    "save_dataset",
    "load_dataset",
]


class FormatError(ValueError):
    """Malformed binary input (bad magic, truncation, count mismatch)."""


class SchemaError(ValueError):
    """CSV schema problem; the message names the offending column."""


@dataclass(frozen=True)
class Schedule:
    """Spurious-agreement probability as a function of the domain index.

    linear: affine between (t_lo, p_lo) and (t_hi, p_hi), clamped to [0, 1].
    sine:   mid + amp * sin(2*pi*t/period + phase), clamped.
    step:   piecewise constant; values[i] applies for t <= bounds[i], the
            last value applies beyond the final bound.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("linear", "sine", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "step":
            bounds = self.params.get("bounds", [])
            values = self.params.get("values", [])
            if len(values) != len(bounds) + 1:
                raise ValueError(
                    "step schedule needs len(values) == len(bounds) + 1"
                )
            if list(bounds) != sorted(bounds):
                raise ValueError("step schedule bounds must be increasing")

    @classmethod
    def linear(cls, p_lo: float, p_hi: float, t_lo: float, t_hi: float) -> "Schedule":
        return cls("linear", {"p_lo": p_lo, "p_hi": p_hi, "t_lo": t_lo, "t_hi": t_hi})

    @classmethod
    def sine(cls, mid: float = 0.5, amp: float = 0.45, period: float = 50.0,
             phase: float = 0.0) -> "Schedule":
        return cls("sine", {"mid": mid, "amp": amp, "period": period, "phase": phase})

    @classmethod
    def step(cls, bounds, values) -> "Schedule":
        return cls("step", {"bounds": list(bounds), "values": list(values)})

    def describe(self) -> dict:
        return {"kind": self.kind, **self.params}


def p_s(schedule: Schedule, t) -> np.ndarray:
    """Evaluate a schedule; output is always clamped to [0, 1]."""
    t = np.asarray(t, dtype=np.float64)
    p = schedule.params
    if schedule.kind == "linear":
        t_lo, t_hi = p["t_lo"], p["t_hi"]
        frac = (t - t_lo) / (t_hi - t_lo)
        out = p["p_lo"] + frac * (p["p_hi"] - p["p_lo"])
    elif schedule.kind == "sine":
        out = p["mid"] + p["amp"] * np.sin(
            2.0 * np.pi * t / p["period"] + p["phase"]
        )
    else:
        out = np.asarray(p["values"], dtype=np.float64)[
            np.searchsorted(np.asarray(p["bounds"], dtype=np.float64), t, side="left")
        ]
    return np.clip(out, 0.0, 1.0)


@dataclass
class Dataset:
    """(x, y, t) arrays plus self-describing metadata."""

    x: np.ndarray  # n x d float64
    y: np.ndarray  # n uint32 class labels
    t: np.ndarray  # n x d_t float64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.ascontiguousarray(np.asarray(self.x, dtype=np.float64))
        self.y = np.ascontiguousarray(np.asarray(self.y, dtype=np.uint32).ravel())
        t = np.asarray(self.t, dtype=np.float64)
        if t.ndim == 1:
            t = t.reshape(-1, 1)
        self.t = np.ascontiguousarray(t)
        n = self.x.shape[0]
        if self.y.shape[0] != n or self.t.shape[0] != n:
            raise ValueError(
                f"row counts differ: x {n}, y {self.y.shape[0]}, t {self.t.shape[0]}"
            )
        if not np.all(np.isfinite(self.t)):
            raise ValueError("domain indices must be finite")
        classes = int(self.meta.get("classes", self.y.max() + 1 if n else 1))
        if n and self.y.max() >= classes:
            raise ValueError(f"label {self.y.max()} outside [0, {classes})")
        self.meta.setdefault("classes", classes)
        self.meta.setdefault("n", n)
        self.meta.setdefault("d", self.x.shape[1])
        self.meta.setdefault("d_t", self.t.shape[1])

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def classes(self) -> int:
        return int(self.meta["classes"])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        meta = dict(self.meta)
        meta["n"] = int(idx.shape[0]) if idx.dtype != bool else int(idx.sum())
        return Dataset(self.x[idx], self.y[idx], self.t[idx], meta)


def gen_logit(
    n: int = 2000,
    p_v: float = 0.9,
    schedule: Schedule | None = None,
    sigma: float = 1.0,
    d_s: int = 20,
    t_range: tuple[float, float] = (0.0, 100.0),
    seed: int = 0,
) -> Dataset:
    """Two invariant dimensions plus d_s spurious ones.

    Per sample: t ~ Uniform(t_range); y ~ Bernoulli(1/2); s = 2y - 1. The
    invariant block agrees with s (mean +s on both dims) with probability p_v,
    otherwise flips; each spurious dimension independently agrees with
    probability p_s(t). Gaussian noise sigma is added everywhere.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= p_v <= 1.0:
        raise ValueError(f"p_v must be a probability, got {p_v}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if schedule is None:
        schedule = Schedule.linear(0.99, 0.01, t_range[0], t_range[1])

    rng = np.random.default_rng(seed)
    t = rng.uniform(t_range[0], t_range[1], size=n)
    y = (rng.random(n) < 0.5).astype(np.uint32)
    s = 2.0 * y - 1.0

    agree_v = np.where(rng.random(n) < p_v, 1.0, -1.0)
    x_v = (agree_v * s)[:, None] + rng.normal(0.0, sigma, size=(n, 2))

    ps = p_s(schedule, t)
    agree_s = np.where(rng.random((n, d_s)) < ps[:, None], 1.0, -1.0)
    x_s = agree_s * s[:, None] + rng.normal(0.0, sigma, size=(n, d_s))

    meta = {
        "name": "logit",
        "classes": 2,
        "generation_seed": seed,
        "p_v": p_v,
        "sigma": sigma,
        "t_range": [float(t_range[0]), float(t_range[1])],
        "schedule": schedule.describe(),
    }
    return Dataset(np.hstack([x_v, x_s]), y, t, meta)


_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_exact(f, count: int, path, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise FormatError(
            f"{path}: truncated while reading {what} at byte offset {f.tell() - len(data)}"
        )
    return data


def load_idx(images_path, labels_path):
    """Big-endian IDX image/label pair -> (pixels in [0,1] as n x rows x cols,

    integer labels 0-9). Counts must agree between the two files.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(
            ">IIII", _read_exact(f, 16, images_path, "image header")
        )
        if magic != _IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: bad image magic 0x{magic:08x} at byte offset 0"
            )
        raw = _read_exact(f, count * rows * cols, images_path, "pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    images = images.astype(np.float64) / 255.0

    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(
            ">II", _read_exact(f, 8, labels_path, "label header")
        )
        if magic != _IDX_LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: bad label magic 0x{magic:08x} at byte offset 0"
            )
        raw = _read_exact(f, label_count, labels_path, "label data")
    labels = np.frombuffer(raw, dtype=np.uint8).copy()

    if label_count != count:
        raise FormatError(
            f"image count {count} != label count {label_count} "
            f"({images_path} vs {labels_path})"
        )
    return images, labels


def colorize_mnist(
    images: np.ndarray,
    labels: np.ndarray,
    p_v: float = 0.75,
    schedule: Schedule | None = None,
    domain_count: int = 1024,
    seed: int = 0,
) -> Dataset:
    """Digits -> binary class (digit < 5 is class 0), color as spurious channel.

    The class label is flipped with probability 1 - p_v. Each sample draws an
    integer domain index t uniformly from [1, domain_count]; its color agrees
    with the class with probability p_s(t). Color is encoded as two channels
    with the unused one zeroed, then flattened.
    """
    if len(images) == 0:
        raise ValueError("empty digit set")
    if domain_count < 2:
        raise ValueError("domain count must be >= 2")
    if schedule is None:
        schedule = Schedule.step([domain_count // 2], [0.9, 0.8])

    rng = np.random.default_rng(seed)
    n = len(images)
    digits = np.asarray(labels).astype(np.uint32)
    y = (digits >= 5).astype(np.uint32)
    flip_y = rng.random(n) < (1.0 - p_v)
    y = np.where(flip_y, 1 - y, y).astype(np.uint32)

    t = rng.integers(1, domain_count + 1, size=n).astype(np.float64)
    agree = rng.random(n) < p_s(schedule, t)
    color = np.where(agree, y, 1 - y)

    flat = np.asarray(images, dtype=np.float64).reshape(n, -1)
    x = np.zeros((n, 2 * flat.shape[1]))
    ch0 = color == 0
    x[ch0, : flat.shape[1]] = flat[ch0]
    x[~ch0, flat.shape[1]:] = flat[~ch0]

    meta = {
        "name": "cmnist",
        "classes": 2,
        "generation_seed": seed,
        "p_v": p_v,
        "domain_count": domain_count,
        "schedule": schedule.describe(),
    }
    return Dataset(x, y, t, meta)


def _float_column(rows, name, path):
    out = np.empty(len(rows))
    for i, row in enumerate(rows):
        try:
            out[i] = float(row[name])
        except (ValueError, TypeError):
            raise SchemaError(
                f"{path}: column {name!r} is not numeric at data row {i}"
            ) from None
    return out


def load_csv(
    path,
    feature_columns: list[str],
    label_column: str,
    domain_column: str,
    train_filter: dict | None = None,
    test_filter: dict | None = None,
) -> tuple[Dataset, Dataset]:
    """Header CSV -> (train, test) with the domain column as t.

    Filters are {"min": a, "max": b} inclusive ranges on the domain column.
    Features are z-scored with statistics fit on the train split only; a
    constant column normalizes to zeros (sigma floored at 1e-12). Labels are
    mapped to 0..C-1 in sorted value order.
    """
    path = Path(path)
    with open(path, newline="") as f:
        reader = _csv.DictReader(f)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: missing header row")
        for col in [*feature_columns, label_column, domain_column]:
            if col not in reader.fieldnames:
                raise SchemaError(f"{path}: missing column {col!r}")
        rows = list(reader)

    t = _float_column(rows, domain_column, path)
    x = np.column_stack([_float_column(rows, c, path) for c in feature_columns])
    raw_labels = [row[label_column] for row in rows]
    values = sorted(set(raw_labels))
    label_map = {v: i for i, v in enumerate(values)}
    y = np.array([label_map[v] for v in raw_labels], dtype=np.uint32)

    def in_range(filt):
        keep = np.ones(len(rows), dtype=bool)
        if filt:
            if "min" in filt:
                keep &= t >= filt["min"]
            if "max" in filt:
                keep &= t <= filt["max"]
        return keep

    train_idx = in_range(train_filter)
    test_idx = in_range(test_filter)
    if not train_idx.any():
        raise SchemaError(f"{path}: train filter matches no rows")

    mu = x[train_idx].mean(axis=0)
    sd = np.maximum(x[train_idx].std(axis=0), 1e-12)
    xn = (x - mu) / sd

    meta = {
        "name": path.stem,
        "classes": len(values),
        "label_values": [str(v) for v in values],
        "feature_columns": list(feature_columns),
        "domain_column": domain_column,
    }
    train = Dataset(xn[train_idx], y[train_idx], t[train_idx], dict(meta))
    test = Dataset(xn[test_idx], y[test_idx], t[test_idx], dict(meta))
    return train, test


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Snapshot directory: meta.json plus little-endian flat binaries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "meta.json", "w") as f:
        json.dump(dataset.meta, f, sort_keys=True, indent=2)
    dataset.x.astype("<f8").tofile(out / "x.f64le")
    dataset.y.astype("<u4").tofile(out / "y.u32le")
    dataset.t.astype("<f8").tofile(out / "t.f64le")


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    with open(src / "meta.json") as f:
        meta = json.load(f)
    n, d, d_t = int(meta["n"]), int(meta["d"]), int(meta["d_t"])
    x = np.fromfile(src / "x.f64le", dtype="<f8").reshape(n, d)
    y = np.fromfile(src / "y.u32le", dtype="<u4")
    t = np.fromfile(src / "t.f64le", dtype="<f8").reshape(n, d_t)
    return Dataset(x, y, t, meta)
