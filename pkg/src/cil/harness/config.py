"""Experiment configuration: YAML parsing, validation, and hashing.

The schema is a file with five blocks: ``dataset`` (what to train on),
``method`` (which objective), ``model`` (widths), ``train`` (optimizer
settings), plus ``seeds`` and ``output``. Validation errors carry the dotted
field path so the CLI can point at the offending entry.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import yaml

from ..datagen import Schedule
from ..models import MlpSpec, init_bundle
from ..objectives import ENV_METHODS, METHODS, UPDATE_RULES, PenaltySpec
from ..trainer import OPTIMIZERS, TrainConfig

__all__ = ["ConfigError", "load_config", "validate_config", "config_hash",
           "build_penalty_spec", "build_train_config", "build_bundle",
           "data_dir_fallback"]

DATASET_KINDS = ("logit", "cmnist", "csv", "snapshot")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the bad entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _require(block: dict, field: str, path: str, types, default=None,
             required: bool = False):
    if field not in block:
        if required:
            raise ConfigError(f"{path}.{field}", "missing required field")
        return default
    value = block[field]
    if types is not None and not isinstance(value, types):
        raise ConfigError(
            f"{path}.{field}",
            f"expected {getattr(types, '__name__', types)}, got {type(value).__name__}",
        )
    return value


def _num(block, field, path, default=None, required=False, positive=False):
    value = _require(block, field, path, (int, float), default, required)
    if value is not None and isinstance(value, bool):
        raise ConfigError(f"{path}.{field}", "expected a number, got a bool")
    if positive and value is not None and value <= 0:
        raise ConfigError(f"{path}.{field}", f"must be positive, got {value}")
    return value


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(str(path), "config file does not exist")
    with open(path) as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(str(path), f"not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(str(path), "config must be a mapping")
    return validate_config(raw)


def _validate_schedule(block, path) -> dict:
    if not isinstance(block, dict):
        raise ConfigError(path, "schedule must be a mapping")
    kind = _require(block, "kind", path, str, required=True)
    try:
        Schedule(kind, {k: v for k, v in block.items() if k != "kind"})
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc
    return dict(block)


def schedule_from_config(block: dict) -> Schedule:
    return Schedule(block["kind"], {k: v for k, v in block.items() if k != "kind"})


def _validate_dataset(block, path="dataset") -> dict:
    if not isinstance(block, dict):
        raise ConfigError(path, "must be a mapping")
    kind = _require(block, "kind", path, str, required=True)
    if kind not in DATASET_KINDS:
        raise ConfigError(f"{path}.kind",
                          f"unknown dataset kind {kind!r}; one of {DATASET_KINDS}")
    out = {"kind": kind, "seed": int(_num(block, "seed", path, default=0))}
    if kind == "logit":
        out["n"] = int(_num(block, "n", path, default=2000, positive=True))
        out["test_n"] = int(_num(block, "test_n", path, default=2000, positive=True))
        p_v = _num(block, "p_v", path, default=0.9)
        if not 0.0 <= p_v <= 1.0:
            raise ConfigError(f"{path}.p_v", f"must be a probability, got {p_v}")
        out["p_v"] = p_v
        out["sigma"] = _num(block, "sigma", path, default=1.0, positive=True)
        out["d_s"] = int(_num(block, "d_s", path, default=20, positive=True))
        for key, default in (("train_range", [0.0, 100.0]),
                             ("test_range", [100.0, 200.0])):
            rng = _require(block, key, path, list, default=default)
            if len(rng) != 2 or rng[0] >= rng[1]:
                raise ConfigError(f"{path}.{key}", f"must be [lo, hi], got {rng}")
            out[key] = [float(rng[0]), float(rng[1])]
        sched = block.get("schedule",
                          {"kind": "linear", "p_lo": 0.99, "p_hi": 0.01,
                           "t_lo": 0.0, "t_hi": 100.0})
        out["schedule"] = _validate_schedule(sched, f"{path}.schedule")
    elif kind == "cmnist":
        out["images"] = _require(block, "images", path, str, default=None)
        out["labels"] = _require(block, "labels", path, str, default=None)
        out["domains"] = int(_num(block, "domains", path, default=1024))
        if out["domains"] < 2:
            raise ConfigError(f"{path}.domains", "needs at least 2 domains")
        p_v = _num(block, "p_v", path, default=0.75)
        if not 0.0 <= p_v <= 1.0:
            raise ConfigError(f"{path}.p_v", f"must be a probability, got {p_v}")
        out["p_v"] = p_v
        out["train_fraction"] = _num(block, "train_fraction", path, default=0.8)
        sched = block.get("schedule", {"kind": "step",
                                       "bounds": [out["domains"] // 2],
                                       "values": [0.9, 0.8]})
        out["schedule"] = _validate_schedule(sched, f"{path}.schedule")
        test_sched = block.get("test_schedule",
                               {"kind": "step", "bounds": [], "values": [0.1]})
        out["test_schedule"] = _validate_schedule(test_sched, f"{path}.test_schedule")
    elif kind == "csv":
        out["path"] = _require(block, "path", path, str, required=True)
        out["features"] = _require(block, "features", path, list, required=True)
        out["label"] = _require(block, "label", path, str, required=True)
        out["domain"] = _require(block, "domain", path, str, required=True)
        for key in ("train_filter", "test_filter"):
            filt = _require(block, key, path, dict, default={})
            out[key] = {k: float(v) for k, v in filt.items() if k in ("min", "max")}
    else:  # snapshot
        out["train_dir"] = _require(block, "train_dir", path, str, required=True)
        out["test_dir"] = _require(block, "test_dir", path, str, required=True)
    return out


def _validate_method(block, path="method") -> dict:
    if not isinstance(block, dict):
        raise ConfigError(path, "must be a mapping")
    name = _require(block, "name", path, str, required=True)
    if name not in METHODS:
        raise ConfigError(f"{path}.name",
                          f"unknown method {name!r}; one of {METHODS}")
    out = {"name": name}
    weight = _num(block, "penalty_weight", path, default=0.0)
    if weight < 0:
        raise ConfigError(f"{path}.penalty_weight", "must be >= 0")
    out["penalty_weight"] = weight
    if name in ENV_METHODS:
        out["split"] = int(_num(block, "split", path, required=True, positive=True))
    if name == "groupdro":
        out["eta_q"] = _num(block, "eta_q", path, default=0.01, positive=True)
    return out


def _validate_model(block, path="model") -> dict:
    block = block or {}
    if not isinstance(block, dict):
        raise ConfigError(path, "must be a mapping")
    return {
        "feature_dim": int(_num(block, "feature_dim", path, default=16, positive=True)),
        "phi_hidden": int(_num(block, "phi_hidden", path, default=16, positive=True)),
        "penalty_hidden": int(_num(block, "penalty_hidden", path, default=64,
                                   positive=True)),
    }


def _validate_train(block, path="train") -> dict:
    block = block or {}
    if not isinstance(block, dict):
        raise ConfigError(path, "must be a mapping")
    out = {
        "lr": _num(block, "lr", path, default=1e-3, positive=True),
        "olr": _num(block, "olr", path, default=1e-3, positive=True),
        "steps": int(_num(block, "steps", path, default=1500, positive=True)),
        "penalty_step": int(_num(block, "penalty_step", path, default=500)),
        "batch_size": int(_num(block, "batch_size", path, default=0)),
        "optimizer": _require(block, "optimizer", path, str, default="adam"),
        "update_rule": _require(block, "update_rule", path, str,
                                default="full_objective"),
        "probes": int(_num(block, "probes", path, default=2, positive=True)),
        "probe_steps": int(_num(block, "probe_steps", path, default=150)),
    }
    if out["optimizer"] not in OPTIMIZERS:
        raise ConfigError(f"{path}.optimizer",
                          f"unknown optimizer {out['optimizer']!r}")
    if out["update_rule"] not in UPDATE_RULES:
        raise ConfigError(f"{path}.update_rule",
                          f"unknown update rule {out['update_rule']!r}")
    if not 0 <= out["penalty_step"] <= out["steps"]:
        raise ConfigError(f"{path}.penalty_step",
                          f"{out['penalty_step']} outside [0, {out['steps']}]")
    if out["batch_size"] < 0:
        raise ConfigError(f"{path}.batch_size", "must be >= 0 (0 = full batch)")
    return out


def validate_config(raw: dict) -> dict:
    config = {
        "dataset": _validate_dataset(raw.get("dataset"),),
        "method": _validate_method(raw.get("method")),
        "model": _validate_model(raw.get("model")),
        "train": _validate_train(raw.get("train")),
    }
    seeds = raw.get("seeds", [0, 1, 2])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds", "must be a nonempty list of integers")
    if any(not isinstance(s, int) or isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds", "must all be integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "must be distinct")
    config["seeds"] = seeds
    output = raw.get("output", "runs/default")
    if not isinstance(output, str) or not output:
        raise ConfigError("output", "must be a nonempty path string")
    config["output"] = output
    unknown = set(raw) - {"dataset", "method", "model", "train", "seeds", "output"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level block")
    return config


def config_hash(config: dict) -> str:
    """Hash of every result-affecting field (output path excluded)."""
    payload = {k: v for k, v in config.items() if k != "output"}
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def data_dir_fallback(path_str: str | None, default_name: str) -> Path:
    """Resolve a data file, falling back to $CIL_DATA_DIR/<default_name>."""
    root = os.environ.get("CIL_DATA_DIR", "")
    if path_str:
        p = Path(path_str)
        if p.exists():
            return p
        if root and (Path(root) / path_str).exists():
            return Path(root) / path_str
        return p  # caller reports the missing file
    return Path(root) / default_name if root else Path(default_name)


def build_penalty_spec(config: dict) -> PenaltySpec:
    m = config["method"]
    return PenaltySpec(
        method=m["name"],
        penalty_weight=m.get("penalty_weight", 0.0),
        split=m.get("split"),
        eta_q=m.get("eta_q", 0.01),
        warmup=config["train"]["penalty_step"],
        update_rule=config["train"]["update_rule"],
    )


def build_train_config(config: dict, seed: int) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        lr=t["lr"], olr=t["olr"], steps=t["steps"],
        penalty_step=t["penalty_step"],
        penalty_weight=config["method"].get("penalty_weight", 0.0),
        batch_size=t["batch_size"], optimizer=t["optimizer"], seed=seed,
        update_rule=t["update_rule"],
    )


def build_bundle(config: dict, n_features: int, n_classes: int, d_t: int,
                 seed: int):
    m = config["model"]
    n_out = 1 if n_classes == 2 else n_classes
    z = m["feature_dim"]
    phi = MlpSpec((n_features, m["phi_hidden"], z))
    w = MlpSpec((z, n_out))
    h = MlpSpec((z, m["penalty_hidden"], d_t))
    g = MlpSpec((z + n_classes, m["penalty_hidden"], d_t))
    return init_bundle(phi, w, h, g, n_classes, d_t, seed)
