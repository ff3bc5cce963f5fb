"""Multi-seed experiment execution with idempotent, atomic persistence.

Each (config, seed) run writes record.json, history.jsonl and params.json
under ``output/<config-hash>/seed<k>/``. Completed seeds are skipped on rerun
unless forced; runs are independent, so a bounded process pool can execute
them in parallel. Results land first in a scratch directory and are moved
into place with a single atomic rename.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__
from ..datagen import colorize_mnist, gen_logit, load_csv, load_dataset, load_idx
from ..models import save_params
from ..trainer import estimate_suboptimality, evaluate, sgd_train, sgda_train
from .config import (
    build_bundle,
    build_penalty_spec,
    build_train_config,
    config_hash,
    data_dir_fallback,
    schedule_from_config,
)

__all__ = ["run", "run_single", "sweep", "build_datasets", "MissingDataError",
           "SWEEP_AXES"]

# axis name -> (config path, methods it applies to)
SWEEP_AXES = {
    "split": ("method.split", ("irmv1", "rex", "groupdro")),
    "lambda": ("method.penalty_weight", ("irmv1", "rex", "cil")),
    "penalty_width": ("model.penalty_hidden", ("cil",)),
}


class MissingDataError(FileNotFoundError):
    """A configured data file is absent (CLI exit code 4)."""


def _dataset_seed(base: int, seed: int, test: bool) -> int:
    return base + seed + (8000 if test else 0)


def build_datasets(config: dict, seed: int):
    """Materialize (train, test) for one run seed.

    Generated datasets draw fresh samples per seed (train from base + seed,
    test from base + 8000 + seed); file-backed datasets are fixed.
    """
    d = config["dataset"]
    kind = d["kind"]
    if kind == "logit":
        sched = schedule_from_config(d["schedule"])
        train = gen_logit(n=d["n"], p_v=d["p_v"], schedule=sched, sigma=d["sigma"],
                          d_s=d["d_s"], t_range=tuple(d["train_range"]),
                          seed=_dataset_seed(d["seed"], seed, False))
        test = gen_logit(n=d["test_n"], p_v=d["p_v"], schedule=sched,
                         sigma=d["sigma"], d_s=d["d_s"],
                         t_range=tuple(d["test_range"]),
                         seed=_dataset_seed(d["seed"], seed, True))
        return train, test
    if kind == "cmnist":
        images_path = data_dir_fallback(d["images"], "train-images-idx3-ubyte")
        labels_path = data_dir_fallback(d["labels"], "train-labels-idx1-ubyte")
        for p in (images_path, labels_path):
            if not p.exists():
                raise MissingDataError(
                    f"{p} not found (set dataset paths or CIL_DATA_DIR)"
                )
        images, digits = load_idx(images_path, labels_path)
        n_train = int(len(images) * d["train_fraction"])
        train = colorize_mnist(images[:n_train], digits[:n_train], p_v=d["p_v"],
                               schedule=schedule_from_config(d["schedule"]),
                               domain_count=d["domains"],
                               seed=_dataset_seed(d["seed"], seed, False))
        test = colorize_mnist(images[n_train:], digits[n_train:], p_v=d["p_v"],
                              schedule=schedule_from_config(d["test_schedule"]),
                              domain_count=d["domains"],
                              seed=_dataset_seed(d["seed"], seed, True))
        return train, test
    if kind == "csv":
        path = data_dir_fallback(d["path"], d["path"])
        if not path.exists():
            raise MissingDataError(f"{path} not found")
        return load_csv(path, d["features"], d["label"], d["domain"],
                        d["train_filter"], d["test_filter"])
    # snapshot
    for key in ("train_dir", "test_dir"):
        if not Path(d[key]).exists():
            raise MissingDataError(f"{d[key]} not found")
    return load_dataset(d["train_dir"]), load_dataset(d["test_dir"])


def run_single(config: dict, seed: int, sweep_info: dict | None = None) -> dict:
    """Train one seed and return its RunRecord dict (no persistence)."""
    train_set, test_set = build_datasets(config, seed)
    bundle = build_bundle(config, train_set.x.shape[1], train_set.classes,
                          train_set.t.shape[1], seed)
    train_config = build_train_config(config, seed)
    method = config["method"]["name"]

    start = time.perf_counter()
    if method == "cil":
        fitted, history = sgda_train(train_set, bundle, train_config)
        eps1, eps2 = estimate_suboptimality(
            fitted, train_set, train_config,
            probes=config["train"]["probes"],
            probe_steps=config["train"]["probe_steps"],
        )
    else:
        spec = build_penalty_spec(config)
        fitted, history = sgd_train(train_set, bundle, spec, train_config)
        eps1, eps2 = None, None
    history.epsilon1, history.epsilon2 = eps1, eps2
    wall = time.perf_counter() - start

    id_eval = evaluate(fitted, train_set)
    ood_eval = evaluate(fitted, test_set)
    final_penalty = history.records[-1]["penalty"] if history.records else None
    record = {
        "config_hash": config_hash(config),
        "seed": seed,
        "method": method,
        "id_accuracy": id_eval["accuracy"],
        "ood_accuracy": ood_eval["accuracy"],
        "id_loss": id_eval["mean_loss"],
        "ood_loss": ood_eval["mean_loss"],
        "final_penalty": final_penalty,
        "epsilon1": eps1,
        "epsilon2": eps2,
        "wall_seconds": wall,
        "tool_version": __version__,
    }
    if sweep_info:
        record.update(sweep_info)
    return record, fitted, history


def _persist(out_dir: Path, record: dict, fitted, history) -> None:
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".tmp-", dir=out_dir.parent))
    try:
        history.to_jsonl(scratch / "history.jsonl")
        save_params(fitted, scratch / "params.json")
        with open(scratch / "record.json", "w") as f:
            json.dump(record, f, sort_keys=True, indent=2)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(scratch, out_dir)
    finally:
        if scratch.exists():
            shutil.rmtree(scratch, ignore_errors=True)


def _seed_dir(config: dict, seed: int) -> Path:
    return Path(config["output"]) / config_hash(config) / f"seed{seed}"


def _run_and_persist(config: dict, seed: int, sweep_info: dict | None) -> dict:
    record, fitted, history = run_single(config, seed, sweep_info)
    _persist(_seed_dir(config, seed), record, fitted, history)
    return record


def run(config: dict, force: bool = False, jobs: int = 1,
        sweep_info: dict | None = None) -> list[dict]:
    """One record per seed; completed seeds are reloaded unless ``force``."""
    pending, records = [], {}
    for seed in config["seeds"]:
        record_path = _seed_dir(config, seed) / "record.json"
        if record_path.exists() and not force:
            with open(record_path) as f:
                records[seed] = json.load(f)
        else:
            pending.append(seed)

    if pending:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {
                    seed: pool.submit(_run_and_persist, config, seed, sweep_info)
                    for seed in pending
                }
                for seed, fut in futures.items():
                    records[seed] = fut.result()
        else:
            for seed in pending:
                records[seed] = _run_and_persist(config, seed, sweep_info)
    return [records[s] for s in config["seeds"]]


def sweep(config: dict, axis: str, values: list, force: bool = False,
          jobs: int = 1) -> list[dict]:
    """Cartesian product of seeds x axis values, each a full run."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; one of {sorted(SWEEP_AXES)}")
    if not values:
        raise ValueError("sweep needs a nonempty value list")
    path, methods = SWEEP_AXES[axis]
    method = config["method"]["name"]
    if method not in methods:
        raise ValueError(
            f"axis {axis!r} does not apply to method {method!r} "
            f"(valid for {methods})"
        )
    block, field = path.split(".")
    cast = float if axis == "lambda" else int
    records = []
    for value in values:
        derived = json.loads(json.dumps(config))  # deep copy
        derived[block][field] = cast(value)
        records.extend(run(derived, force=force, jobs=jobs,
                           sweep_info={"sweep_axis": axis, "sweep_value": cast(value)}))
    return records
