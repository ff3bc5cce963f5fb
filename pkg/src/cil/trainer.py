"""Optimization loops: plain minimization for the env-based baselines and the

alternating ascent/descent loop for the min-max objective. Both loops are
deterministic given (config, seed, dataset): batches are drawn from a seeded
generator, and the parameter updates are pure numpy.

Domain indices are standardized (train mean/std) before being used as
regression targets, so penalty weights act on O(1) losses regardless of the
raw index scale.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import Dataset
from .models import ModelBundle, forward_scores
from .ndmath import Tape
from .objectives import (
    PenaltySpec,
    cil_losses,
    classification_loss,
    erm_loss,
    groupdro_loss,
    irmv1_loss,
    rex_loss,
)
from .splitter import EnvAssignment, equal_split

__all__ = [
    "TrainConfig",
    "RunHistory",
    "DivergenceError",
    "sgd_train",
    "sgda_train",
    "evaluate",
    "estimate_suboptimality",
]

OPTIMIZERS = ("sgd", "adam")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the last finite snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    olr: float = 1e-3
    steps: int = 1500
    penalty_step: int = 0
    penalty_weight: float = 0.0
    batch_size: int = 0  # 0 = full batch
    optimizer: str = "adam"
    seed: int = 0
    update_rule: str = "algorithm1"

    def __post_init__(self):
        if self.lr <= 0 or self.olr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.penalty_step <= self.steps:
            raise ValueError(
                f"penalty_step {self.penalty_step} outside [0, {self.steps}]"
            )
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RunHistory:
    """Per-step scalar records plus end-of-run optimality-gap estimates."""

    records: list[dict] = field(default_factory=list)
    epsilon1: float | None = None
    epsilon2: float | None = None
    wall_seconds: float = 0.0

    def __len__(self):
        return len(self.records)

    def to_jsonl(self, path) -> None:
        """One JSON line per step; the final line carries the gap estimates.

        Wall time is intentionally not serialized here so that identical
        (config, seed) reruns produce byte-identical files.
        """
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            f.write(json.dumps(
                {"epsilon1": self.epsilon1, "epsilon2": self.epsilon2},
                sort_keys=True,
            ) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "RunHistory":
        with open(path) as f:
            lines = [json.loads(line) for line in f if line.strip()]
        tail = lines[-1] if lines and "epsilon1" in lines[-1] else {}
        records = lines[:-1] if tail else lines
        return cls(records, tail.get("epsilon1"), tail.get("epsilon2"))


class _Optimizer:
    def __init__(self, kind: str, lr: float, names: list[str]):
        self.kind = kind
        self.lr = lr
        self.names = list(names)
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        if self.kind == "sgd":
            for name in self.names:
                params[name] = params[name] - self.lr * grads[name]
            return
        self._t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for name in self.names:
            g = grads[name]
            m = self._m.get(name)
            v = self._v.get(name)
            m = b1 * m + (1 - b1) * g if m is not None else (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g if v is not None else (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            mhat = m / (1 - b1 ** self._t)
            vhat = v / (1 - b2 ** self._t)
            params[name] = params[name] - self.lr * mhat / (np.sqrt(vhat) + eps)


class _BatchSampler:
    """Seeded cycling permutation; full batch when batch_size is 0."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = batch_size if batch_size > 0 else 0
        self.rng = np.random.default_rng(seed)
        self._order = None
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.batch_size == 0 or self.batch_size >= self.n:
            return np.arange(self.n)
        if self._order is None or self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def _standardize_t(t: np.ndarray):
    mu = t.mean(axis=0, keepdims=True)
    sd = np.maximum(t.std(axis=0, keepdims=True), 1e-12)
    return (t - mu) / sd, mu, sd


def _grad_norm(grads: dict[str, np.ndarray], names) -> float:
    total = 0.0
    for name in names:
        g = grads[name]
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def _guard(step: int, values: dict, bundle: ModelBundle, history: RunHistory):
    bad = [k for k, v in values.items() if v is not None and not np.isfinite(v)]
    if bad:
        snapshot = {
            "step": step,
            "nonfinite": bad,
            "last_record": history.records[-1] if history.records else None,
        }
        raise DivergenceError(
            f"non-finite loss {bad} at step {step}; aborting", snapshot
        )


def sgd_train(
    dataset: Dataset,
    bundle: ModelBundle,
    spec: PenaltySpec,
    config: TrainConfig,
    envs: EnvAssignment | None = None,
) -> tuple[ModelBundle, RunHistory]:
    """Minimize the selected baseline objective (erm / irmv1 / rex / groupdro).

    Env-based methods need an environment assignment; one is derived from
    ``spec.split`` with equal-width bins when not supplied. The penalty weight
    is treated as zero before ``config.penalty_step``.
    """
    if dataset.n == 0:
        raise ValueError("empty dataset")
    if spec.method == "cil":
        raise ValueError("use sgda_train for the min-max objective")
    if spec.method in ("irmv1", "rex", "groupdro") and envs is None:
        envs = equal_split(dataset, spec.split)

    start = time.perf_counter()
    bundle = bundle.copy()
    opt = _Optimizer(config.optimizer, config.lr, bundle.descent_names())
    sampler = _BatchSampler(dataset.n, config.batch_size, config.seed)
    history = RunHistory()
    q = None
    if spec.method == "groupdro":
        n_envs = len([m for m in range(envs.M) if envs.members(m).size > 0])
        q = np.full(n_envs, 1.0 / n_envs)

    for step in range(config.steps):
        rows = sampler.next()
        x, y = dataset.x[rows], dataset.y[rows]
        lam = config.penalty_weight if step >= config.penalty_step else 0.0
        tape = Tape()
        penalty_value = None

        if spec.method == "erm":
            loss = erm_loss(tape, bundle, x, y)
        else:
            env_rows = _env_rows_in_batch(envs, rows)
            if spec.method == "rex":
                loss, diag = rex_loss(tape, bundle, x, y, env_rows, lam)
                penalty_value = diag["penalty"]
            elif spec.method == "irmv1":
                loss, diag = irmv1_loss(tape, bundle, x, y, env_rows, lam)
                penalty_value = diag["penalty"]
            else:
                loss, q, diag = groupdro_loss(
                    tape, bundle, x, y, env_rows, q, spec.eta_q
                )

        loss_value = loss.item()
        _guard(step, {"loss": loss_value, "penalty": penalty_value}, bundle, history)
        grads = tape.backward(loss)
        opt.step(bundle.params, grads)
        history.records.append({
            "step": step,
            "erm_loss": loss_value if spec.method == "erm" else None,
            "loss": loss_value,
            "penalty": penalty_value,
            "h_loss": None,
            "g_loss": None,
            "grad_norm": _grad_norm(grads, bundle.descent_names()),
        })

    history.wall_seconds = time.perf_counter() - start
    return bundle, history


def _env_rows_in_batch(envs: EnvAssignment, rows: np.ndarray):
    """Positions (within the batch) of each environment's members."""
    batch_envs = envs.env_ids[rows]
    return [np.flatnonzero(batch_envs == m) for m in range(envs.M)]


def sgda_train(
    dataset: Dataset,
    bundle: ModelBundle,
    config: TrainConfig,
) -> tuple[ModelBundle, RunHistory]:
    """Alternating single-step loop for the min-max objective.

    Each step samples a batch, then (i) updates g one optimizer step toward
    the conditional mean of t given (features, label), and (ii) updates
    (w, phi, h) one step down the update-rule loss. The penalty weight is
    treated as zero before ``config.penalty_step``; during warmup the descent
    gradient on (w, phi) coincides exactly with plain ERM, and h is
    pre-trained on its regression loss with detached features so both
    regressors are already near their optima when the penalty switches on
    (avoids a large spurious penalty transient at activation).
    """
    if dataset.n == 0:
        raise ValueError("empty dataset")
    start = time.perf_counter()
    bundle = bundle.copy()
    t_std, _, _ = _standardize_t(dataset.t)
    opt_min = _Optimizer(config.optimizer, config.lr, bundle.descent_names())
    opt_max = _Optimizer(config.optimizer, config.olr, bundle.ascent_names())
    h_names = [k for k in bundle.params if k.startswith("h.")]
    opt_hwarm = _Optimizer(config.optimizer, config.olr, h_names)
    sampler = _BatchSampler(dataset.n, config.batch_size, config.seed)
    history = RunHistory()

    for step in range(config.steps):
        rows = sampler.next()
        x, y, t = dataset.x[rows], dataset.y[rows], t_std[rows]
        lam = config.penalty_weight if step >= config.penalty_step else 0.0

        # ascent side: move g toward the label-conditioned regression optimum
        tape_g = Tape()
        parts = cil_losses(tape_g, bundle, x, y, t, 0.0, config.update_rule)
        g_grads = tape_g.backward(parts["gmax"])
        opt_max.step(bundle.params, {k: g_grads[k] for k in bundle.ascent_names()})
        if step < config.penalty_step:
            h_grads = tape_g.backward(parts["h_detached"])
            opt_hwarm.step(bundle.params, {k: h_grads[k] for k in h_names})

        # descent side on (w, phi, h)
        tape = Tape()
        parts = cil_losses(tape, bundle, x, y, t, lam, config.update_rule)
        values = {
            "erm": parts["erm"].item(),
            "h": parts["h_term"].item(),
            "g": parts["gmax"].item(),
            "main": parts["main"].item(),
        }
        _guard(step, values, bundle, history)
        grads = tape.backward(parts["main"])
        opt_min.step(bundle.params, {k: grads[k] for k in bundle.descent_names()})

        history.records.append({
            "step": step,
            "erm_loss": values["erm"],
            "loss": values["main"],
            "penalty": parts["penalty_gap"],
            "h_loss": values["h"],
            "g_loss": values["g"],
            "grad_norm": _grad_norm(grads, bundle.descent_names()),
        })

    history.wall_seconds = time.perf_counter() - start
    return bundle, history


def evaluate(bundle: ModelBundle, dataset: Dataset) -> dict:
    """Accuracy (argmax, ties toward the lower class index) and mean loss."""
    if dataset.n == 0:
        raise ValueError("empty dataset")
    scores = forward_scores(bundle, dataset.x)
    if scores.shape[1] == 1:
        pred = (scores[:, 0] > 0.0).astype(np.uint32)
    else:
        pred = np.argmax(scores, axis=1).astype(np.uint32)
    accuracy = float(np.mean(pred == dataset.y))

    tape = Tape()
    logits = tape.const(scores)
    loss = classification_loss(logits, dataset.y).item()
    return {"accuracy": accuracy, "mean_loss": loss}


def _retrain_part(bundle: ModelBundle, dataset, t_std, config: TrainConfig,
                  names: list[str], target: str, steps: int, seed: int) -> float:
    """Fresh-start probe: reinit the named parameters, train them alone for

    ``steps`` full-batch iterations, and return the achieved value of the
    target loss ("gmax" or "main").
    """
    from .models import init_mlp  # local import to avoid cycle at module load

    probe = bundle.copy()
    rng = np.random.default_rng(seed)
    specs = {"phi": probe.phi, "w": probe.w, "h": probe.h, "g": probe.g}
    for part in sorted({n.split(".")[0] for n in names}):
        fresh = init_mlp(specs[part], rng, part)
        probe.params.update(fresh)

    opt = _Optimizer(config.optimizer, config.olr if target == "gmax" else config.lr,
                     names)
    best = np.inf
    for _ in range(steps):
        tape = Tape()
        parts = cil_losses(tape, probe, dataset.x, dataset.y, t_std,
                           config.penalty_weight, config.update_rule)
        value = parts[target].item()
        if not np.isfinite(value):
            break
        best = min(best, value)
        grads = tape.backward(parts[target])
        opt.step(probe.params, {k: grads[k] for k in names})
    tape = Tape()
    parts = cil_losses(tape, probe, dataset.x, dataset.y, t_std,
                       config.penalty_weight, config.update_rule)
    final = parts[target].item()
    if np.isfinite(final):
        best = min(best, final)
    return best


def estimate_suboptimality(
    bundle: ModelBundle,
    dataset: Dataset,
    config: TrainConfig,
    probes: int = 3,
    probe_steps: int = 200,
) -> tuple[float, float]:
    """Residual optimality gaps of the two players at the returned point.

    epsilon2: best decrease of the g regression loss found by ``probes``
    fresh-restart trainings of g with (w, phi, h) frozen. epsilon1: best
    decrease of the descent loss found by fresh restarts of (w, phi, h) with
    g frozen. Both are clamped at zero.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    t_std, _, _ = _standardize_t(dataset.t)

    tape = Tape()
    parts = cil_losses(tape, bundle, dataset.x, dataset.y, t_std,
                       config.penalty_weight, config.update_rule)
    current_g = parts["gmax"].item()
    current_main = parts["main"].item()

    best_g = min(
        _retrain_part(bundle, dataset, t_std, config, bundle.ascent_names(),
                      "gmax", probe_steps, seed=config.seed + 1000 + k)
        for k in range(probes)
    )
    best_main = min(
        _retrain_part(bundle, dataset, t_std, config, bundle.descent_names(),
                      "main", probe_steps, seed=config.seed + 2000 + k)
        for k in range(probes)
    )
    eps2 = max(0.0, current_g - best_g)
    eps1 = max(0.0, current_main - best_main)
    return eps1, eps2
