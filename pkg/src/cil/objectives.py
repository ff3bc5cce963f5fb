"""Training objectives and exact tabular oracles.

The five losses build scalar nodes on a caller-supplied tape so the trainer
can take gradients through them. Env-based losses take a list of row-index
arrays (one per environment); empty environments are skipped and counted.

The tabular oracles operate on a finite joint distribution over (z, y, t) and
compute conditional means and the conditional-variance gap in closed form,
independently of any trained network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ModelBundle, forward_bundle, forward_mlp
from .ndmath import (
    Tape,
    Var,
    bce_per_sample,
    detach,
    gather_rows,
    loss_bce,
    loss_mse,
    loss_softmax_ce,
    mean_all,
    mul,
    pop_variance,
    scale,
    sigmoid,
    softmax_ce_per_sample,
    square,
    stack_scalars,
    softmax_rows,
    sub,
    sum_all,
)

__all__ = [
    "PenaltySpec",
    "TabularDist",
    "classification_loss",
    "erm_loss",
    "rex_loss",
    "irmv1_loss",
    "groupdro_loss",
    "cil_losses",
    "conditional_mean_oracle",
    "cil_penalty_oracle",
]

METHODS = ("erm", "irmv1", "rex", "groupdro", "cil")
ENV_METHODS = ("irmv1", "rex", "groupdro")
UPDATE_RULES = ("algorithm1", "full_objective")


@dataclass(frozen=True)
class PenaltySpec:
    """Which objective to train and its method-specific knobs."""

    method: str
    penalty_weight: float = 0.0
    split: int | None = None
    eta_q: float = 0.01
    warmup: int = 0
    update_rule: str = "algorithm1"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; pick one of {METHODS}")
        if self.penalty_weight < 0:
            raise ValueError("penalty weight must be >= 0")
        if self.method in ENV_METHODS and (self.split is None or self.split < 1):
            raise ValueError(f"{self.method} requires a split count >= 1")
        if self.method == "groupdro" and self.eta_q <= 0:
            raise ValueError("groupdro step size must be positive")
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"unknown update rule {self.update_rule!r}")


def classification_loss(logits: Var, y) -> Var:
    """BCE for a single-logit head, softmax cross-entropy otherwise."""
    if logits.shape[1] == 1:
        yv = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        return loss_bce(logits, yv)
    return loss_softmax_ce(logits, y)


def _per_sample_loss(logits: Var, y) -> Var:
    if logits.shape[1] == 1:
        return bce_per_sample(logits, np.asarray(y, dtype=np.float64).reshape(-1, 1))
    return softmax_ce_per_sample(logits, y)


def erm_loss(tape: Tape, bundle: ModelBundle, x, y) -> Var:
    """Mean classification loss over the batch."""
    if len(np.asarray(y).ravel()) == 0:
        raise ValueError("empty batch")
    logits, _, _, _, _ = forward_bundle(tape, bundle, x, y)
    return classification_loss(logits, y)


def _env_means(per_sample: Var, env_rows: list[np.ndarray]):
    """Per-environment mean losses; empty environments are skipped."""
    means, skipped = [], 0
    for rows in env_rows:
        rows = np.asarray(rows)
        if rows.size == 0:
            skipped += 1
            continue
        means.append(mean_all(gather_rows(per_sample, rows)))
    if not means:
        raise ValueError("all environments are empty")
    return means, skipped


def rex_loss(tape: Tape, bundle: ModelBundle, x, y, env_rows, penalty_weight: float):
    """Sum of per-env mean losses + weight * population variance across envs.

    Returns (loss, diagnostics) with the variance value and skip count.
    """
    logits, _, _, _, _ = forward_bundle(tape, bundle, x, y)
    means, skipped = _env_means(_per_sample_loss(logits, y), env_rows)
    total = means[0]
    for m in means[1:]:
        total = total + m
    var = pop_variance(means)
    loss = total + scale(var, penalty_weight)
    diag = {"penalty": var.item(), "envs_used": len(means), "envs_skipped": skipped}
    return loss, diag


def _scale_gradient(logits: Var, y) -> Var:
    """Derivative of the mean loss w.r.t. a scalar logit multiplier at 1.0.

    For BCE this is mean((sigmoid(z) - y) * z); for softmax cross-entropy,
    mean(sum_k (p_k - onehot_k) * z_k). Built from first-order ops so the
    squared penalty stays differentiable on the tape.
    """
    tape = logits.tape
    if logits.shape[1] == 1:
        yv = tape.const(np.asarray(y, dtype=np.float64).reshape(-1, 1))
        resid = sub(sigmoid(logits), yv)
        return mean_all(mul(resid, logits))
    n, k = logits.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), np.asarray(y).astype(np.intp).ravel()] = 1.0
    resid = sub(softmax_rows(logits), tape.const(onehot))
    return scale(sum_all(mul(resid, logits)), 1.0 / n)


def irmv1_loss(tape: Tape, bundle: ModelBundle, x, y, env_rows, penalty_weight: float):
    """Sum of per-env risks + weight * sum of squared per-env multiplier

    gradients (the gradient of each env risk w.r.t. a scalar classifier
    multiplier fixed at 1.0).
    """
    logits, _, _, _, _ = forward_bundle(tape, bundle, x, y)
    per_sample = _per_sample_loss(logits, y)
    yv = np.asarray(y, dtype=np.float64).reshape(-1, 1)

    means, penalties, skipped = [], [], 0
    for rows in env_rows:
        rows = np.asarray(rows)
        if rows.size == 0:
            skipped += 1
            continue
        means.append(mean_all(gather_rows(per_sample, rows)))
        env_logits = gather_rows(logits, rows)
        grad = _scale_gradient(env_logits, yv[rows])
        penalties.append(square(grad))
    if not means:
        raise ValueError("all environments are empty")

    total = means[0]
    for m in means[1:]:
        total = total + m
    pen = penalties[0]
    for p in penalties[1:]:
        pen = pen + p
    loss = total + scale(pen, penalty_weight)
    diag = {"penalty": pen.item(), "envs_used": len(means), "envs_skipped": skipped}
    return loss, diag


def groupdro_loss(tape: Tape, bundle: ModelBundle, x, y, env_rows,
                  q: np.ndarray, eta_q: float):
    """Exponentiated-gradient reweighting of per-env risks.

    q_m is multiplied by exp(eta_q * risk_m) and renormalized (computed in
    log space); the loss is the q-weighted sum of env risks with the updated
    weights treated as constants. Returns (loss, updated q, diagnostics).
    """
    logits, _, _, _, _ = forward_bundle(tape, bundle, x, y)
    means, skipped = _env_means(_per_sample_loss(logits, y), env_rows)
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.shape[0] != len(means):
        raise ValueError(
            f"q has {q.shape[0]} entries but {len(means)} environments are nonempty"
        )
    risks = np.array([m.item() for m in means])
    logq = np.log(np.maximum(q, 1e-300)) + eta_q * risks
    logq -= logq.max()
    new_q = np.exp(logq)
    new_q /= new_q.sum()

    col = stack_scalars(means)
    loss = sum_all(mul(col, tape.const(new_q.reshape(-1, 1))))
    diag = {"q": new_q.copy(), "envs_used": len(means), "envs_skipped": skipped}
    return loss, new_q, diag


def cil_losses(tape: Tape, bundle: ModelBundle, x, y, t,
               penalty_weight: float, update_rule: str = "algorithm1"):
    """Losses of the min-max objective on one batch.

    gmax     mean squared error of the label-conditioned regressor g,
    h_term   mean squared error of the unconditional regressor h,
    main     classification loss + weight * (h_term - g term), where the g
             term is a detached constant under ``algorithm1`` (no gradient
             reaches phi through g) and live under ``full_objective`` (phi
             receives the adversarial gradient; g's own parameters are only
             ever updated by the ascent step).
    penalty_gap  h_term - gmax, reported for diagnostics.
    """
    if update_rule not in UPDATE_RULES:
        raise ValueError(f"unknown update rule {update_rule!r}")
    yv = np.asarray(y).ravel()
    if yv.size == 0:
        raise ValueError("empty batch")
    logits, z, t_h, t_g, leaves = forward_bundle(tape, bundle, x, y)
    tv = np.asarray(t, dtype=np.float64)
    if tv.ndim == 1:
        tv = tv.reshape(-1, 1)
    erm = classification_loss(logits, y)
    h_term = loss_mse(t_h, tv)
    gmax = loss_mse(t_g, tv)
    g_for_main = detach(gmax) if update_rule == "algorithm1" else gmax
    main = erm + scale(sub(h_term, g_for_main), penalty_weight)
    # h regression against frozen features, for warm-starting h without
    # touching the featurizer's gradient
    t_h_frozen = forward_mlp(bundle.h, leaves, "h", detach(z))
    return {
        "main": main,
        "erm": erm,
        "gmax": gmax,
        "h_term": h_term,
        "h_detached": loss_mse(t_h_frozen, tv),
        "penalty_gap": h_term.item() - gmax.item(),
    }


# ---------------------------------------------------------------------------
# tabular oracles


@dataclass
class TabularDist:
    """Finite joint distribution over (z, y, t) on small alphabets.

    ``probs[i, j, k]`` is P(z = z_values[i], y = j, t = t_values[k]);
    the table must sum to 1 within 1e-12.
    """

    probs: np.ndarray
    z_values: np.ndarray | None = None
    t_values: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise ValueError("probs must be indexed by (z, y, t)")
        if np.any(self.probs < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {self.probs.sum()}, not 1")
        if self.z_values is None:
            self.z_values = np.arange(self.probs.shape[0], dtype=np.float64)
        if self.t_values is None:
            self.t_values = np.arange(self.probs.shape[2], dtype=np.float64)
        self.z_values = np.asarray(self.z_values, dtype=np.float64)
        self.t_values = np.asarray(self.t_values, dtype=np.float64)
        if self.z_values.shape[0] != self.probs.shape[0]:
            raise ValueError("z_values length does not match the table")
        if self.t_values.shape[0] != self.probs.shape[2]:
            raise ValueError("t_values length does not match the table")

    @property
    def n_z(self) -> int:
        return self.probs.shape[0]

    @property
    def n_y(self) -> int:
        return self.probs.shape[1]


def conditional_mean_oracle(dist: TabularDist):
    """Exact E[t | z] and E[t | z, y] by direct summation.

    Returns (h_star, g_star): arrays of shape (n_z,) and (n_z, n_y), with NaN
    marking zero-mass conditioning cells (excluded from penalty integration).
    """
    t = dist.t_values
    p_zy = dist.probs.sum(axis=2)
    p_z = p_zy.sum(axis=1)

    num_zy = dist.probs @ t
    num_z = num_zy.sum(axis=1)

    with np.errstate(invalid="ignore", divide="ignore"):
        h_star = np.where(p_z > 0, num_z / np.where(p_z > 0, p_z, 1.0), np.nan)
        g_star = np.where(p_zy > 0, num_zy / np.where(p_zy > 0, p_zy, 1.0), np.nan)
    return h_star, g_star


def cil_penalty_oracle(dist: TabularDist) -> float:
    """Exact E_z[Var(t|z)] - E_{z,y}[Var(t|z,y)] by summation.

    Nonnegative for every valid table; zero exactly when E[t|z,y] does not
    depend on y wherever (z, y) has positive mass.
    """
    t = dist.t_values
    p_zy = dist.probs.sum(axis=2)
    p_z = p_zy.sum(axis=1)

    num_zy = dist.probs @ t
    num2_zy = dist.probs @ (t * t)

    ev_z = 0.0
    ev_zy = 0.0
    for i in range(dist.n_z):
        if p_z[i] <= 0:
            continue
        m_z = num_zy[i].sum() / p_z[i]
        e2_z = num2_zy[i].sum() / p_z[i]
        ev_z += p_z[i] * (e2_z - m_z * m_z)
        for j in range(dist.n_y):
            if p_zy[i, j] <= 0:
                continue
            m = num_zy[i, j] / p_zy[i, j]
            e2 = num2_zy[i, j] / p_zy[i, j]
            ev_zy += p_zy[i, j] * (e2 - m * m)
    return float(ev_z - ev_zy)
