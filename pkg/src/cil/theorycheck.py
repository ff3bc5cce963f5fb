"""Monte-Carlo study of variance-penalty feature selection with many domains.

The generative model: two candidate feature masks, one invariant and one
spurious. The spurious mask's expected per-domain risk fluctuates across
domains with std ``sigma_r``; the invariant mask's is constant but sits
``delta`` above the spurious average (spurious features fit better in
distribution). Each mask's per-sample losses deviate from their domain mean
by a Gaussian whose std is itself drawn from an exponential density
``lambda_exp * exp(-lambda_exp * s)``. A trial draws everything, forms the
empirical variance-penalized loss for both masks, and records a failure when
the invariant mask scores worse.

The empirical penalty here is the sum of squared deviations of per-domain
losses around their mean (the convention under which the noise decomposition
below is exact); the training-time objective uses the population variance,
which differs only by a factor absorbed into the penalty weight.
"""

from __future__ import annotations

import csv as _csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Prop1Config",
    "TrialDraw",
    "DomainError",
    "g_inverse",
    "threshold_sigma_r",
    "rex_empirical_loss",
    "draw_trial",
    "decompose_terms",
    "simulate_rex_choice",
    "write_results_csv",
]


class DomainError(ValueError):
    """Argument outside the solvable range of the inverse CDF."""


def g_inverse(q: float, lambda_exp: float = 1.0) -> float:
    """Solve 1 - exp(-lambda * z) / 2 = q for z > 0.

    That expression is the CDF, on the positive half-line, of the difference
    of two iid exponential draws; it maps [0, inf) onto [1/2, 1), so only
    q in (1/2, 1) is solvable. q = 3/4 gives ln(2) / lambda.
    """
    if lambda_exp <= 0:
        raise ValueError("lambda_exp must be positive")
    if not 0.5 < q < 1.0:
        raise DomainError(
            f"q={q} outside the solvable range (1/2, 1) of the positive-side CDF"
        )
    return -np.log(2.0 * (1.0 - q)) / lambda_exp


def threshold_sigma_r(n: int, domains: int, delta: float,
                      lambda_exp: float = 1.0) -> float:
    """Cross-domain risk std at which ``domains`` equals the failure threshold

    domains = sigma_r * sqrt(n) / (delta * g_inverse(3/4)).
    """
    return domains * delta * g_inverse(0.75, lambda_exp) / np.sqrt(n)


@dataclass(frozen=True)
class Prop1Config:
    n: int
    domains: int
    sigma_r: float
    lambda_exp: float = 1.0
    delta: float = 1.0
    lambda_rex: float = 2.0
    r_bar: float = 1.0
    trials: int = 1000
    seed: int = 0
    tie_sigmas: bool = False  # draw one per-sample std shared by both masks

    def __post_init__(self):
        if self.n < 1 or self.domains < 1 or self.trials < 1:
            raise ValueError("n, domains and trials must be positive")
        if self.n % self.domains != 0:
            raise ValueError(
                f"n={self.n} must be divisible by the domain count {self.domains}"
            )
        if self.sigma_r < 0 or self.delta < 0:
            raise ValueError("sigma_r and delta must be nonnegative")
        if self.lambda_exp <= 0 or self.lambda_rex < 0:
            raise ValueError("lambda_exp must be positive, lambda_rex nonnegative")


@dataclass
class TrialDraw:
    """Raw draws of one trial, retained for the noise decomposition."""

    sigma_v: float
    sigma_s: float
    env_means_v: np.ndarray  # constant vector, length = domains
    env_means_s: np.ndarray
    eps_v: np.ndarray  # per-domain means of the per-sample deviations
    eps_s: np.ndarray
    lambda_rex: float


def rex_empirical_loss(env_means: np.ndarray, eps: np.ndarray,
                       lambda_rex: float) -> float:
    """Sum of empirical env losses + weight * sum of squared deviations."""
    rhat = env_means + eps
    dev = rhat - rhat.mean()
    return float(rhat.sum() + lambda_rex * np.sum(dev * dev))


def draw_trial(config: Prop1Config, rng: np.random.Generator) -> TrialDraw:
    per_env = config.n // config.domains
    sigma_v = rng.exponential(1.0 / config.lambda_exp)
    sigma_s = sigma_v if config.tie_sigmas else rng.exponential(1.0 / config.lambda_exp)
    env_means_v = np.full(config.domains, config.r_bar + config.delta)
    env_means_s = config.r_bar + config.sigma_r * rng.standard_normal(config.domains)
    eps_v = rng.normal(0.0, sigma_v, size=(config.domains, per_env)).mean(axis=1)
    eps_s = rng.normal(0.0, sigma_s, size=(config.domains, per_env)).mean(axis=1)
    return TrialDraw(sigma_v, sigma_s, env_means_v, env_means_s,
                     eps_v, eps_s, config.lambda_rex)


def decompose_terms(trial: TrialDraw, mask: str = "s") -> dict[str, float]:
    """Split the empirical loss minus the summed true risks into seven terms.

    a0 is the weighted spread of the true per-domain risks (the signal the
    penalty is supposed to measure); a1 is the risk-sum estimation noise; a2
    through a5 are the noise and cross contributions entering the penalty;
    a6 is zero because the true deviations around their own mean sum to zero.
    The terms sum exactly to loss - sum(true env means).
    """
    if mask not in ("v", "s"):
        raise ValueError("mask must be 'v' or 's'")
    means = trial.env_means_v if mask == "v" else trial.env_means_s
    eps = trial.eps_v if mask == "v" else trial.eps_s
    lam = trial.lambda_rex
    m = means.shape[0]
    r_bar = means.mean()
    dev = means - r_bar
    d_bar = eps.mean()
    terms = {
        "a0": lam * float(np.sum(dev * dev)),
        "a1": float(np.sum(eps)),
        "a2": lam * float(np.sum(eps * eps)),
        "a3": lam * m * d_bar * d_bar,
        "a4": -2.0 * lam * m * d_bar * d_bar,
        "a5": 2.0 * lam * float(np.sum(eps * dev)),
        "a6": -2.0 * lam * d_bar * float(np.sum(dev)),
    }
    return terms


def _wilson_interval(successes: int, trials: int, z: float = 1.959963984540054):
    if trials == 0:
        return 0.0, 1.0
    phat = successes / trials
    denom = 1.0 + z * z / trials
    center = (phat + z * z / (2 * trials)) / denom
    half = z * np.sqrt(phat * (1 - phat) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def simulate_rex_choice(config: Prop1Config, keep_losses: bool = True) -> dict:
    """Failure frequency of variance-penalized selection over many trials.

    A failure is a trial where the invariant mask's empirical loss exceeds the
    spurious mask's. Returns the rate with a 95% Wilson interval, the
    per-trial losses, and the mean summed squared per-domain noise (the
    quantity that grows quadratically with the domain count at fixed n).
    """
    rng = np.random.default_rng(config.seed)
    per_env = config.n // config.domains
    failures = 0
    losses_v = np.empty(config.trials) if keep_losses else None
    losses_s = np.empty(config.trials) if keep_losses else None
    sq_noise_v = 0.0
    sq_noise_s = 0.0

    chunk = max(1, min(config.trials, int(2_000_000 / max(config.n, 1)) or 1))
    done = 0
    while done < config.trials:
        size = min(chunk, config.trials - done)
        sigma_v = rng.exponential(1.0 / config.lambda_exp, size=size)
        if config.tie_sigmas:
            sigma_s = sigma_v
        else:
            sigma_s = rng.exponential(1.0 / config.lambda_exp, size=size)
        means_s = config.r_bar + config.sigma_r * rng.standard_normal(
            (size, config.domains))
        eps_v = rng.normal(size=(size, config.domains, per_env)).mean(axis=2)
        eps_v *= sigma_v[:, None]
        eps_s = rng.normal(size=(size, config.domains, per_env)).mean(axis=2)
        eps_s *= sigma_s[:, None]

        rhat_v = (config.r_bar + config.delta) + eps_v
        rhat_s = means_s + eps_s
        dev_v = rhat_v - rhat_v.mean(axis=1, keepdims=True)
        dev_s = rhat_s - rhat_s.mean(axis=1, keepdims=True)
        lv = rhat_v.sum(axis=1) + config.lambda_rex * np.sum(dev_v * dev_v, axis=1)
        ls = rhat_s.sum(axis=1) + config.lambda_rex * np.sum(dev_s * dev_s, axis=1)

        failures += int(np.sum(lv > ls))
        if keep_losses:
            losses_v[done:done + size] = lv
            losses_s[done:done + size] = ls
        sq_noise_v += float(np.sum(eps_v * eps_v))
        sq_noise_s += float(np.sum(eps_s * eps_s))
        done += size

    rate = failures / config.trials
    lo, hi = _wilson_interval(failures, config.trials)
    return {
        "failure_rate": rate,
        "ci_low": lo,
        "ci_high": hi,
        "trials": config.trials,
        "losses_v": losses_v,
        "losses_s": losses_s,
        "mean_sq_noise_v": sq_noise_v / config.trials,
        "mean_sq_noise_s": sq_noise_s / config.trials,
        "mc_standard_error": float(np.sqrt(max(rate * (1 - rate), 1e-12)
                                           / config.trials)),
    }


_CSV_FIELDS = [
    "n", "domains", "sigma_r", "delta", "lambda_exp", "lambda_rex", "trials",
    "seed", "failure_rate", "ci_low", "ci_high", "mean_sq_noise_v",
    "mean_sq_noise_s",
]


def write_results_csv(rows: list[tuple[Prop1Config, dict]], path) -> None:
    """One CSV row per (config, result)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = _csv.DictWriter(f, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for config, result in rows:
            writer.writerow({
                "n": config.n,
                "domains": config.domains,
                "sigma_r": config.sigma_r,
                "delta": config.delta,
                "lambda_exp": config.lambda_exp,
                "lambda_rex": config.lambda_rex,
                "trials": config.trials,
                "seed": config.seed,
                "failure_rate": result["failure_rate"],
                "ci_low": result["ci_low"],
                "ci_high": result["ci_high"],
                "mean_sq_noise_v": result["mean_sq_noise_v"],
                "mean_sq_noise_s": result["mean_sq_noise_s"],
            })
