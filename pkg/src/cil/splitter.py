"""Discretize continuous domain indices into M categorical environments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import Dataset

__all__ = ["EnvAssignment", "equal_split", "quantile_split"]


@dataclass(frozen=True)
class EnvAssignment:
    """Per-sample environment id in 0..M-1, plus the M+1 bin edges.

    Empty bins keep their ids (no renumbering) so sweeps over M stay
    comparable; they are listed in ``empty_bins`` and env-based losses skip
    them.
    """

    env_ids: np.ndarray
    edges: np.ndarray
    M: int

    @property
    def empty_bins(self) -> list[int]:
        present = set(np.unique(self.env_ids).tolist())
        return [m for m in range(self.M) if m not in present]

    def members(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.env_ids == m)


def _check(dataset: Dataset, M: int):
    if M < 1:
        raise ValueError(f"split count must be >= 1, got {M}")
    if dataset.t.shape[1] != 1:
        raise ValueError(
            f"splitting needs a scalar domain index, got d_t={dataset.t.shape[1]}"
        )
    return dataset.t[:, 0]


def equal_split(dataset: Dataset, M: int) -> EnvAssignment:
    """M equal-width bins over [min t, max t], right-closed on the last."""
    t = _check(dataset, M)
    lo, hi = float(t.min()), float(t.max())
    edges = np.linspace(lo, hi, M + 1)
    if hi == lo:
        env = np.zeros(t.shape[0], dtype=np.intp)
    else:
        u = (t - lo) / (hi - lo)
        env = np.clip(np.floor(u * M).astype(np.intp), 0, M - 1)
    return EnvAssignment(env, edges, M)


def quantile_split(dataset: Dataset, M: int) -> EnvAssignment:
    """Count-balanced bins: per-bin counts within +-1 for distinct t values.

    Assignment depends only on each sample's value rank (order-invariant);
    duplicated t values share the bin of their midpoint rank.
    """
    t = _check(dataset, M)
    n = t.shape[0]
    values, counts = np.unique(t, return_counts=True)
    cum_before = np.concatenate([[0], np.cumsum(counts)[:-1]])
    midrank = cum_before + counts / 2.0
    value_bin = np.clip((midrank * M / n).astype(np.intp), 0, M - 1)
    env = value_bin[np.searchsorted(values, t)]

    edges = np.empty(M + 1)
    edges[0], edges[M] = values[0], values[-1]
    for m in range(1, M):
        left = values[value_bin < m]
        right = values[value_bin >= m]
        if left.size and right.size:
            edges[m] = 0.5 * (left.max() + right.min())
        else:
            edges[m] = edges[m - 1]
    return EnvAssignment(env, edges, M)
