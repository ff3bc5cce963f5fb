"""Model bundle: featurizer phi, classifier w, and the two domain regressors.

``h`` regresses the continuous domain index from features alone; ``g`` gets the
one-hot label concatenated to the features. All four parts are small MLPs (a
linear head is an MLP without hidden layers). Parameters live in a flat
``{name: array}`` dict so the trainer can treat them uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .ndmath import Tape, Var, add_bias, concat_cols, matmul, relu, sigmoid

__all__ = [
    "MlpSpec",
    "ModelBundle",
    "FeatureMask",
    "init_mlp",
    "init_bundle",
    "forward_mlp",
    "forward_bundle",
    "forward_scores",
    "apply_mask",
    "one_hot",
    "save_params",
    "load_params",
]

_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "identity": lambda v: v}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths input -> hidden... -> output, with a hidden activation."""

    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"all widths must be >= 1, got {self.widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def param_count(self) -> int:
        return sum(
            self.widths[i] * self.widths[i + 1] + self.widths[i + 1]
            for i in range(len(self.widths) - 1)
        )


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str) -> dict[str, np.ndarray]:
    """Uniform(-sqrt(6/(fan_in+fan_out)), +...) weights, zero biases."""
    params: dict[str, np.ndarray] = {}
    for i in range(len(spec.widths) - 1):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}.w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{prefix}.b{i}"] = np.zeros((1, fan_out))
    return params


def forward_mlp(spec: MlpSpec, leaves: dict[str, Var], prefix: str, x: Var) -> Var:
    """Apply the MLP on the tape; hidden activation per spec, identity output."""
    act = _ACTIVATIONS[spec.activation]
    h = x
    last = len(spec.widths) - 2
    for i in range(len(spec.widths) - 1):
        h = add_bias(matmul(h, leaves[f"{prefix}.w{i}"]), leaves[f"{prefix}.b{i}"])
        if i < last:
            h = act(h)
    return h


@dataclass
class ModelBundle:
    """The four trainable parts plus their flat parameter dict."""

    phi: MlpSpec
    w: MlpSpec
    h: MlpSpec
    g: MlpSpec
    n_classes: int
    d_t: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        z = self.phi.out_width
        if self.w.in_width != z:
            raise ValueError(
                f"classifier input width {self.w.in_width} != feature width {z}"
            )
        if self.h.in_width != z:
            raise ValueError(
                f"h input width {self.h.in_width} != feature width {z}"
            )
        if self.g.in_width != z + self.n_classes:
            raise ValueError(
                f"g input width {self.g.in_width} != feature width {z} "
                f"+ class count {self.n_classes}"
            )
        if self.h.out_width != self.d_t or self.g.out_width != self.d_t:
            raise ValueError(
                f"regressor output widths ({self.h.out_width}, {self.g.out_width}) "
                f"must equal domain dimension {self.d_t}"
            )

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            self.phi, self.w, self.h, self.g, self.n_classes, self.d_t,
            {k: v.copy() for k, v in self.params.items()},
        )

    def descent_names(self) -> list[str]:
        return [k for k in self.params if k.split(".")[0] in ("phi", "w", "h")]

    def ascent_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("g.")]


def init_bundle(
    phi: MlpSpec,
    w: MlpSpec,
    h: MlpSpec,
    g: MlpSpec,
    n_classes: int,
    d_t: int,
    seed: int,
) -> ModelBundle:
    """Deterministic bundle initialization for a fixed seed."""
    bundle = ModelBundle(phi, w, h, g, n_classes, d_t)
    rng = np.random.default_rng(seed)
    for prefix, spec in (("phi", phi), ("w", w), ("h", h), ("g", g)):
        bundle.params.update(init_mlp(spec, rng, prefix))
    return bundle


def one_hot(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y).astype(np.intp).ravel()
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels outside [0, {n_classes})")
    out = np.zeros((y.shape[0], n_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _leaves(tape: Tape, bundle: ModelBundle) -> dict[str, Var]:
    return {name: tape.leaf(arr, name) for name, arr in bundle.params.items()}


def forward_bundle(tape: Tape, bundle: ModelBundle, x, y, leaves=None):
    """Record z = phi(x), logits = w(z), t_h = h(z), t_g = g(z (+) onehot(y)).

    Returns (logits, z, t_h, t_g, leaves); pass ``leaves`` back in to reuse
    already-registered parameters on the same tape.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != bundle.phi.in_width:
        raise ValueError(
            f"batch feature width {x.shape[1] if x.ndim == 2 else x.shape} "
            f"!= featurizer input width {bundle.phi.in_width}"
        )
    if leaves is None:
        leaves = _leaves(tape, bundle)
    xv = tape.const(x)
    z = forward_mlp(bundle.phi, leaves, "phi", xv)
    logits = forward_mlp(bundle.w, leaves, "w", z)
    t_h = forward_mlp(bundle.h, leaves, "h", z)
    yv = tape.const(one_hot(y, bundle.n_classes))
    t_g = forward_mlp(bundle.g, leaves, "g", concat_cols(z, yv))
    return logits, z, t_h, t_g, leaves


def forward_scores(bundle: ModelBundle, x) -> np.ndarray:
    """Plain-array class logits for prediction (no labels, no gradients)."""
    tape = Tape()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != bundle.phi.in_width:
        raise ValueError(
            f"batch feature width {x.shape[1] if x.ndim == 2 else x.shape} "
            f"!= featurizer input width {bundle.phi.in_width}"
        )
    leaves = _leaves(tape, bundle)
    z = forward_mlp(bundle.phi, leaves, "phi", tape.const(x))
    return forward_mlp(bundle.w, leaves, "w", z).value


@dataclass(frozen=True)
class FeatureMask:
    """0/1 vector over input coordinates, split into an invariant block

    (first ``n_invariant`` coordinates) and a spurious block (the rest).
    """

    values: np.ndarray
    n_invariant: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all((vals == 0.0) | (vals == 1.0)):
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "values", vals)

    @classmethod
    def invariant_only(cls, n_invariant: int, n_spurious: int) -> "FeatureMask":
        v = np.concatenate([np.ones(n_invariant), np.zeros(n_spurious)])
        return cls(v, n_invariant)

    @classmethod
    def spurious_only(cls, n_invariant: int, n_spurious: int) -> "FeatureMask":
        v = np.concatenate([np.zeros(n_invariant), np.ones(n_spurious)])
        return cls(v, n_invariant)


def apply_mask(mask: FeatureMask, x) -> np.ndarray:
    """Coordinatewise product; unmasked coordinates pass through exactly."""
    x = np.asarray(x, dtype=np.float64)
    width = x.shape[-1]
    if mask.values.shape[0] != width:
        raise ValueError(
            f"mask length {mask.values.shape[0]} != feature width {width}"
        )
    return x * mask.values


def save_params(bundle: ModelBundle, path) -> None:
    """Flat JSON snapshot {name: {shape, values}} for reproducibility."""
    payload = {
        name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
        for name, arr in bundle.params.items()
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)


def load_params(bundle: ModelBundle, path) -> ModelBundle:
    """Load a snapshot into a copy of the bundle; shapes must match."""
    with open(path) as f:
        payload = json.load(f)
    out = bundle.copy()
    for name, arr in out.params.items():
        if name not in payload:
            raise ValueError(f"snapshot is missing parameter {name!r}")
        entry = payload[name]
        if tuple(entry["shape"]) != arr.shape:
            raise ValueError(
                f"snapshot shape {tuple(entry['shape'])} != expected "
                f"{arr.shape} for {name!r}"
            )
        out.params[name] = np.asarray(entry["values"], dtype=np.float64).reshape(arr.shape)
    return out
