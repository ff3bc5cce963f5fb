"""Dense float64 tensors plus a reverse-mode differentiation tape.

Everything is 2-D and row-major. A :class:`Tape` is a flat list of recorded
primitive operations (a Wengert list); :class:`Var` is a lightweight handle
into it. Tapes are rebuilt per forward pass and must stay confined to one
thread. Broadcasting is deliberately restricted to two cases: a 1x1 scalar
against anything, and a 1xd row bias added to an nxd matrix.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "Var",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "relu",
    "sigmoid",
    "square",
    "sum_all",
    "mean_all",
    "concat_cols",
    "gather_rows",
    "stack_scalars",
    "detach",
    "elementwise",
    "loss_bce",
    "loss_softmax_ce",
    "loss_mse",
    "pop_variance",
    "softmax_rows",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"only rank <= 2 data is supported, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """Immutable 2-D float64 array. Non-finite entries are rejected unless

    ``allow_nonfinite=True`` is passed (diagnostics only).
    """

    __slots__ = ("data",)

    def __init__(self, data, allow_nonfinite: bool = False):
        arr = _as_array(data)
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains NaN or Inf entries")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _value_of(x) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    if isinstance(x, Tensor):
        return x.data
    return _as_array(x)


class _Node:
    __slots__ = ("parents", "value", "vjp", "name", "adjoint")

    def __init__(self, parents, value, vjp, name=None):
        self.parents = parents
        self.value = value
        self.vjp = vjp  # callable(out_adjoint) -> tuple of parent adjoints
        self.name = name
        self.adjoint = None


class Var:
    """Handle to one tape node. Supports the usual arithmetic operators."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.index].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        v = self.value
        if v.size != 1:
            raise DimensionError(f"item() on non-scalar of shape {v.shape}")
        return float(v.reshape(()))

    def __add__(self, other):
        return add(self, _coerce(self.tape, other))

    def __radd__(self, other):
        return add(_coerce(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _coerce(self.tape, other))

    def __rsub__(self, other):
        return sub(_coerce(self.tape, other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _coerce(self.tape, other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _coerce(self.tape, other))

    def __repr__(self):
        return f"Var(index={self.index}, shape={self.shape})"


def _coerce(tape: "Tape", x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("cannot mix variables from different tapes")
        return x
    return tape.const(x)


class Tape:
    """Ordered record of primitive operations with per-node adjoints.

    Parent indices always precede child indices, so a single reverse sweep
    implements the chain rule. One tape per forward pass, one thread per tape.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaf_names: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, parents, value, vjp, name=None) -> Var:
        node = _Node(parents, value, vjp, name)
        self._nodes.append(node)
        return Var(self, len(self._nodes) - 1)

    def leaf(self, data, name: str) -> Var:
        """Differentiable input. ``backward`` reports adjoints keyed by name."""
        if name in self._leaf_names:
            raise ValueError(f"duplicate leaf name {name!r}")
        var = self._record((), _value_of(data).copy(), None, name=name)
        self._leaf_names[name] = var.index
        return var

    def const(self, data) -> Var:
        """Non-differentiable input; receives no adjoint."""
        return self._record((), _value_of(data), None)

    def values(self):
        return [n.value for n in self._nodes]

    def adjoints(self):
        return [n.adjoint for n in self._nodes]

    def adjoint_of(self, var: Var) -> np.ndarray | None:
        return self._nodes[var.index].adjoint

    def backward(self, root: Var) -> dict[str, np.ndarray]:
        """Adjoint of every named leaf w.r.t. a scalar root, by reverse sweep."""
        if root.tape is not self:
            raise ValueError("root does not belong to this tape")
        if root.value.size != 1:
            raise DimensionError(
                f"backward root must be scalar, got shape {root.value.shape}"
            )
        nodes = self._nodes
        for node in nodes:
            node.adjoint = None
        nodes[root.index].adjoint = np.ones_like(nodes[root.index].value)
        for i in range(root.index, -1, -1):
            node = nodes[i]
            if node.adjoint is None or node.vjp is None:
                continue
            parent_adjs = node.vjp(node.adjoint)
            for parent_idx, adj in zip(node.parents, parent_adjs):
                if adj is None:
                    continue
                parent = nodes[parent_idx]
                if parent.adjoint is None:
                    parent.adjoint = adj.copy()
                else:
                    parent.adjoint = parent.adjoint + adj
        return {
            name: (nodes[idx].adjoint
                   if nodes[idx].adjoint is not None
                   else np.zeros_like(nodes[idx].value))
            for name, idx in self._leaf_names.items()
        }


def _same_tape(a: Var, b: Var) -> Tape:
    if a.tape is not b.tape:
        raise ValueError("cannot mix variables from different tapes")
    return a.tape


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions differ: {av.shape} x {bv.shape}"
        )

    def vjp(g):
        return g @ bv.T, av.T @ g

    return tape._record((a.index, b.index), av @ bv, vjp)


def _binary_shapes(av: np.ndarray, bv: np.ndarray, opname: str):
    """Allowed: equal shapes, or one side 1x1 (scalar broadcast)."""
    if av.shape == bv.shape:
        return "equal"
    if av.size == 1:
        return "a_scalar"
    if bv.size == 1:
        return "b_scalar"
    raise DimensionError(f"{opname} shapes differ: {av.shape} vs {bv.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(1, 1)


def add(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    _binary_shapes(av, bv, "add")

    def vjp(g):
        return _reduce_to(g, av.shape), _reduce_to(g, bv.shape)

    return tape._record((a.index, b.index), av + bv, vjp)


def sub(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    _binary_shapes(av, bv, "sub")

    def vjp(g):
        return _reduce_to(g, av.shape), _reduce_to(-g, bv.shape)

    return tape._record((a.index, b.index), av - bv, vjp)


def mul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    _binary_shapes(av, bv, "mul")

    def vjp(g):
        return _reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)

    return tape._record((a.index, b.index), av * bv, vjp)


def scale(a: Var, c: float) -> Var:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return a.tape._record((a.index,), a.value * c, vjp)


def add_bias(x: Var, bias: Var) -> Var:
    """nxd matrix plus a 1xd row bias (the one permitted row broadcast)."""
    tape = _same_tape(x, bias)
    xv, bv = x.value, bias.value
    if bv.shape != (1, xv.shape[1]):
        raise DimensionError(
            f"add_bias expects bias shape (1, {xv.shape[1]}), got {bv.shape}"
        )

    def vjp(g):
        return g, np.sum(g, axis=0, keepdims=True)

    return tape._record((x.index, bias.index), xv + bv, vjp)


def relu(x: Var) -> Var:
    xv = x.value
    out = np.maximum(xv, 0.0)

    def vjp(g):
        return (g * (xv > 0.0),)

    return x.tape._record((x.index,), out, vjp)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Var) -> Var:
    out = _stable_sigmoid(x.value)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return x.tape._record((x.index,), out, vjp)


def square(x: Var) -> Var:
    xv = x.value

    def vjp(g):
        return (g * 2.0 * xv,)

    return x.tape._record((x.index,), xv * xv, vjp)


def sum_all(x: Var) -> Var:
    xv = x.value

    def vjp(g):
        return (np.full_like(xv, float(g.reshape(()))),)

    return x.tape._record((x.index,), np.sum(xv).reshape(1, 1), vjp)


def mean_all(x: Var) -> Var:
    xv = x.value
    n = xv.size

    def vjp(g):
        return (np.full_like(xv, float(g.reshape(())) / n),)

    return x.tape._record((x.index,), np.mean(xv).reshape(1, 1), vjp)


def concat_cols(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.shape[0] != bv.shape[0]:
        raise DimensionError(
            f"concat_cols row counts differ: {av.shape} vs {bv.shape}"
        )
    da = av.shape[1]

    def vjp(g):
        return g[:, :da], g[:, da:]

    return tape._record((a.index, b.index), np.hstack([av, bv]), vjp)


def gather_rows(x: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.intp).ravel()
    xv = x.value

    def vjp(g):
        out = np.zeros_like(xv)
        np.add.at(out, idx, g)
        return (out,)

    return x.tape._record((x.index,), xv[idx], vjp)


def stack_scalars(parts: list[Var]) -> Var:
    """Stack 1x1 scalars into an Mx1 column."""
    if not parts:
        raise DimensionError("stack_scalars needs at least one scalar")
    tape = parts[0].tape
    for p in parts:
        _same_tape(parts[0], p)
        if p.value.size != 1:
            raise DimensionError(f"stack_scalars got non-scalar {p.shape}")
    value = np.array([[float(p.value.reshape(()))] for p in parts])

    def vjp(g):
        return tuple(g[i].reshape(1, 1).copy() for i in range(len(parts)))

    return tape._record(tuple(p.index for p in parts), value, vjp)


def detach(x: Var) -> Var:
    """Same value, no gradient path (a fresh constant leaf)."""
    return x.tape.const(x.value.copy())


_UNARY = {"relu": relu, "sigmoid": sigmoid, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, *args: Var) -> Var:
    """Dispatch by name: add/sub/mul (binary) or relu/sigmoid/square (unary)."""
    if op_kind in _UNARY:
        if len(args) != 1:
            raise DimensionError(f"{op_kind} takes one operand, got {len(args)}")
        return _UNARY[op_kind](args[0])
    if op_kind in _BINARY:
        if len(args) != 2:
            raise DimensionError(f"{op_kind} takes two operands, got {len(args)}")
        return _BINARY[op_kind](args[0], args[1])
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# losses


def _check_binary_labels(labels: np.ndarray):
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ValueError("labels must be binary 0/1")


def bce_per_sample(logits: Var, labels) -> Var:
    """Per-sample binary cross-entropy, softplus form: log(1+e^z) - y*z."""
    lv = _value_of(labels)
    zv = logits.value
    if lv.shape != zv.shape:
        raise DimensionError(
            f"bce shapes differ: logits {zv.shape} vs labels {lv.shape}"
        )
    _check_binary_labels(lv)
    softplus = np.maximum(zv, 0.0) + np.log1p(np.exp(-np.abs(zv)))
    out = softplus - lv * zv

    def vjp(g):
        return (g * (_stable_sigmoid(zv) - lv),)

    return logits.tape._record((logits.index,), out, vjp)


def loss_bce(logits: Var, labels) -> Var:
    """Mean binary cross-entropy over nx1 logits, log-sum-exp stable."""
    zv = logits.value
    if zv.shape[1] != 1:
        raise DimensionError(f"loss_bce expects nx1 logits, got {zv.shape}")
    if zv.shape[0] < 1:
        raise ValueError("loss_bce needs at least one sample")
    return mean_all(bce_per_sample(logits, labels))


def softmax_ce_per_sample(logits: Var, labels) -> Var:
    """Per-sample softmax cross-entropy; labels are integer class indices."""
    zv = logits.value
    idx = np.asarray(labels).astype(np.intp).ravel()
    if idx.shape[0] != zv.shape[0]:
        raise DimensionError(
            f"softmax_ce rows differ: logits {zv.shape} vs labels {idx.shape}"
        )
    if np.any(idx < 0) or np.any(idx >= zv.shape[1]):
        raise ValueError("class label outside [0, classes)")
    zmax = np.max(zv, axis=1, keepdims=True)
    lse = zmax + np.log(np.sum(np.exp(zv - zmax), axis=1, keepdims=True))
    out = lse - zv[np.arange(zv.shape[0]), idx].reshape(-1, 1)
    probs = np.exp(zv - lse)

    def vjp(g):
        grad = probs * g
        grad[np.arange(zv.shape[0]), idx] -= g.ravel()
        return (grad,)

    return logits.tape._record((logits.index,), out, vjp)


def loss_softmax_ce(logits: Var, labels) -> Var:
    return mean_all(softmax_ce_per_sample(logits, labels))


def softmax_rows(logits: Var) -> Var:
    """Row-wise softmax probabilities, max-subtracted for stability."""
    zv = logits.value
    zmax = np.max(zv, axis=1, keepdims=True)
    ez = np.exp(zv - zmax)
    probs = ez / np.sum(ez, axis=1, keepdims=True)

    def vjp(g):
        inner = np.sum(g * probs, axis=1, keepdims=True)
        return ((g - inner) * probs,)

    return logits.tape._record((logits.index,), probs, vjp)


def loss_mse(pred: Var, target) -> Var:
    """Mean over rows of the squared Euclidean row distance."""
    tape = pred.tape
    tv = _value_of(target)
    if tv.shape != pred.value.shape:
        raise DimensionError(
            f"loss_mse shapes differ: pred {pred.value.shape} vs target {tv.shape}"
        )
    n = pred.value.shape[0]
    diff = sub(pred, tape.const(tv))
    return scale(sum_all(square(diff)), 1.0 / n)


def pop_variance(scalars: list[Var]) -> Var:
    """Population variance of a list of tape scalars (divide by count)."""
    col = stack_scalars(scalars)
    m = mean_all(col)
    dev = sub(col, m)
    return mean_all(square(dev))
