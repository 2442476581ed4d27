"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-based engine: every ``Tensor`` wraps a numpy float64 array, and
interior nodes keep a closure that routes the output adjoint back to their
parents. Everything is double precision, and a NaN or infinity anywhere
raises immediately instead of propagating into weight trajectories.
"""
from __future__ import annotations

import math
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")
LOSS_KINDS = ("cross_entropy", "mse", "masked_mse")

# Layer spec entry: (in_dim, out_dim, activation)
LayerSpec = Sequence[Tuple[int, int, str]]


class NonFiniteError(ValueError):
    """A NaN or infinity appeared in a tensor value."""


class RecordConsumedError(RuntimeError):
    """backward() was called twice on the same differentiation record."""


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in {what}")
    return arr


class Tensor:
    """Dense float64 array node in a differentiation record.

    Leaves (parameters, inputs) have no parents. Interior nodes carry the
    parent references and adjoint closure that ``backward`` replays.
    """

    __slots__ = ("data", "grad", "_parents", "_push", "_consumed")

    def __init__(self, values, _parents: Tuple["Tensor", ...] = (), _push: Optional[Callable[[], None]] = None):
        arr = np.asarray(values, dtype=np.float64)
        self.data = _finite(arr, "tensor")
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._push = _push
        self._consumed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # Scalar-node arithmetic, enough to express weighted loss sums.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint over the axes numpy broadcast when producing it."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def push():
        _accumulate(a, _unbroadcast(out.grad, a.data.shape))
        _accumulate(b, _unbroadcast(out.grad, b.data.shape))

    out = Tensor(out_data, (a, b), push)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not math.isfinite(c):
        raise NonFiniteError("non-finite scale factor")

    def push():
        _accumulate(a, c * out.grad)

    out = Tensor(a.data * c, (a,), push)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def push():
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)

    out = Tensor(out_data, (a, b), push)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def push():
        _accumulate(a, out.grad * mask)

    out = Tensor(np.where(mask, a.data, 0.0), (a,), push)
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def push():
        _accumulate(a, out.grad * (1.0 - t * t))

    out = Tensor(t, (a,), push)
    return out


def apply_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "linear":
        return x
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation kind {kind!r}; expected one of {ACTIVATIONS}")


class ParamSet:
    """Ordered association of unique parameter name -> leaf Tensor.

    Iteration order is insertion order; gradient flattening and cosine
    alignments depend on it, so it is part of the contract.
    """

    def __init__(self, entries=None):
        self._entries: Dict[str, Tensor] = {}
        if entries is not None:
            items = entries.items() if hasattr(entries, "items") else entries
            for name, tensor in items:
                self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        self._entries[name] = tensor
        return tensor

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def total_scalars(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def merged(self, other: "ParamSet") -> "ParamSet":
        out = ParamSet()
        for name, t in self.items():
            out.add(name, t)
        for name, t in other.items():
            out.add(name, t)
        return out

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def restore(self, snap: Dict[str, np.ndarray]) -> None:
        for name, t in self.items():
            t.data = snap[name].copy()


class GradientMap:
    """Association of parameter name -> gradient array, aligned to a ParamSet."""

    def __init__(self, entries: Dict[str, np.ndarray]):
        self._entries = dict(entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def keys(self) -> List[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def flatten(self, order: Optional[Sequence[str]] = None) -> np.ndarray:
        names = list(order) if order is not None else list(self._entries)
        return np.concatenate([self._entries[n].ravel() for n in names])


def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss_node: Tensor, params: ParamSet) -> GradientMap:
    """Reverse sweep from a scalar loss; returns d(loss)/d(param) per name.

    Parameters that did not influence the loss map to zero tensors. A record
    can be swept once; reuse raises RecordConsumedError.
    """
    if loss_node.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss_node.shape}")
    if loss_node._consumed:
        raise RecordConsumedError("differentiation record already consumed")
    loss_node._consumed = True

    order = _topo_order(loss_node)
    for node in order:
        node.grad = None
    loss_node.grad = np.ones_like(loss_node.data)
    for node in reversed(order):
        if node._push is not None and node.grad is not None:
            node._push()

    out: Dict[str, np.ndarray] = {}
    for name, t in params.items():
        out[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
    return GradientMap(out)


def forward_mlp(params: ParamSet, layer_spec: LayerSpec, inputs, name_prefix: str = "") -> Tensor:
    """Evaluate a feed-forward stack of affine layers plus activations.

    Parameter names follow ``{prefix}layer{k}.weight`` / ``{prefix}layer{k}.bias``.
    The returned Tensor retains the record needed by ``backward``.
    """
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    if x.data.ndim != 2:
        raise ValueError(f"inputs must be [batch x features], got shape {x.shape}")
    if not layer_spec:
        raise ValueError("empty layer spec")
    if x.data.shape[1] != layer_spec[0][0]:
        raise ValueError(f"input width {x.data.shape[1]} != first layer in_dim {layer_spec[0][0]}")
    for k in range(len(layer_spec) - 1):
        if layer_spec[k][1] != layer_spec[k + 1][0]:
            raise ValueError(f"layer {k} out_dim {layer_spec[k][1]} != layer {k + 1} in_dim {layer_spec[k + 1][0]}")

    for k, (in_dim, out_dim, activation) in enumerate(layer_spec):
        w = params[f"{name_prefix}layer{k}.weight"]
        b = params[f"{name_prefix}layer{k}.bias"]
        if w.data.shape != (in_dim, out_dim):
            raise ValueError(f"layer {k} weight shape {w.shape} != ({in_dim}, {out_dim})")
        if b.data.shape != (out_dim,):
            raise ValueError(f"layer {k} bias shape {b.shape} != ({out_dim},)")
        x = apply_activation(add(matmul(x, w), b), activation)
    return x


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    y = np.asarray(labels, dtype=np.int64).ravel()
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"cross_entropy expects [batch x classes] logits, got {logits.shape}")
    m, k = z.shape
    if m == 0:
        raise ValueError("empty batch")
    if y.shape[0] != m:
        raise ValueError(f"{m} rows of logits but {y.shape[0]} labels")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"label out of class range [0, {k})")

    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    per_example = lse - z[np.arange(m), y]

    def push():
        p = np.exp(z - lse[:, None])
        p[np.arange(m), y] -= 1.0
        _accumulate(logits, out.grad * p / m)

    out = Tensor(per_example.mean(), (logits,), push)
    return out


def mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.data.shape:
        raise ValueError(f"mse shape mismatch: pred {pred.shape} vs target {t.shape}")
    if pred.data.size == 0:
        raise ValueError("empty batch")
    diff = pred.data - t

    def push():
        _accumulate(pred, out.grad * 2.0 * diff / diff.size)

    out = Tensor(np.mean(diff * diff), (pred,), push)
    return out


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """Squared difference averaged over the entries where mask == 1."""
    t = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if t.shape != pred.data.shape or m.shape != pred.data.shape:
        raise ValueError(
            f"masked_mse shape mismatch: pred {pred.shape}, target {t.shape}, mask {m.shape}"
        )
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("mask must contain only 0s and 1s")
    total = m.sum()
    if total == 0:
        raise ValueError("all-zero mask")
    diff = pred.data - t

    def push():
        _accumulate(pred, out.grad * 2.0 * m * diff / total)

    out = Tensor((m * diff * diff).sum() / total, (pred,), push)
    return out


def loss(outputs: Tensor, targets, kind: str, mask=None) -> Tensor:
    """Dispatch to one of the supported scalar losses."""
    if kind == "cross_entropy":
        return cross_entropy(outputs, targets)
    if kind == "mse":
        return mse(outputs, targets)
    if kind == "masked_mse":
        if mask is None:
            raise ValueError("masked_mse requires a mask")
        return masked_mse(outputs, targets, mask)
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def grad_check(eval_fn: Callable[[ParamSet], Tensor], params: ParamSet, step: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences.

    The relative error denominator is max(1, |analytic|, |numeric|), so tiny
    gradients are compared on an absolute scale.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = backward(eval_fn(params), params)
    worst = 0.0
    for name, tensor in params.items():
        flat = tensor.data.ravel()
        grad_flat = analytic[name].ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = eval_fn(params).item()
            flat[j] = orig - step
            f_minus = eval_fn(params).item()
            flat[j] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NonFiniteError("eval returned non-finite value during grad check")
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = grad_flat[j]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, rel)
    return worst
