"""Reverse-mode automatic differentiation for small dense networks.

A define-by-run tape over float64 numpy arrays: every operation returns a
``Tensor`` node that remembers its parents and how to route the output
adjoint back to them.  The tape is implicit in the parent links and is
rebuilt on every forward pass, so batch shapes may change freely between
training steps.  Everything trainable in this package (samplers,
discriminators, decoders) is a ``ParamSet`` of leaf tensors driven through
these ops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.2


class DimensionError(ValueError):
    """Shapes of connected operations do not line up."""


class GradientError(RuntimeError):
    """Non-finite value produced on the tape or in a gradient."""


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise GradientError(f"non-finite values produced by op '{op}'")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the computation graph.

    Leaves wrap parameter or constant values; interior nodes carry a
    backward closure mapping the node's adjoint to parent adjoints.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    """Leaf holding values the backward pass ignores."""
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary(name, a: Tensor, b: Tensor, out_data, da, db) -> Tensor:
    out = Tensor(_check_finite(out_data, name), parents=(a, b))

    def backward(g):
        return _unbroadcast(da(g), a.shape), _unbroadcast(db(g), b.shape)

    out._backward = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _binary("mul", a, b, ad * bd, lambda g: g * bd, lambda g: g * ad)


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _binary(
        "div", a, b, ad / bd, lambda g: g / bd, lambda g: -g * ad / (bd * bd)
    )


def neg(a: Tensor) -> Tensor:
    return _unary("neg", a, -a.data, lambda g: -g)


def _unary(name, a: Tensor, out_data, da) -> Tensor:
    out = Tensor(_check_finite(out_data, name), parents=(a,))
    out._backward = lambda g: (da(g),)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    ad, bd = a.data, b.data
    return _binary(
        "matmul", a, b, ad @ bd, lambda g: g @ bd.T, lambda g: ad.T @ g
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _unary("relu", a, np.where(mask, a.data, 0.0), lambda g: g * mask)


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, slope * a.data)
    return _unary("leaky_relu", a, out, lambda g: g * np.where(mask, 1.0, slope))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _unary("sigmoid", a, s, lambda g: g * s * (1.0 - s))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe; backward is the sigmoid."""
    x = a.data
    out = np.logaddexp(0.0, x)
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _unary("softplus", a, out, lambda g: g * s)


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(ad)
    return _unary("log", a, out, lambda g: g / ad)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _unary("exp", a, out, lambda g: g * out)


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def da(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).astype(np.float64)
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(np.float64)

    return _unary("sum", a, out, da)


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def da(g):
        if axis is None:
            return np.broadcast_to(g / count, a.shape).astype(np.float64)
        return np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).astype(np.float64)

    return _unary("mean", a, out, da)


def abs_power(a: Tensor, p: float) -> Tensor:
    """|x|^p elementwise, p > 0.  The kink at 0 uses subgradient 0."""
    if p <= 0:
        raise ValueError(f"abs_power exponent must be positive, got {p}")
    x = a.data
    out = np.abs(x) ** p

    def da(g):
        base = np.where(x == 0.0, 0.0, p * np.abs(x) ** (p - 1) * np.sign(x))
        return g * base

    return _unary("abs_power", a, out, da)


# Ops covered by the finite-difference sweep in the test suite.
PRIMITIVE_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "log": log,
    "exp": exp,
    "sum": tsum,
    "mean": tmean,
    "abs_power": abs_power,
}


def _toposort(root: Tensor) -> list[Tensor]:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) into every node's .grad, exactly once each."""
    if loss.data.shape not in ((), (1,)):
        raise DimensionError(
            f"backward needs a scalar loss, got shape {loss.data.shape}"
        )
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if not np.all(np.isfinite(g)):
                raise GradientError("non-finite gradient during backward pass")
            parent.grad = g if parent.grad is None else parent.grad + g


class ParamSet:
    """Named parameter tensors with a flat-vector view for optimiser steps.

    Insertion order is the flattening order; JSON serialisation sorts names
    so the wire format is deterministic.
    """

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._tensors: dict[str, Tensor] = {}
        if arrays:
            for name, value in arrays.items():
                self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.array(value, dtype=np.float64))
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def value(self, name: str) -> np.ndarray:
        return self._tensors[name].data

    def size(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def flatten(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._tensors.values()])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size(),):
            raise DimensionError(
                f"flat vector has size {vec.shape}, ParamSet needs ({self.size()},)"
            )
        out, offset = ParamSet(), 0
        for name, t in self._tensors.items():
            n = t.data.size
            out.add(name, vec[offset : offset + n].reshape(t.data.shape))
            offset += n
        return out

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._tensors.items():
            out.add(name, t.data.copy())
        return out

    def to_json(self) -> str:
        payload = {
            name: {"shape": list(t.data.shape), "values": t.data.ravel().tolist()}
            for name, t in sorted(self._tensors.items())
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ParamSet":
        payload = json.loads(text)
        out = cls()
        for name in sorted(payload):
            entry = payload[name]
            out.add(name, np.array(entry["values"]).reshape(entry["shape"]))
        return out


def grad(loss: Tensor, params: ParamSet) -> dict[str, np.ndarray]:
    """d(loss)/d(p) for every parameter; exact zeros off the loss path."""
    backward(loss)
    out = {}
    for name, t in params.tensors().items():
        out[name] = np.zeros_like(t.data) if t.grad is None else t.grad
    return out


def init_mlp_params(
    layer_sizes: list[int], rng: np.random.Generator, scale: float | None = None
) -> ParamSet:
    """He-style Gaussian init for the w0/b0/w1/b1/... naming scheme."""
    params = ParamSet()
    for i, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        s = scale if scale is not None else np.sqrt(2.0 / n_in)
        params.add(f"w{i}", s * rng.standard_normal((n_in, n_out)))
        params.add(f"b{i}", np.zeros(n_out))
    return params


_ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "linear": lambda t: t,
}


def forward_mlp(
    params: ParamSet,
    layer_sizes: list[int],
    activation: str,
    inputs: Tensor,
) -> Tensor:
    """Dense net over a (batch, layer_sizes[0]) input; hidden activations
    per `activation`, linear output layer."""
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if inputs.data.ndim != 2 or inputs.data.shape[1] != layer_sizes[0]:
        raise DimensionError(
            f"input shape {inputs.data.shape} does not feed a first layer of size "
            f"{layer_sizes[0]}"
        )
    act = _ACTIVATIONS[activation]
    h = inputs
    n_layers = len(layer_sizes) - 1
    for i in range(n_layers):
        w, b = params[f"w{i}"], params[f"b{i}"]
        if w.data.shape != (layer_sizes[i], layer_sizes[i + 1]):
            raise DimensionError(
                f"layer {i} weight shape {w.data.shape} does not match sizes "
                f"{layer_sizes[i]}->{layer_sizes[i + 1]}"
            )
        h = add(matmul(h, w), b)
        if i < n_layers - 1:
            h = act(h)
    return h


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the ParamSet."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(
    params: ParamSet,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[ParamSet, AdamState]:
    """One Adam update; returns fresh params and advanced state."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name in params.names():
        if not np.all(np.isfinite(grads[name])):
            raise GradientError(f"NaN/inf gradient for parameter {name!r}")
    t = state.t + 1
    new = ParamSet()
    m_out, v_out = {}, {}
    for name, tensor in params.tensors().items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(tensor.data))
        v = state.v.get(name, np.zeros_like(tensor.data))
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        new.add(name, tensor.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
        m_out[name], v_out[name] = m, v
    return new, AdamState(m=m_out, v=v_out, t=t)
