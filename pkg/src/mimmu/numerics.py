"""Dense-array substrate: reverse-mode recording, flat parameter vectors, optimizers.

Everything is float64. A :class:`GradientRecorder` is rebuilt for every forward
pass; nodes are appended in execution order, so walking the list backwards is a
valid topological order for the reverse sweep.

:class:`Eager` exposes the same op surface but returns plain arrays, which lets
model code run unchanged with or without gradient recording.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class Node:
    __slots__ = ("value", "grad", "backward", "recorder", "name")

    def __init__(self, value, recorder, backward=None, name=None):
        self.value = value
        self.grad = None
        self.backward = backward
        self.recorder = recorder
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape})"


Operand = Union[Node, np.ndarray, float]


def _val(x):
    return x.value if isinstance(x, Node) else x


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _silu(x):
    s = expit(x)
    return x * s, s


class Eager:
    """Op surface without recording; every op returns an ndarray."""

    recording = False

    def add(self, a, b):
        return _val(a) + _val(b)

    def sub(self, a, b):
        return _val(a) - _val(b)

    def mul(self, a, b):
        return _val(a) * _val(b)

    def matmul(self, a, b):
        return _val(a) @ _val(b)

    def silu(self, a):
        return _silu(_val(a))[0]

    def tanh(self, a):
        return np.tanh(_val(a))

    def square(self, a):
        v = _val(a)
        return v * v

    def sum(self, a, axis=None):
        return np.sum(_val(a), axis=axis)

    def mean(self, a, axis=None):
        return np.mean(_val(a), axis=axis)

    def concat(self, parts, axis=-1):
        return np.concatenate([_val(p) for p in parts], axis=axis)

    def take(self, table, idx):
        return _val(table)[idx]

    def dot(self, a, b):
        return np.sum(_val(a) * _val(b), axis=-1)

    def piece(self, flat, start, stop, shape):
        return _val(flat)[start:stop].reshape(shape)

    def detach(self, a):
        return np.array(_val(a), copy=True)


class GradientRecorder(Eager):
    """Records one forward computation for a reverse sweep.

    Inputs that should receive gradients are created with :meth:`register`;
    anything passed to an op as a plain array is treated as a constant.
    """

    recording = True

    def __init__(self):
        self.nodes: list = []
        self.registered: Dict[str, Node] = {}

    def register(self, name: str, value) -> Node:
        if name in self.registered:
            raise ValueError(f"input {name!r} already registered")
        node = Node(np.asarray(value, dtype=DTYPE), self, name=name)
        self.nodes.append(node)
        self.registered[name] = node
        return node

    def _emit(self, value, parents: Sequence, backward: Callable) -> Operand:
        tracked = [p for p in parents if isinstance(p, Node)]
        for p in tracked:
            if p.recorder is not self:
                raise ValueError("operand belongs to a different recorder")
        if not tracked:
            return value
        node = Node(value, self)
        node.backward = lambda g: backward(g)
        self.nodes.append(node)
        return node

    @staticmethod
    def _acc(node, g):
        if isinstance(node, Node):
            node.grad = g if node.grad is None else node.grad + g

    def add(self, a, b):
        va, vb = _val(a), _val(b)
        out = va + vb

        def back(g):
            self._acc(a, _unbroadcast(g, np.shape(va)))
            self._acc(b, _unbroadcast(g, np.shape(vb)))

        return self._emit(out, (a, b), back)

    def sub(self, a, b):
        va, vb = _val(a), _val(b)
        out = va - vb

        def back(g):
            self._acc(a, _unbroadcast(g, np.shape(va)))
            self._acc(b, _unbroadcast(-g, np.shape(vb)))

        return self._emit(out, (a, b), back)

    def mul(self, a, b):
        va, vb = _val(a), _val(b)
        out = va * vb

        def back(g):
            if isinstance(a, Node):
                self._acc(a, _unbroadcast(g * vb, np.shape(va)))
            if isinstance(b, Node):
                self._acc(b, _unbroadcast(g * va, np.shape(vb)))

        return self._emit(out, (a, b), back)

    def matmul(self, a, b):
        va, vb = _val(a), _val(b)
        if va.ndim != 2 or vb.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        out = va @ vb

        def back(g):
            if isinstance(a, Node):
                self._acc(a, g @ vb.T)
            if isinstance(b, Node):
                self._acc(b, va.T @ g)

        return self._emit(out, (a, b), back)

    def silu(self, a):
        out, s = _silu(_val(a))
        va = _val(a)

        def back(g):
            self._acc(a, g * (s * (1.0 + va * (1.0 - s))))

        return self._emit(out, (a,), back)

    def tanh(self, a):
        out = np.tanh(_val(a))

        def back(g):
            self._acc(a, g * (1.0 - out * out))

        return self._emit(out, (a,), back)

    def square(self, a):
        va = _val(a)

        def back(g):
            self._acc(a, 2.0 * va * g)

        return self._emit(va * va, (a,), back)

    def sum(self, a, axis=None):
        va = _val(a)
        out = np.sum(va, axis=axis)

        def back(g):
            if axis is None:
                self._acc(a, np.broadcast_to(g, va.shape).copy())
            else:
                self._acc(a, np.broadcast_to(np.expand_dims(g, axis), va.shape).copy())

        return self._emit(out, (a,), back)

    def mean(self, a, axis=None):
        va = _val(a)
        n = va.size if axis is None else va.shape[axis]
        return self.mul(self.sum(a, axis=axis), 1.0 / n)

    def dot(self, a, b):
        return self.sum(self.mul(a, b), axis=-1)

    def concat(self, parts, axis=-1):
        vals = [_val(p) for p in parts]
        out = np.concatenate(vals, axis=axis)
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def back(g):
            for p, gp in zip(parts, np.split(g, bounds, axis=axis)):
                self._acc(p, gp)

        return self._emit(out, parts, back)

    def take(self, table, idx):
        vt = _val(table)
        idx = np.asarray(idx)
        out = vt[idx]

        def back(g):
            gt = np.zeros_like(vt)
            np.add.at(gt, idx, g)
            self._acc(table, gt)

        return self._emit(out, (table,), back)

    def piece(self, flat, start, stop, shape):
        vf = _val(flat)
        out = vf[start:stop].reshape(shape)

        def back(g):
            gf = np.zeros_like(vf)
            gf[start:stop] = g.reshape(-1)
            self._acc(flat, gf)

        return self._emit(out, (flat,), back)

    def detach(self, a):
        return np.array(_val(a), copy=True)


def grad(recorder: GradientRecorder, output) -> Dict[str, np.ndarray]:
    """Exact reverse-mode gradients of a scalar ``output`` w.r.t. registered inputs.

    Inputs that the output does not depend on get a zero gradient.
    """
    if not isinstance(output, Node) or output.recorder is not recorder:
        raise ValueError("output was not produced through this recorder")
    if output.value.size != 1:
        raise ValueError(f"output must be scalar, got shape {output.value.shape}")
    for node in recorder.nodes:
        node.grad = None
    output.grad = np.ones_like(output.value)
    stop = recorder.nodes.index(output)
    for node in reversed(recorder.nodes[: stop + 1]):
        if node.grad is not None and node.backward is not None:
            node.backward(node.grad)
    return {
        name: (node.grad if node.grad is not None else np.zeros_like(node.value))
        for name, node in recorder.registered.items()
    }


def vjp(recorder: GradientRecorder, output: Node, cotangent: np.ndarray) -> Dict[str, np.ndarray]:
    """Vector-Jacobian product: gradient of ``sum(cotangent * output)``."""
    if not isinstance(output, Node) or output.recorder is not recorder:
        raise ValueError("output was not produced through this recorder")
    total = recorder.sum(recorder.mul(output, np.asarray(cotangent, dtype=DTYPE)))
    return grad(recorder, total)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameters plus a ``name -> (start, stop, shape)`` layout."""

    data: np.ndarray
    layout: Tuple[Tuple[str, int, int, Tuple[int, ...]], ...]

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=DTYPE)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        pos = 0
        for name, start, stop, shape in self.layout:
            if start != pos or stop - start != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"layout entry {name!r} is not contiguous")
            pos = stop
        if pos != data.size:
            raise ValueError(f"layout covers {pos} values, vector has {data.size}")

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, Tuple[int, ...]], data=None) -> "ParamVector":
        layout, pos = [], 0
        for name, shape in shapes.items():
            n = int(np.prod(shape, dtype=np.int64))
            layout.append((name, pos, pos + n, tuple(int(s) for s in shape)))
            pos += n
        if data is None:
            data = np.zeros(pos)
        return cls(np.asarray(data, dtype=DTYPE), tuple(layout))

    @property
    def size(self) -> int:
        return self.data.size

    def entry(self, name: str):
        for entry in self.layout:
            if entry[0] == name:
                return entry
        raise KeyError(name)

    def view(self, name: str) -> np.ndarray:
        _, start, stop, shape = self.entry(name)
        return self.data[start:stop].reshape(shape)

    def replace(self, data: np.ndarray) -> "ParamVector":
        data = np.asarray(data, dtype=DTYPE)
        if data.shape != self.data.shape:
            raise ValueError(f"shape mismatch: {data.shape} vs {self.data.shape}")
        return ParamVector(data.copy(), self.layout)

    def to_bytes(self) -> bytes:
        return self.data.astype("<f8").tobytes()


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def _check_shapes(params: ParamVector, grads: np.ndarray):
    grads = np.asarray(grads, dtype=DTYPE)
    if grads.shape != params.data.shape:
        raise ValueError(f"gradient shape {grads.shape} does not match params {params.data.shape}")
    return grads


def sgd_step(params: ParamVector, grads, state: OptimizerState, lr: Optional[float] = None):
    grads = _check_shapes(params, grads)
    lr = state.lr if lr is None else lr
    state.step += 1
    return params.replace(params.data - lr * grads), state


def adam_step(params: ParamVector, grads, state: OptimizerState, lr: Optional[float] = None):
    """Adam with bias correction; ``state`` is updated in place and returned."""
    if state.kind == "sgd":
        return sgd_step(params, grads, state, lr)
    grads = _check_shapes(params, grads)
    if state.m is None:
        state.m = np.zeros_like(params.data)
        state.v = np.zeros_like(params.data)
    if state.m.shape != params.data.shape:
        raise ValueError("optimizer moments do not match parameter shape")
    lr = state.lr if lr is None else lr
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params.replace(params.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)), state


def ema_update(ema: ParamVector, current: ParamVector, decay: float) -> ParamVector:
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    if ema.data.shape != current.data.shape:
        raise ValueError("EMA and current parameters differ in shape")
    return ema.replace(decay * ema.data + (1.0 - decay) * current.data)


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=DTYPE)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(x.shape)


def relative_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
