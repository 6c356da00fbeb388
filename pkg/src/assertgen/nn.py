"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors hold 64-bit float numpy arrays.  Operations build a computation
graph of closures; backward() walks the graph in reverse topological order
and accumulates gradients into every tensor that requires them.  Operations
never mutate their inputs, and gradient accumulation adds rather than
overwrites, so a parameter used in several places receives the sum of all
its path contributions.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class NumericsError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Reverse-mode sweep; single use.

        The graph is released afterwards: backward closures capture their
        output tensor, and leaving those cycles to the garbage collector
        lets a training loop outrun it.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
        for node in topo:
            node._backward = None
            node._parents = ()

    # Operator sugar; scalars and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip graph construction inside the block.

    Inference and embedding paths run forward-only; without this they would
    build and then discard a cyclic graph per call.
    """
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _wire(out: Tensor, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward():
        _accumulate(a, _unbroadcast(out.grad, a.data.shape))
        _accumulate(b, _unbroadcast(out.grad, b.data.shape))

    return _wire(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward():
        _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))

    return _wire(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or higher operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward():
        _accumulate(a, _unbroadcast(out.grad @ b.data.swapaxes(-1, -2), a.data.shape))
        _accumulate(b, _unbroadcast(a.data.swapaxes(-1, -2) @ out.grad, b.data.shape))

    return _wire(out, (a, b), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def backward():
        _accumulate(a, out.grad / a.data)

    return _wire(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def backward():
        _accumulate(a, out.grad * out.data)

    return _wire(out, (a,), backward)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data**p)

    def backward():
        _accumulate(a, out.grad * p * a.data ** (p - 1.0))

    return _wire(out, (a,), backward)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward():
        g = out.grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _wire(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size / out.data.size

    def backward():
        g = out.grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape) / count)

    return _wire(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; masked entries may be -inf, never all of them."""
    a = as_tensor(a)
    peak = a.data.max(axis=axis, keepdims=True)
    if not np.isfinite(peak).all():
        raise NumericsError("softmax saw a fully masked or non-finite axis")
    shifted = np.exp(a.data - peak)
    y = shifted / shifted.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward():
        inner = (out.grad * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (out.grad - inner))

    return _wire(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    peak = a.data.max(axis=axis, keepdims=True)
    if not np.isfinite(peak).all():
        raise NumericsError("log_softmax saw a fully masked or non-finite axis")
    shifted = a.data - peak
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - logsum)

    def backward():
        soft = np.exp(out.data)
        _accumulate(a, out.grad - soft * out.grad.sum(axis=axis, keepdims=True))

    return _wire(out, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; the eps floor sends constant rows to 0."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)
    n = x.data.shape[-1]

    def backward():
        dxhat = out.grad * gain.data
        term = (dxhat * xhat).sum(axis=-1, keepdims=True)
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * term / n)
        _accumulate(x, dx)
        _accumulate(gain, _unbroadcast(out.grad * xhat, gain.data.shape))
        _accumulate(bias, _unbroadcast(out.grad, bias.data.shape))

    return _wire(out, (x, gain, bias), backward)


def gather(table, ids) -> Tensor:
    """Embedding lookup: rows of a [V, d] table selected by an integer array."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"gather ids outside [0, {table.data.shape[0]})")
    out = Tensor(table.data[ids])

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        _accumulate(table, g)

    return _wire(out, (table,), backward)


def take_along_last(x, ids) -> Tensor:
    """Select one entry per row along the last axis: out[...] = x[..., ids[...]]."""
    x = as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.data.shape[:-1]:
        raise ShapeError(f"ids shape {ids.shape} must match leading shape {x.data.shape[:-1]}")
    expanded = np.expand_dims(ids, -1)
    out = Tensor(np.take_along_axis(x.data, expanded, axis=-1).squeeze(-1))

    def backward():
        g = np.zeros_like(x.data)
        np.put_along_axis(g, expanded, np.expand_dims(out.grad, -1), axis=-1)
        _accumulate(x, g)

    return _wire(out, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    extents = [t.data.shape[axis] for t in tensors]

    def backward():
        start = 0
        for t, extent in zip(tensors, extents):
            index = [slice(None)] * out.grad.ndim
            index[axis] = slice(start, start + extent)
            _accumulate(t, out.grad[tuple(index)])
            start += extent

    return _wire(out, tuple(tensors), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward():
        _accumulate(a, out.grad.reshape(a.data.shape))

    return _wire(out, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward():
        _accumulate(a, np.transpose(out.grad, inverse))

    return _wire(out, (a,), backward)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[key])

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, key, out.grad)
        _accumulate(a, g)

    return _wire(out, (a,), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715


def gelu(a) -> Tensor:
    """Smooth tanh-form gelu; smoothness keeps finite-difference checks clean."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
    out = Tensor(0.5 * x * (1.0 + t))

    def backward():
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        _accumulate(a, out.grad * local)

    return _wire(out, (a,), backward)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is drawn once at graph-build time."""
    if rate <= 0.0:
        return as_tensor(a)
    if rate >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {rate}")
    a = as_tensor(a)
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return mul(a, mask)


def additive_mask(keep: np.ndarray) -> np.ndarray:
    """Boolean keep-array to an additive mask: 0 where kept, -inf where masked."""
    mask = np.zeros(keep.shape, dtype=np.float64)
    mask[~keep] = -np.inf
    return mask


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood of targets under the last-axis softmax.

    Positions whose target equals ignore_id are excluded from the mean.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} must match logits leading shape {logits.data.shape[:-1]}"
        )
    keep = np.ones(targets.shape, dtype=bool) if ignore_id is None else targets != ignore_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is ignored")
    vocab = logits.data.shape[-1]
    active = targets[keep]
    if active.size and (active.min() < 0 or active.max() >= vocab):
        raise ShapeError(f"target id outside [0, {vocab})")
    picked = take_along_last(log_softmax(logits, axis=-1), np.where(keep, targets, 0))
    return mul(tensor_sum(mul(picked, keep.astype(np.float64))), -1.0 / count)


def sequence_cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Per-sequence mean cross-entropy for [N, T, V] logits; returns shape [N]."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 3 or targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"expected [N, T, V] logits with [N, T] targets, got {logits.data.shape} and {targets.shape}"
        )
    keep = np.ones(targets.shape, dtype=bool) if ignore_id is None else targets != ignore_id
    counts = keep.sum(axis=-1)
    if (counts == 0).any():
        raise ValueError("sequence_cross_entropy: a sequence has no scored positions")
    vocab = logits.data.shape[-1]
    active = targets[keep]
    if active.size and (active.min() < 0 or active.max() >= vocab):
        raise ShapeError(f"target id outside [0, {vocab})")
    picked = take_along_last(log_softmax(logits, axis=-1), np.where(keep, targets, 0))
    summed = tensor_sum(mul(picked, keep.astype(np.float64)), axis=-1)
    return mul(summed, -1.0 / counts)


def zero_grads(params) -> None:
    for p in _param_list(params):
        p.grad = None


def _param_list(params) -> list[Tensor]:
    if isinstance(params, dict):
        return list(params.values())
    if isinstance(params, Tensor):
        return [params]
    return list(params)


def grad_check(f, params, eps: float = 1e-3, sample: float | None = None, seed: int = 0) -> float:
    """Compare autodiff gradients of a scalar computation to central differences.

    ``f`` is a deterministic zero-argument callable re-evaluating the same
    computation on the current parameter values.  Returns the maximum
    relative error over the checked coordinates, with the denominator
    floored at 1e-8.  ``sample`` keeps a random fraction of each parameter's
    coordinates instead of all of them.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    tensors = _param_list(params)
    zero_grads(tensors)
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericsError("grad_check: computation produced a non-finite value")
    out.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    # The difference phase only needs forward values.
    with no_grad():
        for p, g in zip(tensors, grads):
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            if sample is None:
                coords = np.arange(flat.size)
            else:
                n = max(1, int(round(sample * flat.size)))
                coords = rng.choice(flat.size, size=min(n, flat.size), replace=False)
            for idx in coords:
                original = flat[idx]
                flat[idx] = original + eps
                upper = float(f().data)
                flat[idx] = original - eps
                lower = float(f().data)
                flat[idx] = original
                fd = (upper - lower) / (2.0 * eps)
                err = abs(fd - gflat[idx]) / max(abs(gflat[idx]), 1e-8)
                if err > worst:
                    worst = err
    return worst


@dataclass
class AdamState:
    """Adam moment accumulators plus hyperparameters, keyed like the params."""

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float = 5e-5, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on the parameter data."""
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param {name} {p.data.shape}")
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / correction1
        vhat = v / correction2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {
        name: Tensor(p.data.copy(), requires_grad=p.requires_grad) for name, p in params.items()
    }


def params_equal(a: dict[str, Tensor], b: dict[str, Tensor]) -> bool:
    if a.keys() != b.keys():
        return False
    return all(np.array_equal(a[k].data, b[k].data) for k in a)


def serialize_params(params: dict[str, Tensor | np.ndarray]) -> bytes:
    """Named-tensor archive: name, shape, then row-major 64-bit values."""
    buf = io.BytesIO()
    buf.write(b"NTAR1\n")
    buf.write(f"count {len(params)}\n".encode())
    for name in sorted(params):
        data = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        # ascontiguousarray would promote 0-d arrays to 1-d; asarray keeps them.
        data = np.asarray(data, dtype="<f8", order="C")
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        shape = " ".join(str(s) for s in data.shape)
        buf.write(f"tensor {name} {data.ndim} {shape}\n".encode())
        buf.write(data.tobytes())
    return buf.getvalue()


def deserialize_params(blob: bytes, requires_grad: bool = True) -> dict[str, Tensor]:
    view = memoryview(blob)
    pos = blob.index(b"\n") + 1
    if blob[: pos - 1] != b"NTAR1":
        raise ValueError("not a named-tensor archive")
    end = blob.index(b"\n", pos)
    count = int(blob[pos:end].split()[1])
    pos = end + 1
    params: dict[str, Tensor] = {}
    for _ in range(count):
        end = blob.index(b"\n", pos)
        parts = blob[pos:end].decode().split()
        if parts[0] != "tensor":
            raise ValueError(f"malformed archive record: {parts}")
        name = parts[1]
        ndim = int(parts[2])
        shape = tuple(int(s) for s in parts[3 : 3 + ndim])
        pos = end + 1
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        data = np.frombuffer(view[pos : pos + nbytes], dtype="<f8").reshape(shape).copy()
        params[name] = Tensor(data, requires_grad=requires_grad)
        pos += nbytes
    return params


def save_params(params: dict[str, Tensor], path: str | Path) -> None:
    Path(path).write_bytes(serialize_params(params))


def load_params(path: str | Path, requires_grad: bool = True) -> dict[str, Tensor]:
    return deserialize_params(Path(path).read_bytes(), requires_grad=requires_grad)


def params_fingerprint(params: dict[str, Tensor]) -> int:
    """Stable integer stamp of a parameter collection's exact values."""
    digest = hashlib.sha256(serialize_params(params)).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)
