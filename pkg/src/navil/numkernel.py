"""Deterministic float64 tensor kernel with a reverse-mode gradient tape.

Tensors wrap contiguous float64 numpy arrays. Primitives are plain functions;
when a :class:`GradTape` is active and one of the inputs requires a gradient,
the application is recorded so :meth:`GradTape.gradient` can run the chain rule
backwards and :meth:`GradTape.replay` can recompute every recorded output.

Matrix products go through :mod:`navil._backend`, which keeps the per-element
summation order fixed (left to right over the inner index).
"""

from __future__ import annotations

import functools
import threading
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import _backend

ROPE_BASE = 10000.0


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: Any, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.array(data, dtype=np.float64))
        if arr.ndim == 0 or 0 in arr.shape:
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        return t

    @classmethod
    def from_flat(cls, shape: Sequence[int], flat: Sequence[float]) -> Tensor:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != len(flat):
            raise ValueError(f"product of shape {shape} != data length {len(flat)}")
        return cls(np.asarray(flat, dtype=np.float64).reshape(shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar routes through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable
    replay: Callable[[], np.ndarray]


_state = threading.local()


def _active_tape() -> GradTape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives applied inside the block whose inputs
    require gradients are appended to :attr:`nodes`.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> GradTape:
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def gradient(self, loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Reverse-mode derivative of scalar ``loss`` w.r.t. each tensor in ``wrt``."""
        if loss.data.size != 1:
            raise ValueError("gradient needs a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            need = tuple(t.requires_grad for t in node.inputs)
            in_grads = node.backward(g, need)
            for t, gi, n in zip(node.inputs, in_grads, need):
                if not n or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return {
            name: grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape) for name, t in wrt.items()
        }

    def replay(self) -> bool:
        """Recompute every recorded output; True iff all match bitwise."""
        with _no_tape():
            return all(np.array_equal(n.replay(), n.output.data) for n in self.nodes)


class _no_tape:
    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(None)

    def __exit__(self, *exc):
        _state.stack.pop()


def primitive(fn: Callable) -> Callable:
    """Turn ``fn(*arrays_or_values) -> (out, backward)`` into a recorded primitive.

    ``backward(g, need)`` returns one gradient (or None) per Tensor argument,
    in argument order; ``need`` flags which of them are wanted.
    """
    op = fn.__name__

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        tensors = tuple(a for a in args if isinstance(a, Tensor))
        raw = [a.data if isinstance(a, Tensor) else a for a in args]
        out, backward = fn(*raw, **kwargs)
        out = np.ascontiguousarray(out, dtype=np.float64)
        if not np.isfinite(out).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        result = Tensor._wrap(out)
        tape = _active_tape()
        if tape is not None and any(t.requires_grad for t in tensors):
            result.requires_grad = True

            def replay(args=args, kwargs=kwargs):
                return fn(*[a.data if isinstance(a, Tensor) else a for a in args], **kwargs)[0]

            tape.nodes.append(Node(op, tensors, result, backward, replay))
        return result

    return wrapper


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _backend.active.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


def _bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _backend.active.bmm(np.ascontiguousarray(a), np.ascontiguousarray(b))


def _rowsum(x: np.ndarray) -> np.ndarray:
    # sequential over the last axis, so padding a row with zeros keeps its sum bit-exact
    flat = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    return _backend.active.rowsum(flat).reshape(*x.shape[:-1], 1)


# ---------------------------------------------------------------- primitives


@primitive
def matmul(a, b):
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        lead = a.shape[:-1]
        a2 = a.reshape(-1, a.shape[-1])
        out = _mm(a2, b).reshape(*lead, b.shape[1])

        def backward(g, need):
            g2 = g.reshape(-1, g.shape[-1])
            ga = _mm(g2, b.T).reshape(a.shape) if need[0] else None
            gb = _mm(a2.T, g2) if need[1] else None
            return ga, gb

        return out, backward

    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"batched matmul needs equal batch dims: {a.shape} @ {b.shape}")
    batch = a.shape[:-2]
    a3 = a.reshape(-1, *a.shape[-2:])
    b3 = b.reshape(-1, *b.shape[-2:])
    out = _bmm(a3, b3).reshape(*batch, a.shape[-2], b.shape[-1])

    def backward(g, need):
        g3 = g.reshape(-1, *g.shape[-2:])
        ga = _bmm(g3, b3.transpose(0, 2, 1)).reshape(a.shape) if need[0] else None
        gb = _bmm(a3.transpose(0, 2, 1), g3).reshape(b.shape) if need[1] else None
        return ga, gb

    return out, backward


@primitive
def add(a, b):
    out = a + b

    def backward(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(g, b.shape) if need[1] else None)

    return out, backward


@primitive
def mul(a, b):
    out = a * b

    def backward(g, need):
        return (_unbroadcast(g * b, a.shape) if need[0] else None,
                _unbroadcast(g * a, b.shape) if need[1] else None)

    return out, backward


@primitive
def scale(a, c: float):
    def backward(g, need):
        return (g * c,)

    return a * c, backward


@primitive
def sum_all(a):
    def backward(g, need):
        return (np.broadcast_to(g.reshape(()), a.shape).copy(),)

    return np.array([a.sum()]), backward


@primitive
def silu(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def backward(g, need):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return out, backward


def _softmax_arr(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        m = np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x - m, 0.0)), 0.0)
    return e / _rowsum(e)


@primitive
def softmax_rows(x, mask=None):
    """Softmax over the last axis; entries where ``mask`` is False get probability 0.

    Every row must keep at least one unmasked entry.
    """
    y = _softmax_arr(x, mask)

    def backward(g, need):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return y, backward


@primitive
def rmsnorm(x, gain, eps: float = 1e-6):
    if x.shape[-1] != gain.shape[-1]:
        raise ValueError(f"rmsnorm width mismatch: {x.shape[-1]} vs {gain.shape[-1]}")
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xh = x * r
    out = xh * gain

    def backward(g, need):
        gx = gg = None
        if need[0]:
            dxh = g * gain
            gx = r * (dxh - xh * np.mean(dxh * xh, axis=-1, keepdims=True))
        if need[1]:
            gg = (g * xh).reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gg

    return out, backward


def _rope_angles(positions, hd: int, base: float) -> np.ndarray:
    inv = base ** (-np.arange(0, hd, 2, dtype=np.float64) / hd)
    return np.asarray(positions, dtype=np.float64)[..., None] * inv


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


@primitive
def rope_1d(x, positions, base: float = ROPE_BASE):
    """Rotate consecutive dim pairs of ``x[..., seq, heads, hd]`` by ``pos * base**(-2i/hd)``.

    ``positions`` broadcasts against ``x.shape[:-2]``.
    """
    hd = x.shape[-1]
    if hd % 2:
        raise ValueError(f"rope_1d needs an even head dim, got {hd}")
    ang = _rope_angles(positions, hd, base)[..., None, :]  # (..., seq, 1, hd/2)
    cos, sin = np.cos(ang), np.sin(ang)

    def backward(g, need):
        return (_rotate(g, cos, -sin),)

    return _rotate(x, cos, sin), backward


@primitive
def rope_2d(x, rows, cols, base: float = ROPE_BASE):
    """First half of the head dim rotated by row index, second half by column index."""
    hd = x.shape[-1]
    if hd % 4:
        raise ValueError(f"rope_2d needs head dim divisible by 4, got {hd}")
    half = hd // 2
    ar = _rope_angles(rows, half, base)[..., None, :]
    ac = _rope_angles(cols, half, base)[..., None, :]
    cr, sr, cc, sc = np.cos(ar), np.sin(ar), np.cos(ac), np.sin(ac)

    def apply(v, sign):
        out = np.empty_like(v)
        out[..., :half] = _rotate(v[..., :half], cr, sign * sr)
        out[..., half:] = _rotate(v[..., half:], cc, sign * sc)
        return out

    def backward(g, need):
        return (apply(g, -1.0),)

    return apply(x, 1.0), backward


@primitive
def reshape(x, shape):
    def backward(g, need):
        return (g.reshape(x.shape),)

    return x.reshape(shape), backward


@primitive
def transpose(x, axes):
    inv = np.argsort(axes)

    def backward(g, need):
        return (g.transpose(inv),)

    return x.transpose(axes), backward


@primitive
def embedding(table, ids):
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g, need):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return table[ids], backward


@primitive
def overwrite_rows(base, src, index):
    """Copy of ``base[N, D]`` with rows ``index`` replaced by ``src[len(index), D]``."""
    index = np.asarray(index, dtype=np.int64)
    if src.shape[0] != len(index) or src.shape[1:] != base.shape[1:]:
        raise ValueError(f"overwrite_rows shape mismatch: {src.shape} into {base.shape}")
    out = base.copy()
    out[index] = src

    def backward(g, need):
        gb = None
        if need[0]:
            gb = g.copy()
            gb[index] = 0.0
        return gb, (g[index] if need[1] else None)

    return out, backward


@primitive
def concat_rows(*parts):
    out = np.concatenate(parts, axis=0)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g, need):
        return tuple(g[bounds[i]:bounds[i + 1]] if need[i] else None for i in range(len(parts)))

    return out, backward


@primitive
def routed_matmul(x, route, *weights):
    """Per-row expert projection: row ``r`` of ``x[..., k]`` is multiplied by ``weights[route[r]]``.

    Only the selected expert touches each row. Rows are gathered per expert so
    each output element follows the same summation order as a dense matmul.
    """
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    route = np.asarray(route).reshape(-1)
    if route.shape[0] != x2.shape[0]:
        raise ValueError(f"route length {route.shape[0]} != {x2.shape[0]} rows")
    n_out = weights[0].shape[1]
    out = np.zeros((x2.shape[0], n_out))
    groups = [np.flatnonzero(route == m) for m in range(len(weights))]
    for idx, w in zip(groups, weights):
        if w.shape != weights[0].shape or w.shape[0] != x2.shape[1]:
            raise ValueError(f"expert weight shape {w.shape} incompatible with input {x.shape}")
        if idx.size:
            out[idx] = _mm(x2[idx], w)

    def backward(g, need):
        g2 = g.reshape(-1, n_out)
        gx = np.zeros_like(x2) if need[0] else None
        gws = []
        for m, (idx, w) in enumerate(zip(groups, weights)):
            if need[0] and idx.size:
                gx[idx] = _mm(g2[idx], w.T)
            if need[1 + m]:
                gws.append(_mm(x2[idx].T, g2[idx]) if idx.size else np.zeros_like(w))
            else:
                gws.append(None)
        return (gx.reshape(x.shape) if gx is not None else None, *gws)

    return out.reshape(*lead, n_out), backward


@primitive
def cross_entropy(logits, targets, mask):
    """Mean next-token cross-entropy over rows where ``mask`` is set.

    ``logits[..., V]``; ``targets`` and ``mask`` share its leading shape.
    """
    V = logits.shape[-1]
    z = logits.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    count = int(m.sum())
    if count == 0:
        raise ValueError("cross_entropy: loss mask is empty")
    rows = np.flatnonzero(m)
    zr = z[rows]
    mx = zr.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(zr - mx).sum(axis=1))
    loss = (lse - zr[np.arange(rows.size), t[rows]]).sum() / count

    def backward(g, need):
        p = np.exp(zr - lse[:, None])
        p[np.arange(rows.size), t[rows]] -= 1.0
        gz = np.zeros_like(z)
        gz[rows] = p * (g.reshape(()) / count)
        return (gz.reshape(logits.shape),)

    return np.array([loss]), backward


# ---------------------------------------------------------------- oracle


def finite_diff_grad(loss_fn: Callable[[], float], params: Mapping[str, Tensor], h: float = 1e-5,
                     names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn()`` w.r.t. every coordinate of ``params``.

    Parameters are perturbed in place and restored bit-exactly afterwards.
    """
    grads = {}
    for name in names if names is not None else list(params):
        t = params[name]
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn())
            flat[i] = orig - h
            fm = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss while differencing {name}[{i}]")
            g[i] = (fp - fm) / (2.0 * h)
        grads[name] = g.reshape(t.shape)
    return grads
