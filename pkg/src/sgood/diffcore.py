"""Minimal dense reverse-mode differentiation over float64 numpy arrays.

Each op builds a new :class:`Tensor` holding its parents and a backward
closure; :func:`backward` orders the graph topologically (the tape) and
accumulates gradients in reverse.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


def param(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _make(value, parents, backward_fn, op) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite output from {op}")
    rg = any(p.requires_grad for p in parents)
    return Tensor(value, rg, parents if rg else (), backward_fn if rg else None, op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# --------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.value, b.value, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (with numpy broadcasting, e.g. a learnable scalar)."""
    _check_broadcast(a.value, b.value, "mul")

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.value.T, a.value.T @ g

    return _make(a.value @ b.value, (a, b), bw, "matmul")


def spmm(adj: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times tensor; used for neighbour sums."""
    if adj.shape[1] != x.shape[0]:
        raise ValueError(f"spmm: shape mismatch {adj.shape} @ {x.shape}")
    return _make(np.asarray(adj @ x.value), (x,), lambda g: (np.asarray(adj.T @ g),), "spmm")


def transpose(a: Tensor) -> Tensor:
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), bw, "take_rows")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _make
        out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0):
        raise FloatingPointError("log of non-positive value")
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    """Sum over ``axis`` keeping dims; ``axis=None`` reduces to shape (1, 1)."""
    if axis is None:
        out = a.value.sum().reshape(1, 1)
        return _make(out, (a,), lambda g: (np.broadcast_to(g.reshape(1, 1), a.shape).copy(),), "sum")
    out = a.value.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def sum_rows(a: Tensor) -> Tensor:
    return sum(a, axis=0)


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.value.size)


def segment_sum(a: Tensor, segments, num_segments: int) -> Tensor:
    """Row ``i`` of ``a`` is added into output row ``segments[i]``."""
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (a.shape[0],):
        raise ValueError(f"segment_sum: {len(seg)} segment ids for {a.shape[0]} rows")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ValueError("segment_sum: segment id out of range")
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, seg, a.value)
    return _make(out, (a,), lambda g: (g[seg],), "segment_sum")


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ValueError(f"concat_cols: row counts differ {sorted(rows)}")
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=1), tuple(parts), bw, "concat_cols")


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ValueError(f"concat_rows: column counts differ {sorted(cols)}")
    heights = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[heights[i]:heights[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=0), tuple(parts), bw, "concat_rows")


def l2_normalize_rows(a: Tensor) -> Tensor:
    norms = np.linalg.norm(a.value, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroDivisionError("l2_normalize_rows: zero-norm row")
    y = a.value / norms

    def bw(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norms,)

    return _make(y, (a,), bw, "l2_normalize_rows")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``; returns shape (1, 1)."""
    y = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if y.shape != (n,):
        raise ValueError("softmax_cross_entropy: one label per row required")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"softmax_cross_entropy: label outside [0, {c})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()
    p = np.exp(logp)

    def bw(g):
        d = p.copy()
        d[np.arange(n), y] -= 1.0
        return (d * (g.reshape(()) / n),)

    return _make(np.array([[loss]]), (logits,), bw, "softmax_cross_entropy")


# --------------------------------------------------------------------------
# backward pass


def topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.value.size != 1:
        raise ValueError("backward needs a scalar loss")
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad:
                continue
            pid = id(p)
            grads[pid] = pg if pid not in grads else grads[pid] + pg


def value_and_grad(fn: Callable[[dict], Tensor], params: Mapping[str, np.ndarray]):
    leaves = {k: param(v) for k, v in params.items()}
    out = fn(leaves)
    backward(out)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in leaves.items()}
    return out.item(), grads


def grad_check(fn: Callable[[dict], Tensor], params: Mapping[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max elementwise relative error between tape and central-difference gradients.

    Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    _, _, _, err = grad_check_entries(fn, params, eps)
    return float(err.max()) if err.size else 0.0


def grad_check_entries(fn: Callable[[dict], Tensor], params: Mapping[str, np.ndarray], eps: float = 1e-5):
    """Per-entry comparison behind :func:`grad_check`.

    Returns ``(names, analytic, numeric, rel_err)``; ``names`` holds
    ``"param[i, j]"`` strings aligned with the flat arrays.
    """
    _, grads = value_and_grad(fn, params)

    def f(p):
        return fn({k: const(v) for k, v in p.items()}).item()

    names, ana, num = [], [], []
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        for idx in np.ndindex(base.shape):
            shifted = dict(params)
            plus, minus = base.copy(), base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            shifted[name] = plus
            fp = f(shifted)
            shifted[name] = minus
            fm = f(shifted)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}{idx}")
            names.append(f"{name}{list(idx)}")
            num.append((fp - fm) / (2 * eps))
            ana.append(float(grads[name][idx]))
    ana, num = np.array(ana), np.array(num)
    err = np.abs(num - ana) / np.maximum(np.maximum(np.abs(num), np.abs(ana)), 1e-8)
    return names, ana, num, err


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are untouched."""
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {k}")
        m = state.beta1 * state.m.get(k, np.zeros_like(p)) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(k, np.zeros_like(p)) + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new_p[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)


# --------------------------------------------------------------------------
# parameter init and checkpoints


def glorot_uniform(seed: int, name: str, shape) -> np.ndarray:
    """Glorot-uniform draw from an RNG stream keyed by ``(seed, name)``."""
    rng = np.random.default_rng([int(seed), zlib.crc32(name.encode())])
    fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    """Header ``SGCK`` + version + count, then per tensor: name, shape, raw <f8 values."""
    chunks = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out
