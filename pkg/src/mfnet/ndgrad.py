"""Small reverse-mode differentiation engine over NCHW numpy arrays.

Every op kind is a ``(forward, backward)`` pair in ``OPS``. ``forward`` gets
the input values and attrs and returns ``(out, cache)``; ``backward`` gets the
upstream gradient, the cache, the input values and attrs and returns one
gradient (or ``None``) per input.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import NumericError, ShapeError, interp_matrix, read_wsf, write_wsf


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "inputs", "attrs", "cache", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = None
        self.inputs = ()
        self.attrs = {}
        self.cache = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.value.dtype}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- op implementations -------------------------------------------------------

def _need_rank(v, rank, kind):
    if v.ndim != rank:
        raise ShapeError(f"{kind}: expected rank-{rank} input, got shape {v.shape}")


def _same_shape(a, b, kind):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes differ {a.shape} vs {b.shape}")


def _conv3x3_fwd(vals, stride=1):
    x, w, b = vals
    _need_rank(x, 4, "conv3x3")
    n, c, h, wd = x.shape
    if w.shape[1:] != (c, 3, 3) or b.shape != (w.shape[0],):
        raise ShapeError(f"conv3x3: input {x.shape}, weight {w.shape}, bias {b.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv3x3: stride must be 1 or 2, got {stride}")
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, ho, wo), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    cols = cols.reshape(n, c * 9, ho * wo)
    out = np.matmul(w.reshape(w.shape[0], -1), cols) + b[None, :, None]
    return out.reshape(n, w.shape[0], ho, wo), cols


def _conv3x3_bwd(g, cols, vals, stride=1):
    x, w, _ = vals
    n, c, h, wd = x.shape
    o = w.shape[0]
    ho, wo = g.shape[2:]
    g2 = g.reshape(n, o, ho * wo)
    gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gb = g2.sum(axis=(0, 2))
    gcols = np.matmul(w.reshape(o, -1).T, g2).reshape(n, c, 3, 3, ho, wo)
    gxp = np.zeros((n, c, h + 2, wd + 2), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            gxp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += gcols[:, :, ky, kx]
    return gxp[:, :, 1:-1, 1:-1], gw, gb


def _conv1x1_fwd(vals):
    x, w, b = vals
    _need_rank(x, 4, "conv1x1")
    if w.shape[1:] != (x.shape[1], 1, 1) or b.shape != (w.shape[0],):
        raise ShapeError(f"conv1x1: input {x.shape}, weight {w.shape}, bias {b.shape}")
    n, c, h, wd = x.shape
    out = np.matmul(w[:, :, 0, 0], x.reshape(n, c, h * wd)) + b[None, :, None]
    return out.reshape(n, -1, h, wd), None


def _conv1x1_bwd(g, _cache, vals):
    x, w, _ = vals
    n, c, h, wd = x.shape
    w2 = w[:, :, 0, 0]
    g2 = g.reshape(n, -1, h * wd)
    gx = np.matmul(w2.T, g2).reshape(x.shape)
    gw = np.matmul(g2, x.reshape(n, c, h * wd).transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
    return gx, gw, g2.sum(axis=(0, 2))


def _relu_fwd(vals):
    (x,) = vals
    return np.maximum(x, 0), None


def _relu_bwd(g, _cache, vals):
    return (g * (vals[0] > 0),)


def _sigmoid_fwd(vals):
    (x,) = vals
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def _sigmoid_bwd(g, out, _vals):
    return (g * out * (1 - out),)


def _gap_fwd(vals):
    (x,) = vals
    _need_rank(x, 4, "gap")
    return x.mean(axis=(2, 3), keepdims=True), None


def _gap_bwd(g, _cache, vals):
    x = vals[0]
    hw = x.shape[2] * x.shape[3]
    return (np.broadcast_to(g / hw, x.shape).astype(x.dtype),)


def _upsample_fwd(vals, size):
    (x,) = vals
    _need_rank(x, 4, "upsample_bilinear")
    ry = interp_matrix(x.shape[2], size[0], x.dtype)
    rx = interp_matrix(x.shape[3], size[1], x.dtype)
    return np.matmul(ry, np.matmul(x, rx.T)), (ry, rx)


def _upsample_bwd(g, cache, _vals, size):
    ry, rx = cache
    return (np.matmul(ry.T, np.matmul(g, rx)),)


def _concat_fwd(vals):
    for v in vals:
        _need_rank(v, 4, "concat_channels")
        if v.shape[0] != vals[0].shape[0] or v.shape[2:] != vals[0].shape[2:]:
            raise ShapeError(f"concat_channels: {[u.shape for u in vals]}")
    return np.concatenate(vals, axis=1), None


def _concat_bwd(g, _cache, vals):
    bounds = np.cumsum([v.shape[1] for v in vals])[:-1]
    return tuple(np.split(g, bounds, axis=1))


def _add_fwd(vals):
    a, b = vals
    _same_shape(a, b, "add")
    return a + b, None


def _add_bwd(g, _cache, _vals):
    return g, g


def _sub_fwd(vals):
    a, b = vals
    _same_shape(a, b, "sub")
    return a - b, None


def _sub_bwd(g, _cache, _vals):
    return g, -g


def _mul_scalar_fwd(vals, scalar):
    return vals[0] * vals[0].dtype.type(scalar), None


def _mul_scalar_bwd(g, _cache, vals, scalar):
    return (g * vals[0].dtype.type(scalar),)


def _square_fwd(vals):
    return vals[0] * vals[0], None


def _square_bwd(g, _cache, vals):
    return (2 * vals[0] * g,)


def _sum_fwd(vals):
    return np.asarray(vals[0].sum(), dtype=vals[0].dtype), None


def _sum_bwd(g, _cache, vals):
    return (np.full(vals[0].shape, g, dtype=vals[0].dtype),)


def _mean_fwd(vals):
    return np.asarray(vals[0].mean(), dtype=vals[0].dtype), None


def _mean_bwd(g, _cache, vals):
    return (np.full(vals[0].shape, g / vals[0].size, dtype=vals[0].dtype),)


OPS: dict[str, tuple[Callable, Callable]] = {
    "conv3x3": (_conv3x3_fwd, _conv3x3_bwd),
    "conv1x1": (_conv1x1_fwd, _conv1x1_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "gap": (_gap_fwd, _gap_bwd),
    "upsample_bilinear": (_upsample_fwd, _upsample_bwd),
    "concat_channels": (_concat_fwd, _concat_bwd),
    "add": (_add_fwd, _add_bwd),
    "mul_scalar": (_mul_scalar_fwd, _mul_scalar_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "square": (_square_fwd, _square_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
}

CORE_OPS = tuple(OPS)


def register_op(kind: str, forward: Callable, backward: Callable) -> None:
    """Add a fused op (used by the loss module for its analytic BCE kernels)."""
    OPS[kind] = (forward, backward)


def forward_op(kind: str, inputs, **attrs) -> Tensor:
    if kind not in OPS:
        raise KeyError(f"unknown op kind {kind!r}")
    inputs = tuple(as_tensor(t) for t in inputs)
    fwd, _ = OPS[kind]
    vals = [t.value for t in inputs]
    out, cache = fwd(vals, **attrs)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{kind}: non-finite output")
    result = Tensor(out)
    if any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.op = kind
        result.inputs = inputs
        result.attrs = attrs
        result.cache = cache
    return result


# thin wrappers so network code reads naturally

def conv3x3(x, w, b, stride=1):
    return forward_op("conv3x3", (x, w, b), stride=stride)


def conv1x1(x, w, b):
    return forward_op("conv1x1", (x, w, b))


def relu(x):
    return forward_op("relu", (x,))


def sigmoid(x):
    return forward_op("sigmoid", (x,))


def gap(x):
    return forward_op("gap", (x,))


def upsample(x, size):
    return forward_op("upsample_bilinear", (x,), size=tuple(size))


def concat(*xs):
    return forward_op("concat_channels", xs)


def add(a, b):
    return forward_op("add", (a, b))


def sub(a, b):
    return forward_op("sub", (a, b))


def mul_scalar(x, scalar):
    return forward_op("mul_scalar", (x,), scalar=float(scalar))


def square(x):
    return forward_op("square", (x,))


def total(x):
    return forward_op("sum", (x,))


def mean(x):
    return forward_op("mean", (x,))


# --- graph and backward -------------------------------------------------------

@dataclass
class Graph:
    """Topologically ordered nodes reachable from a root tensor."""
    nodes: list

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.from_root(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        _, bwd = OPS[node.op]
        in_grads = bwd(g, node.cache, [t.value for t in node.inputs], **node.attrs)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --- optimisation -------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place on ``params`` (name -> ndarray)."""
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ShapeError(f"grad for {name}: {g.shape} vs param {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; update aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


def fans(shape) -> tuple[int, int]:
    if len(shape) < 2:
        raise ValueError(f"cannot derive fan-in/fan-out from shape {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(shape, seed=None, rng=None, dtype=np.float32) -> Tensor:
    fan_in, fan_out = fans(shape)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = rng if rng is not None else np.random.default_rng(seed)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


# --- checkpoints --------------------------------------------------------------

def save_params(params: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {}
    for name in sorted(params):
        fname = name.replace("/", "_") + ".wsf"
        value = params[name].value if isinstance(params[name], Tensor) else params[name]
        write_wsf(out / fname, value)
        index[name] = {"file": fname, "shape": list(value.shape)}
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_params(in_dir) -> dict:
    root = Path(in_dir)
    index = json.loads((root / "index.json").read_text())
    params = {}
    for name, entry in index.items():
        value = read_wsf(root / entry["file"])
        if list(value.shape) != entry["shape"]:
            raise ShapeError(f"{name}: index shape {entry['shape']} vs file {value.shape}")
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


# --- finite-difference checking -----------------------------------------------

def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``x.value`` (in place, restored)."""
    g = np.zeros_like(x.value, dtype=np.float64)
    flat = x.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().value)
        flat[i] = orig - h
        down = float(fn().value)
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    return 0.0 if scale == 0 else float(diff / scale)


def check_gradients(fn: Callable[[], Tensor], wrt: list[Tensor], h: float = 1e-3) -> float:
    """Largest relative error between backward() and central differences over ``wrt``."""
    for t in wrt:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in wrt:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.value)
        worst = max(worst, relative_error(analytic, numeric_grad(fn, t, h)))
    return worst
