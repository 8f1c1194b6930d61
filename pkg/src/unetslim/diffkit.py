"""Small reverse-mode differentiation core over float64 numpy arrays.

Only the operators the miniature UNet needs are provided. Every operator
records a closure that maps the upstream gradient to gradients of its
inputs; :func:`backward` walks the recorded graph in reverse topological
order.

FLOPs can be tallied at runtime with :func:`count_flops`; the categories
mirror the static accounting in :mod:`unetslim.profiler`.
"""
from __future__ import annotations

import contextlib
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_GRAD_ENABLED = True
_FLOP_COUNTERS: list[Counter] = []


class DimensionError(ValueError):
    """Operand shapes do not fit together."""


class ConfigError(ValueError):
    """Invalid operator configuration (groups, dims, ...)."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def count_flops():
    """Tally FLOPs executed by forward operators, keyed by category.

    Categories: ``conv``, ``linear``, ``attention``, ``elementwise``, ``mix``.
    """
    counter: Counter = Counter()
    _FLOP_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _FLOP_COUNTERS.remove(counter)


_SCOPES: list[str] = []


@contextlib.contextmanager
def flop_scope(name: str):
    """Attribute FLOPs tallied inside the block to ``name`` as well."""
    _SCOPES.append(name)
    try:
        yield
    finally:
        _SCOPES.pop()


def _tally(kind: str, n: int) -> None:
    if not _FLOP_COUNTERS:
        return
    scope = _SCOPES[-1] if _SCOPES else ""
    for c in _FLOP_COUNTERS:
        c[kind] += int(n)
        c[(scope, kind)] += int(n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# --------------------------------------------------------------------- graph


@dataclass
class Node:
    kind: str
    inputs: list[int]
    output: Tensor


@dataclass
class Graph:
    """Topologically ordered view of the operators that produced a tensor."""

    nodes: list[Node] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


def _topo(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def trace(output: Tensor) -> Graph:
    order = _topo(output)
    index = {id(t): i for i, t in enumerate(order)}
    return Graph([Node(t.op, [index[id(p)] for p in t._parents], t) for t in order])


def backward(output: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``output``.

    Returns a map from every reached leaf that requires grad to its gradient;
    gradients are also accumulated into ``leaf.grad``.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    order = [n.output for n in graph.nodes] if graph is not None else _topo(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if not t._parents:
            if t.requires_grad:
                leaves[t] = g
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad(output: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``output`` w.r.t. ``wrt``; unreached leaves get zeros."""
    wrt = list(wrt)
    saved = [w.grad for w in wrt]
    for w in wrt:
        w.grad = None
    got = backward(output)
    out = [got.get(w, np.zeros_like(w.data)) for w in wrt]
    for w, s in zip(wrt, saved):
        w.grad = s
    return out


# ------------------------------------------------------------ elementwise ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", bw)


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), "scale", lambda g: (g * s,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    _tally("elementwise", x.size)

    def bw(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _make(x.data * sig, (x,), "silu", bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    _tally("elementwise", x.size)

    def bw(g):
        pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return _make(x.data * cdf, (x,), "gelu", bw)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    p = _softmax(x.data)
    _tally("elementwise", x.size)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), "softmax", bw)


# ---------------------------------------------------------- shape / reduce


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        "transpose",
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), "concat", bw)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.size
        out = np.asarray(x.data.mean())

        def bw(g):
            return (np.full(shape, float(g) / n),)

        return _make(out, (x,), "mean", bw)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    n = int(np.prod([shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(out, (x,), "mean", bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error between two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mse operands differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = (2.0 * float(g) / n) * diff
        return ga, -ga

    return _make(np.asarray(np.mean(diff * diff)), (a, b), "mse", bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    N, C, H, W = x.shape

    def bw(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), "upsample", bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise DimensionError(f"token id out of range for table with {V} rows")
    return _make(table.data[ids], (table,), "embedding", bw)


# ------------------------------------------------------------------ linear


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear input {x.shape} does not fit weight {weight.shape}")
    tokens = x.size // x.shape[-1]
    _tally("linear", 2 * weight.shape[0] * weight.shape[1] * tokens)
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g @ weight.data) if x.requires_grad else None
        gw = (g2.T @ x2) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(y, parents, "linear", bw)


# -------------------------------------------------------------------- conv


def _im2col(xt: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Channel-major padded input (C,N,Hp,Wp) -> columns (C*kh*kw, N*Ho*Wo)."""
    C, N = xt.shape[:2]
    cols = np.empty((C, kh, kw, N, Ho, Wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    return cols.reshape(C * kh * kw, N * Ho * Wo)


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, Ho: int, Wo: int) -> np.ndarray:
    N, C, H, W = shape
    dxp = np.zeros((C, N, H + 2 * pad, W + 2 * pad), dtype=DTYPE)
    d = dcols.reshape(C, kh, kw, N, Ho, Wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += d[:, i, j]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``kernel`` is (OutC, InC, kH, kW), or (N, OutC, InC, kH, kW) for a
    separate kernel per sample.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got {x.shape}")
    per_sample = kernel.ndim == 5
    kshape = kernel.shape[1:] if per_sample else kernel.shape
    if len(kshape) != 4:
        raise DimensionError(f"conv2d kernel must be rank 4 or 5, got {kernel.shape}")
    O, I, kh, kw = kshape
    N, C, H, W = x.shape
    if C != I or (per_sample and kernel.shape[0] != N):
        raise DimensionError(f"conv2d input {x.shape} does not fit kernel {kernel.shape}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d bias {bias.shape} does not fit {O} output channels")
    if stride < 1 or padding < 0:
        raise ConfigError("stride must be positive and padding nonnegative")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    P = Ho * Wo
    _tally("conv", 2 * kh * kw * I * O * P * N)

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    xt = x.data.transpose(1, 0, 2, 3)
    if pointwise:
        cols = np.ascontiguousarray(xt).reshape(C, N * P)
    else:
        if padding:
            xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _im2col(xt, kh, kw, stride, Ho, Wo)
    K = I * kh * kw
    if per_sample:
        wm = kernel.data.reshape(N, O, K)
        # identical per-sample kernels take the shared GEMM: same math, same bits
        shared = wm[0] if all(np.array_equal(wm[0], wm[n]) for n in range(1, N)) else None
    if per_sample and shared is None:
        y = np.empty((O, N * P), dtype=DTYPE)
        for n in range(N):
            y[:, n * P : (n + 1) * P] = wm[n] @ cols[:, n * P : (n + 1) * P]
    else:
        wm = shared if per_sample else kernel.data.reshape(O, K)
        y = wm @ cols
    y = y.reshape(O, N, Ho, Wo)
    if bias is not None:
        y += bias.data[:, None, None, None]
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, N * P)
        gx = gk = None
        if x.requires_grad:
            if per_sample and shared is None:
                dcols = np.empty((K, N * P), dtype=DTYPE)
                for n in range(N):
                    dcols[:, n * P : (n + 1) * P] = wm[n].T @ gt[:, n * P : (n + 1) * P]
            else:
                dcols = wm.T @ gt
            if pointwise:
                gx = np.ascontiguousarray(dcols.reshape(C, N, H, W).transpose(1, 0, 2, 3))
            else:
                gx = _col2im(dcols, x.shape, kh, kw, stride, padding, Ho, Wo)
        if kernel.requires_grad:
            if per_sample:
                gk = np.stack(
                    [gt[:, n * P : (n + 1) * P] @ cols[:, n * P : (n + 1) * P].T for n in range(N)]
                ).reshape(kernel.shape)
            else:
                gk = (gt @ cols.T).reshape(kernel.shape)
        if bias is None:
            return gx, gk
        return gx, gk, gt.sum(axis=1)

    return _make(y, parents, "conv2d", bw)


# ---------------------------------------------------------------- norms


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    N, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ConfigError(f"{C} channels cannot be split into {groups} groups")
    xg = x.data.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    _tally("elementwise", x.size)
    m = xg.shape[2]

    def bw(g):
        red = (0,) + tuple(range(2, x.ndim))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(bshape)).reshape(N, groups, m)
            xh = xhat.reshape(N, groups, m)
            gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, gg, gb

    return _make(y, (x, gamma, beta), "group_norm", bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    _tally("elementwise", x.size)

    def bw(g):
        red = tuple(range(x.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            d = g * gamma.data
            gx = inv * (d - d.mean(axis=-1, keepdims=True) - xhat * (d * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", bw)


# ------------------------------------------------------------- attention


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention; q (N,Lq,D), k (N,Lk,D), v (N,Lk,Dv)."""
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DimensionError("attention expects rank-3 q, k, v")
    N, Lq, D = q.shape
    Lk = k.shape[1]
    if Lk == 0:
        raise ContractError("attention over an empty context")
    if D == 0 or k.shape[2] != D or k.shape[0] != N or v.shape[:2] != (N, Lk):
        raise DimensionError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    Dv = v.shape[2]
    s = 1.0 / math.sqrt(D)
    p = _softmax(np.matmul(q.data, k.data.transpose(0, 2, 1)) * s)
    out = np.matmul(p, v.data)
    _tally("attention", 2 * N * Lq * Lk * (D + Dv))
    _tally("elementwise", N * Lq * Lk)

    def bw(g):
        gv = np.matmul(p.transpose(0, 2, 1), g) if v.requires_grad else None
        gp = np.matmul(g, v.data.transpose(0, 2, 1))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * s
        gq = np.matmul(gs, k.data) if q.requires_grad else None
        gk = np.matmul(gs.transpose(0, 2, 1), q.data) if k.requires_grad else None
        return gq, gk, gv

    return _make(out, (q, k, v), "attention", bw)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Softmax weights used by :func:`attention` (inspection helper)."""
    return _softmax(np.matmul(q, k.transpose(0, 2, 1)) / math.sqrt(q.shape[-1]))


# ------------------------------------------------------- kernel mixing


def mix_kernels(weights: Tensor, experts: Tensor) -> Tensor:
    """Per-sample convex kernel: weights (N,E) x experts (E,...) -> (N,...)."""
    N, E = weights.shape
    if experts.shape[0] != E:
        raise DimensionError(f"{E} routing weights for {experts.shape[0]} experts")
    flat = experts.data.reshape(E, -1)
    _tally("mix", 2 * N * flat.size)
    if E == 1:
        # keeps a single expert bitwise intact
        out = weights.data[:, :1] * flat
    else:
        out = weights.data @ flat
    out = out.reshape((N,) + experts.shape[1:])

    def bw(g):
        g2 = g.reshape(N, -1)
        gw = g2 @ flat.T if weights.requires_grad else None
        ge = (weights.data.T @ g2).reshape(experts.shape) if experts.requires_grad else None
        return gw, ge

    return _make(out, (weights, experts), "mix_kernels", bw)


# ------------------------------------------------------ gradient checking


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x.data`` (in place)."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a-b| / max(|a|, |b|, floor)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
