"""Independent brute-force oracles and the operator gradient-check registry."""
from __future__ import annotations

import math

import numpy as np

from unetslim import diffkit as dk
from unetslim.diffkit import Tensor

H = 1e-5
GRAD_TOL = 1e-4
# relative error is taken against max(|a|, |b|, FLOOR) so entries that are
# zero up to finite-difference noise do not dominate
FLOOR = 1e-4


def conv_loop(x, w, b, stride=1, pad=0):
    N, C, Hh, W = x.shape
    O, I, kh, kw = w.shape
    xp = np.zeros((N, C, Hh + 2 * pad, W + 2 * pad))
    xp[:, :, pad : pad + Hh, pad : pad + W] = x
    Ho = (Hh + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(I):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def attention_loop(q, k, v):
    N, Lq, D = q.shape
    out = np.zeros((N, Lq, v.shape[2]))
    for n in range(N):
        for i in range(Lq):
            logits = [sum(q[n, i, d] * k[n, j, d] for d in range(D)) / math.sqrt(D) for j in range(k.shape[1])]
            m = max(logits)
            e = [math.exp(z - m) for z in logits]
            s = sum(e)
            for j in range(k.shape[1]):
                out[n, i] += e[j] / s * v[n, j]
    return out


def mse_loop(a, b):
    a, b = np.ravel(a), np.ravel(b)
    total = 0.0
    for x, y in zip(a, b):
        total += (x - y) ** 2
    return total / len(a)


def instance_norm_loop(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x)
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            v = x[n, c]
            out[n, c] = (v - v.mean()) / math.sqrt(v.var() + eps) * gamma[c] + beta[c]
    return out


# ------------------------------------------------------------ grad checks


def check_grads(f, leaves) -> float:
    """Max relative error between backward() and central differences of ``f``."""
    out = f()
    for t in leaves:
        t.grad = None
    grads = dk.backward(out)
    worst = 0.0
    for t in leaves:
        analytic = grads.get(t, np.zeros_like(t.data))
        numeric = dk.numeric_grad(f, t, H)
        worst = max(worst, dk.max_rel_error(analytic, numeric, FLOOR))
    return worst


def _u(rng, *shape):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=True)


def _probe(rng, out: Tensor):
    """Scalar readout sum(out * r) with a fixed random r."""
    r = Tensor(rng.uniform(-1, 1, out.shape))
    return dk.sum_all(dk.mul(out, r))


def case(name, rng):
    """Build (f, leaves) for operator ``name`` from ``rng``."""
    if name == "add":
        a, b = _u(rng, 2, 3), _u(rng, 3)
        r = rng.uniform(-1, 1, (2, 3))
        return (lambda: dk.sum_all(dk.mul(dk.add(a, b), Tensor(r)))), [a, b]
    if name == "sub":
        a, b = _u(rng, 2, 3), _u(rng, 2, 1)
        r = rng.uniform(-1, 1, (2, 3))
        return (lambda: dk.sum_all(dk.mul(dk.sub(a, b), Tensor(r)))), [a, b]
    if name == "mul":
        a, b = _u(rng, 2, 3, 2), _u(rng, 3, 1)
        r = rng.uniform(-1, 1, (2, 3, 2))
        return (lambda: dk.sum_all(dk.mul(dk.mul(a, b), Tensor(r)))), [a, b]
    if name == "scale":
        a = _u(rng, 4)
        s = float(rng.uniform(-2, 2))
        r = rng.uniform(-1, 1, 4)
        return (lambda: dk.sum_all(dk.mul(dk.scale(a, s), Tensor(r)))), [a]
    if name in ("silu", "gelu", "softmax"):
        a = _u(rng, 3, 5)
        op = getattr(dk, name)
        r = rng.uniform(-1, 1, (3, 5))
        return (lambda: dk.sum_all(dk.mul(op(a), Tensor(r)))), [a]
    if name == "reshape":
        a = _u(rng, 2, 6)
        r = rng.uniform(-1, 1, (3, 4))
        return (lambda: dk.sum_all(dk.mul(dk.reshape(a, (3, 4)), Tensor(r)))), [a]
    if name == "transpose":
        a = _u(rng, 2, 3, 4)
        r = rng.uniform(-1, 1, (4, 2, 3))
        return (lambda: dk.sum_all(dk.mul(dk.transpose(a, (2, 0, 1)), Tensor(r)))), [a]
    if name == "concat":
        a, b = _u(rng, 2, 2, 3), _u(rng, 2, 1, 3)
        r = rng.uniform(-1, 1, (2, 3, 3))
        return (lambda: dk.sum_all(dk.mul(dk.concat([a, b], axis=1), Tensor(r)))), [a, b]
    if name == "mean":
        a = _u(rng, 2, 3, 4)
        r = rng.uniform(-1, 1, (2, 1, 4))
        return (lambda: dk.sum_all(dk.mul(dk.mean(a, axis=1, keepdims=True), Tensor(r)))), [a]
    if name == "mse":
        a, b = _u(rng, 3, 4), _u(rng, 3, 4)
        return (lambda: dk.mse(a, b)), [a, b]
    if name == "upsample":
        a = _u(rng, 1, 2, 2, 3)
        r = rng.uniform(-1, 1, (1, 2, 4, 6))
        return (lambda: dk.sum_all(dk.mul(dk.upsample_nearest2x(a), Tensor(r)))), [a]
    if name == "embedding":
        table = _u(rng, 5, 3)
        ids = rng.integers(0, 5, (2, 4))
        r = rng.uniform(-1, 1, (2, 4, 3))
        return (lambda: dk.sum_all(dk.mul(dk.embedding(table, ids), Tensor(r)))), [table]
    if name == "linear":
        x, w, b = _u(rng, 2, 3, 4), _u(rng, 5, 4), _u(rng, 5)
        r = rng.uniform(-1, 1, (2, 3, 5))
        return (lambda: dk.sum_all(dk.mul(dk.linear(x, w, b), Tensor(r)))), [x, w, b]
    if name in ("conv3x3", "conv_stride2", "conv1x1"):
        k, stride, pad = {"conv3x3": (3, 1, 1), "conv_stride2": (3, 2, 1), "conv1x1": (1, 1, 0)}[name]
        x, w, b = _u(rng, 2, 3, 5, 5), _u(rng, 4, 3, k, k), _u(rng, 4)
        Ho = (5 + 2 * pad - k) // stride + 1
        r = rng.uniform(-1, 1, (2, 4, Ho, Ho))
        return (lambda: dk.sum_all(dk.mul(dk.conv2d(x, w, b, stride, pad), Tensor(r)))), [x, w, b]
    if name == "conv_per_sample":
        x, w, b = _u(rng, 2, 3, 4, 4), _u(rng, 2, 2, 3, 3, 3), _u(rng, 2)
        r = rng.uniform(-1, 1, (2, 2, 4, 4))
        return (lambda: dk.sum_all(dk.mul(dk.conv2d(x, w, b, 1, 1), Tensor(r)))), [x, w, b]
    if name == "group_norm":
        x, g, b = _u(rng, 2, 4, 3, 3), _u(rng, 4), _u(rng, 4)
        r = rng.uniform(-1, 1, (2, 4, 3, 3))
        return (lambda: dk.sum_all(dk.mul(dk.group_norm(x, 2, g, b), Tensor(r)))), [x, g, b]
    if name == "layer_norm":
        x, g, b = _u(rng, 2, 3, 5), _u(rng, 5), _u(rng, 5)
        r = rng.uniform(-1, 1, (2, 3, 5))
        return (lambda: dk.sum_all(dk.mul(dk.layer_norm(x, g, b), Tensor(r)))), [x, g, b]
    if name == "attention":
        q, k, v = _u(rng, 2, 3, 4), _u(rng, 2, 5, 4), _u(rng, 2, 5, 3)
        r = rng.uniform(-1, 1, (2, 3, 3))
        return (lambda: dk.sum_all(dk.mul(dk.attention(q, k, v), Tensor(r)))), [q, k, v]
    if name == "mix_kernels":
        w, e = _u(rng, 2, 3), _u(rng, 3, 2, 2, 3, 3)
        r = rng.uniform(-1, 1, (2, 2, 2, 3, 3))
        return (lambda: dk.sum_all(dk.mul(dk.mix_kernels(w, e), Tensor(r)))), [w, e]
    if name == "sum_all":
        a = _u(rng, 3, 2)
        return (lambda: dk.sum_all(dk.mul(a, a))), [a]
    raise KeyError(name)


OPERATORS = (
    "add", "sub", "mul", "scale", "silu", "gelu", "softmax", "reshape", "transpose", "concat",
    "mean", "mse", "upsample", "embedding", "linear", "conv3x3", "conv_stride2", "conv1x1",
    "conv_per_sample", "group_norm", "layer_norm", "attention", "mix_kernels", "sum_all",
)
GRAD_SEEDS = range(20)


def toy_total_loss(rng, weights):
    """1-layer toy student under the four-term objective; returns (f, leaves)."""
    from unetslim.distill import PerceptualProbe, midblock_loss, output_kd_loss, perceptual_loss, task_loss, total_loss

    w = _u(rng, 4, 4, 3, 3)
    b = _u(rng, 4)
    x = Tensor(rng.uniform(-1, 1, (1, 4, 8, 8)))
    eps = Tensor(rng.uniform(-1, 1, (1, 4, 8, 8)))
    teacher_out = Tensor(rng.uniform(-1, 1, (1, 4, 8, 8)))
    teacher_mid = Tensor(rng.uniform(-1, 1, (1, 4, 8, 8)))
    probe = PerceptualProbe(seed=int(rng.integers(1 << 30)), channels=(4, 4))

    def f():
        mid = dk.conv2d(x, w, b, 1, 1)
        out = dk.silu(mid)
        terms = {
            "L_task": task_loss(out, eps),
            "L_out": output_kd_loss(out, teacher_out),
            "L_mid": midblock_loss(mid, teacher_mid),
            "L_feat": perceptual_loss(probe, out, teacher_out),
        }
        return total_loss(weights, terms)

    return f, [w, b]
