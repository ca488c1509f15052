"""Independent reference computations used by the tests.

Everything here is written with plain Python loops over floats (``math`` and
``cmath`` only) so it shares no code path with the numpy implementation.
"""
from __future__ import annotations

import cmath
import math

import numpy as np


def fd_gradient(f, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    out = np.zeros(flat.size)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        hi = f()
        flat[j] = orig - step
        lo = f()
        flat[j] = orig
        out[j] = (hi - lo) / (2 * step)
    return out.reshape(arr.shape)


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)`` over one parameter tensor."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def mat(a):
    return [[float(v) for v in row] for row in np.asarray(a)]


def s_matmul(A, B):
    n, k, m = len(A), len(B), len(B[0])
    return [[sum(A[i][t] * B[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def s_add_row(A, b):
    return [[A[i][j] + b[j] for j in range(len(b))] for i in range(len(A))]


def s_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def s_layer_norm(row, gamma, beta, eps=1e-6):
    d = len(row)
    mu = sum(row) / d
    var = sum((v - mu) ** 2 for v in row) / d
    return [gamma[j] * (row[j] - mu) / math.sqrt(var + eps) + beta[j] for j in range(d)]


def s_gelu(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def s_cross_entropy(rows, labels):
    total = 0.0
    for row, y in zip(rows, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(rows)


def s_block(x, p, heads=1, eps=1e-6):
    """Pre-norm transformer block on a list-of-rows token matrix."""
    l, d = len(x), len(x[0])
    dh = d // heads
    h = [s_layer_norm(r, p["ln1_g"], p["ln1_b"], eps) for r in x]
    q = s_add_row(s_matmul(h, p["w_q"]), p["b_q"])
    k = s_add_row(s_matmul(h, p["w_k"]), p["b_k"])
    v = s_add_row(s_matmul(h, p["w_v"]), p["b_v"])
    ctx = [[0.0] * d for _ in range(l)]
    for hd in range(heads):
        cols = range(hd * dh, (hd + 1) * dh)
        for i in range(l):
            scores = [sum(q[i][c] * k[j][c] for c in cols) / math.sqrt(dh) for j in range(l)]
            w = s_softmax(scores)
            for c in cols:
                ctx[i][c] = sum(w[j] * v[j][c] for j in range(l))
    attn = s_add_row(s_matmul(ctx, p["w_o"]), p["b_o"])
    xa = [[x[i][j] + attn[i][j] for j in range(d)] for i in range(l)]
    h2 = [s_layer_norm(r, p["ln2_g"], p["ln2_b"], eps) for r in xa]
    hid = [[s_gelu(v) for v in r] for r in s_add_row(s_matmul(h2, p["w_1"]), p["b_1"])]
    m = s_add_row(s_matmul(hid, p["w_2"]), p["b_2"])
    return [[xa[i][j] + m[i][j] for j in range(d)] for i in range(l)]


def s_bottleneck(x, w_down, w_up):
    hid = [[s_gelu(v) for v in r] for r in s_matmul(x, w_down)]
    return s_matmul(hid, w_up)


def brute_dft2(x):
    """O(g^4) 2-D DFT of a square grid, returns nested lists of complex."""
    g = len(x)
    out = [[0j] * g for _ in range(g)]
    for u in range(g):
        for v in range(g):
            acc = 0j
            for a in range(g):
                for b in range(g):
                    acc += x[a][b] * cmath.exp(-2j * math.pi * (u * a + v * b) / g)
            out[u][v] = acc
    return out


def s_confusion_miou(pred, labels, C):
    """mIoU by explicit per-class counting."""
    ious = []
    for c in range(C):
        tp = sum(1 for p, y in zip(pred, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(pred, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(pred, labels) if p != c and y == c)
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious), ious


def pearson(a, b) -> float:
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def scalar_fisher(W, v, samples):
    """Per-sample hand-derived gradients, squared and averaged."""
    fw = [[0.0] * 3 for _ in range(2)]
    fv = [0.0] * 3
    for x, y in samples:
        h = [sum(x[i] * W[i][j] for i in range(2)) for j in range(3)]
        z = [h[j] * v[j] for j in range(3)]
        p = s_softmax(z)
        dz = [p[j] - (1.0 if j == y else 0.0) for j in range(3)]
        for j in range(3):
            fv[j] += (dz[j] * h[j]) ** 2
            for i in range(2):
                fw[i][j] += (dz[j] * v[j] * x[i]) ** 2
    n = len(samples)
    return [[a / n for a in row] for row in fw], [a / n for a in fv]
