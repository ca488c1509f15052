"""Double-precision tensors with define-by-run reverse-mode autodiff.

Every differentiable op appends a node to the active :class:`ComputationRecord`
when at least one input requires a gradient.  :func:`backward` walks the record
in decreasing append order.  Gradients of leaf tensors accumulate until
:meth:`Tensor.zero_grad` is called.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ComputationRecord",
    "ComplexGrid",
    "get_record",
    "no_grad",
    "tensor",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "backward",
    "dft2",
    "idft2",
    "fourier_filter",
    "filter_operator",
]

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class _Node:
    op: str
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class ComputationRecord:
    nodes: list[_Node] = field(default_factory=list)
    enabled: bool = True

    def append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self) -> None:
        # drops graph structure only; tensors keep their values and grads
        for node in self.nodes:
            node.out.node_id = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_RECORD = ComputationRecord()


def get_record() -> ComputationRecord:
    return _RECORD


@contextlib.contextmanager
def no_grad():
    prev = _RECORD.enabled
    _RECORD.enabled = False
    try:
        yield
    finally:
        _RECORD.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
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
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node_id = None
    out.requires_grad = _RECORD.enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out.node_id = _RECORD.append(_Node(op, out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return _make("gelu", xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


# shape ops -----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(range(x.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    return _make("swap_last", np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape

    def _bw(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", np.array(x.data[idx]), (x,), _bw)


def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (np.broadcast_to(g.reshape(out.shape), src).copy(),)

    squeezed = out.sum() if axis is None else np.squeeze(out, axis=axis)
    return _make("sum", np.asarray(squeezed, dtype=DTYPE), (x,), _bw)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis), 1.0 / n)


# linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight: fold batch axes into one product
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), _bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), _bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match d={d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        if not x.requires_grad:
            return None, gg, gb
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return _make("layer_norm", out, (x, gamma, beta), _bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over all positions; ``logits[..., C]``."""
    lab = np.asarray(labels)
    if lab.dtype.kind not in "iu":
        lab = lab.astype(np.int64)
    C = logits.shape[-1]
    flat = logits.data.reshape(-1, C)
    lab = lab.reshape(-1)
    if lab.shape[0] != flat.shape[0]:
        raise ShapeError(f"{lab.shape[0]} labels for {flat.shape[0]} positions")
    if lab.size and (lab.min() < 0 or lab.max() >= C):
        raise IndexError(f"label out of range [0, {C})")
    z = flat - flat.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    p = lab.shape[0]
    rows = np.arange(p)
    loss = -logp[rows, lab].mean()

    def _bw(g):
        probs = np.exp(logp)
        probs[rows, lab] -= 1.0
        return ((g / p) * probs.reshape(logits.shape),)

    return _make("cross_entropy", np.asarray(loss, dtype=DTYPE), (logits,), _bw)


# Fourier machinery ----------------------------------------------------------

@dataclass
class ComplexGrid:
    height: int
    width: int
    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError("real and imag buffers differ in shape")

    def to_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag


_DFT_CACHE: dict[int, np.ndarray] = {}


def dft_matrix(g: int) -> np.ndarray:
    if g not in _DFT_CACHE:
        k = np.arange(g)
        _DFT_CACHE[g] = np.exp(-2j * np.pi * np.outer(k, k) / g)
    return _DFT_CACHE[g]


def _dft2_array(x: np.ndarray) -> np.ndarray:
    g = x.shape[-1]
    if x.shape[-2] != g:
        raise ShapeError(f"dft2 needs a square grid, got {x.shape[-2:]}")
    F = dft_matrix(g)
    return F @ x @ F


def _idft2_array(X: np.ndarray) -> np.ndarray:
    g = X.shape[-1]
    Fi = np.conj(dft_matrix(g))
    return (Fi @ X @ Fi) / (g * g)


def dft2(x) -> ComplexGrid:
    """Unnormalised 2-D DFT of a square real grid (leading axes are batched)."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    if arr.ndim < 2:
        raise ShapeError("dft2 needs at least a 2-D grid")
    X = _dft2_array(arr)
    return ComplexGrid(arr.shape[-2], arr.shape[-1], X.real.copy(), X.imag.copy())


def idft2(grid: ComplexGrid) -> np.ndarray:
    """Inverse of :func:`dft2`; returns the real part."""
    return _idft2_array(grid.to_complex()).real


def filter_operator(mask: np.ndarray) -> np.ndarray:
    """Real ``l x l`` matrix of the masked round trip ``idft2(mask * dft2(.))``.

    Built column by column from the DFT of each unit grid, so applying it to
    a token matrix equals filtering every channel separately.
    """
    g = mask.shape[0]
    basis = np.eye(g * g).reshape(g * g, g, g)
    cols = _idft2_array(_dft2_array(basis) * mask).real
    return cols.reshape(g * g, g * g).T.copy()


def fourier_filter(x: Tensor, mask: np.ndarray, operator: np.ndarray | None = None) -> Tensor:
    """Apply a real 0/1 frequency mask to each channel of a token grid.

    ``x`` has shape ``(..., l, d)`` with ``l = g*g``; tokens are laid out
    row-major on a ``g x g`` grid.  ``operator`` may carry a cached
    :func:`filter_operator` for ``mask``.
    """
    g = mask.shape[0]
    l = x.shape[-2]
    if g * g != l:
        raise ShapeError(f"mask {mask.shape} does not fit {l} tokens")
    P = filter_operator(mask) if operator is None else operator
    Pt = P.T
    return _make("fourier_filter", P @ x.data, (x,), lambda gr: (Pt @ gr,))


# backward --------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable leaf; grads accumulate."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.node_id is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    nodes = _RECORD.nodes
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node_id is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif inp.node_id in pending:
                pending[inp.node_id] = pending[inp.node_id] + gi
            else:
                pending[inp.node_id] = gi
