"""Dense float tensors with tape-based reverse-mode differentiation.

A `Tensor` wraps a C-contiguous float32 or float64 numpy array. Operations
record onto the innermost active `Tape` (a thread-confined `with` context);
`backward(loss)` replays the tape in reverse and deposits gradients on every
recorded leaf that requires them. Without an active tape the same functions
run as plain numpy, which is how inference executes.

float32 is the working precision; float64 ("shadow mode") exists for the
finite-difference tooling in `mat.gradcheck`.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ArgumentError, LabelError, MaskError, ShapeError

LOG_FLOOR = 1e-9
_CHECK_FINITE = os.environ.get("MAT_DEBUG_FINITE", "") not in ("", "0")


class Tensor:
    """Immutable value (except for gradient accumulation) with optional grad."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Build a Tensor with an explicit dtype (float32 unless shadow mode)."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


_tls = threading.local()


class Tape:
    """Ordered record of operations for one forward/backward pass.

    Confined to a single thread; nesting is allowed and the innermost tape
    records. Inputs of every node precede it, so one reverse sweep visits
    each node exactly once.
    """

    def __init__(self):
        self._nodes: list = []  # (output, inputs, vjp)
        self._produced: set = set()
        self._leaves: dict = {}  # id -> Tensor

    def __enter__(self) -> "Tape":
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tls.stack.pop()
        return False

    def _record(self, output: Tensor, inputs: tuple, vjp) -> None:
        self._nodes.append((output, inputs, vjp))
        self._produced.add(id(output))
        output._tape = self
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)

    def __len__(self) -> int:
        return len(self._nodes)


def active_tape() -> Optional[Tape]:
    stack = getattr(_tls, "stack", None)
    return stack[-1] if stack else None


def _make_output(data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise ArgumentError("non-finite values produced by an operation")
    tape = active_tape()
    recording = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=recording)
    if recording:
        tape._record(out, inputs, vjp)
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ArgumentError(f"mixed dtypes {dt} and {t.data.dtype}")


def backward(loss: Tensor) -> None:
    """Reverse-accumulate gradients of a scalar loss over its tape.

    Every requires_grad leaf recorded on the tape receives a grad buffer;
    leaves whose path never reaches the loss get zeros. Accumulation order
    is the reverse tape order, so results are bit-reproducible.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ArgumentError("loss was not recorded on a tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for output, inputs, vjp in reversed(tape._nodes):
        g = grads.pop(id(output), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, leaf in tape._leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may be 1-D and broadcast over the leading axes of a."""
    _check_same_dtype(a, b)
    if a.shape != b.shape and not (b.data.ndim == 1 and a.shape[-1] == b.shape[0]):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    bias = a.shape != b.shape

    def vjp(g):
        ga = g if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        gb = g.reshape(-1, b.shape[0]).sum(axis=0) if bias else g
        return ga, gb

    return _make_output(a.data + b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _make_output(a.data * b.data, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = a.data.dtype.type(s)

    def vjp(g):
        return (g * s,)

    return _make_output(a.data * s, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")

    def vjp(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make_output(a.data @ b.data, (a, b), vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along axis 0."""
    parts = list(parts)
    _check_same_dtype(*parts)
    width = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeError(f"concat_rows: widths differ ({[p.shape for p in parts]})")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(
            g[offsets[i]:offsets[i + 1]] if p.requires_grad else None
            for i, p in enumerate(parts)
        )

    return _make_output(np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous copy of rows [start, stop) of a 2-D tensor."""
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice_rows: [{start}, {stop}) invalid for shape {x.shape}")

    def vjp(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _make_output(x.data[start:stop].copy(), (x,), vjp)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0 of a 2-D tensor, kept as shape (1, D)."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows: expected 2-D, got {x.shape}")
    n = x.shape[0]

    def vjp(g):
        return (np.repeat(g / n, n, axis=0),)

    return _make_output(x.data.mean(axis=0, keepdims=True), (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""

    def vjp(g):
        return (np.full_like(x.data, g.reshape(())),)

    return _make_output(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    d = x.data
    c = d.dtype.type(0.7978845608028654)  # sqrt(2/pi)
    a3 = d.dtype.type(0.044715)
    inner = c * (d + a3 * d * d * d)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def vjp(g):
        sech2 = 1.0 - t * t
        dinner = c * (1.0 + 3.0 * a3 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * sech2 * dinner),)

    return _make_output(out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization / attention / interpolation
# ---------------------------------------------------------------------------


def softmax_lastdim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-stabilized softmax over the last dimension.

    `mask` is a boolean array of x's shape; masked positions come out
    exactly zero. A row with no unmasked position is an error.
    """
    n = x.shape[-1]
    flat = x.data.reshape(-1, n)
    if mask is not None:
        if mask.shape != x.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != input {x.shape}")
        mflat = np.ascontiguousarray(mask.reshape(-1, n), dtype=bool)
        dead = ~mflat.any(axis=1)
        if dead.any():
            raise MaskError(f"softmax row {int(np.flatnonzero(dead)[0])} is fully masked")
    else:
        mflat = None
    y = kernels.softmax_rows_forward(flat, mflat)

    def vjp(g):
        dx = kernels.softmax_rows_backward(y, g.reshape(-1, n))
        return (dx.reshape(x.shape),)

    return _make_output(y.reshape(x.shape), (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization over the last dimension."""
    _check_same_dtype(x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},)")
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    y, mean, rstd = kernels.layer_norm_forward(flat, gamma.data, beta.data, eps)

    def vjp(g):
        dx, dgamma, dbeta = kernels.layer_norm_backward(
            flat, gamma.data, mean, rstd, g.reshape(-1, d))
        return (dx.reshape(x.shape) if x.requires_grad else None,
                dgamma if gamma.requires_grad else None,
                dbeta if beta.requires_grad else None)

    return _make_output(y.reshape(x.shape), (x, gamma, beta), vjp)


def fused_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                    mask: Optional[np.ndarray] = None,
                    top_k: Optional[int] = None,
                    weights_sink: Optional[list] = None) -> Tensor:
    """Multi-head scaled dot-product attention on projected q/k/v.

    q: (Tq, D), k/v: (Tk, D); heads are contiguous column groups. `mask`
    is (Tq, Tk) boolean, True = key allowed. With `top_k`, only the top_k
    largest logits per row survive before softmax (ties keep the lower key
    index); rows with at most top_k allowed keys are untouched, so
    top_k >= Tk reproduces dense attention bit-for-bit.
    """
    _check_same_dtype(q, k, v)
    tq, d = q.shape
    tk = k.shape[0]
    if k.shape != (tk, d) or v.shape != (tk, d):
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} inconsistent")
    if d % num_heads != 0:
        raise ShapeError(f"attention: width {d} not divisible by {num_heads} heads")
    if top_k is not None and top_k < 1:
        raise ArgumentError(f"top_k must be >= 1, got {top_k}")
    if mask is not None:
        if mask.shape != (tq, tk):
            raise ShapeError(f"attention mask shape {mask.shape} != ({tq}, {tk})")
        dead = ~mask.any(axis=1)
        if dead.any():
            raise MaskError(f"attention query row {int(np.flatnonzero(dead)[0])} has no allowed key")
    head_dim = d // num_heads
    sc = 1.0 / np.sqrt(head_dim)
    out, weights = kernels.sdpa_forward(q.data, k.data, v.data, num_heads, sc, mask, top_k)
    if weights_sink is not None:
        weights_sink.append(weights)

    def vjp(g):
        dq, dk, dv = kernels.sdpa_backward(q.data, k.data, v.data, num_heads, sc, weights, g)
        return (dq if q.requires_grad else None,
                dk if k.requires_grad else None,
                dv if v.requires_grad else None)

    return _make_output(out, (q, k, v), vjp)


def _interp_weights(n: int, target_len: int, dtype) -> np.ndarray:
    """Align-endpoints linear interpolation matrix (target_len, n)."""
    w = np.zeros((target_len, n), dtype=np.float64)
    if target_len == 1:
        w[0, 0] = 1.0
        return w.astype(dtype)
    for j in range(target_len):
        pos = j * (n - 1) / (target_len - 1)
        lo = int(np.floor(pos))
        if lo >= n - 1:
            w[j, n - 1] = 1.0
        else:
            frac = pos - lo
            w[j, lo] = 1.0 - frac
            w[j, lo + 1] = frac
    return w.astype(dtype)


def interpolate_linear_1d(x: Tensor, target_len: int) -> Tensor:
    """Linear interpolation along the token axis, per channel.

    Endpoints align exactly: output[0] == x[0], output[-1] == x[-1].
    target_len == len(x) is the identity (same tensor handed back).
    """
    if target_len <= 0:
        raise ArgumentError(f"target_len must be positive, got {target_len}")
    if x.data.ndim != 2:
        raise ShapeError(f"interpolate: expected 2-D, got {x.shape}")
    n = x.shape[0]
    if target_len == n:
        return x
    w = _interp_weights(n, target_len, x.data.dtype)

    def vjp(g):
        return (w.T @ g,)

    return _make_output(w @ x.data, (x,), vjp)


def cross_entropy(probs: Tensor, labels, weights: Optional[np.ndarray] = None) -> Tensor:
    """Summed negative log-likelihood of integer labels under probability rows.

    Probabilities are clamped below at LOG_FLOOR before the log; `weights`
    scales each row's contribution (zero excludes a row entirely).
    """
    if probs.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (T, C+1) probs, got {probs.shape}")
    t, ncls = probs.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (t,):
        raise ShapeError(f"cross_entropy: {t} rows but {labels.shape} labels")
    bad = (labels < 0) | (labels >= ncls)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise LabelError(f"label {int(labels[i])} at index {i} outside [0, {ncls - 1}]")
    if weights is None:
        w = np.ones(t, dtype=probs.data.dtype)
    else:
        w = np.asarray(weights, dtype=probs.data.dtype)
        if w.shape != (t,):
            raise ShapeError(f"cross_entropy: weights shape {w.shape} != ({t},)")
    floor = probs.data.dtype.type(LOG_FLOOR)
    picked = probs.data[np.arange(t), labels]
    clamped = np.maximum(picked, floor)
    loss = -(w * np.log(clamped)).sum()

    def vjp(g):
        dp = np.zeros_like(probs.data)
        live = picked >= floor
        dp[np.arange(t), labels] = np.where(live, -w / clamped, 0.0) * g.reshape(())
        return (dp,)

    return _make_output(np.asarray(loss, dtype=probs.data.dtype), (probs,), vjp)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------


def finite_diff_gradient(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                         step: Optional[float] = None) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element.

    Differences are accumulated in float64 regardless of x's dtype. The
    default step is 1e-3 for float32 inputs and 1e-5 for float64 shadow
    mode.
    """
    if step is None:
        step = 1e-3 if x.data.dtype == np.float32 else 1e-5

    def evaluate() -> float:
        r = f(x)
        return r.item() if isinstance(r, Tensor) else float(r)

    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = evaluate()
        flat[i] = orig - step
        fm = evaluate()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * float(step))
    return grad.reshape(x.data.shape)
