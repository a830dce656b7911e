"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays. Every differentiable operation records a node
on the active ``Tape``; ``backward`` replays the tape in reverse execution
order, which is a reverse topological order of the computation graph, so
each node's backward rule runs exactly once.

Storage is row-major 64-bit throughout. There is no implicit broadcasting
between two tensors; rank expansion must be requested explicitly via
``broadcast_to`` (constants attached with ``add_const``/``mul_const`` may
use numpy broadcasting since they carry no gradient).
"""

from __future__ import annotations

import ctypes
import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateRowError, DimensionError, InputError


def _tune_allocator() -> None:
    # Training churns through many ~0.1-1 MB temporaries; above glibc's
    # default mmap threshold each one costs an mmap/munmap round trip.
    # Raising the threshold keeps them on the heap. Best-effort (glibc only).
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 29)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 29)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()

# Additive penalty for blocked logits; large enough that exp underflows to
# zero against any realistic finite logit, small enough to stay finite.
MASK_NEG = 1e30

GELU_CUBIC_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """Dense float64 array with optional gradient participation."""

    __slots__ = ("data", "grad", "grad_enabled", "tape")

    def __init__(self, data, grad_enabled: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.grad_enabled = grad_enabled
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.grad_enabled else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Light operator sugar; model code mostly uses the module functions.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ContractError("tapes do not nest")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _state.tape = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        out.tape = self
        self._nodes.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tracked ancestor of the scalar ``loss``."""
        if loss.shape != ():
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ContractError("loss is not connected to this tape")
        loss.grad = np.ones((), dtype=np.float64)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)

    def clear(self) -> None:
        self._nodes.clear()


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from ``loss`` over the tape that recorded it."""
    if loss.tape is None:
        raise ContractError("loss was not recorded on any tape")
    loss.tape.backward(loss)


def parameter(data, rng: np.random.Generator | None = None, scale: float = 1.0) -> Tensor:
    """Create a trainable leaf tensor; ``data`` may be a shape tuple to sample."""
    if isinstance(data, tuple):
        if rng is None:
            raise ContractError("shape-based parameter creation needs an rng")
        data = rng.normal(0.0, scale, size=data)
    return Tensor(data, grad_enabled=True)


def constant(data) -> Tensor:
    return Tensor(data, grad_enabled=False)


def _tracked(t: Tensor) -> bool:
    return t.grad_enabled or t.tape is not None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not _tracked(t):
        return
    if t.grad is None:
        # copy: g may be shared with another input's accumulation or be a view
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _emit(out_data: np.ndarray, backward_fn, *inputs: Tensor) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(_tracked(t) for t in inputs):
        tape._record(out, backward_fn)
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_leading(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum away leading axes a numpy broadcast introduced."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _emit(a.data + b.data, bwd, a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _emit(a.data - b.data, bwd, a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _emit(a.data * b.data, bwd, a, b)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _emit(-a.data, bwd, a)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        _accum(a, g * c)

    return _emit(a.data * c, bwd, a)


def add_const(a: Tensor, c) -> Tensor:
    """Add a non-trainable constant (scalar or broadcastable array)."""
    out = a.data + np.asarray(c, dtype=np.float64)
    if out.shape != a.shape:
        raise DimensionError(f"add_const: constant of shape {np.shape(c)} "
                             f"does not broadcast onto {a.shape}")

    def bwd(g):
        _accum(a, g)

    return _emit(out, bwd, a)


def mul_const(a: Tensor, c) -> Tensor:
    """Hadamard product with a non-trainable constant; gradient is masked by it."""
    carr = np.asarray(c, dtype=np.float64)
    out = a.data * carr
    if out.shape != a.shape:
        raise DimensionError(f"mul_const: constant of shape {carr.shape} "
                             f"does not broadcast onto {a.shape}")

    def bwd(g):
        _accum(a, g * carr)

    return _emit(out, bwd, a)


def add_n(parts: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors."""
    if not parts:
        raise ContractError("add_n of zero tensors")
    for p in parts[1:]:
        _require_same_shape(parts[0], p, "add_n")
    out = parts[0].data.copy()
    for p in parts[1:]:
        out += p.data

    def bwd(g):
        for p in parts:
            _accum(p, g)

    return _emit(out, bwd, *parts)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes must match exactly, except that a rank-2 operand is
    broadcast over the other operand's leading axes (its gradient is
    sum-reduced back).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul requires rank >= 2 operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions {ad.shape} x {bd.shape} disagree")
    if ad.ndim > 2 and bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: leading dimensions {ad.shape[:-2]} != {bd.shape[:-2]}")

    def bwd(g):
        if _tracked(a):
            _accum(a, _reduce_leading(g @ np.swapaxes(bd, -1, -2), ad.shape))
        if _tracked(b):
            _accum(b, _reduce_leading(np.swapaxes(ad, -1, -2) @ g, bd.shape))

    return _emit(ad @ bd, bwd, a, b)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` with ``w: [k, n]`` and ``b: [n]``."""
    xd, wd, bdat = x.data, w.data, b.data
    if wd.ndim != 2 or bdat.ndim != 1 or bdat.shape[0] != wd.shape[1]:
        raise DimensionError("linear expects w [k, n] and b [n]")
    if xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"linear: {xd.shape} @ {wd.shape}")
    k, n = wd.shape

    def bwd(g):
        if _tracked(x):
            _accum(x, g @ wd.T)
        gf = g.reshape(-1, n)
        if _tracked(w):
            _accum(w, xd.reshape(-1, k).T @ gf)
        if _tracked(b):
            _accum(b, gf.sum(axis=0))

    out = xd @ wd
    out += bdat
    return _emit(out, bwd, x, w, b)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def bwd(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _emit(a.data.transpose(axes), bwd, a)


def swap_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    in_shape = a.shape

    def bwd(g):
        _accum(a, g.reshape(in_shape))

    return _emit(a.data.reshape(shape), bwd, a)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit rank-matched expansion; gradient sums over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    expanded = tuple(lead + i for i in range(a.ndim)
                     if a.shape[i] == 1 and shape[lead + i] != 1)

    def bwd(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if expanded:
            g = g.sum(axis=tuple(e - lead for e in expanded), keepdims=True)
        _accum(a, g)

    return _emit(out, bwd, a)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    datas = [p.data for p in parts]
    base = datas[0].shape
    for d in datas[1:]:
        if d.ndim != len(base) or any(d.shape[i] != base[i]
                                      for i in range(len(base)) if i != axis % len(base)):
            raise DimensionError("concat: shapes differ off the concat axis")
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            _accum(p, g[tuple(idx)])

    return _emit(np.concatenate(datas, axis=axis), bwd, *parts)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _emit(np.asarray(a.data.sum()), bwd, a)


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def bwd(g):
        _accum(a, np.full(a.shape, float(g) / n))

    return _emit(np.asarray(a.data.mean()), bwd, a)


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------

def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to cells where ``mask`` is 1.

    ``mask`` is a non-trainable {0,1} array broadcastable onto ``logits``.
    Blocking is applied as an additive -1e30 penalty before normalization
    and masked cells are zeroed exactly afterwards, so both their
    probability and their gradient are exactly zero.
    """
    mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    ld = logits.data
    try:
        mb = np.broadcast_to(mask_arr, ld.shape)
    except ValueError as exc:
        raise DimensionError(f"mask {mask_arr.shape} does not fit logits {ld.shape}") from exc
    if not np.all(mask_arr.any(axis=-1)):
        raise DegenerateRowError("masked_softmax: a row has no unmasked cells")
    # penalty stays at the mask's own (usually smaller) shape; the add broadcasts
    z = ld + (mask_arr - 1.0) * MASK_NEG
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z) * mb
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if _tracked(logits):
            dot = (g * p).sum(axis=-1, keepdims=True)
            _accum(logits, p * (g - dot))

    return _emit(p, bwd, logits)


def softmax(logits: Tensor) -> Tensor:
    return masked_softmax(logits, np.ones(logits.shape[-1]))


def normalize_rows(a: Tensor) -> Tensor:
    """Rescale each last-axis row to sum to 1; zero-mass rows are an error."""
    s = a.data.sum(axis=-1, keepdims=True)
    if np.any(s <= 0.0):
        raise DegenerateRowError("normalize_rows: a row has no surviving mass")
    y = a.data / s

    def bwd(g):
        if _tracked(a):
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(a, (g - dot) / s)

    return _emit(y, bwd, a)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm: gain/bias must match the last axis")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        if _tracked(x):
            dxh = g * gain.data
            m1 = dxh.mean(axis=-1, keepdims=True)
            m2 = (dxh * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxh - m1 - xhat * m2))
        if _tracked(gain):
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if _tracked(bias):
            _accum(bias, g.reshape(-1, d).sum(axis=0))

    return _emit(out, bwd, x, gain, bias)


def _gelu_forward(xd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u = _SQRT_2_OVER_PI * (xd + GELU_CUBIC_COEFF * (xd * xd * xd))
    t = np.tanh(u)
    return 0.5 * xd * (1.0 + t), t


def _gelu_grad(xd: np.ndarray, t: np.ndarray) -> np.ndarray:
    du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEFF * xd * xd)
    return 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation with cubic coefficient 0.044715."""
    xd = x.data
    out, t = _gelu_forward(xd)

    def bwd(g):
        _accum(x, g * _gelu_grad(xd, t))

    return _emit(out, bwd, x)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; the gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(f"embedding id out of range [0, {table.shape[0]})")

    def bwd(g):
        if not _tracked(table):
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))

    return _emit(table.data[ids], bwd, table)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(``logits``).

    ``logits`` has shape [..., V]; ``targets`` holds integer ids of shape
    ``logits.shape[:-1]``.
    """
    tg = np.asarray(targets)
    ld = logits.data
    if tg.shape != ld.shape[:-1]:
        raise DimensionError(f"targets {tg.shape} do not match logits {ld.shape}")
    v = ld.shape[-1]
    if tg.size and (tg.min() < 0 or tg.max() >= v):
        raise InputError(f"target id out of range [0, {v})")
    flat = ld.reshape(-1, v)
    ids = tg.reshape(-1)
    n = flat.shape[0]
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    loss = float((lse - flat[np.arange(n), ids]).mean())

    def bwd(g):
        if not _tracked(logits):
            return
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), ids] -= 1.0
        _accum(logits, (p * (float(g) / n)).reshape(ld.shape))

    return _emit(np.asarray(loss), bwd, logits)


def attention_probs(q: Tensor, k: Tensor, mask, scale_factor: float,
                    noise: np.ndarray | None = None,
                    inv_temperature: float = 1.0) -> Tensor:
    """Fused masked softmax of scaled dot-product scores.

    Computes masked_softmax(((q @ k^T) * scale_factor + noise) *
    inv_temperature, mask) in one tape node; ``noise`` is a frozen constant.
    Semantically identical to composing matmul/scale/add_const/
    masked_softmax, just cheaper.
    """
    qd, kd = q.data, k.data
    if qd.shape[:-2] != kd.shape[:-2] or qd.shape[-1] != kd.shape[-1]:
        raise DimensionError(f"attention_probs: {qd.shape} vs {kd.shape}")
    mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if not np.all(mask_arr.any(axis=-1)):
        raise DegenerateRowError("attention_probs: a row has no unmasked cells")
    scores = np.matmul(qd, np.swapaxes(kd, -1, -2))
    scores *= scale_factor
    if noise is not None:
        scores += noise
    if inv_temperature != 1.0:
        scores *= inv_temperature
    try:
        mb = np.broadcast_to(mask_arr, scores.shape)
    except ValueError as exc:
        raise DimensionError(f"mask {mask_arr.shape} does not fit scores "
                             f"{scores.shape}") from exc
    z = scores + (mask_arr - 1.0) * MASK_NEG
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e *= mb
    p = e / e.sum(axis=-1, keepdims=True)
    chain = scale_factor * inv_temperature

    def bwd(g):
        dz = p * (g - (g * p).sum(axis=-1, keepdims=True))
        dz *= chain
        if _tracked(q):
            _accum(q, np.matmul(dz, kd))
        if _tracked(k):
            _accum(k, np.matmul(np.swapaxes(dz, -1, -2), qd))

    return _emit(p, bwd, q, k)


def _to_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return np.ascontiguousarray(
        x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3))


def _from_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, t, h * dh)


def prefix_attention_probs(q_lin: Tensor, k_lin: Tensor,
                           prefix_k: Tensor | None, mask, n_heads: int,
                           scale_factor: float,
                           noise: np.ndarray | None = None,
                           inv_temperature: float = 1.0) -> Tensor:
    """Multi-head masked attention probabilities straight from projections.

    Splits q/k into heads, prepends per-head prefix keys (a [P, d_model]
    tensor), and runs the scaled masked softmax, all in one tape node.
    Output shape is [B, H, Tq, P+Tk].
    """
    qd, kd = q_lin.data, k_lin.data
    if qd.ndim != 3 or kd.ndim != 3 or qd.shape[-1] != kd.shape[-1]:
        raise DimensionError(f"prefix_attention_probs: {qd.shape} vs {kd.shape}")
    b, tq, d = qd.shape
    if d % n_heads:
        raise DimensionError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    p = 0 if prefix_k is None else prefix_k.shape[0]
    qh = _to_heads(qd, n_heads)
    kh = _to_heads(kd, n_heads)
    if p:
        pk_heads = prefix_k.data.reshape(p, n_heads, dh).transpose(1, 0, 2)
        kh = np.concatenate(
            [np.broadcast_to(pk_heads[None], (b, n_heads, p, dh)), kh], axis=2)
    mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if not np.all(mask_arr.any(axis=-1)):
        raise DegenerateRowError("prefix_attention_probs: a row has no unmasked cells")
    scores = qh @ np.ascontiguousarray(np.swapaxes(kh, -1, -2))
    scores *= scale_factor
    if noise is not None:
        scores += noise
    if inv_temperature != 1.0:
        scores *= inv_temperature
    try:
        mb = np.broadcast_to(mask_arr, scores.shape)
    except ValueError as exc:
        raise DimensionError(f"mask {mask_arr.shape} does not fit scores "
                             f"{scores.shape}") from exc
    z = scores + (mask_arr - 1.0) * MASK_NEG
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e *= mb
    probs = e / e.sum(axis=-1, keepdims=True)
    chain = scale_factor * inv_temperature

    def bwd(g):
        dz = probs * (g - (g * probs).sum(axis=-1, keepdims=True))
        dz *= chain
        if _tracked(q_lin):
            _accum(q_lin, _from_heads(dz @ kh))
        dk_needed = _tracked(k_lin)
        dp_needed = p and _tracked(prefix_k)
        if dk_needed or dp_needed:
            dkh = np.swapaxes(dz, -1, -2) @ qh
            if dp_needed:
                dpk = dkh[:, :, :p, :].sum(axis=0).transpose(1, 0, 2)
                _accum(prefix_k, dpk.reshape(p, d))
            if dk_needed:
                _accum(k_lin, _from_heads(np.ascontiguousarray(dkh[:, :, p:, :])))

    inputs = (q_lin, k_lin) if prefix_k is None else (q_lin, k_lin, prefix_k)
    return _emit(probs, bwd, *inputs)


def prefix_attention_mix(attn: Tensor, v_lin: Tensor,
                         prefix_v: Tensor | None, n_heads: int) -> Tensor:
    """Mix per-head values (with prefix rows prepended) and merge heads.

    ``attn`` is [B, H, Tq, P+Tk]; the result is [B, Tq, d_model].
    """
    ad_, vd = attn.data, v_lin.data
    b, h, tq, keys = ad_.shape
    _, tk, d = vd.shape
    dh = d // n_heads
    p = 0 if prefix_v is None else prefix_v.shape[0]
    if keys != p + tk:
        raise DimensionError(f"attention keys {keys} != prefix {p} + inputs {tk}")
    vh = _to_heads(vd, n_heads)
    if p:
        pv_heads = prefix_v.data.reshape(p, n_heads, dh).transpose(1, 0, 2)
        vh = np.concatenate(
            [np.broadcast_to(pv_heads[None], (b, n_heads, p, dh)), vh], axis=2)
    out = _from_heads(ad_ @ vh)

    def bwd(g):
        gh = _to_heads(g, n_heads)
        if _tracked(attn):
            _accum(attn, gh @ np.swapaxes(vh, -1, -2))
        dv_needed = _tracked(v_lin)
        dp_needed = p and _tracked(prefix_v)
        if dv_needed or dp_needed:
            dvh = np.swapaxes(ad_, -1, -2) @ gh
            if dp_needed:
                dpv = dvh[:, :, :p, :].sum(axis=0).transpose(1, 0, 2)
                _accum(prefix_v, dpv.reshape(p, d))
            if dv_needed:
                _accum(v_lin, _from_heads(np.ascontiguousarray(dvh[:, :, p:, :])))

    inputs = (attn, v_lin) if prefix_v is None else (attn, v_lin, prefix_v)
    return _emit(out, bwd, *inputs)


def ff_gelu(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Fused position-wise feed-forward: linear -> GELU -> linear."""
    xd = x.data
    h = xd @ w1.data
    h += b1.data
    a, t = _gelu_forward(h)
    out = a @ w2.data
    out += b2.data
    d_in, d_ff = w1.shape

    def bwd(g):
        gf = g.reshape(-1, w2.shape[1])
        da = g @ w2.data.T
        if _tracked(w2):
            _accum(w2, a.reshape(-1, d_ff).T @ gf)
        if _tracked(b2):
            _accum(b2, gf.sum(axis=0))
        dh = da * _gelu_grad(h, t)
        dhf = dh.reshape(-1, d_ff)
        if _tracked(x):
            _accum(x, dh @ w1.data.T)
        if _tracked(w1):
            _accum(w1, xd.reshape(-1, d_in).T @ dhf)
        if _tracked(b1):
            _accum(b1, dhf.sum(axis=0))

    return _emit(out, bwd, x, w1, b1, w2, b2)


def soft_bernoulli_gate(x: Tensor, noise, tau: float, eps: float = 1e-12) -> Tensor:
    """Multiply ``x`` (values in [0,1]) by a relaxed-Bernoulli gate.

    The gate is sigmoid((logit(x) + noise) / tau) with ``noise`` a frozen
    logistic sample; gradients flow through both the gate and the direct
    product (x is clamped to [eps, 1-eps] inside the logit only).
    """
    if tau <= 0:
        raise ContractError("temperature must be positive")
    noise = np.asarray(noise, dtype=np.float64)
    xd = x.data
    a = np.clip(xd, eps, 1.0 - eps)
    s = (np.log(a) - np.log1p(-a) + noise) / tau
    m = 1.0 / (1.0 + np.exp(-s))
    inside = ((xd > eps) & (xd < 1.0 - eps)).astype(np.float64)

    def bwd(g):
        dgate = m * (1.0 - m) / (tau * a * (1.0 - a))
        _accum(x, g * (m + inside * xd * dgate))

    return _emit(xd * m, bwd, x)
