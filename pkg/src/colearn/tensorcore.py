"""Reverse-mode differentiation over dense numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient.  Outside a tape every op is a plain
numpy computation, which is how inference runs.

    with Tape() as tape:
        loss = tc.sum(tc.mul(x, x))
    tape.backward(loss)
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

#: Diagnostic counters ("kl-clamp", "degenerate-cosine").
counters: Counter = Counter()

KL_FLOOR = 1e-12
COS_FLOOR = 1e-12

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        rg = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); record a new one")
        self._entries.append((out, inputs, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self._consumed:
            raise RuntimeError("backward() already ran on this tape; re-record the computation")
        self._consumed = True
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward() needs an explicit grad for non-scalar outputs")
            grad = np.ones_like(loss.data)
        if not loss.requires_grad:
            self._entries.clear()
            return
        if loss.is_leaf:
            _accumulate_leaf(loss, grad)
            return
        pending: dict[int, np.ndarray] = {id(loss): grad}
        for out, inputs, fn in reversed(self._entries):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    _accumulate_leaf(t, gi)
                else:
                    key = id(t)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
        self._entries.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.is_leaf = False
    out.name = None
    tape = _TAPES[-1] if _TAPES else None
    rg = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = rg
    if rg:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    x2 = x * x
    th = np.tanh(c * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit generator")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- shape


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    n = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b``; ``b`` may be a 2-D weight shared across the leading axes of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ weight.data.T) if x.requires_grad else None
        gw = (x.data.reshape(-1, x.shape[-1]).T @ g2) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return _make(out, inputs, backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward)


# ---------------------------------------------------------------- normalisation


def softmax_rows(logits: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    x = logits.data
    if x.shape[-1] == 0:
        raise ValueError("empty distribution")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (logits,), backward)


def log_softmax(logits: Tensor) -> Tensor:
    x = logits.data
    if x.shape[-1] == 0:
        raise ValueError("empty distribution")
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), backward)


def gather_logprobs(logp: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``logp[..., index]`` along the last axis; result has ``index.shape``."""
    index = np.asarray(index, dtype=np.int64)
    picked = np.take_along_axis(logp.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        gl = np.zeros_like(logp.data)
        np.put_along_axis(gl, index[..., None], g[..., None], axis=-1)
        return (gl,)

    return _make(picked, (logp,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward)


# ---------------------------------------------------------------- divergences & similarity


def kl_rows(p, q, detach_p: bool = True) -> Tensor:
    """Per-row ``KL(p || q)`` over the last axis of two probability tensors.

    ``q`` is floored at 1e-12 where ``p > 0`` (each floored entry bumps
    ``counters["kl-clamp"]``); ``0 * log(0 / q)`` is taken as 0.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    pd, qd = p.data, q.data
    low = qd < KL_FLOOR
    if low.any():
        counters["kl-clamp"] += int(np.count_nonzero(low & (pd > 0)))
    qc = np.maximum(qd, KL_FLOOR)
    pos = pd > 0
    logp = np.log(np.where(pos, pd, 1.0))
    out = np.where(pos, pd * (logp - np.log(qc)), 0.0).sum(axis=-1)
    if detach_p:
        p = p.detach()

    def backward(g):
        g = g[..., None]
        gq = np.where(low, 0.0, -g * pd / qc) if q.requires_grad else None
        gp = None
        if p.requires_grad:
            gp = np.where(pos, g * (logp - np.log(qc) + 1.0), 0.0)
        return gp, gq

    return _make(out, (p, q), backward)


def kl_log_rows(logp, logq, detach_p: bool = True) -> Tensor:
    """Per-row ``KL(p || q)`` from log-probabilities (no flooring needed)."""
    logp, logq = _as_tensor(logp), _as_tensor(logq)
    p = np.exp(logp.data)
    pos = p > 0
    with np.errstate(invalid="ignore"):
        diff = np.where(pos, logp.data - logq.data, 0.0)
    out = (p * diff).sum(axis=-1)
    if detach_p:
        logp = logp.detach()

    def backward(g):
        g = g[..., None]
        gq = -g * p if logq.requires_grad else None
        gp = np.where(pos, g * p * (diff + 1.0), 0.0) if logp.requires_grad else None
        return gp, gq

    return _make(out, (logp, logq), backward)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """``S[i, j] = a_i . b_j / (|a_i| |b_j| + 1e-12)`` for row sets ``a`` [n, d], ``b`` [m, d]."""
    A, B = a.data, b.data
    na = np.sqrt((A * A).sum(axis=-1))
    nb = np.sqrt((B * B).sum(axis=-1))
    degenerate = int(np.count_nonzero(na == 0) + np.count_nonzero(nb == 0))
    if degenerate:
        counters["degenerate-cosine"] += degenerate
    den = np.outer(na, nb) + COS_FLOOR
    dot = A @ B.T
    out = dot / den

    def backward(g):
        r = g / den
        w = g * dot / (den * den)
        ga = gb = None
        if a.requires_grad:
            unit_a = A / np.where(na > 0, na, 1.0)[:, None]
            ga = r @ B - unit_a * (w @ nb)[:, None]
        if b.requires_grad:
            unit_b = B / np.where(nb > 0, nb, 1.0)[:, None]
            gb = r.T @ A - unit_b * (w.T @ na)[:, None]
        return ga, gb

    return _make(out, (a, b), backward)


def cosine_sim(u, v) -> Tensor:
    """Cosine similarity of two vectors as a 0-d tensor."""
    u, v = _as_tensor(u), _as_tensor(v)
    d = u.shape[-1]
    return reshape(cosine_matrix(reshape(u, (1, d)), reshape(v, (1, d))), ())


# ---------------------------------------------------------------- attention


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
              add_mask: np.ndarray | None = None,
              keep: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention on pre-projected inputs.

    q: [B, Nq, d]; k, v: [B, Nk, d].  ``add_mask`` ([B or 1, Nq or 1, Nk]) is
    added to the scores.  ``keep`` (same layout, 0/1) zeroes probabilities
    afterwards, so rows with no admissible key attend to nothing.
    """
    B, Nq, d = q.shape
    Nk = k.shape[1]
    h = n_heads
    dh = d // h
    sc = 1.0 / math.sqrt(dh)
    Q = q.data.reshape(B, Nq, h, dh).transpose(0, 2, 1, 3)
    K = k.data.reshape(B, Nk, h, dh).transpose(0, 2, 1, 3)
    V = v.data.reshape(B, Nk, h, dh).transpose(0, 2, 1, 3)
    S = (Q @ K.transpose(0, 1, 3, 2)) * sc
    if add_mask is not None:
        S = S + add_mask[:, None]
    S = S - S.max(axis=-1, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=-1, keepdims=True)
    Pk = P if keep is None else P * keep[:, None]
    O = Pk @ V
    out = O.transpose(0, 2, 1, 3).reshape(B, Nq, d)

    def backward(g):
        G = g.reshape(B, Nq, h, dh).transpose(0, 2, 1, 3)
        gV = Pk.transpose(0, 1, 3, 2) @ G
        gP = G @ V.transpose(0, 1, 3, 2)
        if keep is not None:
            gP = gP * keep[:, None]
        gS = P * (gP - (gP * P).sum(axis=-1, keepdims=True)) * sc
        gQ = gS @ K
        gK = gS.transpose(0, 1, 3, 2) @ Q

        def back(x, n):
            return x.transpose(0, 2, 1, 3).reshape(B, n, d)

        return (back(gQ, Nq) if q.requires_grad else None,
                back(gK, Nk) if k.requires_grad else None,
                back(gV, Nk) if v.requires_grad else None)

    return _make(out, (q, k, v), backward)


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel: float
    max_abs: float
    n_checked: int


def grad_check_report(f: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-4,
                      max_per_leaf: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``f`` must rebuild the scalar objective from the current leaf values on
    every call.  ``max_per_leaf`` limits the check to a random subset of
    elements of each leaf.
    """
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise TypeError("gradient checks need float64 leaves")
        leaf.grad = None
        leaf.requires_grad = True
    with Tape() as tape:
        out = f()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite objective")
    tape.backward(out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def value() -> float:
        val = float(f().data)
        if not math.isfinite(val):
            raise FloatingPointError("non-finite objective")
        return val

    max_rel = max_abs = 0.0
    n = 0
    for leaf, ga in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_leaf is not None and flat.size > max_per_leaf:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_per_leaf, replace=False)
        gflat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(gflat[i] - num)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(1e-8, abs(gflat[i]) + abs(num)))
            n += 1
    return GradCheckReport(max_rel, max_abs, n)


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-4, **kw) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return grad_check_report(f, leaves, eps, **kw).max_rel
