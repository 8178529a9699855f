"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active, and whose inputs require
gradients, are recorded in execution order. :func:`backward` replays the tape in
reverse and deposits gradients on the leaf tensors. Outside a tape every op is a
plain forward computation, which is how inference and the frozen teacher run.

Broadcasting is restricted to suffix shapes: an operand may be missing leading
(batch) dimensions, e.g. a ``(d,)`` bias added to a ``(B, n, d)`` activation.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

MASK_FILL = -1e9


class UsageError(ValueError):
    """Raised on shape, axis or protocol misuse."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


_ACTIVE: list["Tape"] = []


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _bad_item(t: Tensor) -> float:
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


class Tape:
    """Ordered record of differentiable operations.

    A tape may be replayed by :func:`backward` exactly once; a second call raises
    :class:`UsageError` instead of silently accumulating gradients twice.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.spent = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.spent:
            raise UsageError("tape already consumed by a previous backward call")
        if loss._tape is not self:
            raise UsageError("loss was not recorded on this tape")
        self.spent = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, rule in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
                elif parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad = parent.grad + pg
        self.nodes.clear()


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise UsageError("loss has no recorded history (was a Tape active?)")
    loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append((out, tuple(parents), rule))
    return out


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise UsageError(f"{op}: shapes {a} and {b} differ beyond leading batch dims")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise UsageError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a.shape, b.shape, "add")
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a.shape, b.shape, "sub")
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a.shape, b.shape, "mul")
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a.shape, b.shape, "div")
    out = a.data / b.data
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit(out, (a,), rule)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def detach(a: Tensor) -> Tensor:
    return Tensor._wrap(a.data)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = MASK_FILL) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (numpy broadcasting)."""
    mask = np.broadcast_to(mask, a.shape)
    return _emit(np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product.

    ``b`` may be 1-d (vector), 2-d (a weight shared across the batch) or have the
    same leading dimensions as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim <= 2 else -2]:
        raise UsageError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise UsageError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    out = a.data @ b.data

    if b.ndim == 1:
        def rule(g):
            ga = g[..., None] * b.data
            gb = np.tensordot(g, a.data, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
            return ga, gb
    elif b.ndim == 2:
        def rule(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def rule(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    return _emit(out, (a, b), rule)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a: Tensor, index) -> Tensor:
    """``a[index]`` with numpy indexing semantics."""
    out = a.data[index]

    def rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit(np.array(out), (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = _check_axis(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` for an integer id array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise UsageError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit(out, (table,), rule)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if axis is not None:
        axis = _check_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.asarray(out), (a,), rule)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[_check_axis(axis, a.ndim)]
    return mul(sum(a, axis, keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _emit(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def rule(g):
        gx_hat = g * gamma.data
        d = x.shape[-1]
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _emit(out, (x, gamma, beta), rule)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted sum of ``-log softmax(logits)[target]`` over all leading positions."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise UsageError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = np.asarray(-(w * picked).sum())

    def rule(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (w * g)[..., None],)

    return _emit(out, (logits,), rule)


def bce_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted sum of binary cross-entropies, ``targets`` being 1 for the positive class."""
    y = np.asarray(targets, dtype=np.float64)
    if logits.shape != y.shape:
        raise UsageError(f"bce_with_logits: logits {logits.shape} vs targets {y.shape}")
    w = np.ones(y.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits.data
    # -y log s(z) - (1-y) log(1-s(z)) == softplus(z) - y z
    per = np.logaddexp(0.0, z) - y * z
    out = np.asarray((w * per).sum())
    return _emit(out, (logits,), lambda g: ((_sigmoid_np(z) - y) * w * g,))


# ---------------------------------------------------------------- attention


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         mask: np.ndarray | None = None,
                         out_proj: Tensor | None = None,
                         return_weights: bool = False):
    """Multi-head attention over already-projected queries, keys and values.

    Args:
        q: ``(B, n_q, d)`` queries.
        k, v: ``(B, n_k, d)`` keys and values.
        heads: number of heads; must divide ``d``.
        mask: optional ``(B, n_k)`` boolean key-validity flags.
        out_proj: optional ``(d, d)`` matrix applied after the heads are concatenated.
        return_weights: also return the ``(B, heads, n_q, n_k)`` attention weights.
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise UsageError("attention expects (batch, seq, width) inputs")
    B, nq, d = q.shape
    nk = k.shape[1]
    if k.shape != (B, nk, d) or v.shape != (B, nk, d):
        raise UsageError(f"attention shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    if heads < 1 or d % heads:
        raise UsageError(f"{heads} heads do not divide width {d}")
    dh = d // heads

    def split(t, n):
        return transpose(reshape(t, (B, n, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q, nq), split(k, nk), split(v, nk)
    scores = mul(matmul(qh, transpose(kh)), 1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (B, nk):
            raise UsageError(f"mask shape {mask.shape} != {(B, nk)}")
        scores = masked_fill(scores, ~mask[:, None, None, :])
    weights = softmax(scores, axis=-1)
    out = reshape(transpose(matmul(weights, vh), (0, 2, 1, 3)), (B, nq, d))
    if out_proj is not None:
        out = matmul(out, out_proj)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------- checking


def grad_check(f: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over the checked
    coordinates (all of them unless ``coords`` selects flat indices).
    """
    base = np.array(point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with Tape():
        y = f(x)
    if y.size != 1:
        raise UsageError("grad_check needs a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise NumericError("non-finite function value at the check point")
    backward(y)
    analytic = np.zeros_like(base) if x.grad is None else x.grad
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = f(Tensor(base)).item()
        flat[i] = orig - epsilon
        lo = f(Tensor(base)).item()
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        numeric = (hi - lo) / (2 * epsilon)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                      epsilon: float = 1e-5, per_tensor: int = 4,
                      rng: np.random.Generator | None = None) -> float:
    """Finite-difference check of a loss with respect to named parameters.

    ``loss_fn`` must close over ``params`` and rebuild the loss from their current
    values. ``per_tensor`` coordinates are drawn from every parameter tensor.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    with Tape():
        loss = loss_fn()
    backward(loss)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size) if p.grad is None else p.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = loss_fn().item()
            flat[i] = orig - epsilon
            lo = loss_fn().item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NumericError(f"non-finite evaluation in {name}[{i}]")
            numeric = (hi - lo) / (2 * epsilon)
            worst = max(worst, abs(g[i] - numeric) / max(1.0, abs(numeric)))
        p.grad = None
    return worst
