"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` when one is active (``with Tape()``)
and at least one input requires a gradient. Outside a tape every op is a plain
numpy computation, which is what evaluation uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in leaf tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already topologically
    sorted. A tape can be differentiated once; record a fresh tape per step.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
        self.nodes.append(_Node(out, parents, vjp))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to leaf tensors.

        With ``wrt`` given, every listed tensor gets an entry (zeros when the
        loss does not depend on it); otherwise all reached leaves are returned.
        The ``grad`` attribute of each returned leaf is set as well.
        """
        if self.consumed:
            raise RuntimeError("tape already differentiated; record a new tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        self.consumed = True
        produced = {id(n.out) for n in self.nodes}
        if id(loss) not in produced and not loss.requires_grad:
            raise ValueError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if id(parent) not in produced:
                    leaves[key] = parent
        if id(loss) not in produced:
            leaves[id(loss)] = loss

        result: dict[Tensor, np.ndarray] = {}
        targets = list(wrt) if wrt is not None else list(leaves.values())
        for t in targets:
            g = grads.get(id(t))
            g = np.zeros_like(t.data) if g is None else g.reshape(t.shape)
            t.grad = g
            result[t] = g
        return result


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss, wrt)


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _result(arr: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _active()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, track)
    if track:
        tape._record(out, parents, vjp)
    return out


def _shape_err(op: str, *shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes " + " vs ".join(str(list(s)) for s in shapes))


# ---------------------------------------------------------------- elementwise


def _bias_compatible(a: Tensor, b: Tensor) -> bool:
    return b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias broadcast over leading axes of ``a``."""
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if _bias_compatible(a, b):
        bshape = b.shape
        return _result(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, *bshape).sum(0)))
    raise _shape_err("add", a.shape, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _result(a.data - b.data, (a, b), lambda g: (g, -g))
    if _bias_compatible(a, b):
        bshape = b.shape
        return _result(a.data - b.data, (a, b), lambda g: (g, -g.reshape(-1, *bshape).sum(0)))
    raise _shape_err("sub", a.shape, b.shape)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product of equal shapes. ``b`` may be a constant array or scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise _shape_err("mul", a.shape, b.shape)
        ad, bd = a.data, b.data
        return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    c = np.asarray(b, dtype=np.float64)
    if c.ndim and c.shape != a.shape:
        raise _shape_err("mul", a.shape, c.shape)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c) -> Tensor:
    return _result(a.data + c, (a,), lambda g: (g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a: Tensor, clamp: float | None = None) -> Tensor:
    """Natural log; with ``clamp`` the input is floored there and gets zero gradient below it."""
    x = a.data
    if clamp is None:
        return _result(np.log(x), (a,), lambda g: (g / x,))
    live = x > clamp
    xc = np.where(live, x, clamp)
    return _result(np.log(xc), (a,), lambda g: (np.where(live, g / xc, 0.0),))


def power(a: Tensor, p: float) -> Tensor:
    """``a ** p`` for non-negative ``a``; ``p == 0`` is the constant one."""
    x = a.data
    if p == 0:
        return _result(np.ones_like(x), (a,), lambda g: (np.zeros_like(g),))
    out = x ** p
    if p == 1:
        return _result(out, (a,), lambda g: (g,))
    return _result(out, (a,), lambda g: (g * p * x ** (p - 1),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Set entries where the constant boolean ``mask`` (broadcastable) is true."""
    m = np.broadcast_to(mask, a.shape)
    return _result(np.where(m, value, a.data), (a,), lambda g: (np.where(m, 0.0, g),))


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim
    return _result(a.data.sum(axis=ax), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum(a), 1.0 / n)


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a shared 2-D matrix or carries the same leading batch axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_err("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    if b.ndim == 2:
        def vjp(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        return _result(ad @ bd, (a, b), vjp)
    if a.shape[:-2] != b.shape[:-2]:
        raise _shape_err("matmul", a.shape, b.shape)

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    return _result(ad @ bd, (a, b), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat: no tensors")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] != tensors[0].shape[:ax] or t.shape[ax + 1:] != tensors[0].shape[ax + 1:]:
            raise _shape_err("concat", *(x.shape for x in tensors))
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows of ``a`` (along axis 0) picked by an integer array of any shape.

    Index ``-1`` yields a zero row. The result has shape ``index.shape + a.shape[1:]``.
    """
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = a.data[safe]
    if not valid.all():
        out[~valid] = 0.0
    rows = a.shape[0]

    def vjp(g):
        ga = np.zeros((rows,) + a.shape[1:])
        flat_g = g.reshape((-1,) + a.shape[1:])
        flat_i = index.reshape(-1)
        keep = flat_i >= 0
        np.add.at(ga, flat_i[keep], flat_g[keep])
        return (ga,)
    return _result(out, (a,), vjp)


# ---------------------------------------------------------------- composite kernels


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _result(out, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)
    return _result(out, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-vector normalisation over the last axis with learned scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise _shape_err("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g):
        flat = g.reshape(-1, d)
        gbeta = flat.sum(0)
        ggamma = (flat * xhat.reshape(-1, d)).sum(0)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta
    return _result(out, (x, gamma, beta), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` shaped ``[in, out]``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout. Identity at eval time or rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    params: dict[str, Tensor],
    heads: int,
    key_padding_mask: np.ndarray | None = None,
    attn_mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention over inputs shaped ``[B, L, d]``.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``. ``key_padding_mask`` is
    ``[B, L]`` with True at padded keys; ``attn_mask`` is ``[L, L]`` with True at
    disallowed (query, key) positions. Masked scores are set to -1e9.
    """
    B, Lq, d = query.shape
    Lk = key.shape[1]
    if d % heads:
        raise ValueError(f"head count {heads} does not divide model dimension {d}")
    dh = d // heads

    def split(t: Tensor, L: int) -> Tensor:
        return transpose(reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(linear(query, params["wq"], params["bq"]), Lq)
    k = split(linear(key, params["wk"], params["bk"]), Lk)
    v = split(linear(value, params["wv"], params["bv"]), Lk)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = None
    if key_padding_mask is not None:
        mask = np.asarray(key_padding_mask, dtype=bool)[:, None, None, :]
    if attn_mask is not None:
        am = np.asarray(attn_mask, dtype=bool)[None, None, :, :]
        mask = am if mask is None else (mask | am)
    if mask is not None:
        scores = masked_fill(scores, mask, -1e9)
    weights = softmax(scores)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (B, Lq, d))
    return linear(ctx, params["wo"], params["bo"])


# ---------------------------------------------------------------- verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)
    worst: str | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the current values of ``params``; entries
    are perturbed in place and restored. The per-entry error is
    ``|ga - gn| / max(1, |ga|, |gn|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    named = dict(params) if isinstance(params, dict) else {p.name or f"p{i}": p for i, p in enumerate(params)}
    base = float(f().data)
    if float(f().data) != base:
        raise ValueError("function is not deterministic at fixed parameters")
    with Tape() as tape:
        loss = f()
    grads = tape.backward(loss, wrt=list(named.values()))

    report = GradCheckReport(0.0, tolerance)
    for name, p in named.items():
        ga = grads[p].reshape(-1)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            gn = (fp - fm) / (2 * step)
            err = abs(ga[i] - gn) / max(1.0, abs(ga[i]), abs(gn))
            worst = max(worst, err)
        report.per_param[name] = worst
        if worst >= report.max_rel_error:
            if worst > report.max_rel_error or report.worst is None:
                report.worst = name
            report.max_rel_error = worst
    return report
