"""Dense float64 tensors with reverse-mode gradients.

Storage is a row-major numpy array; every op records its parents and a
closure that maps the output gradient to parent gradients. ``backward``
walks the graph in reverse topological order. Tensors that do not require
grad (including frozen parameters) never enter the graph, so they
accumulate nothing.

``finite_difference_grad`` is the independent central-difference oracle
used by the gradient tests; it never touches the reverse-mode machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

FD_STEP = 1e-5


class NumericError(ValueError):
    pass


class DimensionError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {list(self.shape)}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data: np.ndarray, parents: Sequence, backward: Callable) -> Tensor:
    parents = tuple(p for p in parents)
    out = Tensor(data)
    if any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p if isinstance(p, Tensor) else Tensor(p) for p in parents)
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)
    return _make(ad + bd, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))


def sub(a, b) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)
    return _make(ad - bd, (a, b), lambda g: (_unbroadcast(g, ad.shape), -_unbroadcast(g, bd.shape)))


def mul(a, b) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)
    return _make(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(x: Tensor) -> Tensor:
    """Sigmoid-weighted linear unit, x * sigmoid(x)."""
    xd = x.data
    s = _sigmoid(xd)
    return _make(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def log_sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # log(sigmoid(x)) = -softplus(-x), computed without overflow
    y = -np.logaddexp(0.0, -xd)
    return _make(y, (x,), lambda g: (g * _sigmoid(-xd),))


def where(cond: np.ndarray, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    ad, bd = _as_array(a), _as_array(b)
    return _make(
        np.where(cond, ad, bd),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), ad.shape), _unbroadcast(np.where(cond, 0.0, g), bd.shape)),
    )


# ---------------------------------------------------------------- reductions / shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), back)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids)
    n, d = table.shape

    def back(g):
        full = np.zeros((n, d))
        np.add.at(full, ids.reshape(-1), g.reshape(-1, d))
        return (full,)

    return _make(table.data[ids], (table,), back)


def scatter_rows(values: Tensor, rows: np.ndarray, num_rows: int) -> Tensor:
    """Sum ``values[i]`` into output row ``rows[i]``; output has ``num_rows`` rows."""
    rows = np.asarray(rows)
    out = np.zeros((num_rows,) + values.shape[1:])
    np.add.at(out, rows, values.data)
    return _make(out, (values,), lambda g: (g[rows],))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    n = len(xs)
    return _make(
        np.stack([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {list(ad.shape)} @ {list(bd.shape)}")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), back)


# ---------------------------------------------------------------- softmax family


def _check_finite_input(x: np.ndarray) -> None:
    if np.isnan(x).any():
        raise NumericError("softmax received NaN input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = _as_array(x)
    _check_finite_input(xd)
    m = np.max(xd, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(xd - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = _as_array(x)
    _check_finite_input(xd)
    m = np.max(xd, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), back)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked rows.

    ``logits`` is (..., V); ``targets`` integer ids with shape ``logits.shape[:-1]``.
    """
    ld = logits.data
    _check_finite_input(ld)
    v = ld.shape[-1]
    flat = ld.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    m = np.ones(t.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    count = int(m.sum())
    if count == 0:
        raise NumericError("cross_entropy: mask selects no supervised positions")
    tm = t[m]
    if tm.size and (tm.min() < 0 or tm.max() >= v):
        raise DimensionError(f"cross_entropy: target ids outside [0, {v})")
    rows = flat[m]
    mx = rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(rows - mx).sum(axis=1, keepdims=True)) + mx
    nll = lse[:, 0] - rows[np.arange(count), tm]
    loss = nll.mean()

    def back(g):
        p = np.exp(rows - lse)
        p[np.arange(count), tm] -= 1.0
        full = np.zeros_like(flat)
        full[m] = p * (g / count)
        return (full.reshape(ld.shape),)

    return _make(np.asarray(loss), (logits,), back)


def token_logprobs(logits: Tensor, targets) -> Tensor:
    """log p(target) per position; targets outside the vocab (e.g. PAD) give 0 and no gradient."""
    lp = log_softmax(logits, axis=-1)
    v = logits.shape[-1]
    t = np.asarray(targets)
    valid = (t >= 0) & (t < v)
    safe = np.where(valid, t, 0)
    picked = getitem(lp, tuple(np.indices(t.shape)) + (safe,))
    return where(valid, picked, 0.0)


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    r = np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    y = xd / r
    d = xd.shape[-1]

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True) / d) / r,)

    return _make(y, (x,), back)


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class Tag:
    """What a parameter belongs to.

    kind is one of router, expert (routed, not yet assigned a modality),
    audio_expert, text_expert, shared_expert, adapter, embedding, head,
    backbone. ``modality`` disambiguates embeddings and heads.
    """

    kind: str
    index: int | None = None
    layer: int | None = None
    modality: str | None = None

    def matches(self, selector: str) -> bool:
        kind, _, modality = selector.partition(":")
        if kind != self.kind:
            return False
        return not modality or modality == self.modality


@dataclass(eq=False)
class Parameter:
    tensor: Tensor
    tag: Tag
    name: str = ""
    frozen: bool = field(default=False)

    def __post_init__(self) -> None:
        self.tensor.requires_grad = not self.frozen

    def __setattr__(self, key, value) -> None:
        object.__setattr__(self, key, value)
        if key == "frozen" and "tensor" in self.__dict__:
            self.tensor.requires_grad = not value
            if value:
                self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        g = self.tensor.grad
        return np.zeros_like(self.tensor.data) if g is None else g


def init_normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape))


# ---------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, params: Iterable[Parameter], lr: float, clip: float | None = None):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.clip = clip

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self) -> None:
        scale = _clip_scale(self.params, self.clip)
        for p in self.params:
            if p.tensor.grad is not None:
                p.tensor.data -= self.lr * scale * p.tensor.grad


class AdamW:
    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        clip: float | None = None,
    ):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self) -> None:
        self.t += 1
        scale = _clip_scale(self.params, self.clip)
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.tensor.grad
            if g is None:
                # untouched this step (e.g. an expert no token was routed to)
                continue
            g = g * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd:
                p.tensor.data *= 1.0 - self.lr * self.wd
            p.tensor.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _clip_scale(params: list[Parameter], clip: float | None) -> float:
    if not clip:
        return 1.0
    total = np.sqrt(sum(float((p.tensor.grad**2).sum()) for p in params if p.tensor.grad is not None))
    return min(1.0, clip / (total + 1e-12))


# ---------------------------------------------------------------- gradient oracle


def finite_difference_grad(f: Callable[[], float], params: Sequence, h: float = FD_STEP) -> list[np.ndarray]:
    """Central-difference gradient of the scalar ``f()`` w.r.t. each array in ``params``.

    ``params`` holds numpy arrays, Tensors or Parameters; they are perturbed in
    place and restored. ``f`` takes no arguments and reads the live values.
    """
    arrays = [p.data if isinstance(p, (Tensor, Parameter)) else p for p in params]
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = _scalar(f())
            flat[i] = old - h
            fm = _scalar(f())
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("finite_difference_grad: f is not finite near the evaluation point")
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).reshape(-1)[0]) if np.size(v) == 1 else float("nan")


def grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, atol: float = 1e-7) -> bool:
    """Elementwise |a - n| <= atol + rtol * max(|a|, |n|)."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return bool(np.all(np.abs(a - n) <= atol + rtol * np.maximum(np.abs(a), np.abs(n))))
