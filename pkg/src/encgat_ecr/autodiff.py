"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the active :class:`Tape` (if any) and replayed in
reverse by :func:`backward`.  Without an active tape the same functions run as
plain numpy code, which is what rollouts use.

Reductions over a neighbour axis can be requested in "exact" mode: the
summands are sorted before being added, so the result does not depend on the
order of the rows.  Attention uses this so that permuting neighbours permutes
(or leaves unchanged) the output bit for bit.
"""
from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1
LN_EPS = 1e-5


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's precondition."""


class NumericError(FloatingPointError):
    """Raised on non-finite input where finite values are required."""


class Tensor:
    """Dense float64 array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)


def _bad_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; nested tapes are not supported.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise ContractError("a tape is already recording")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None

    def leaves(self) -> list[Tensor]:
        produced = {id(n.out) for n in self.nodes}
        seen: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())


_ACTIVE: Tape | None = None


def recording() -> bool:
    return _ACTIVE is not None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _ACTIVE
    req = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.broadcast_to(g, leaf.data.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or b.ndim <= 1 and (b.size == 1 or a.shape[-1:] == b.shape):
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _sorted_sum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def stop_gradient(x) -> Tensor:
    """Same values, no gradient path back to ``x``."""
    return Tensor(as_tensor(x).data)


def select(cond, a, b) -> Tensor:
    """Elementwise ``cond ? a : b`` with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


# ---------------------------------------------------------------------------
# structural


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # shared weight matrix: one flat product instead of a broadcast batch
        lead = ad.shape[:-1]
        flat = ad.reshape(-1, ad.shape[-1])

        def bw_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), flat.T @ g2

        return _make((flat @ bd).reshape(lead + (bd.shape[-1],)), (a, b), bw_flat)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def row_dots(a, b) -> Tensor:
    """Dot products of every row of ``a`` [..., m, c] with every row of ``b`` [..., n, c].

    Same values as ``a @ swapaxes(b)``, but each entry is reduced the same
    way wherever its row sits, so permuting rows permutes the result exactly.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"row_dots: row widths differ in {a.shape} and {b.shape}")
    ad_, bd = a.data, b.data
    out = np.add.reduce(ad_[..., :, None, :] * bd[..., None, :, :], axis=-1)

    def bw(g):
        return _unbroadcast(g @ bd, ad_.shape), _unbroadcast(np.swapaxes(g, -1, -2) @ ad_, bd.shape)

    return _make(out, (a, b), bw)


def attend(weights, values) -> Tensor:
    """``weights @ values`` with an order-independent sum over the shared axis.

    ``weights`` is [..., m, n], ``values`` is [..., n, c].  Each output entry is
    the sorted sum of its n products, so permuting the n axis is exact.
    """
    w, v = as_tensor(weights), as_tensor(values)
    if w.shape[-1] != v.shape[-2]:
        raise DimensionError(f"attend: cannot combine {w.shape} with {v.shape}")
    wd, vd = w.data, v.data
    prod = wd[..., :, :, None] * vd[..., None, :, :]
    out = _sorted_sum(prod, axis=-2)

    def bw(g):
        gw = _unbroadcast(g @ np.swapaxes(vd, -1, -2), wd.shape)
        gv = _unbroadcast(np.swapaxes(wd, -1, -2) @ g, vd.shape)
        return gw, gv

    return _make(out, (w, v), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise DimensionError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, lambda g: tuple(np.split(g, cuts, axis=ax)))


def concat_last_dim(a, b) -> Tensor:
    return concat([a, b], axis=-1)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a1: int = -1, a2: int = -2) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def index_select(x, index) -> Tensor:
    """``x[index]`` with numpy indexing rules; gradient scatters back with add."""
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), bw)


def gather(x, index: np.ndarray, axis: int) -> Tensor:
    """Take entries of ``index`` along ``axis`` (index may be multi-dimensional)."""
    x = as_tensor(x)
    ax = axis % x.data.ndim
    sl = (slice(None),) * ax + (np.asarray(index),)
    return index_select(x, sl)


def sum(x, axis: int | None = None, keepdims: bool = False, exact: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        data = np.array(math.fsum(x.data.reshape(-1))) if exact else np.array(x.data.sum())
        return _make(data, (x,), lambda g: (np.broadcast_to(g, shape),))
    ax = axis % x.data.ndim
    data = _sorted_sum(x.data, ax, keepdims) if exact else x.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape),)

    return _make(data, (x,), bw)


def mean(x, axis: int, mask: np.ndarray | None = None, exact: bool = False) -> Tensor:
    """Mean along ``axis``; with ``mask`` only the True entries count.

    ``mask`` has the shape of ``x`` without its trailing feature axis when
    ``axis`` is not the last one.  An all-False slice yields 0.
    """
    x = as_tensor(x)
    if mask is None:
        return scale(sum(x, axis=axis, exact=exact), 1.0 / x.shape[axis])
    ax = axis % x.data.ndim
    m = np.asarray(mask, dtype=np.float64)
    while m.ndim < x.data.ndim:
        m = m[..., None]
    count = np.maximum(m.sum(axis=ax), 1.0)
    s = sum(mul(x, m), axis=ax, exact=exact)
    return mul(s, 1.0 / count)


def mean_rows(x, exact: bool = False) -> Tensor:
    return mean(x, axis=-2, exact=exact)


# ---------------------------------------------------------------------------
# normalisation / activations over the last axis


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis, max-subtracted.

    Masked-out entries (mask False) get probability exactly 0; a row with no
    admissible entry is all zeros.  The normaliser is an order-independent sum.
    """
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = _sorted_sum(e, -1, keepdims=True)
    p = e / np.where(denom > 0, denom, 1.0)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw)


softmax_rows = softmax


def log_softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Log of :func:`softmax`; masked entries are reported as 0 with zero gradient."""
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(mask.any(axis=-1)):
            raise ContractError("log_softmax: a row has every entry masked")
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def bw(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {n}")
    xd = x.data
    mu = np.add.reduce(xd, axis=-1, keepdims=True) / n
    xc = xd - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        dxhat = g * gd
        m1 = np.add.reduce(dxhat, axis=-1, keepdims=True) / n
        m2 = np.add.reduce(dxhat * xhat, axis=-1, keepdims=True) / n
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, _unbroadcast(g * xhat, (n,)), _unbroadcast(g, (n,))

    return _make(xhat * gd + bias.data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# parameters, optimiser, checkpoints


class ParameterSet:
    """Ordered mapping of parameter name to learnable tensor."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for k, v in (tensors or {}).items():
            self[k] = v

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __setitem__(self, name: str, value) -> None:
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._t[name] = t

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self._t if k.startswith(prefix)]

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._t.items()

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: Tensor(v.data.copy()) for k, v in self._t.items()})

    def drop(self, prefix: str) -> None:
        for k in self.names(prefix):
            del self._t[k]

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = np.zeros_like(t.data)

    def clear_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def digest(self) -> str:
        """SHA-256 over names, shapes and little-endian values."""
        h = hashlib.sha256()
        for k in sorted(self._t):
            d = self._t[k].data
            h.update(k.encode())
            h.update(repr(d.shape).encode())
            h.update(np.ascontiguousarray(d, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float = 5.0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0 or self.learning_rate < 0:
            raise ContractError("Adam needs epsilon > 0 and learning_rate >= 0")


def clip_grad_norm(params: ParameterSet, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(math.fsum(float(np.sum(t.grad * t.grad)) for _, t in params.items()))
    if max_norm > 0 and total > max_norm:
        f = max_norm / total
        for _, t in params.items():
            t.grad = t.grad * f
    return total


def adam_step(params: ParameterSet, state: AdamState) -> float:
    """One bias-corrected Adam update; returns the pre-clip gradient norm."""
    missing = [k for k, t in params.items() if t.grad is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    norm = clip_grad_norm(params, state.clip_norm)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None or m.shape != g.shape:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    params.clear_grad()
    return norm


def save_checkpoint(path: str | Path, params: ParameterSet) -> None:
    arrays = {"__format_version__": np.array([CHECKPOINT_FORMAT_VERSION], dtype="<i8")}
    for k, t in params.items():
        arrays[k] = np.ascontiguousarray(t.data, dtype="<f8")
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> ParameterSet:
    with np.load(Path(path), allow_pickle=False) as z:
        if "__format_version__" not in z.files:
            raise ContractError(f"{path}: not a checkpoint (no format version)")
        version = int(z["__format_version__"][0])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        return ParameterSet({k: Tensor(z[k].astype(np.float64)) for k in z.files if k != "__format_version__"})
