"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough operator coverage for a small transformer encoder plus two
classifier heads: matmul (optionally batched over a shared leading axis),
broadcast add, elementwise multiply, concat, row gather (embedding lookup),
ReLU, tanh-approximated GELU, row softmax, layer normalization, and
cross-entropy against integer class targets.

Everything is float64 and deterministic: the same inputs and parameters
produce bit-identical values and gradients across runs. Gradients are
accumulated by an explicit tape; ``backward`` walks it once per call and
adds into ``.grad`` of every reachable tensor that requires grad, so calling
twice without resetting doubles the gradients.
"""

from __future__ import annotations

import contextvars
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError, UsageError

LAYER_NORM_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "grad_enabled", default=True
)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        # ascontiguousarray would also promote 0-d scalars to (1,); keep rank.
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A named-shape float64 array, optionally carrying a gradient buffer.

    ``data`` is always a C-contiguous float64 ndarray; ``grad`` is either
    None or an ndarray of identical shape. Leaf tensors created with
    ``requires_grad=True`` receive gradients from :func:`backward`;
    intermediate results keep the tape bookkeeping privately.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _tracked(self) -> bool:
        return self.requires_grad or self._backward_fn is not None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray, ...]],
) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get() and any(p._tracked() for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _shape_error(op: str, *shapes: tuple[int, ...]) -> ConfigError:
    return ConfigError(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D, or equal-rank stacks sharing their leading axes."""
    sa, sb = a.data.shape, b.data.shape
    if len(sa) < 2 or len(sa) != len(sb) or sa[:-2] != sb[:-2] or sa[-1] != sb[-2]:
        raise _shape_error("matmul", sa, sb)
    data = a.data @ b.data

    def bwd(g: np.ndarray):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a scalar or match a trailing slice of ``a``'s shape."""
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        axes: tuple[int, ...] = ()
    elif sb == () or sb == (1,):
        axes = tuple(range(len(sa)))
    elif len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        axes = tuple(range(len(sa) - len(sb)))
    else:
        raise _shape_error("add", sa, sb)
    data = a.data + b.data

    def bwd(g: np.ndarray):
        gb = np.sum(g, axis=axes) if axes else g
        if sb == (1,):
            gb = gb.reshape(1)
        return g, gb.reshape(sb)

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise _shape_error("mul", a.data.shape, b.data.shape)
    data = a.data * b.data

    def bwd(g: np.ndarray):
        return g * b.data, g * a.data

    return _make(data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python float constant (no gradient w.r.t. the constant)."""
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis (features) or axis 0 (rows)."""
    if axis not in (-1, 0):
        raise UsageError(f"concat supports axis -1 or 0, got {axis}")
    if not tensors:
        raise UsageError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: np.ndarray):
        if axis == -1:
            return tuple(g[..., offsets[i]: offsets[i + 1]] for i in range(len(sizes)))
        return tuple(g[offsets[i]: offsets[i + 1]] for i in range(len(sizes)))

    return _make(data, tuple(tensors), bwd)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``: embedding lookup and hidden-state readout.

    Gradient scatter-adds into the table, so repeated indices accumulate.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise UsageError(f"gather_rows expects a flat index list, got shape {idx.shape}")
    n = table.data.shape[0]
    bad = np.nonzero((idx < 0) | (idx >= n))[0]
    if bad.size:
        raise InputError(
            f"row index {int(idx[bad[0]])} at position {int(bad[0])} out of range [0, {n})"
        )
    data = table.data[idx]

    def bwd(g: np.ndarray):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(data, (table,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    src = a.data.shape
    return _make(data, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(np.transpose(a.data, axes)),
        (a,),
        lambda g: (np.transpose(g, inv),),
    )


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    data = 0.5 * x * (1.0 + t)

    def bwd(g: np.ndarray):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)

    return _make(data, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis, computed with max subtraction."""
    z = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g: np.ndarray):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row (last axis) normalization with learned scale and shift."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise _shape_error("layer_norm", a.data.shape, gain.data.shape, bias.data.shape)
    mu = np.mean(a.data, axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bwd(g: np.ndarray):
        dxhat = g * gain.data
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        ga = inv * (dxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        ggain = np.sum(g * xhat, axis=lead) if lead else g * xhat
        gbias = np.sum(g, axis=lead) if lead else g.copy()
        return ga, ggain.reshape(d), gbias.reshape(d)

    return _make(data, (a, gain, bias), bwd)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Cross-entropy of logits against integer class indices, summed to a scalar.

    ``logits`` is (C,) with an int target or (B, C) with B targets; the result
    is the sum of per-row terms ``logsumexp(z) - z[target]``.
    """
    z = logits.data
    if z.ndim == 1:
        z2 = z[None, :]
        tgt = np.asarray([target], dtype=np.int64)
    elif z.ndim == 2:
        z2 = z
        tgt = np.asarray(target, dtype=np.int64)
        if tgt.shape != (z2.shape[0],):
            raise _shape_error("cross_entropy targets", z2.shape, tgt.shape)
    else:
        raise _shape_error("cross_entropy", z.shape)
    c = z2.shape[1]
    if np.any(tgt < 0) or np.any(tgt >= c):
        raise InputError(f"class target out of range [0, {c})")
    m = np.max(z2, axis=1, keepdims=True)
    e = np.exp(z2 - m)
    sum_e = np.sum(e, axis=1, keepdims=True)
    log_probs = (z2 - m) - np.log(sum_e)
    rows = np.arange(z2.shape[0])
    data = np.asarray(-np.sum(log_probs[rows, tgt]))

    def bwd(g: np.ndarray):
        gz = e / sum_e
        gz[rows, tgt] -= 1.0
        gz = gz * g
        return (gz.reshape(z.shape),)

    return _make(data, (logits,), bwd)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    shape = a.data.shape
    return _make(np.asarray(np.sum(a.data)), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def add_n(tensors: Iterable[Tensor]) -> Tensor:
    """Left-to-right fold of :func:`add`; handy for summing per-item losses."""
    result: Tensor | None = None
    for t in tensors:
        result = t if result is None else add(result, t)
    if result is None:
        raise UsageError("add_n of zero tensors")
    return result


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable requires_grad tensor with d loss/d tensor.

    The loss must be a scalar. Gradients accumulate across calls until
    ``zero_grad`` resets them.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent._tracked():
                continue
            if pg.shape != parent.data.shape:
                raise AssertionError(
                    f"internal: gradient shape {pg.shape} != value shape {parent.data.shape}"
                )
            acc = grads.get(id(parent))
            grads[id(parent)] = pg.copy() if acc is None else acc + pg


# ---------------------------------------------------------------------------
# parameters and gradient checking
# ---------------------------------------------------------------------------


class ParameterStore:
    """Ordered, uniquely named map of trainable tensors (insertion order)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            raise ConfigError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, t in self._params.items():
            arr = _as_f64(state[name])
            if arr.shape != t.data.shape:
                raise ConfigError(
                    f"parameter {name!r}: stored shape {arr.shape} != expected {t.data.shape}"
                )
            t.data = arr


def grad_check(
    f: Callable[[ParameterStore], Tensor],
    params: ParameterStore,
    eps: float = 1e-5,
    num_samples: int = 100,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    Samples up to ``num_samples`` coordinates across all parameters and
    returns max |analytic - central| / max(1, |analytic|, |central|).
    Report-only: never raises on disagreement.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise UsageError(f"eps {eps} outside [1e-7, 1e-3]")
    params.zero_grad()
    loss = f(params)
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}

    coords: list[tuple[str, int]] = []
    for name, t in params.items():
        coords.extend((name, i) for i in range(t.data.size))
    rng = np.random.default_rng(seed)
    if len(coords) > num_samples:
        chosen = rng.choice(len(coords), size=num_samples, replace=False)
        coords = [coords[i] for i in sorted(chosen)]

    worst = 0.0
    with no_grad():
        for name, i in coords:
            flat = params[name].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            up = f(params).data.item()
            flat[i] = orig - eps
            down = f(params).data.item()
            flat[i] = orig
            central = (up - down) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - central) / max(1.0, abs(a), abs(central))
            worst = max(worst, err)
    return worst
