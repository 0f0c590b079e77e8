"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (0-d scalars, vectors, matrices). Every
op records a backward closure on a tape node; `backward()` walks the graph
in reverse topological order and accumulates gradients into leaf tensors.
Gradients keep accumulating across backward calls until explicitly zeroed.

Precision is a process-global switch: float32 for training/inference,
float64 for finite-difference gradient checking (float32 is too noisy for
central differences).
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from .errors import (
    ContractError,
    DeterminismError,
    DimensionError,
    InvalidMaskError,
)

# Additive stand-in for -inf in masks. Large enough that exp() underflows to
# exactly 0.0 in float32/float64, small enough to never produce inf/NaN in
# gradients (a true -inf would give -inf * 0 = NaN in the softmax backward).
NEG_INF = -1e9

_DTYPES = {"float32": np.float32, "float64": np.float64}
_active_dtype = np.float32
_grad_enabled = True


def set_precision(name: str) -> None:
    """Switch the global dtype for tensors created afterwards."""
    global _active_dtype
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _active_dtype = _DTYPES[name]


def active_dtype() -> np.dtype:
    return np.dtype(_active_dtype)


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch precision (used by gradient checking)."""
    global _active_dtype
    saved = _active_dtype
    set_precision(name)
    try:
        yield
    finally:
        _active_dtype = saved


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Node:
    """Tape record: parent tensors plus the local backward rule."""

    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Dense array with an optional gradient buffer and tape node."""

    __slots__ = ("data", "grad", "node")

    def __init__(self, data, node: Node | None = None):
        self.data = np.asarray(data, dtype=_active_dtype)
        self.grad: np.ndarray | None = None
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Parameter:
    """Named trainable tensor. Gradient buffer is always allocated so that
    'all grads zero' holds even for parameters a loss never touched."""

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(data)
        self.tensor.grad = np.zeros_like(self.tensor.data)
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.data.shape

    def zero_grad(self) -> None:
        self.tensor.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    if _grad_enabled:
        return Tensor(data, Node(tuple(parents), backward_fn))
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise / linear algebra ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def bwd(g):
        return (g * c,)

    return _make(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    out = a.data.T.copy()

    def bwd(g):
        return (g.T,)

    return _make(out, (a,), bwd)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.intp)
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), bwd)


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows needs at least one part")
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def bwd(g):
        grads, at = [], 0
        for n in sizes:
            grads.append(g[at:at + n])
            at += n
        return tuple(grads)

    return _make(out, tuple(parts), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols needs at least one part")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def bwd(g):
        grads, at = [], 0
        for n in sizes:
            grads.append(g[:, at:at + n])
            at += n
        return tuple(grads)

    return _make(out, tuple(parts), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()

    def bwd(g):
        return (np.full_like(a.data, g),)

    return _make(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth, so finite differences stay clean."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        return (g * (cdf + a.data * pdf),)

    return _make(out.astype(a.data.dtype, copy=False), (a,), bwd)


# ---------------------------------------------------------------------------
# Normalization / softmax / losses
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm shapes: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        dxhat = g * gain.data
        dx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), bwd)


def _mask_values(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "values", mask))


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Row softmax under an additive {0, NEG_INF} mask.

    Masked positions get exactly 0 probability (hard-zeroed before the row
    renormalization). A row with no visible entry is a malformed mask.
    """
    mv = _mask_values(mask)
    if mv.shape != logits.shape:
        raise DimensionError(f"mask shape {mv.shape} does not match logits {logits.shape}")
    visible = mv == 0
    if not visible.any(axis=1).all():
        bad = int(np.flatnonzero(~visible.any(axis=1))[0])
        raise InvalidMaskError(f"fully-masked row {bad}: every attention row needs a visible entry")
    z = logits.data + mv.astype(logits.data.dtype)
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p[~visible] = 0.0
    p /= p.sum(axis=1, keepdims=True)

    def bwd(g):
        dz = p * (g - (g * p).sum(axis=1, keepdims=True))
        return (dz,)

    return _make(p, (logits,), bwd)


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of rows of `logits` against integer targets."""
    t = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape}, targets {t.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    out = (lse - z[np.arange(n), t]).mean()

    def bwd(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        return (p * (g / n),)

    return _make(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's grad buffer."""
    if loss.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")

    # Iterative post-order topo sort (graphs can exceed the recursion limit).
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen:
                    stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
            continue
        for parent, pg in zip(t.node.parents, t.node.backward_fn(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg.astype(parent.data.dtype, copy=True)
            else:
                acc += pg


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


class GradCheckReport:
    """Per-parameter worst relative errors from a finite-difference check."""

    def __init__(self, max_rel_error: float, per_param: dict[str, float], coords_checked: int):
        self.max_rel_error = max_rel_error
        self.per_param = per_param
        self.coords_checked = coords_checked

    def __repr__(self) -> str:
        return (
            f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
            f"coords_checked={self.coords_checked})"
        )


def grad_check(
    loss_fn,
    params: list[Parameter],
    eps: float = 1e-5,
    samples_per_param: int | None = 8,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `loss_fn` must rebuild the forward graph from the current parameter
    values on every call and return a scalar Tensor. Relative error uses
    denominator max(|analytic|, |numeric|, 1e-8). Coordinates are sampled
    for large parameters; frozen parameters are excluded from the report.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ContractError(f"grad_check eps must lie in [1e-6, 1e-4], got {eps}")
    checked = [p for p in params if p.trainable]
    for p in checked:
        if p.data.dtype != np.float64:
            raise ContractError(
                f"grad_check requires float64 parameters; {p.name!r} is {p.data.dtype}"
            )
    rng = rng or np.random.default_rng(0)

    with no_grad():
        v1 = float(loss_fn().data)
        v2 = float(loss_fn().data)
    if v1 != v2:
        raise DeterminismError(f"loss_fn is not deterministic: {v1!r} != {v2!r}")

    for p in checked:
        p.zero_grad()
    backward(loss_fn())
    analytic = {p.name: p.grad.copy() for p in checked}

    max_err = 0.0
    per_param: dict[str, float] = {}
    n_coords = 0
    for p in checked:
        flat = p.data.reshape(-1)
        size = flat.size
        if samples_per_param is None or size <= samples_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=samples_per_param, replace=False)
        worst = 0.0
        for c in coords:
            saved = flat[c]
            flat[c] = saved + eps
            with no_grad():
                f_plus = float(loss_fn().data)
            flat[c] = saved - eps
            with no_grad():
                f_minus = float(loss_fn().data)
            flat[c] = saved
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[p.name].reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
            n_coords += 1
        per_param[p.name] = worst
        max_err = max(max_err, worst)
    return GradCheckReport(max_err, per_param, n_coords)
