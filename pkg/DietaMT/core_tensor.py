# - Dense tensors with reverse-mode automatic differentiation on top of numpy.
# - Only the operations the decoder-only translation model needs are provided.

import contextlib
import threading
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .support_functions import ContractError, DimensionError, TokenIndexError

# ---------------
# Precision state
# ---------------

PRECISIONS = {"float32": np.float32, "float64": np.float64}

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_state = {"dtype": np.float32}
# graph recording switch, one per thread
_local = threading.local()


def set_precision(mode: str):
    """
    Select the floating point type of every tensor created afterwards.

    Parameters
    ----------
    mode : str
        Either 'float32' (training default) or 'float64' (gradient checks,
        determinism runs).
    """
    if mode not in PRECISIONS:
        raise ContractError(
            f"precision must be one of {sorted(PRECISIONS)}, got {mode!r}"
        )
    _state["dtype"] = PRECISIONS[mode]


def get_dtype():
    """Return the numpy dtype currently used for new tensors."""
    return _state["dtype"]


def get_precision() -> str:
    """Return the name of the active precision mode."""
    return "float64" if _state["dtype"] is np.float64 else "float32"


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the precision mode."""
    previous = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; tensors produced inside never require grad."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


# ------
# Tensor
# ------


class Tensor:
    """
    Dense n-dimensional array taking part in reverse-mode differentiation.

    Parameters
    ----------
    data : array_like
        Values. Converted to the active precision unless ``dtype`` is given.
    requires_grad : bool, optional
        If True, gradients are accumulated into ``grad`` by :func:`backward`.
    name : str, optional
        Label used in error messages and checkpoints.

    Notes
    -----
    ``grad`` is None until a backward pass reaches the tensor; afterwards it
    has exactly the shape of ``data`` and further passes add to it.
    """

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        _op: str = "",
    ):
        self.data = np.asarray(data, dtype=get_dtype() if dtype is None else dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return (
            f"Tensor{label}(shape={self.shape}, op={self._op or 'leaf'}, "
            f"requires_grad={self.requires_grad})"
        )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    """Wrap arrays and scalars as constant tensors; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, dtype=data.dtype, _op=op)
    return Tensor(
        data,
        requires_grad=True,
        dtype=data.dtype,
        _parents=tuple(parents),
        _backward=backward_fn,
        _op=op,
    )


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (leading axes and size-1 axes)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# -------------------
# Elementwise algebra
# -------------------


def add(a, b) -> Tensor:
    """Elementwise sum with bias-style broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    """Elementwise difference."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product (also per-head scalar scaling)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward_fn, "mul")


def squared_relu(x: Tensor) -> Tensor:
    """
    Elementwise ``max(0, x) ** 2``; the derivative is ``2 * max(0, x)``.
    """
    x = as_tensor(x)
    positive = np.maximum(x.data, 0)

    def backward_fn(g):
        return (g * 2 * positive,)

    return _make(positive * positive, (x,), backward_fn, "squared_relu")


# -----------------
# Shape and algebra
# -----------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix
    (weights) or has the same leading axes as ``a``.

    Raises
    ------
    DimensionError
        If the inner dimensions disagree.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ")

    def backward_fn(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _make(a.data @ b.data, (a, b), backward_fn, "matmul")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    original = x.shape

    def backward_fn(g):
        return (g.reshape(original),)

    return _make(x.data.reshape(shape), (x,), backward_fn, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, axes), (x,), backward_fn, "transpose")


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(x, axes)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over ``axis`` (all axes when None)."""
    x = as_tensor(x)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward_fn, "sum")


def concatenate(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    joined = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(joined, tensors, backward_fn, "concatenate")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """
    Gather rows of a 2-D table (embedding lookup).

    Raises
    ------
    TokenIndexError
        If an id is negative or not below ``table.shape[0]``.
    """
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise TokenIndexError(
            f"token id {int(bad)} outside vocabulary of size {table.shape[0]}"
        )

    def backward_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _make(table.data[ids], (table,), backward_fn, "take_rows")


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """
    Rotate dimension pairs (2i, 2i+1) of the last axis by the angles whose
    cosines and sines are given; ``cos``/``sin`` broadcast against ``x[..., ::2]``.
    """
    x = as_tensor(x)
    even, odd = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def backward_fn(g):
        g_even, g_odd = g[..., 0::2], g[..., 1::2]
        grad = np.empty_like(g)
        grad[..., 0::2] = g_even * cos + g_odd * sin
        grad[..., 1::2] = g_odd * cos - g_even * sin
        return (grad,)

    return _make(out, (x,), backward_fn, "rotate_pairs")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value``; they receive no gradient."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)

    def backward_fn(g):
        return (np.where(mask, 0, g),)

    filled = np.where(mask, np.asarray(value, dtype=x.data.dtype), x.data)
    return _make(filled, (x,), backward_fn, "masked_fill")


# -------------------------
# Normalisations and losses
# -------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """
    Numerically stabilised softmax along ``axis`` (max subtraction).
    """
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (x,), backward_fn, "softmax")


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy log-softmax (inference helper, no tape)."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


LAYER_NORM_EPS = 1e-5


def layer_norm(
    x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS
) -> Tensor:
    """
    Normalise every vector on the last axis to zero mean and unit variance,
    then apply ``gain`` and ``bias``.

    Parameters
    ----------
    x : Tensor
        Input of shape (..., d).
    gain, bias : Tensor
        Affine parameters of shape (d,).
    eps : float, optional
        Added to the variance. Default is 1e-5.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} "
            f"do not match last axis of {x.shape}"
        )
    mean = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - np.mean(dxhat, axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        dgain = np.sum((g * xhat).reshape(-1, d), axis=0)
        dbias = np.sum(g.reshape(-1, d), axis=0)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), backward_fn, "layer_norm")


def l2_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """
    Divide every vector on the last axis by ``max(||x||, eps)``.
    """
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    clamped = norm < eps
    denom = np.where(clamped, eps, norm)
    y = x.data / denom

    def backward_fn(g):
        radial = np.where(clamped, 0, np.sum(g * y, axis=-1, keepdims=True))
        return ((g - y * radial) / denom,)

    return _make(y, (x,), backward_fn, "l2_normalize")


def cross_entropy(
    logits: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None
) -> Tensor:
    """
    Mean negative log-likelihood of ``targets`` over the unmasked positions.

    Parameters
    ----------
    logits : Tensor
        Shape (..., V).
    targets : array of int
        Shape (...), values in [0, V).
    mask : array of bool, optional
        Shape (...); True marks positions contributing to the loss. All
        positions count when omitted.

    Returns
    -------
    Tensor
        Scalar loss.

    Raises
    ------
    TokenIndexError
        If a target id is outside [0, V).
    """
    logits = as_tensor(logits)
    vocab = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: targets {targets.shape} vs logits {logits.shape}"
        )
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenIndexError(f"target id outside [0, {vocab})")

    flat_logits = logits.data.reshape(-1, vocab)
    flat_targets = targets.reshape(-1)
    flat_mask = mask.reshape(-1)
    count = max(int(flat_mask.sum()), 1)
    logp = log_softmax_array(flat_logits, axis=-1)
    picked = logp[np.arange(flat_targets.size), flat_targets]
    loss = -np.sum(np.where(flat_mask, picked, 0)) / count

    def backward_fn(g):
        grad = np.exp(logp)
        grad[np.arange(flat_targets.size), flat_targets] -= 1
        grad *= (flat_mask[:, None] / count) * g
        return (grad.reshape(logits.shape),)

    value = np.asarray(loss, dtype=logits.data.dtype)
    return _make(value, (logits,), backward_fn, "cross_entropy")


# --------
# Backward
# --------


class Tape:
    """
    Ordered record of the operations that produced a tensor.

    ``nodes`` lists every reachable tensor that requires grad in topological
    order (inputs before the operations that consume them). Reverse traversal
    therefore visits each node once, after all of its consumers.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))

    def __len__(self):
        return len(self.nodes)

    def reverse(self) -> Iterable[Tensor]:
        return reversed(self.nodes)


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None):
    """
    Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Parameters
    ----------
    loss : Tensor
        Scalar produced on the tape.
    params : iterable of Tensor, optional
        Parameters that should hold a gradient afterwards even when the loss
        does not depend on them (they receive zeros).

    Raises
    ------
    ContractError
        If ``loss`` is not a scalar.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    tape = Tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in tape.reverse():
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def zero_grad(params: Iterable[Tensor]):
    """Reset gradients of ``params``."""
    for p in params:
        p.grad = None


def gradient_check(
    fn: Callable[[], Tensor],
    param: Tensor,
    indices: Optional[Sequence[Tuple[int, ...]]] = None,
    step: float = 1e-5,
    floor: float = 1e-10,
) -> float:
    """
    Compare the analytic gradient of ``fn()`` w.r.t. ``param`` with central
    finite differences and return the largest relative error.

    Parameters
    ----------
    fn : callable
        Recomputes the scalar loss from scratch.
    param : Tensor
        Leaf tensor to perturb in place.
    indices : sequence of index tuples, optional
        Coordinates to probe; all coordinates when None.
    step : float, optional
        Finite-difference step.
    floor : float, optional
        Lower bound of the relative-error denominator.

    Returns
    -------
    float
        ``max |analytic - numeric| / max(|analytic| + |numeric|, floor)``.
    """
    param.grad = None
    loss = fn()
    backward(loss, params=[param])
    analytic = param.grad.copy()
    if indices is None:
        indices = list(np.ndindex(param.shape))
    worst = 0.0
    for idx in indices:
        original = param.data[idx].copy()
        param.data[idx] = original + step
        plus = float(fn().data)
        param.data[idx] = original - step
        minus = float(fn().data)
        param.data[idx] = original
        numeric = (plus - minus) / (2 * step)
        scale = max(abs(analytic[idx]) + abs(numeric), floor)
        err = abs(analytic[idx] - numeric) / scale
        worst = max(worst, float(err))
    param.grad = None
    return worst


