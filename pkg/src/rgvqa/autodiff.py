"""Dense-tensor reverse-mode differentiation on numpy buffers.

A Tensor is a node in a dynamically built computation tape. Each primitive
records a closure that routes the output gradient to its parents; backward()
walks the tape in reverse topological order. Gradients sum across uses.

Default precision is 64-bit so finite-difference checks have headroom;
32-bit works everywhere for speed.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError

DEFAULT_DTYPE = np.float64

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Suspend tape recording (inference paths: no closures, no extra memory)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev

# Large negative additive mask value; underflows to exactly 0 after the
# stable softmax shift without producing inf-inf NaNs.
MASK_VALUE = -1e30


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
    return Tensor(arr, requires_grad=False)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, requires_grad=_GRAD_ENABLED and any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over the axes numpy broadcast to reach grad.shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ContractError(f"add: incompatible shapes {a.shape} + {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ContractError(f"mul: incompatible shapes {a.shape} * {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * s)

    return _node(data, (a,), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics on leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate(_unbroadcast(gb, b.shape))

    return _node(data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * (a.data > 0))

    return _node(data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a.accumulate(data * (g - dot))

    return _node(data, (a,), backward)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along axis (affine composed outside)."""
    mean = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mean
    var = (centered**2).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    data = centered * inv_std

    def backward(g):
        if a.requires_grad:
            g_mean = g.mean(axis=axis, keepdims=True)
            gx_mean = (g * data).mean(axis=axis, keepdims=True)
            a.accumulate(inv_std * (g - g_mean - data * gx_mean))

    return _node(data, (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ContractError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding: id out of range [0, {table.shape[0]}) in lookup"
        )
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids, g)
            table.accumulate(acc)

    return _node(data, (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat: empty tensor list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ContractError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        )
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])

    return _node(data, tuple(tensors), backward)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing with scatter-add backward."""
    data = a.data[key]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[key] = g
            a.accumulate(acc)

    return _node(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.shape))

    return _node(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.transpose(inverse))

    return _node(data, (a,), backward)


def tensor_sum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g, a.shape).copy())

    return _node(data, (a,), backward)


def causal_mask(n: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Additive (n, n) mask: MASK_VALUE strictly above the diagonal."""
    mask = np.zeros((n, n), dtype=dtype)
    mask[np.triu_indices(n, k=1)] = MASK_VALUE
    return mask


def key_padding_mask(valid: np.ndarray, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Additive (..., 1, Tk) mask hiding padded key positions.

    valid is boolean (..., Tk), True where a key may be attended.
    """
    mask = np.where(valid, 0.0, MASK_VALUE).astype(dtype)
    return mask[..., None, :]


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None
) -> Tensor:
    """softmax(q kᵀ / sqrt(dk) + mask) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ContractError(
            f"scaled_dot_attention: query/key width mismatch {q.shape} vs {k.shape}"
        )
    dk = q.shape[-1]
    scores = scale(matmul(q, transpose(k, _swap_last(k.data.ndim))), 1.0 / np.sqrt(dk))
    if mask is not None:
        scores = add(scores, constant(mask))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def cross_entropy(logits: Tensor, target_ids: np.ndarray, ignore_id: int = -1) -> Tensor:
    """Mean token cross-entropy; positions whose target equals ignore_id are skipped.

    logits: (..., V); target_ids: (...) integer array of the same leading shape.
    """
    target_ids = np.asarray(target_ids)
    if logits.data.shape[:-1] != target_ids.shape:
        raise ContractError(
            f"cross_entropy: logits {logits.shape} vs targets {target_ids.shape}"
        )
    flat_logits = logits.data.reshape(-1, logits.data.shape[-1])
    flat_targets = target_ids.reshape(-1)
    keep = flat_targets != ignore_id
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise ContractError("cross_entropy: no scored positions (all targets ignored)")

    shifted = flat_logits - flat_logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    picked = log_probs[np.arange(flat_logits.shape[0]), np.where(keep, flat_targets, 0)]
    data = np.asarray(-(picked * keep).sum() / n_kept)

    def backward(g):
        if logits.requires_grad:
            probs = np.exp(log_probs)
            probs[np.arange(flat_logits.shape[0]), np.where(keep, flat_targets, 0)] -= 1.0
            probs *= (keep[:, None] * float(g)) / n_kept
            logits.accumulate(probs.reshape(logits.shape))

    return _node(data, (logits,), backward)


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients of the listed parameters are reset first, so each call yields
    the gradient of this loss alone; parameters unreachable from the loss
    keep the explicit zero. Within the sweep, gradients sum across uses.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    for p in params:
        p.zero_grad()
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))

    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
            # interior activations are not reused after their sweep
            if node is not loss and not node.name:
                node.grad = None


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    seed: int = 0,
    max_coords: int = 64,
    rel_floor: float = 1e-3,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples up to max_coords coordinates per parameter. The relative error
    denominator is floored at rel_floor so structurally tiny gradients do
    not amplify finite-difference roundoff. Returns 0.0 for an empty
    parameter set.
    """
    if h <= 0:
        raise ContractError("grad_check: h must be positive")
    if not params:
        return 0.0
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    backward(loss, params.values())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        size = p.data.size
        if size == 0:
            continue
        n = min(max_coords, size)
        coords = rng.choice(size, size=n, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = float(loss_fn().data)
            flat[c] = orig - h
            f_minus = float(loss_fn().data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
            worst = max(worst, err)
    return worst
