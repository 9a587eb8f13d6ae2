"""Dense float64 tensors with a reverse-mode tape.

Every backward rule is written with the same differentiable ops used in the
forward pass, so a gradient computed with ``create_graph=True`` can itself be
differentiated. That is the only second-order path supported, and it is what
the Hessian-vector products in :mod:`rowquant.hessian` need.
"""

from __future__ import annotations

import contextlib
import threading
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "custom_op",
    "grad",
    "backward",
    "grad_of_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "permute",
    "reshape",
    "sum",
    "sum_to",
    "broadcast_to",
    "relu",
    "gather",
    "linear",
    "conv2d",
    "max_pool2d",
    "batch_norm",
    "softmax",
    "softmax_cross_entropy",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that stops ops from being recorded."""
    return _grad_mode(False)


BackwardFn = Callable[["Tensor"], Sequence[Optional["Tensor"]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name!r}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar --------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an op over ``parents``.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent. It is only attached when recording is on and some parent needs
    a gradient.
    """
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# tape traversal
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
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
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Optional[Tensor] = None,
    create_graph: bool = False,
) -> list:
    """Gradients of ``output`` with respect to ``inputs`` as Tensors.

    Inputs that ``output`` does not depend on get a zero gradient. With
    ``create_graph`` the returned gradients are themselves on the tape.
    """
    if grad_output is None:
        grad_output = Tensor(np.ones_like(output.data))
    grads: dict = {}
    if output.requires_grad:
        grads[id(output)] = grad_output
        with _grad_mode(create_graph):
            for node in reversed(_topo_order(output)):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else add(prev, pg)
    else:
        grads[id(output)] = grad_output
    result = []
    for t in inputs:
        g = grads.get(id(t))
        result.append(Tensor(np.zeros_like(t.data)) if g is None else g)
    return result


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    leaves = [n for n in _topo_order(loss) if n.is_leaf]
    for leaf, g in zip(leaves, grad(loss, leaves)):
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def grad_of_grad(scalar: Tensor, wrt: Tensor, vector) -> Tensor:
    """Hessian-vector product H·v, computed as the gradient of gᵀv."""
    vector = _as_tensor(vector)
    if vector.shape != wrt.shape:
        raise ValueError(f"vector shape {vector.shape} != parameter shape {wrt.shape}")
    (g,) = grad(scalar, [wrt], create_graph=True)
    if not g.requires_grad:
        return Tensor(np.zeros_like(wrt.data))
    (hv,) = grad(sum(mul(g, vector)), [wrt])
    return Tensor(hv.data)


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def sum_to(x, shape: tuple) -> Tensor:
    """Sum ``x`` down to a broadcast-compatible ``shape``."""
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True).reshape(shape)
    src_shape = x.shape
    return custom_op(data, (x,), lambda g: (broadcast_to(g, src_shape),))


def broadcast_to(x, shape: tuple) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = np.broadcast_to(x.data, shape).copy()
    src_shape = x.shape
    return custom_op(data, (x,), lambda g: (sum_to(g, src_shape),))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return custom_op(
        a.data + b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return custom_op(
        a.data - b.data, (a, b), lambda g: (sum_to(g, a.shape), neg(sum_to(g, b.shape)))
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def _bw(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(a.data * b.data, (a, b), _bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def _bw(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return custom_op(a.data @ b.data, (a, b), _bw)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return custom_op(a.data.T.copy(), (a,), lambda g: (transpose(g),))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return custom_op(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (permute(g, inverse),)
    )


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    return custom_op(a.data.reshape(tuple(shape)).copy(), (a,), lambda g: (reshape(g, src),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.shape
    kept = a.data.sum(axis=axis, keepdims=True).shape

    def _bw(g):
        return (broadcast_to(reshape(g, kept), src),)

    return custom_op(data, (a,), _bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return custom_op(a.data * mask, (a,), lambda g: (mul(g, mask),))


def gather(x, index: np.ndarray) -> Tensor:
    """Pick ``x.flat[index]``; entries equal to -1 read as zero.

    Linear in ``x``; its adjoint is a scatter-add, whose adjoint is this
    gather again, so the pair supports second-order passes.
    """
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    flat = x.data.reshape(-1)
    valid = index >= 0
    data = np.where(valid, flat[np.where(valid, index, 0)], 0.0)
    return custom_op(data, (x,), lambda g: (_scatter_add(g, index, x.shape),))


def _scatter_add(g: Tensor, index: np.ndarray, shape: tuple) -> Tensor:
    valid = index >= 0
    n = int(np.prod(shape))
    data = np.bincount(index[valid], weights=g.data[valid], minlength=n).reshape(shape)
    return custom_op(data, (g,), lambda gg: (gather(gg, index),))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None) -> Tensor:
    """``x @ weightᵀ + bias`` with weight laid out (out_features, in_features)."""
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return out


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    if stride < 1 or padding < 0:
        raise ValueError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if size + 2 * padding < k:
        raise ValueError(f"kernel {k} larger than padded input {size + 2 * padding}")
    return (size + 2 * padding - k) // stride + 1


@lru_cache(maxsize=64)
def _im2col_index(c: int, h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    ch, ki, kj = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij")
    oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = ki.reshape(-1, 1) + stride * oi.reshape(1, -1) - padding
    cols = kj.reshape(-1, 1) + stride * oj.reshape(1, -1) - padding
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    idx = ch.reshape(-1, 1) * h * w + rows * w + cols
    idx = np.where(inside, idx, -1)
    idx.setflags(write=False)
    return idx, ho, wo


def im2col_index(batch: int, c: int, h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    """Flat gather index of shape (c*kh*kw, batch*ho*wo) into a (B,C,H,W) array."""
    base, ho, wo = _im2col_index(c, h, w, kh, kw, stride, padding)
    offsets = (np.arange(batch) * (c * h * w)).reshape(1, batch, 1)
    full = np.where(base[:, None, :] >= 0, base[:, None, :] + offsets, -1)
    return full.reshape(base.shape[0], batch * ho * wo), ho, wo


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,C,H,W) input with (F,C,kh,kw) filters."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    b, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    if conv_output_size(h, kh, stride, padding) < 1 or conv_output_size(w, kw, stride, padding) < 1:
        raise ValueError("conv2d output size must be positive")
    idx, ho, wo = im2col_index(b, c, h, w, kh, kw, stride, padding)
    cols = gather(x, idx)
    out = matmul(reshape(weight, (f, c * kh * kw)), cols)
    out = permute(reshape(out, (f, b, ho, wo)), (1, 0, 2, 3))
    if bias is not None:
        out = add(out, reshape(bias, (1, f, 1, 1)))
    return out


def max_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k×k max pooling; trailing rows/cols that do not fill a window are dropped."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ValueError(f"input {x.shape} too small for {k}x{k} pooling")
    flat_idx = np.arange(x.size).reshape(x.shape)[:, :, : ho * k, : wo * k]
    windows = flat_idx.reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
    vals = x.data.reshape(-1)[windows]
    pick = np.take_along_axis(windows, vals.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    return gather(x, pick)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Inference-form batch norm over axis 1 with frozen statistics."""
    x = _as_tensor(x)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    inv_std = 1.0 / np.sqrt(np.asarray(running_var) + eps)
    centered = sub(x, np.asarray(running_mean).reshape(bshape))
    scale = reshape(mul(gamma, inv_std), bshape)
    return add(mul(centered, scale), reshape(beta, bshape))


def softmax(z) -> Tensor:
    z = _as_tensor(z)
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)
    holder: list = []

    def _bw(g):
        y = holder[0]
        inner = sum(mul(g, y), axis=-1, keepdims=True)
        return (mul(y, sub(g, inner)),)

    out = custom_op(data, (z,), _bw)
    holder.append(out)
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of (B,K) logits against integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsumexp - z[np.arange(n), labels])
    onehot = np.zeros_like(logits.data)
    onehot[np.arange(n), labels] = 1.0

    def _bw(g):
        return (mul(sub(softmax(logits), onehot), mul(g, 1.0 / n)),)

    return custom_op(np.array(loss), (logits,), _bw)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
