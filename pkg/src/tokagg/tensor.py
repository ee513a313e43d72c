"""Dense float64 tensors with reverse-mode vector-Jacobian products.

Every operation builds a node recording its parents and a closure mapping
the output gradient to parent gradients. Nodes carry a monotonically
increasing construction index; ``backward`` replays reachable nodes in
reverse construction order, which is a valid reverse topological order of
the forward graph. Forward math is plain single-threaded numpy, so results
are bitwise deterministic for identical inputs.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, EvaluationError, ShapeMismatchError

LAYER_NORM_EPS = 1e-5
L2_NORM_EPS = 1e-12
ACOS_CLAMP = 1e-7

_construction_counter = itertools.count()


class Tensor:
    """A numpy float64 array plus the bookkeeping for backprop.

    A Tensor doubles as the graph node of the op that produced it: ``op``
    names the operation, ``_parents`` are its input tensors, and ``_vjp``
    maps the incoming gradient to one gradient per parent (saved
    activations live in the closure).
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp", "_order")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._vjp = vjp
        self._order = next(_construction_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        """Accumulate gradients of this scalar into every reachable tensor.

        Visits nodes in exact reverse construction order; gradients of
        leaf tensors accumulate across calls until ``zero_grad``.
        """
        if self.size != 1:
            raise ShapeMismatchError(f"backward requires a scalar, got shape {self.shape}")
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._order in nodes:
                continue
            nodes[node._order] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        pending = {self._order: np.ones_like(self.data)}
        for order in sorted(nodes, reverse=True):
            node = nodes[order]
            grad = pending.pop(order, None)
            if grad is None:
                continue
            if grad.shape != node.data.shape:
                raise ShapeMismatchError(
                    f"gradient shape {grad.shape} does not match tensor shape {node.data.shape}"
                )
            node.grad = grad if node.grad is None else node.grad + grad
            if node._vjp is None:
                continue
            for parent, pgrad in zip(node._parents, node._vjp(grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if parent._order in pending:
                    pending[parent._order] = pending[parent._order] + pgrad
                else:
                    pending[parent._order] = pgrad

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (broadcasting, gradients reduced back per operand)
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return Tensor(out_data, parents=(a, b), vjp=vjp, op="add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return Tensor(out_data, parents=(a, b), vjp=vjp, op="sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def vjp(g):
        return _sum_to_shape(g * b.data, a.shape), _sum_to_shape(g * a.data, b.shape)

    return Tensor(out_data, parents=(a, b), vjp=vjp, op="mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def vjp(g):
        ga = _sum_to_shape(g / b.data, a.shape)
        gb = _sum_to_shape(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor(out_data, parents=(a, b), vjp=vjp, op="div")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return Tensor(x.data * factor, parents=(x,), vjp=vjp, op="scale")


def mul_const(x: Tensor, const) -> Tensor:
    """Multiply by a constant array (no gradient flows into the constant)."""
    const = np.asarray(const, dtype=np.float64)
    out_data = x.data * const

    def vjp(g):
        return (_sum_to_shape(g * const, x.shape),)

    return Tensor(out_data, parents=(x,), vjp=vjp, op="mul_const")


def add_const(x: Tensor, const) -> Tensor:
    const = np.asarray(const, dtype=np.float64)

    def vjp(g):
        return (_sum_to_shape(g, x.shape),)

    return Tensor(x.data + const, parents=(x,), vjp=vjp, op="add_const")


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product with dA = G Bᵀ, dB = Aᵀ G."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    out_data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out_data, parents=(a, b), vjp=vjp, op="matmul")


def transpose(x: Tensor) -> Tensor:
    def vjp(g):
        return (g.T,)

    return Tensor(x.data.T, parents=(x,), vjp=vjp, op="transpose")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old_shape = x.shape

    def vjp(g):
        return (g.reshape(old_shape),)

    return Tensor(x.data.reshape(shape), parents=(x,), vjp=vjp, op="reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeMismatchError("concat needs at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return Tensor(out_data, parents=tensors, vjp=vjp, op="concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    slicer = [slice(None)] * x.ndim
    slicer[axis] = slice(start, stop)
    slicer = tuple(slicer)
    out_data = x.data[slicer]
    full_shape = x.shape

    def vjp(g):
        grad = np.zeros(full_shape)
        grad[slicer] = g
        return (grad,)

    return Tensor(out_data, parents=(x,), vjp=vjp, op="slice")


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(out_data, parents=(x,), vjp=vjp, op="sum_axis")


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.full(x.shape, float(g)),)

    return Tensor(x.data.sum(), parents=(x,), vjp=vjp, op="sum_all")


def pick(x: Tensor, index: int) -> Tensor:
    """Select one element of a 1-D tensor as a scalar."""
    if x.ndim != 1:
        raise ShapeMismatchError(f"pick needs a 1-D tensor, got shape {x.shape}")
    index = int(index)

    def vjp(g):
        grad = np.zeros(x.shape)
        grad[index] = g
        return (grad,)

    return Tensor(x.data[index], parents=(x,), vjp=vjp, op="pick")


# ---------------------------------------------------------------------------
# normalizations and nonlinearities
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows needs a 2-D tensor, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, parents=(x,), vjp=vjp, op="softmax_rows")


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row normalization over the channel axis, population variance."""
    if x.ndim != 2:
        raise ShapeMismatchError(f"layer_norm_rows needs a 2-D tensor, got shape {x.shape}")
    cols = x.shape[1]
    if cols < 2:
        raise DegenerateInputError(f"layer_norm_rows needs at least 2 columns, got {cols}")
    if gain.shape != (cols,) or bias.shape != (cols,):
        raise ShapeMismatchError(
            f"gain/bias shapes {gain.shape}/{bias.shape} do not match {cols} columns"
        )
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std
    out_data = xhat * gain.data + bias.data

    def vjp(g):
        gxhat = g * gain.data
        # d xhat / dx folded analytically: remove per-row mean and xhat component
        mean_g = gxhat.mean(axis=1, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=1, keepdims=True)
        gx = inv_std * (gxhat - mean_g - xhat * mean_gx)
        ggain = (g * xhat).sum(axis=0)
        gbias = g.sum(axis=0)
        return gx, ggain, gbias

    return Tensor(out_data, parents=(x, gain, bias), vjp=vjp, op="layer_norm_rows")


def l2_normalize(v: Tensor) -> Tensor:
    """Normalize a vector to unit length; zero vectors pass through unchanged."""
    if v.ndim != 1:
        raise ShapeMismatchError(f"l2_normalize needs a 1-D tensor, got shape {v.shape}")
    norm = float(np.linalg.norm(v.data))
    if norm <= L2_NORM_EPS:
        def vjp_identity(g):
            return (g.copy(),)

        return Tensor(v.data.copy(), parents=(v,), vjp=vjp_identity, op="l2_normalize")
    y = v.data / norm

    def vjp(g):
        return ((g - y * (y @ g)) / norm,)

    return Tensor(y, parents=(v,), vjp=vjp, op="l2_normalize")


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Normalize each row of a matrix to unit length (zero rows unchanged)."""
    if x.ndim != 2:
        raise ShapeMismatchError(f"l2_normalize_rows needs a 2-D tensor, got shape {x.shape}")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    safe = np.where(norms <= L2_NORM_EPS, 1.0, norms)
    y = x.data / safe
    degenerate = norms <= L2_NORM_EPS

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        gx = (g - y * dot) / safe
        return (np.where(degenerate, g, gx),)

    return Tensor(y, parents=(x,), vjp=vjp, op="l2_normalize_rows")


def cos(x: Tensor) -> Tensor:
    out_data = np.cos(x.data)

    def vjp(g):
        return (-g * np.sin(x.data),)

    return Tensor(out_data, parents=(x,), vjp=vjp, op="cos")


def acos_clamped(x: Tensor, clamp: float = ACOS_CLAMP) -> Tensor:
    """acos after clamping into [-1+clamp, 1-clamp]; the clamp bounds the gradient."""
    clamped = np.clip(x.data, -1.0 + clamp, 1.0 - clamp)
    inside = (x.data > -1.0 + clamp) & (x.data < 1.0 - clamp)

    def vjp(g):
        return (np.where(inside, -g / np.sqrt(1.0 - clamped * clamped), 0.0),)

    return Tensor(np.arccos(clamped), parents=(x,), vjp=vjp, op="acos")


def cross_entropy_with_index(logits: Tensor, index: int) -> Tensor:
    """-log softmax(logits)[index] for a 1-D logit vector, fused for stability."""
    if logits.ndim != 1:
        raise ShapeMismatchError(f"cross_entropy needs 1-D logits, got shape {logits.shape}")
    index = int(index)
    shifted = logits.data - logits.data.max()
    logsumexp = math.log(np.exp(shifted).sum())
    loss = logsumexp - shifted[index]
    probs = np.exp(shifted - logsumexp)

    def vjp(g):
        grad = probs.copy()
        grad[index] -= 1.0
        return (grad * float(g),)

    return Tensor(loss, parents=(logits,), vjp=vjp, op="cross_entropy")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train_mode: bool) -> Tensor:
    """Seeded Bernoulli dropout, scaled by 1/(1-p) at train time, identity at eval."""
    if not train_mode or p <= 0.0:
        return x
    if rng is None:
        raise EvaluationError("dropout in train mode requires a seeded generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul_const(x, mask)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_difference_grad(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    h: float = 1e-6,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central finite differences of a scalar function, coordinate by coordinate.

    Numeric-only; independent of the autodiff machinery it is used to check.
    Returns a flat array over ``indices`` (default: every coordinate).
    """
    flat = theta.astype(np.float64).reshape(-1).copy()
    indices = list(range(flat.size)) if indices is None else list(indices)
    grads = np.empty(len(indices))
    for out_pos, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(flat.reshape(theta.shape))
        flat[i] = orig - h
        f_minus = f(flat.reshape(theta.shape))
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise EvaluationError(f"non-finite evaluation at coordinate {i}")
        grads[out_pos] = (f_plus - f_minus) / (2.0 * h)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def vjp_check(
    f: Callable[[Tensor], Tensor],
    theta: np.ndarray,
    h: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between the analytic gradient of f and central differences.

    ``f`` maps a parameter Tensor to a scalar Tensor. When ``max_coords`` is
    given, a seeded subsample of coordinates is checked instead of all of them.
    """
    theta = np.asarray(theta, dtype=np.float64)
    param = Tensor(theta.copy(), requires_grad=True)
    out = f(param)
    if out.size != 1:
        raise ShapeMismatchError(f"vjp_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise EvaluationError("function value is not finite at theta")
    out.backward()
    analytic = (param.grad if param.grad is not None else np.zeros_like(theta)).reshape(-1)

    size = theta.size
    if max_coords is not None and size > max_coords:
        if rng is None:
            rng = np.random.default_rng(0)
        indices = np.sort(rng.choice(size, size=max_coords, replace=False))
    else:
        indices = np.arange(size)

    def scalar_f(arr: np.ndarray) -> float:
        return f(Tensor(arr)).item()

    numeric = finite_difference_grad(scalar_f, theta, h=h, indices=indices.tolist())
    return float(relative_error(analytic[indices], numeric).max())
