"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a C-contiguous numpy array. Operations build a
graph by recording, on each result, its parent tensors and a closure
that maps the result's gradient to parent gradients. ``backward()`` on a
scalar walks that graph once in reverse topological order and adds
gradients into every reachable tensor that has ``requires_grad`` set.

Scope is deliberately small: values are at most 2-D, elementwise
arithmetic supports exact shape match or a scalar operand (nothing in
between), and the only fused reductions are the row softmax and row
normalization that attention and layer normalization need. Gradient
accumulation is additive, so calling ``backward`` twice doubles every
gradient unless ``zero_grad`` runs in between.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block. Useful for inference
    and for the finite-difference evaluations in :func:`finite_diff_check`,
    both of which only need values."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus an optional gradient of the same shape.

    ``requires_grad`` marks leaves the caller wants gradients for;
    results of operations inherit it from their parents while graph
    construction is enabled. ``grad`` starts as ``None`` and is
    populated (or accumulated into) by :meth:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d, so guard it.
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a size-1 tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar. Python scalars route through the scalar paths.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    """Pass tensors through, wrap arrays and numbers as constants."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def custom_op(data, parents, backward_fn) -> Tensor:
    """Extension point for fused operations defined outside this module.

    ``backward_fn(out_grad)`` must return one gradient array (or ``None``)
    per parent, each matching that parent's shape.
    """
    return _make_node(np.asarray(data, dtype=np.float64), tuple(parents), backward_fn)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse a gradient onto a parent's shape. Only the scalar case
    ever differs, because elementwise ops allow no other broadcast."""
    if grad.shape == shape:
        return grad
    if int(np.prod(shape, dtype=np.int64)) == 1:
        return np.asarray(grad.sum(), dtype=np.float64).reshape(shape)
    raise ShapeError(f"cannot reduce gradient of shape {grad.shape} to {shape}")


def _check_eltwise_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(
        f"{op}: shapes {a.shape} and {b.shape} must match exactly "
        f"(only a size-1 operand may broadcast)"
    )


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_eltwise_shapes("add", a, b)

    def backward_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make_node(a.data + b.data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_eltwise_shapes("sub", a, b)

    def backward_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make_node(a.data - b.data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_eltwise_shapes("mul", a, b)
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return _reduce_to(g * b_data, a.shape), _reduce_to(g * a_data, b.shape)

    return _make_node(a_data * b_data, (a, b), backward_fn)


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def backward_fn(g):
        return (g * factor,)

    return _make_node(a.data * factor, (a,), backward_fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward_fn(g):
        return (g * (1.0 - out_data * out_data),)

    return _make_node(out_data, (a,), backward_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    gate = a.data > 0

    def backward_fn(g):
        return (g * gate,)

    return _make_node(np.maximum(a.data, 0.0), (a,), backward_fn)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def backward_fn(g):
        return (g * sign,)

    return _make_node(np.abs(a.data), (a,), backward_fn)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "tanh": tanh,
    "relu": relu,
    "abs": absolute,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch an elementwise operation by name. Unknown names raise
    ``ContractError``; operand counts are checked by the target."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(
            f"unknown elementwise op {op!r}, expected one of {sorted(_ELEMENTWISE)}"
        ) from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return g @ b_data.T, a_data.T @ g

    return _make_node(a_data @ b_data, (a, b), backward_fn)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {a.shape}")

    def backward_fn(g):
        return (np.ascontiguousarray(g.T),)

    return _make_node(a.data.T, (a,), backward_fn)


def reshape(a, new_shape) -> Tensor:
    a = as_tensor(a)
    new_shape = tuple(int(d) for d in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} (size {a.size}) to {new_shape}")
    old_shape = a.shape

    def backward_fn(g):
        return (g.reshape(old_shape),)

    return _make_node(a.data.reshape(new_shape), (a,), backward_fn)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape

    def backward_fn(g):
        return (np.full(in_shape, float(g), dtype=np.float64),)

    return _make_node(np.asarray(a.data.sum(), dtype=np.float64), (a,), backward_fn)


def broadcast_rows(v, num_rows: int) -> Tensor:
    """Tile a length-D vector (or 1-row matrix) into ``num_rows`` identical
    rows. The gradient sums over rows. This is how row-wise biases and
    gains enter 2-D computations without a general broadcast rule."""
    v = as_tensor(v)
    if v.data.ndim == 1:
        row = v.data[np.newaxis, :]
    elif v.data.ndim == 2 and v.shape[0] == 1:
        row = v.data
    else:
        raise ShapeError(f"broadcast_rows needs a vector or 1-row matrix, got {v.shape}")
    if num_rows < 1:
        raise ShapeError(f"broadcast_rows needs num_rows >= 1, got {num_rows}")
    v_shape = v.shape

    def backward_fn(g):
        return (g.sum(axis=0).reshape(v_shape),)

    return _make_node(np.repeat(row, num_rows, axis=0), (v,), backward_fn)


def concat_rows(tensors) -> Tensor:
    """Stack 2-D tensors vertically. All operands must agree on columns."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat_rows needs at least one tensor")
    cols = {t.shape[1] if t.data.ndim == 2 else None for t in tensors}
    if None in cols or len(cols) != 1:
        raise ShapeError(
            f"concat_rows needs 2-D tensors with equal columns, got shapes "
            f"{[t.shape for t in tensors]}"
        )
    row_counts = [t.shape[0] for t in tensors]
    offsets = np.cumsum([0] + row_counts)

    def backward_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(row_counts)))

    return _make_node(np.concatenate([t.data for t in tensors], axis=0),
                      tuple(tensors), backward_fn)


def concat_cols(tensors) -> Tensor:
    """Stack 2-D tensors horizontally. All operands must agree on rows."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat_cols needs at least one tensor")
    rows = {t.shape[0] if t.data.ndim == 2 else None for t in tensors}
    if None in rows or len(rows) != 1:
        raise ShapeError(
            f"concat_cols needs 2-D tensors with equal rows, got shapes "
            f"{[t.shape for t in tensors]}"
        )
    col_counts = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + col_counts)

    def backward_fn(g):
        return tuple(
            np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]])
            for i in range(len(col_counts))
        )

    return _make_node(np.concatenate([t.data for t in tensors], axis=1),
                      tuple(tensors), backward_fn)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"slice_rows needs a 2-D tensor, got shape {a.shape}")
    n = a.shape[0]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_rows[{start}:{stop}] out of range for {n} rows")
    in_shape = a.shape

    def backward_fn(g):
        full = np.zeros(in_shape, dtype=np.float64)
        full[start:stop] = g
        return (full,)

    return _make_node(a.data[start:stop].copy(), (a,), backward_fn)


# ---------------------------------------------------------------------------
# fused row reductions


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with max subtraction for overflow safety.

    Each output row is positive and sums to 1. The fused backward rule is
    dx = y * (g - sum(g * y, row)), which avoids materializing the
    per-row Jacobian.
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    out_data = exp / exp.sum(axis=1, keepdims=True)

    def backward_fn(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        return (out_data * (g - dot),)

    return _make_node(out_data, (a,), backward_fn)


def normalize_rows(a, eps: float = 1e-5) -> Tensor:
    """Shift each row to zero mean and scale to unit variance
    (population variance, epsilon inside the square root).

    Fused backward rule, with d the row width and s = 1/sqrt(var + eps):
    dx = s * (g - mean(g, row) - y * mean(g * y, row)).
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"normalize_rows needs a 2-D tensor, got shape {a.shape}")
    mean = a.data.mean(axis=1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out_data = centered * inv_std

    def backward_fn(g):
        g_mean = g.mean(axis=1, keepdims=True)
        gy_mean = (g * out_data).mean(axis=1, keepdims=True)
        return (inv_std * (g - g_mean - out_data * gy_mean),)

    return _make_node(out_data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over parent links; no recursion so deep
    graphs (long training chains) cannot hit the interpreter limit."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar.

    Every tensor reachable from ``loss`` that has ``requires_grad`` gets
    its gradient accumulated into ``.grad`` (created as zeros first if
    missing). Non-scalar roots are rejected.
    """
    if loss.size != 1:
        raise ContractError(
            f"backward() needs a scalar loss, got shape {loss.shape}"
        )
    order = _topo_order(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def finite_diff_check(f, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar-valued ``f()`` against
    central finite differences over every entry of ``params``.

    Returns the maximum relative error, with denominator
    max(|analytic|, |numeric|, 1e-8) so that near-zero gradients do not
    blow the ratio up. ``f`` must be deterministic between calls.
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ContractError(f"finite_diff_check eps must lie in [1e-7, 1e-4], got {eps}")
    params = list(params)
    zero_grads(params)
    loss = f()
    if loss.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar f(), got {loss.shape}")
    backward(loss)
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.copy())
    max_rel = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            grad_flat = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                f_plus = f().item()
                flat[i] = original - eps
                f_minus = f().item()
                flat[i] = original
                numeric = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(grad_flat[i]), abs(numeric), 1e-8)
                rel = abs(grad_flat[i] - numeric) / denom
                if rel > max_rel:
                    max_rel = rel
    return max_rel
