"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A `Tape` records every operation whose inputs carry gradient information;
`backward` replays the tape in reverse, visiting each recorded node exactly
once. Tapes are single-threaded; independent tapes may run concurrently.
All data is 64-bit and every forward op checks its output for finiteness.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import special


class ShapeMismatchError(ValueError):
    """Raised when op inputs do not conform to the op's shape rule."""


class NumericOverflowError(FloatingPointError):
    """Raised when a forward op produces a non-finite value from finite inputs."""


class TapeError(RuntimeError):
    """Raised on tape misuse: empty tape, double backward, non-scalar loss."""


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense row-major float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

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
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; constants are wrapped as non-grad tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "tape")

    def __init__(self, op, inputs, output, backward_fn, tape):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of operations; context manager activates recording."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.backward_done = False
        self.backward_visits = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _finish(op: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericOverflowError(f"non-finite output in op '{op}'")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(_tracked(t) for t in inputs):
        node = Node(op, inputs, out, backward_fn, tape)
        out.node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _finish("add", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeMismatchError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _finish("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _finish("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeMismatchError(f"div: shapes {a.shape} and {b.shape} do not broadcast")
    return _finish("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scalar-mul", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul: requires >= 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} do not contract")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish("matmul", out, (a, b), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise ShapeMismatchError(f"transpose: requires >= 2-d input, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _finish("reshape", out, (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeMismatchError(f"concat: incompatible shapes {shapes} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _finish("concat", out, tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def row_softmax(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _finish("row-softmax", s, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        n = a.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _finish("layer-norm", y, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0
    return _finish("relu", np.where(mask, a.data, 0.0), (a,),
                   lambda g: (np.where(mask, g, 0.0),))


def sum_reduce(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _finish("sum-reduce", out, (a,), backward)


def mean_reduce(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return _finish("mean-reduce", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out = np.log(a.data)
        except FloatingPointError:
            raise NumericOverflowError("non-finite output in op 'log'")
    return _finish("log", out, (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def softplus(a: Tensor) -> Tensor:
    return _finish("softplus", special.softplus(a.data), (a,),
                   lambda g: (g * special.sigmoid(a.data),))


def lgamma(a: Tensor) -> Tensor:
    return _finish("lgamma", special.gammaln(a.data), (a,),
                   lambda g: (g * special.digamma(a.data),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through only in the interior."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _finish("clip", np.clip(a.data, lo, hi), (a,),
                   lambda g: (np.where(inside, g, 0.0),))


# ---------------------------------------------------------------------------
# Distribution transforms (analytic backward rules)
# ---------------------------------------------------------------------------

def normal_cdf(a: Tensor) -> Tensor:
    return _finish("normal-cdf", special.norm_cdf(a.data), (a,),
                   lambda g: (g * special.norm_pdf(a.data),))


def normal_icdf(a: Tensor) -> Tensor:
    v = special.norm_ppf(a.data)
    return _finish("normal-icdf", v, (a,),
                   lambda g: (g / special.norm_pdf(v),))


def student_t_cdf(a: Tensor, dof: float) -> Tensor:
    dof = float(dof)
    return _finish("student-t-cdf", special.t_cdf(a.data, dof), (a,),
                   lambda g: (g * special.t_pdf(a.data, dof),))


def student_t_icdf(a: Tensor, dof: float) -> Tensor:
    dof = float(dof)
    v = special.t_ppf(a.data, dof)
    return _finish("student-t-icdf", v, (a,),
                   lambda g: (g / special.t_pdf(v, dof),))


# ---------------------------------------------------------------------------
# Linear-algebra helpers for the Cholesky-parameterized correlation
# ---------------------------------------------------------------------------

def lower_from_packed(packed: Tensor, dim: int) -> Tensor:
    """Unpack a length d(d+1)/2 vector into a lower-triangular matrix.

    Entries fill row-major lower-triangular order; diagonal raws pass through
    softplus so the factor has a strictly positive diagonal.
    """
    n = dim * (dim + 1) // 2
    if packed.shape != (n,):
        raise ShapeMismatchError(
            f"lower_from_packed: expected shape ({n},) for dim {dim}, got {packed.shape}")
    rows, cols = np.tril_indices(dim)
    diag_mask = rows == cols
    vals = packed.data.copy()
    vals[diag_mask] = special.softplus(packed.data[diag_mask])
    out = np.zeros((dim, dim))
    out[rows, cols] = vals

    def backward(g):
        gp = g[rows, cols].copy()
        gp[diag_mask] *= special.sigmoid(packed.data[diag_mask])
        return (gp,)

    return _finish("lower-from-packed", out, (packed,), backward)


def tri_solve_lower(L: Tensor, b: Tensor) -> Tensor:
    """Solve L w = b for lower-triangular L; b is (d,) or (d, k)."""
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeMismatchError(f"tri_solve_lower: L must be square 2-d, got {L.shape}")
    if b.shape[0] != L.shape[0]:
        raise ShapeMismatchError(
            f"tri_solve_lower: shapes {L.shape} and {b.shape} do not conform")
    w = solve_triangular(L.data, b.data, lower=True)

    def backward(g):
        gb = solve_triangular(L.data, g, lower=True, trans="T")
        if w.ndim == 1:
            gL = -np.outer(gb, w)
        else:
            gL = -gb @ w.T
        return (np.tril(gL), gb)

    return _finish("tri-solve-lower", w, (L, b), backward)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows of a 2-d tensor by index."""
    indices = np.asarray(indices, dtype=np.intp)
    if a.ndim != 2:
        raise ShapeMismatchError(f"take_rows: requires 2-d input, got {a.shape}")
    out = a.data[indices]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, indices, g)
        return (ga,)

    return _finish("take-rows", out, (a,), backward)


def take(a: Tensor, indices) -> Tensor:
    """Gather elements of a 1-d tensor by index."""
    indices = np.asarray(indices, dtype=np.intp)
    if a.ndim != 1:
        raise ShapeMismatchError(f"take: requires 1-d input, got {a.shape}")
    out = a.data[indices]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, indices, g)
        return (ga,)

    return _finish("take", out, (a,), backward)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from loss."""
    if loss.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise TapeError("backward: loss was not produced on a tape (empty tape)")
    tape = loss.node.tape
    if tape.backward_done:
        raise TapeError("backward: tape already consumed; build a new tape")
    tape.backward_done = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tape.backward_visits = 0
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        tape.backward_visits += 1
        input_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not _tracked(inp):
                continue
            if inp.node is None:
                # Leaf: accumulate into .grad.
                if inp.requires_grad:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.asarray(gi, dtype=np.float64)


@dataclass
class GradCheckReport:
    """Per-leaf maximum relative error between analytic and numeric gradients."""

    max_rel_err: list = field(default_factory=list)
    rel_tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_err) if self.max_rel_err else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.rel_tol


def gradcheck(f, leaves, eps: float = 1e-5, rel_tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of f(*leaves) against central differences.

    f must be deterministic (checked by a double forward pass) and return a
    scalar Tensor. Relative error uses max(|analytic|, |numeric|, 1) as the
    scale so near-zero gradients are compared absolutely.
    """
    if eps <= 0:
        raise ValueError("gradcheck: eps must be positive")
    leaves = list(leaves)

    def forward_value() -> float:
        return f(*leaves).item()

    v1 = forward_value()
    v2 = forward_value()
    if v1 != v2:
        raise TapeError("gradcheck: f is not deterministic (double forward disagrees)")

    for leaf in leaves:
        leaf.zero_grad()
    with Tape():
        loss = f(*leaves)
    if loss.node is not None:
        backward(loss)  # constant f leaves all grads at zero

    report = GradCheckReport(rel_tol=rel_tol)
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = forward_value()
            flat[i] = orig - eps
            fm = forward_value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            scale = max(abs(a), abs(numeric), 1.0)
            worst = max(worst, abs(a - numeric) / scale)
        report.max_rel_err.append(worst)
    return report
