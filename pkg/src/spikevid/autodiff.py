"""Dense tensors with reverse-mode automatic differentiation.

Storage is row-major float32 by default (float64 available through the
``precision`` context manager, used e.g. by gradient checks). Reductions
accumulate in float64 regardless of storage dtype to limit drift over long
unrolled sequences. Convolution uses cross-correlation semantics with zero
padding.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "TapeConsumedError",
    "precision",
    "no_grad",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "matmul",
    "reshape",
    "permute",
    "concat",
    "stack",
    "index",
    "reduce_sum",
    "reduce_mean",
    "conv",
    "spike",
    "backward",
    "grad_check",
    "GradCheckReport",
]

_DTYPE = np.float32
_GRAD_ENABLED = True


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype for newly created tensors."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference / instrumentation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def current_dtype():
    return _DTYPE


class ShapeError(ValueError):
    pass


class TapeConsumedError(RuntimeError):
    pass


class Tensor:
    """A dense array plus its slot in the reverse-mode tape.

    ``_parents`` / ``_backward`` encode one primitive application; a backward
    traversal from a scalar loss visits every reachable node exactly once in
    reverse topological order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=_DTYPE)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all arithmetic lives in the module-level primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=_DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _make(data, parents, backward_fn):
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if requires:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise primitives


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(out_data, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(out_data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(out_data, (a, b), bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def bwd(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _make(out_data, (a, b), bwd)


def neg(a):
    def bwd(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bwd)


def scale(a, c):
    """Multiply by a python scalar constant."""
    c = a.data.dtype.type(c)

    def bwd(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), bwd)


def exp(a):
    out_data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), bwd)


def log(a):
    def bwd(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accumulate(a, g * (0.5 / out_data))

    return _make(out_data, (a,), bwd)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out_data = _sigmoid(a.data)

    def bwd(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# structural primitives


def reshape(a, shape):
    shape = tuple(shape)
    in_shape = a.data.shape

    def bwd(g):
        _accumulate(a, g.reshape(in_shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def permute(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accumulate(a, g.transpose(inv))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(out_data, tuple(tensors), bwd)


def stack(tensors: Sequence[Tensor], axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(out_data, tuple(tensors), bwd)


def index(a, i, axis=0):
    """Select one slice along ``axis`` (keeps the remaining axes)."""
    out_data = np.take(a.data, i, axis=axis)
    in_shape = a.data.shape

    def bwd(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        sl = [slice(None)] * len(in_shape)
        sl[axis] = i
        full[tuple(sl)] = g
        _accumulate(a, full)

    return _make(out_data, (a,), bwd)


def reduce_sum(a, axes=None, keepdims=False):
    out_data = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64)
    out_data = out_data.astype(a.data.dtype)
    in_shape = a.data.shape

    def bwd(g):
        if axes is None:
            _accumulate(a, np.broadcast_to(g, in_shape))
            return
        ax = axes if isinstance(axes, tuple) else (axes,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        _accumulate(a, np.broadcast_to(g, in_shape))

    return _make(out_data, (a,), bwd)


def reduce_mean(a, axes=None, keepdims=False):
    if axes is None:
        n = a.data.size
    else:
        ax = axes if isinstance(axes, tuple) else (axes,)
        n = int(np.prod([a.data.shape[i] for i in ax]))
    if n == 0:
        raise ShapeError("reduce_mean: zero-size reduction")
    return scale(reduce_sum(a, axes=axes, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least rank 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree, {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents disagree, {a.shape} x {b.shape}") from None
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out_data, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolution (cross-correlation, zero padding, grouped, rank 2 or 3)


def _conv_out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv(x, w, stride=1, padding=0, groups=1, bias=None):
    """Grouped N-D cross-correlation.

    x: [B, C_in, *spatial], w: [C_out, C_in // groups, *kernel]; spatial rank
    2 or 3. Output spatial extent is floor((n + 2p - k) / s) + 1.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    rank = w.ndim - 2
    if rank not in (2, 3):
        raise ShapeError(f"conv: spatial rank must be 2 or 3, got weight shape {w.shape}")
    if x.ndim != rank + 2:
        raise ShapeError(f"conv: input {x.shape} incompatible with weight {w.shape}")
    stride = _tuplize(stride, rank)
    padding = _tuplize(padding, rank)
    B, C_in = x.shape[0], x.shape[1]
    C_out, C_g = w.shape[0], w.shape[1]
    if C_in % groups or C_out % groups:
        raise ShapeError(f"conv: groups={groups} does not divide C_in={C_in} / C_out={C_out}")
    if C_g != C_in // groups:
        raise ShapeError(f"conv: weight expects {C_g} channels per group, input provides {C_in // groups}")
    kernel = w.shape[2:]
    spatial = x.shape[2:]
    out_spatial = tuple(
        _conv_out_extent(n, k, s, p) for n, k, s, p in zip(spatial, kernel, stride, padding)
    )
    if any(n < 1 for n in out_spatial):
        raise ShapeError(f"conv: kernel {kernel} does not fit padded input {spatial} (pad {padding})")

    pad_width = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x.data, pad_width) if any(padding) else x.data

    cols = _im2col(xp, kernel, stride, out_spatial)  # [B, *out, C_in, *kernel]
    P = B * int(np.prod(out_spatial))
    cols_g = cols.reshape(P, groups, (C_in // groups) * int(np.prod(kernel)))
    cols_g = np.ascontiguousarray(cols_g.transpose(1, 0, 2))  # [g, P, CgK]
    w_g = w.data.reshape(groups, C_out // groups, -1)  # [g, Og, CgK]
    out_g = np.matmul(cols_g, np.swapaxes(w_g, 1, 2))  # [g, P, Og]
    out_data = out_g.transpose(1, 0, 2).reshape(B, *out_spatial, C_out)
    out_data = np.ascontiguousarray(np.moveaxis(out_data, -1, 1))
    if bias is not None:
        out_data = out_data + bias.data.reshape((1, C_out) + (1,) * rank)

    def bwd(g):
        g_flat = np.moveaxis(g, 1, -1).reshape(P, groups, C_out // groups)
        g_flat = np.ascontiguousarray(g_flat.transpose(1, 0, 2))  # [g, P, Og]
        gw = np.matmul(np.swapaxes(g_flat, 1, 2), cols_g)  # [g, Og, CgK]
        _accumulate(w, gw.reshape(w.data.shape))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0,) + tuple(range(2, g.ndim))))
        if x.requires_grad:
            gcols = np.matmul(g_flat, w_g)  # [g, P, CgK]
            gcols = gcols.transpose(1, 0, 2).reshape(
                (B,) + out_spatial + (C_in,) + tuple(kernel)
            )
            gx = _col2im(gcols, xp.shape, kernel, stride, out_spatial)
            if any(padding):
                sl = [slice(None), slice(None)] + [
                    slice(p, p + n) for p, n in zip(padding, spatial)
                ]
                gx = gx[tuple(sl)]
            _accumulate(x, gx)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out_data, parents, bwd)


def _tuplize(v, rank):
    if isinstance(v, (tuple, list)):
        if len(v) != rank:
            raise ShapeError(f"conv: expected {rank} stride/padding entries, got {v}")
        return tuple(int(i) for i in v)
    return (int(v),) * rank


def _im2col(xp, kernel, stride, out_spatial):
    """[B, C, *padded] -> [B, *out, C, *kernel] window view (copied)."""
    rank = len(kernel)
    view = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + rank)))
    # view: [B, C, *valid, *kernel]; subsample by stride
    sl = [slice(None), slice(None)] + [slice(None, None, s) for s in stride]
    view = view[tuple(sl)]
    # move C behind the output spatial axes
    view = np.moveaxis(view, 1, 1 + rank)
    return np.ascontiguousarray(view)


def _col2im(gcols, xp_shape, kernel, stride, out_spatial):
    """Scatter-add [B, *out, C, *kernel] gradients back onto the padded input."""
    rank = len(kernel)
    gx = np.zeros(xp_shape, dtype=gcols.dtype)
    # bring to [B, C, *out, *kernel]
    gcols = np.moveaxis(gcols, 1 + rank, 1)
    for offset in np.ndindex(*kernel):
        sl_in = [slice(None), slice(None)] + [
            slice(o, o + s * n, s) for o, s, n in zip(offset, stride, out_spatial)
        ]
        sl_k = (slice(None),) * (2 + rank) + offset
        gx[tuple(sl_in)] += gcols[sl_k]
    return gx


# ---------------------------------------------------------------------------
# spike nonlinearity


def spike(h, v_threshold, alpha, smooth=False):
    """Heaviside threshold with a sigmoid surrogate derivative.

    Forward emits 1 where h >= v_threshold (exact binary output). Backward
    uses d/dh sigmoid(alpha * (h - v_threshold)). With ``smooth=True`` the
    forward is the sigmoid itself, making the op a genuinely smooth primitive
    for finite-difference verification.
    """
    h = _as_tensor(h)
    shifted = alpha * (h.data - h.data.dtype.type(v_threshold))
    if smooth:
        out_data = _sigmoid(shifted)
    else:
        out_data = (h.data >= v_threshold).astype(h.data.dtype)
    sg = _sigmoid(shifted)
    local = (alpha * sg * (1.0 - sg)).astype(h.data.dtype)

    def bwd(g):
        _accumulate(h, g * local)

    return _make(out_data, (h,), bwd)


def surrogate_slope(h_values, v_threshold, alpha):
    """The surrogate derivative ds/dH used at spike nodes (plain ndarray math)."""
    sg = _sigmoid(np.asarray(alpha * (np.asarray(h_values, dtype=np.float64) - v_threshold)))
    return alpha * sg * (1.0 - sg)


# ---------------------------------------------------------------------------
# backward traversal


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss; each node visited exactly once."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise TapeConsumedError("backward already called on this graph")
    loss._consumed = True

    topo = []
    visited = set()
    stack_ = [(loss, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack_.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node._backward = None
            node._parents = ()
            if node is not loss:
                node.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification


class GradCheckReport:
    def __init__(self, max_rel_err, tol, per_input):
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.per_input = per_input

    @property
    def passed(self):
        return bool(self.max_rel_err <= self.tol)

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e}, tol={self.tol:.1e})"


def grad_check(f: Callable, inputs: Iterable[Tensor], tol=1e-4, step=1e-4):
    """Compare analytic gradients of a scalar-valued ``f`` against central
    differences. Runs in float64; inputs are copied up to that precision.
    """
    with precision(np.float64):
        xs = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
        out = f(*xs)
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("grad_check: non-finite forward output")
        backward(out)
        analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in xs]

        per_input = []
        max_rel = 0.0
        for i, x in enumerate(xs):
            numeric = np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                with no_grad():
                    flat[j] = orig + step
                    f_plus = float(f(*xs).data)
                    flat[j] = orig - step
                    f_minus = float(f(*xs).data)
                    flat[j] = orig
                num_flat[j] = (f_plus - f_minus) / (2.0 * step)
            denom = np.maximum(np.maximum(np.abs(analytic[i]), np.abs(numeric)), 1.0)
            rel = np.abs(analytic[i] - numeric) / denom
            err = float(rel.max()) if rel.size else 0.0
            per_input.append(err)
            max_rel = max(max_rel, err)
    return GradCheckReport(max_rel, tol, per_input)
