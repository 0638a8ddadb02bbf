"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the output
tensor, so calling :meth:`Tensor.backward` on a scalar walks the graph in
reverse topological order exactly once. float32 is the training dtype;
gradient checks run the same graph in float64.

Tensors are immutable after creation except for their gradient buffer.
A graph is single-threaded; independent graphs may run concurrently.
"""

import math

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

# Additive attention-mask value. Large enough that exp(masked - max)
# underflows to exactly 0.0 in both float32 and float64, so masked
# positions contribute nothing, bit for bit.
MASK_VALUE = -1e9

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand shapes or axes are incompatible with the operation."""


class GradError(RuntimeError):
    """Invalid use of the gradient tape (non-scalar loss, double backward)."""


class EmptyLossError(ValueError):
    """A reduction loss was asked for with zero contributing positions."""


class Tensor:
    """n-dimensional float array participating in a gradient tape.

    ``data`` is a numpy array (float32 or float64). ``grad`` is ``None``
    until a backward pass deposits a same-shape array; repeated backward
    passes through the same leaf accumulate additively. Reset is explicit
    (``t.grad = None`` or :func:`zero_grads`).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_op", "_backward_done")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """Constant copy of this tensor, cut off from the tape."""
        return Tensor(self.data.copy())

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad.

        Only valid on a scalar (size-1) tensor, and only once per graph;
        a second call raises :class:`GradError`.
        """
        if self.data.size != 1:
            raise GradError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_done:
            raise GradError("backward already ran for this graph; rebuild the "
                            "graph or reset gradients explicitly")
        if not self.requires_grad:
            raise GradError("loss does not require grad; nothing to differentiate")
        self._backward_done = True

        order = _topo_order(self)
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is not None and parent.requires_grad:
                    _accumulate(parent, g)

    # Arithmetic sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op}, requires_grad={self.requires_grad})"


def _topo_order(root):
    """Iterative postorder over parents; each node appears exactly once."""
    order = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for parent in parents:
            if id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _accumulate(tensor, g):
    if tensor.grad is None:
        tensor.grad = g.astype(tensor.data.dtype, copy=True)
    else:
        tensor.grad = tensor.grad + g


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _from_op(data, parents, backward_fn, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    else:
        out._op = op + "(const)"
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def zero_grads(tensors):
    """Explicit gradient reset for a collection of tensors."""
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a = _as_tensor(a, np.float32)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(out, (a, b), backward, "add")


def mul(a, b):
    a = _as_tensor(a, np.float32)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _from_op(out, (a, b), backward, "mul")


def scale(a, s):
    s = float(s)
    out = a.data * a.data.dtype.type(s)

    def backward(g):
        return (g * a.data.dtype.type(s),)

    return _from_op(out, (a,), backward, "scale")


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul mismatch {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _from_op(out, (a, b), backward, "matmul")


def embedding(table, ids):
    """Row lookup into ``table`` by an integer id array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _from_op(out, (table,), backward, "embedding")


def linear(x, w, b=None):
    """Affine map ``x @ w (+ b)``."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def gelu(x):
    """Gaussian error linear unit (tanh form)."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * dinner
        return (g * dx,)

    return _from_op(out, (x,), backward, "gelu")


def softmax(x, axis=-1):
    """Numerically stable softmax: exp(x - max) normalized along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _from_op(out, (x,), backward, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    if eps <= 0:
        raise ShapeError("layer_norm eps must be > 0")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm gamma/beta must have shape ({d},), "
                         f"got {gamma.shape} and {beta.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        return dx, dgamma, dbeta

    return _from_op(out, (x, gamma, beta), backward, "layer_norm")


def cross_entropy_logits(logits, targets, ignore_id=None):
    """Mean negative log-likelihood over non-ignored target positions.

    ``logits`` has class scores on the last axis; ``targets`` holds one
    integer id per remaining position. Positions equal to ``ignore_id``
    contribute zero loss and zero gradient; if every position is ignored
    this raises :class:`EmptyLossError` rather than returning NaN.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match "
                         f"logits {logits.shape[:-1]}")
    vocab = logits.shape[-1]
    if ignore_id is not None:
        valid = targets != ignore_id
    else:
        valid = np.ones(targets.shape, dtype=bool)
    checked = targets[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= vocab):
        raise ShapeError(f"target id out of range [0, {vocab})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyLossError("all target positions are ignored")

    m = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1)) + m[..., 0]
    safe_targets = np.where(valid, targets, 0)
    picked = np.take_along_axis(logits.data, safe_targets[..., None], axis=-1)[..., 0]
    nll = np.where(valid, lse - picked, 0.0)
    out = np.asarray(nll.sum() / n_valid, dtype=logits.dtype)

    def backward(g):
        p = np.exp(shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)))
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_targets[..., None], 1.0, axis=-1)
        gl = (p - onehot) * valid[..., None] * (g / n_valid)
        return (gl.astype(logits.dtype),)

    return _from_op(out, (logits,), backward, "cross_entropy_logits")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return _from_op(out, tuple(tensors), backward, "concat")


def slice_(x, key):
    """Basic indexing (ints/slices) with scatter-add backward."""
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _from_op(out, (x,), backward, "slice")


def reshape(x, shape):
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _from_op(out, (x,), backward, "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _from_op(out, (x,), backward, "transpose")


def l2_normalize(x, axis=-1, eps=1e-12):
    """Scale slices along ``axis`` to unit L2 norm.

    The denominator is ``norm + eps`` so an exactly-zero vector maps to
    zero instead of NaN.
    """
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    denom = norm + np.asarray(eps, dtype=x.dtype)
    out = x.data / denom

    def backward(g):
        safe = np.where(norm > 0, norm, 1.0)
        dot = (g * x.data).sum(axis=axis, keepdims=True)
        return (g / denom - x.data * dot / (safe * denom ** 2),)

    return _from_op(out, (x,), backward, "l2_normalize")


def sum_(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _from_op(out, (x,), backward, "sum")


def mean_(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _from_op(out, (x,), backward, "exp")


def log(x):
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _from_op(out, (x,), backward, "log")


def sdpa(q, k, v, mask=None):
    """Scaled dot-product attention with an optional additive mask.

    ``q``/``k``/``v`` are (..., T, d_head); ``mask`` is a numpy array
    broadcastable to the (..., Tq, Tk) score shape, holding 0 for visible
    and :data:`MASK_VALUE` for blocked positions.
    """
    d_head = q.shape[-1]
    perm = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = scale(matmul(q, transpose(k, perm)), 1.0 / math.sqrt(d_head))
    if mask is not None:
        scores = add(scores, Tensor(np.asarray(mask, dtype=scores.dtype)))
    attn = softmax(scores, axis=-1)
    return matmul(attn, v)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f, inputs, h=1e-5, sample=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given float64 tensors to a scalar Tensor and must be
    deterministic. With ``sample=None`` every coordinate of every input is
    perturbed; an integer samples that many coordinates per input (used to
    keep whole-model checks fast). Relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, 1e-8)``.

    Sampled checks draw only from coordinates whose analytic gradient is
    within a factor 1e3 of the tensor's largest and above 1e-6 in absolute
    value: below that, the central difference is dominated by cancellation
    noise (~eps*|f|/h) and says nothing about the backward pass.  Tensors
    whose gradient is identically zero are still probed, which catches
    spuriously dropped dependencies; tensors that are nonzero but entirely
    below the floor are skipped in sampled mode.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ShapeError("finite_diff_check requires float64 inputs")
        t.grad = None
    loss = f(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if sample is None or sample >= n:
            coords = range(n)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            mags = np.abs(a.reshape(-1))
            top = mags.max()
            if top == 0.0:
                eligible = np.arange(n)
            else:
                eligible = np.flatnonzero(mags >= max(top * 1e-3, 1e-6))
                if eligible.size == 0:
                    continue
            coords = rng.choice(eligible,
                                size=min(sample, eligible.size),
                                replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(*inputs).item()
            flat[i] = orig - h
            f_minus = f(*inputs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            ana = a.reshape(-1)[i]
            err = abs(ana - numeric) / max(abs(ana), 1e-8)
            worst = max(worst, err)
    return worst
