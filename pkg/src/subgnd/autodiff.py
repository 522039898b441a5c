"""A small dense reverse-mode autodiff engine in float64.

Operations executed while a :class:`Tape` is active, and touching at least
one tensor that requires gradients, are recorded on that tape in execution
order. :func:`backward` replays the tape once in reverse. Leaf tensors
(parameters) accumulate into ``.grad`` across tapes, which is how per-sample
gradients are summed.

Only row-wise bias addition broadcasts; every other shape must match.
"""

from __future__ import annotations

import threading

import numpy as np
import scipy.sparse as sp

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self.tape is None

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Execution-ordered record of differentiable operations.

    Use as a context manager; a tape can be replayed by :func:`backward`
    exactly once.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs, vjp):
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(_Node(out, inputs, vjp))
    return out


def backward(loss):
    """Propagate d(loss)/d(.) to every leaf tensor that requires gradients."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise RuntimeError("loss is not recorded on any tape (detached)")
    if tape.consumed:
        raise RuntimeError("tape already replayed; record a fresh tape")
    tape.consumed = True
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.tape is tape:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
            elif inp.is_leaf:
                inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi
            else:
                raise RuntimeError("tensor recorded on a different tape")


# ---------------------------------------------------------------------------
# kink tracing (used by grad_check to skip non-differentiable neighbourhoods)
# ---------------------------------------------------------------------------

def _trace(sig):
    trace = getattr(_state, "kinks", None)
    if trace is not None:
        trace.append(sig)


class _KinkTrace:
    def __enter__(self):
        self.prev = getattr(_state, "kinks", None)
        self.items = _state.kinks = []
        return self

    def __exit__(self, *exc):
        _state.kinks = self.prev
        return False

    def same_as(self, other):
        return len(self.items) == len(other.items) and all(
            np.array_equal(a, b) for a, b in zip(self.items, other.items)
        )


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _require_2d(x, what):
    if x.data.ndim != 2:
        raise ValueError(f"{what} expects a 2-D tensor, got shape {x.shape}")


def linear(x, W, b=None):
    """``x @ W + b`` with ``x`` of shape (n, a), ``W`` (a, b), ``b`` (b,)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {W.shape}")
    out = x.data @ W.data
    inputs = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ValueError(f"bias shape {b.shape} does not match output width {W.shape[1]}")
        out = out + b.data
        inputs.append(b)
    xd, Wd = x.data, W.data

    def vjp(g):
        grads = [g @ Wd.T, xd.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _record(out, inputs, vjp)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record(a.data + b.data, [a, b], lambda g: (g, g))


def scale(x, c):
    """Multiply by a Python scalar constant."""
    x = as_tensor(x)
    c = float(c)
    return _record(x.data * c, [x], lambda g: (g * c,))


def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    return _record(np.array(x.data.sum()), [x], lambda g: (np.full(shape, float(g)),))


def relu(x):
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    _trace(mask)
    return _record(np.where(mask, x.data, 0.0), [x], lambda g: (g * mask,))


def dropout(x, p, rng=None, training=True):
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.data * keep, [x], lambda g: (g * keep,))


def gather_rows(x, index):
    """Rows ``x[index]``; the backward pass scatter-adds."""
    x = as_tensor(x)
    _require_2d(x, "gather_rows")
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError("gather index out of range")

    def vjp(g):
        return (_scatter_matrix(index, n) @ g,)

    return _record(x.data[index], [x], vjp)


def _scatter_matrix(targets, n):
    m = len(targets)
    return sp.csr_matrix((np.ones(m), (targets, np.arange(m))), shape=(n, m))


def segment_sum(messages, targets, n):
    """Row ``t`` of the result is the sum of message rows with target ``t``."""
    messages = as_tensor(messages)
    _require_2d(messages, "segment_sum")
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) != messages.shape[0]:
        raise ValueError("one target per message row required")
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise IndexError("segment target out of range")
    S = _scatter_matrix(targets, n)
    return _record(np.asarray(S @ messages.data), [messages], lambda g: (g[targets],))


def spmm(matrix, x, transpose=None):
    """Constant sparse matrix times a dense 2-D tensor."""
    x = as_tensor(x)
    _require_2d(x, "spmm")
    if matrix.shape[1] != x.shape[0]:
        raise ValueError(f"spmm shape mismatch: {matrix.shape} @ {x.shape}")
    mt = matrix.T.tocsr() if transpose is None else transpose
    return _record(np.asarray(matrix @ x.data), [x], lambda g: (np.asarray(mt @ g),))


def propagate(x, src, dst):
    """Fused ``segment_sum(gather_rows(x, src), dst, len(x))``.

    Row ``v`` of the result is the sum of ``x[u]`` over edges ``(u, v)``.
    """
    x = as_tensor(x)
    _require_2d(x, "propagate")
    n = x.shape[0]
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    return spmm(sp.csr_matrix((np.ones(len(src)), (dst, src)), shape=(n, n)), x)


_POOL_MODES = ("max", "mean", "sum")


def pool(rows, mode):
    """Column-wise max/mean/sum over the rows of a (k, h) tensor; zeros when k == 0."""
    rows = as_tensor(rows)
    _require_2d(rows, "pool")
    out = segment_pool(rows, np.zeros(rows.shape[0], dtype=np.int64), 1, mode)
    return reshape(out, (rows.shape[1],))


def segment_pool(x, segments, num_segments, mode):
    """Pool rows of ``x`` per segment id; empty segments yield zeros.

    ``max`` routes the gradient to the first maximal row of each column.
    """
    if mode not in _POOL_MODES:
        raise ValueError(f"pool mode must be one of {_POOL_MODES}")
    x = as_tensor(x)
    _require_2d(x, "segment_pool")
    k, h = x.shape
    segments = np.asarray(segments, dtype=np.int64)
    if len(segments) != k:
        raise ValueError("one segment id per row required")
    counts = np.bincount(segments, minlength=num_segments).astype(np.float64)
    if mode in ("sum", "mean"):
        S = _scatter_matrix(segments, num_segments)
        if mode == "mean":
            inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
            S = sp.diags(inv) @ S
        S = S.tocsr()
        St = S.T.tocsr()
        return _record(np.asarray(S @ x.data), [x], lambda g: (np.asarray(St @ g),))

    # max: lay rows out densely per segment, padded with -inf
    order = np.argsort(segments, kind="stable")
    seg_sorted = segments[order]
    starts = np.zeros(num_segments + 1, dtype=np.int64)
    np.cumsum(counts.astype(np.int64), out=starts[1:])
    pos = np.arange(k) - starts[seg_sorted]
    width = int(counts.max()) if k else 0
    dense = np.full((num_segments, max(width, 1), h), -np.inf)
    dense[seg_sorted, pos] = x.data[order]
    arg = dense.argmax(axis=1)
    _trace(arg)
    out = np.take_along_axis(dense, arg[:, None, :], axis=1)[:, 0, :]
    empty = counts == 0
    out[empty] = 0.0
    src_row = order[np.minimum(starts[:-1, None] + arg, max(k - 1, 0))] if k else None

    def vjp(g):
        gx = np.zeros((k, h))
        if k:
            cols = np.broadcast_to(np.arange(h), (num_segments, h))
            live = ~empty
            gx[src_row[live], cols[live]] = g[live]
        return (gx,)

    return _record(out, [x], vjp)


def concat(a, b):
    """Concatenate along the last (feature) axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat leading dims differ: {a.shape} vs {b.shape}")
    p = a.shape[-1]
    return _record(
        np.concatenate([a.data, b.data], axis=-1), [a, b],
        lambda g: (g[..., :p], g[..., p:]),
    )


def stack_max(tensors):
    """Elementwise maximum over equally shaped tensors; ties go to the first."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack_max needs at least one tensor")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ValueError("stack_max shape mismatch")
    if len(tensors) == 1:
        return tensors[0]
    stacked = np.stack([t.data for t in tensors])
    arg = stacked.argmax(axis=0)
    _trace(arg)
    out = np.take_along_axis(stacked, arg[None], axis=0)[0]

    def vjp(g):
        return [np.where(arg == i, g, 0.0) for i in range(len(tensors))]

    return _record(out, tensors, vjp)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), [x], lambda g: (g.reshape(old),))


def take_row(x, i):
    """Row ``i`` of a 2-D tensor as a 1-D tensor."""
    x = as_tensor(x)
    _require_2d(x, "take_row")
    n = x.shape[0]

    def vjp(g):
        gx = np.zeros((n, g.shape[0]))
        gx[i] = g
        return (gx,)

    return _record(x.data[i].copy(), [x], vjp)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(v):
    """Numerically stable softmax along the last axis."""
    v = as_tensor(v)
    if v.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    if not np.all(np.isfinite(v.data)):
        raise ValueError("softmax input must be finite")
    s = _softmax(v.data)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, [v], vjp)


def block_scale(x, weights):
    """Scale equal-width blocks of the last axis of ``x`` by ``weights``."""
    x, weights = as_tensor(x), as_tensor(weights)
    k = weights.shape[0]
    width = x.shape[-1]
    if weights.data.ndim != 1 or width % k:
        raise ValueError(f"cannot split width {width} into {k} blocks")
    bs = width // k
    factor = np.repeat(weights.data, bs)
    xd = x.data

    def vjp(g):
        gw = (g * xd).reshape(*g.shape[:-1], k, bs).sum(axis=-1)
        gw = gw.reshape(-1, k).sum(axis=0)
        return (g * factor, gw)

    return _record(xd * factor, [x, weights], vjp)


def role_pad(x, is_ego):
    """Differentiated zero padding: ego rows -> ``[h, 0]``, others -> ``[0, h]``."""
    x = as_tensor(x)
    _require_2d(x, "role_pad")
    mask = np.asarray(is_ego, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise ValueError("role mask must have one entry per row")
    left = np.where(mask[:, None], x.data, 0.0)
    right = np.where(mask[:, None], 0.0, x.data)

    def vjp(g):
        h = x.shape[1]
        return (np.where(mask[:, None], g[:, :h], g[:, h:]),)

    return _record(np.concatenate([left, right], axis=1), [x], vjp)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]`` for a single (C,) logit vector."""
    logits = as_tensor(logits)
    if logits.data.ndim != 1:
        raise ValueError("cross_entropy expects a 1-D logit vector")
    out = cross_entropy_sum(reshape(logits, (1, logits.shape[0])), [label])
    return out


def cross_entropy_sum(logits, labels):
    """Summed cross-entropy over the rows of a (B, C) logit matrix."""
    logits = as_tensor(logits)
    _require_2d(logits, "cross_entropy_sum")
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ValueError("one label per logit row required")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range for {C} classes")
    logp = _log_softmax(logits.data)
    loss = -logp[np.arange(B), labels].sum()
    probs = np.exp(logp)

    def vjp(g):
        d = probs.copy()
        d[np.arange(B), labels] -= 1.0
        return (d * float(g),)

    return _record(np.array(loss), [logits], vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(f, params, eps=1e-4, num_coords=None, seed=0, floor=1e-8):
    """Maximum relative error between tape and central-difference gradients.

    ``f`` takes no arguments and returns a scalar tensor computed from
    ``params``. Coordinates whose +/-``eps`` perturbation flips any ReLU sign
    or max-selection are treated as non-differentiable and skipped.
    ``num_coords`` samples that many coordinates (all when ``None``).
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape():
        loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(coords))
    want = len(coords) if num_coords is None else min(num_coords, len(coords))

    with _KinkTrace() as base:
        f()
    worst = 0.0
    checked = 0
    for c in order:
        if checked >= want:
            break
        i, j = coords[c]
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        with _KinkTrace() as plus:
            fp = float(f().data)
        flat[j] = orig - eps
        with _KinkTrace() as minus:
            fm = float(f().data)
        flat[j] = orig
        if not (plus.same_as(base) and minus.same_as(base)):
            continue
        numeric = (fp - fm) / (2 * eps)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
        checked += 1
    grad_check.last_checked = checked
    return worst


grad_check.last_checked = 0
