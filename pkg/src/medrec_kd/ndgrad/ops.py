"""Differentiable primitives.

Every function takes :class:`Tensor` inputs (plain arrays are wrapped as
constants) and returns a Tensor. Shapes are explicit: the only broadcast
supported is adding a length-d bias row to an (n, d) matrix.

Segment arguments describe a batch of variable-length sequences stacked
row-wise: ``segments`` is an integer array of length n, non-decreasing,
holding the sequence index of each row. Attention and pooling never mix
rows from different segments.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, as_tensor, make_node

_CLAMP = 1e-12


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _ndim(a: Tensor, n: int, op: str) -> None:
    if a.value.ndim != n:
        raise ShapeError(f"{op}: expected a {n}-d tensor, got shape {a.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    """a + b, where b may be a bias row of length a.shape[-1]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return make_node(a.value + b.value, (a, b), lambda g: (g, g), "add")
    if a.value.ndim == 2 and b.value.ndim == 1 and b.shape[0] == a.shape[1]:
        return make_node(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)), "add")
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make_node(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return make_node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_node(a.value * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return make_node(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)  # overflow surfaces as NonFiniteError in make_node
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.value <= 0).any():
        raise NonFiniteError("log: non-positive input")
    x = a.value
    return make_node(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return make_node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------- reductions

def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return make_node(np.array(a.value.sum()), (a,),
                     lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.value.size
    return make_node(np.array(a.value.mean()), (a,),
                     lambda g: (np.full(shape, float(g) / n),), "mean")


def dot(a, b) -> Tensor:
    """Sum of the elementwise product; a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "dot")
    av, bv = a.value, b.value
    return make_node(np.array(np.sum(av * bv)), (a, b),
                     lambda g: (float(g) * bv, float(g) * av), "dot")


def mean_pool(x, segments: Optional[np.ndarray] = None, n_segments: Optional[int] = None) -> Tensor:
    """Average rows of x, per segment when ``segments`` is given.

    Returns (1, d) without segments, else (n_segments, d).
    """
    x = as_tensor(x)
    _ndim(x, 2, "mean_pool")
    n, d = x.shape
    if n == 0:
        raise ShapeError("mean_pool: empty input")
    if segments is None:
        out = x.value.mean(axis=0, keepdims=True)
        return make_node(out, (x,), lambda g: (np.repeat(g / n, n, axis=0),), "mean_pool")
    segments = np.asarray(segments)
    if segments.shape != (n,):
        raise ShapeError(f"mean_pool: segments shape {segments.shape} vs rows {n}")
    k = int(segments.max()) + 1 if n_segments is None else n_segments
    counts = np.bincount(segments, minlength=k).astype(np.float64)
    if (counts == 0).any():
        raise ShapeError("mean_pool: empty segment")
    sums = np.zeros((k, d))
    np.add.at(sums, segments, x.value)
    out = sums / counts[:, None]
    inv = (1.0 / counts)[segments][:, None]
    return make_node(out, (x,), lambda g: (g[segments] * inv,), "mean_pool")


# ---------------------------------------------------------------- structure

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _ndim(a, 2, "matmul")
    _ndim(b, 2, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return make_node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T + bias, with weight stored out x in."""
    x, weight = as_tensor(x), as_tensor(weight)
    _ndim(x, 2, "linear")
    _ndim(weight, 2, "linear")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    xv, wv = x.value, weight.value
    out = xv @ wv.T
    if bias is None:
        return make_node(out, (x, weight), lambda g: (g @ wv, g.T @ xv), "linear")
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    return make_node(out + bias.value, (x, weight, bias),
                     lambda g: (g @ wv, g.T @ xv, g.sum(axis=0)), "linear")


ffn = linear


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return make_node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    _ndim(a, 2, "transpose")
    return make_node(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def diagonal(a) -> Tensor:
    a = as_tensor(a)
    _ndim(a, 2, "diagonal")
    n, m = a.shape
    if n != m:
        raise ShapeError(f"diagonal: square matrix required, got {a.shape}")

    def bw(g):
        out = np.zeros((n, n))
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return make_node(np.diagonal(a.value).copy(), (a,), bw, "diagonal")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: nothing to concatenate")
    nd = ts[0].value.ndim
    for t in ts:
        if t.value.ndim != nd:
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape}")
        other = [s for i, s in enumerate(t.shape) if i != axis % nd]
        ref = [s for i, s in enumerate(ts[0].shape) if i != axis % nd]
        if other != ref:
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape}")
    out = np.concatenate([t.value for t in ts], axis=axis)

    def bw(g):
        cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    return make_node(out, ts, bw, "concat")


def row_select(table, index) -> Tensor:
    """Gather rows of ``table`` (embedding lookup). Repeated indices accumulate."""
    table = as_tensor(table)
    _ndim(table, 2, "row_select")
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError(f"row_select: index must be 1-d, got shape {index.shape}")
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        bad = sorted(set(int(i) for i in index if i < 0 or i >= n))
        raise IndexError(f"row_select: indices {bad} out of range for {n} rows")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return make_node(table.value[index], (table,), bw, "row_select")


# ---------------------------------------------------------------- normalisation

def _segment_mask(segments: Optional[np.ndarray], n: int) -> Optional[np.ndarray]:
    if segments is None:
        return None
    segments = np.asarray(segments)
    if segments.shape != (n,):
        raise ShapeError(f"segments shape {segments.shape} vs rows {n}")
    return segments[:, None] == segments[None, :]


def _masked_softmax(x: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax; entries where ``mask`` is False get probability zero."""
    a = as_tensor(a)
    _ndim(a, 2, "softmax_rows")
    if mask is not None and not np.asarray(mask).any(axis=1).all():
        raise ShapeError("softmax_rows: a row has no unmasked entries")
    p = _masked_softmax(a.value, mask)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_node(p, (a,), bw, "softmax_rows")


def logsumexp_rows(a, mask: Optional[np.ndarray] = None) -> Tensor:
    """log sum_j exp(a_ij) over unmasked j; returns shape (n,)."""
    a = as_tensor(a)
    _ndim(a, 2, "logsumexp_rows")
    if mask is not None and not np.asarray(mask).any(axis=1).all():
        raise ShapeError("logsumexp_rows: a row has no unmasked entries")
    x = a.value if mask is None else np.where(mask, a.value, -np.inf)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    p = e / s
    return make_node(out, (a,), lambda g: (p * g[:, None],), "logsumexp_rows")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation with learnable gain and bias."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    _ndim(x, 2, "layer_norm")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    xv = x.value
    # add.reduce skips the python wrapper around ndarray.mean
    mu = np.add.reduce(xv, axis=1, keepdims=True) / d
    xc = xv - mu
    var = np.add.reduce(xc * xc, axis=1, keepdims=True) / d
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = gain.value
    out = xhat * gv + bias.value

    def bw(g):
        gx = g * gv
        dx = rstd * (gx - gx.mean(axis=1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_node(out, (x, gain, bias), bw, "layer_norm")


def l2_normalize(x) -> Tensor:
    """Scale each row to unit Euclidean norm; a zero row is an error."""
    x = as_tensor(x)
    _ndim(x, 2, "l2_normalize")
    norms = np.sqrt((x.value ** 2).sum(axis=1, keepdims=True))
    if (norms == 0).any():
        raise NonFiniteError("l2_normalize: zero-norm row, cosine similarity undefined")
    u = x.value / norms

    def bw(g):
        return ((g - u * (g * u).sum(axis=1, keepdims=True)) / norms,)

    return make_node(u, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------- attention

def attention_weights(q: np.ndarray, k: np.ndarray, n_heads: int,
                      segments: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-head attention probabilities, shape (heads, n, n)."""
    n, d = q.shape
    dh = d // n_heads
    qh = q.reshape(n, n_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(n, n_heads, dh).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
    return _masked_softmax(scores, _segment_mask(segments, n))


def multi_head_attention(q, k, v, n_heads: int, segments: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` heads.

    q, k, v are already-projected (n, d) matrices; d must be divisible by
    ``n_heads``. With ``segments``, a row attends only within its segment.
    Returns the concatenated head outputs, (n, d).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    for t in (q, k, v):
        _ndim(t, 2, "multi_head_attention")
    _same_shape(q, k, "multi_head_attention")
    _same_shape(q, v, "multi_head_attention")
    n, d = q.shape
    if n_heads < 1 or d % n_heads:
        raise ShapeError(f"multi_head_attention: {n_heads} heads do not divide dim {d}")
    dh = d // n_heads
    scale_ = 1.0 / np.sqrt(dh)

    def heads(x):
        return x.reshape(n, n_heads, dh).transpose(1, 0, 2)

    def merge(x):
        return x.transpose(1, 0, 2).reshape(n, d)

    qh, kh, vh = heads(q.value), heads(k.value), heads(v.value)
    p = _masked_softmax(qh @ kh.transpose(0, 2, 1) * scale_, _segment_mask(segments, n))
    out = merge(p @ vh)

    def bw(g):
        gh = heads(g)
        dv = p.transpose(0, 2, 1) @ gh
        dp = gh @ vh.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale_
        dq = ds @ kh
        dk = ds.transpose(0, 2, 1) @ qh
        return merge(dq), merge(dk), merge(dv)

    return make_node(out, (q, k, v), bw, "multi_head_attention")


# ---------------------------------------------------------------- losses

def mse(a, b) -> Tensor:
    """Mean over rows of the squared Euclidean distance between rows."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mse")
    diff = a.value - b.value
    n = a.shape[0] if a.value.ndim > 1 else 1
    val = np.array((diff * diff).sum() / n)
    return make_node(val, (a, b),
                     lambda g: (2.0 * float(g) * diff / n, -2.0 * float(g) * diff / n), "mse")


def bce_with_probs(probs, labels) -> Tensor:
    """Binary cross-entropy averaged over every element.

    Probabilities are clamped to [1e-12, 1 - 1e-12] before the log.
    """
    probs, labels = as_tensor(probs), as_tensor(labels)
    _same_shape(probs, labels, "bce_with_probs")
    y = labels.value
    p = probs.value
    inside = (p >= _CLAMP) & (p <= 1.0 - _CLAMP)
    pc = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    n = p.size
    val = np.array(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum() / n)

    def bw(g):
        dp = (-(y / pc) + (1.0 - y) / (1.0 - pc)) * inside * (float(g) / n)
        return dp, None

    return make_node(val, (probs, labels), bw, "bce_with_probs")
