"""Differentiable building blocks with exact backward passes.

Each operation comes as a ``*_forward`` function returning ``(output, ctx)``
and a ``*_backward`` function mapping the upstream gradient and ``ctx`` to
gradients of every input. :class:`Tape` strings them together for
reverse-mode differentiation of whole networks.

Feature maps are float64 arrays of shape (n_points, n_channels).
"""
import numpy as np
from scipy.special import expit, logsumexp

from .exceptions import InvalidInputError, ShapeError, TapeStateError
from .geometry import N_TAPS

SPATIAL_KERNEL_SIZE = 5
PROB_FLOOR = 1e-12


def sigmoid(x):
    return expit(x)


def conv_parameter_count(c_in, c_out):
    """Weights plus bias of one 3x3x3 pointwise conv; independent of stride."""
    return N_TAPS * c_in * c_out + c_out


def _as_map(x, name="input"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    return x


# -- pointwise atrous convolution -------------------------------------------

def atrous_conv_forward(F, grid, weights, bias, stride):
    """Atrous pointwise convolution over the cell means of ``F``.

    For a point in cell (x, y, z) the output is
    ``bias + sum_{i,j,k} mean(x+s*i, y+s*j, z+s*k) @ weights[(i,j,k)]``,
    with empty cells contributing zero. Means are taken from ``F`` itself.
    ``weights`` has shape (27, c_in, c_out) in lexicographic tap order.
    """
    F = _as_map(F, "F")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 3 or weights.shape[0] != N_TAPS or weights.shape[1] != F.shape[1]:
        raise ShapeError(
            f"kernel shape {weights.shape} incompatible with {F.shape[1]} input channels"
        )
    if len(F) != grid.n_points:
        raise ShapeError(f"F has {len(F)} rows but grid holds {grid.n_points} points")
    means = grid.pool(F)
    out_cells = np.zeros((grid.n_cells, weights.shape[2])) + bias
    for t, rows, src in grid.tap_pairs(stride):
        out_cells[rows] += means[src] @ weights[t]
    return out_cells[grid.point_cell], (grid, stride, means, weights)


def atrous_conv_backward(upstream, ctx):
    """Return ``(dF, dweights, dbias)`` for :func:`atrous_conv_forward`."""
    grid, stride, means, weights = ctx
    upstream = _as_map(upstream, "upstream")
    c_out = weights.shape[2]
    if upstream.shape != (grid.n_points, c_out):
        raise ShapeError(f"upstream shape {upstream.shape} != {(grid.n_points, c_out)}")
    d_cells = grid.scatter_sum(upstream)
    d_weights = np.zeros_like(weights)
    d_means = np.zeros_like(means)
    for t, rows, src in grid.tap_pairs(stride):
        g = d_cells[rows]
        d_weights[t] = means[src].T @ g
        # a tap maps cells injectively, so src holds no duplicates
        d_means[src] += g @ weights[t].T
    return grid.pool_backward(d_means), d_weights, upstream.sum(axis=0)


# -- 1-D convolution along the point sequence ---------------------------------

def conv1d_forward(x, kernel, bias):
    """Same-length 1-D cross-correlation with zero padding.

    ``kernel`` has shape (K, c_in, c_out) with K odd; output row i sees input
    rows i - K//2 .. i + K//2.
    """
    x = _as_map(x, "x")
    kernel = np.asarray(kernel, dtype=np.float64)
    K = kernel.shape[0]
    if kernel.ndim != 3 or K % 2 == 0 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel shape {kernel.shape} incompatible with input {x.shape}")
    n, pad = len(x), K // 2
    xp = np.vstack([np.zeros((pad, x.shape[1])), x, np.zeros((pad, x.shape[1]))])
    out = np.zeros((n, kernel.shape[2])) + bias
    for t in range(K):
        out += xp[t:t + n] @ kernel[t]
    return out, (xp, kernel)


def conv1d_backward(upstream, ctx):
    xp, kernel = ctx
    K = kernel.shape[0]
    pad = K // 2
    n = len(xp) - 2 * pad
    d_kernel = np.empty_like(kernel)
    dxp = np.zeros_like(xp)
    for t in range(K):
        d_kernel[t] = xp[t:t + n].T @ upstream
        dxp[t:t + n] += upstream @ kernel[t].T
    return dxp[pad:pad + n], d_kernel, upstream.sum(axis=0)


# -- spatial attention --------------------------------------------------------

def spatial_attention_forward(F, kernel, bias):
    """Per-point gate ``sigmoid(conv1d([max_c F; mean_c F]))`` of shape (n, 1).

    ``kernel`` has shape (5, 2): tap x {max, mean}. ``bias`` is a scalar.
    """
    F = _as_map(F, "F")
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != (SPATIAL_KERNEL_SIZE, 2):
        raise ShapeError(f"spatial kernel must have shape (5, 2), got {kernel.shape}")
    n = len(F)
    if n == 0:
        return np.zeros((0, 1)), None
    arg = F.argmax(axis=1)
    seq = np.column_stack([F[np.arange(n), arg], F.mean(axis=1)])
    z, conv_ctx = conv1d_forward(seq, kernel[:, :, None], np.atleast_1d(bias))
    S = sigmoid(z)
    return S, (F.shape, arg, conv_ctx, S)


def spatial_attention_backward(upstream, ctx):
    """Return ``(dF, dkernel, dbias)``."""
    if ctx is None:
        return np.zeros((0, 0)), np.zeros((SPATIAL_KERNEL_SIZE, 2)), 0.0
    shape, arg, conv_ctx, S = ctx
    dz = np.asarray(upstream).reshape(-1, 1) * S * (1.0 - S)
    dseq, d_kernel, d_bias = conv1d_backward(dz, conv_ctx)
    n, c = shape
    dF = np.repeat(dseq[:, 1:2] / c, c, axis=1)
    dF[np.arange(n), arg] += dseq[:, 0]
    return dF, d_kernel[:, :, 0], float(d_bias[0])


def apply_spatial_attention(F, S):
    """Scale every row of ``F`` by the matching entry of ``S`` (n, 1)."""
    F = _as_map(F, "F")
    S = np.asarray(S, dtype=np.float64).reshape(-1, 1)
    if len(S) != len(F):
        raise ShapeError(f"attention has {len(S)} rows, feature map has {len(F)}")
    return F * S


def apply_spatial_attention_backward(upstream, F, S):
    S = np.asarray(S).reshape(-1, 1)
    return upstream * S, (upstream * F).sum(axis=1, keepdims=True)


# -- dense layers and channel attention ----------------------------------------

def dense_forward(x, weight, bias):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    return x @ weight + bias, x


def dense_backward(upstream, x, weight):
    """Return ``(dx, dweight, dbias)``; handles a single vector or a batch."""
    x2, u2 = np.atleast_2d(x), np.atleast_2d(upstream)
    dx = upstream @ weight.T
    return dx, x2.T @ u2, u2.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(upstream, x):
    # subgradient 0 at x == 0
    return upstream * (x > 0)


def dense_pair_forward(x, w1, b1, w2, b2):
    """Two-layer perceptron ``relu(x @ w1 + b1) @ w2 + b2``."""
    h_pre, _ = dense_forward(x, w1, b1)
    h = relu(h_pre)
    y, _ = dense_forward(h, w2, b2)
    return y, (x, h_pre, h, w1, w2)


def dense_pair_backward(upstream, ctx):
    """Return ``(dx, dw1, db1, dw2, db2)``."""
    x, h_pre, h, w1, w2 = ctx
    dh, dw2, db2 = dense_backward(upstream, h, w2)
    dh_pre = relu_backward(dh, h_pre)
    dx, dw1, db1 = dense_backward(dh_pre, x, w1)
    return dx, dw1, db1, dw2, db2


def channel_attention_forward(F, w1, b1, w2, b2):
    """Per-channel gate ``sigmoid(mlp(mean_n F) + mlp(max_n F))`` of shape (1, c).

    The two-layer perceptron is shared between the average and max branches.
    """
    F = _as_map(F, "F")
    n, c = F.shape
    if n == 0:
        raise InvalidInputError("channel attention needs at least one point")
    if np.shape(w1) != (c, c) or np.shape(w2) != (c, c):
        raise ShapeError(f"channel attention layers must be {c}x{c}")
    avg = F.mean(axis=0)
    arg = F.argmax(axis=0)
    mx = F[arg, np.arange(c)]
    y_avg, ctx_avg = dense_pair_forward(avg, w1, b1, w2, b2)
    y_max, ctx_max = dense_pair_forward(mx, w1, b1, w2, b2)
    C = sigmoid(y_avg + y_max).reshape(1, c)
    return C, (F.shape, arg, ctx_avg, ctx_max, C)


def channel_attention_backward(upstream, ctx):
    """Return ``(dF, dw1, db1, dw2, db2)``."""
    (n, c), arg, ctx_avg, ctx_max, C = ctx
    dz = (np.asarray(upstream).reshape(1, c) * C * (1.0 - C)).reshape(c)
    da, *g_avg = dense_pair_backward(dz, ctx_avg)
    dm, *g_max = dense_pair_backward(dz, ctx_max)
    dF = np.repeat((da / n)[None, :], n, axis=0)
    dF[arg, np.arange(c)] += dm
    grads = [ga + gm for ga, gm in zip(g_avg, g_max)]
    return (dF, *grads)


def apply_channel_attention(F, C):
    """Scale every column of ``F`` by the matching entry of ``C`` (1, c)."""
    F = _as_map(F, "F")
    C = np.asarray(C, dtype=np.float64).reshape(1, -1)
    if C.shape[1] != F.shape[1]:
        raise ShapeError(f"attention has {C.shape[1]} channels, feature map has {F.shape[1]}")
    return F * C


def apply_channel_attention_backward(upstream, F, C):
    C = np.asarray(C).reshape(1, -1)
    return upstream * C, (upstream * F).sum(axis=0, keepdims=True)


# -- concatenation --------------------------------------------------------------

def concat_channels(maps):
    """Column-wise concatenation in argument order."""
    maps = [_as_map(m, "map") for m in maps]
    if not maps:
        raise ShapeError("nothing to concatenate")
    rows = {len(m) for m in maps}
    if len(rows) != 1:
        raise ShapeError(f"row counts differ: {sorted(rows)}")
    return np.hstack(maps)


def split_channels(x, widths):
    """Inverse of :func:`concat_channels`."""
    bounds = np.cumsum(widths)[:-1]
    return np.split(x, bounds, axis=1)


# -- loss ------------------------------------------------------------------------

def softmax(logits):
    logits = _as_map(logits, "logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean pointwise categorical cross-entropy and its gradient.

    Returns ``(loss, dlogits)`` where ``dlogits = (softmax - onehot) / n``.
    """
    logits = _as_map(logits, "logits")
    labels = np.asarray(labels).reshape(-1)
    n, n_classes = logits.shape
    if n == 0:
        raise InvalidInputError("cross-entropy needs at least one point")
    if len(labels) != n:
        raise ShapeError(f"{len(labels)} labels for {n} points")
    bad = (labels < 0) | (labels >= n_classes)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise InvalidInputError(f"label {labels[i]} of point {i} outside [0, {n_classes})")
    labels = labels.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted - logsumexp(shifted, axis=1, keepdims=True))
    p_true = p[np.arange(n), labels]
    loss = float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR))))
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


# -- reverse-mode tape --------------------------------------------------------------

class Var:
    """A value on the tape plus its accumulated gradient."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name=None):
        self.value = value
        self.grad = None
        self.name = name

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Var({self.name or ''}, shape={np.shape(self.value)})"


class Tape:
    """Ordered record of executed ops; :meth:`backward` replays it in reverse."""

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def _record(self, out, backward):
        self._records.append((out, backward))
        return out

    def backward(self, output, grad=None):
        """Propagate ``grad`` (default ones) from ``output`` back through every op."""
        if not self._records:
            raise TapeStateError("backward called before any forward op was recorded")
        output.accumulate(np.ones_like(output.value) if grad is None else grad)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)
        self._records = []

    # ops ------------------------------------------------------------------

    def atrous_conv(self, x, weight, bias, grid, stride):
        value, ctx = atrous_conv_forward(x.value, grid, weight.value, bias.value, stride)
        out = Var(value)

        def back(g):
            dF, dW, db = atrous_conv_backward(g, ctx)
            x.accumulate(dF)
            weight.accumulate(dW)
            bias.accumulate(db)

        return self._record(out, back)

    def relu(self, x):
        out = Var(relu(x.value))
        return self._record(out, lambda g: x.accumulate(relu_backward(g, x.value)))

    def spatial_attention(self, x, kernel, bias):
        value, ctx = spatial_attention_forward(x.value, kernel.value, bias.value)
        out = Var(value)

        def back(g):
            dF, dk, db = spatial_attention_backward(g, ctx)
            if ctx is not None:
                x.accumulate(dF)
            kernel.accumulate(dk)
            bias.accumulate(np.asarray(db).reshape(np.shape(bias.value)))

        return self._record(out, back)

    def scale_rows(self, x, s):
        out = Var(apply_spatial_attention(x.value, s.value))

        def back(g):
            dx, ds = apply_spatial_attention_backward(g, x.value, s.value)
            x.accumulate(dx)
            s.accumulate(ds)

        return self._record(out, back)

    def channel_attention(self, x, w1, b1, w2, b2):
        value, ctx = channel_attention_forward(x.value, w1.value, b1.value, w2.value, b2.value)
        out = Var(value)

        def back(g):
            dF, *grads = channel_attention_backward(g, ctx)
            x.accumulate(dF)
            for p, gp in zip((w1, b1, w2, b2), grads):
                p.accumulate(gp)

        return self._record(out, back)

    def scale_cols(self, x, c):
        out = Var(apply_channel_attention(x.value, c.value))

        def back(g):
            dx, dc = apply_channel_attention_backward(g, x.value, c.value)
            x.accumulate(dx)
            c.accumulate(dc)

        return self._record(out, back)

    def concat(self, xs):
        widths = [v.value.shape[1] for v in xs]
        out = Var(concat_channels([v.value for v in xs]))

        def back(g):
            for v, part in zip(xs, split_channels(g, widths)):
                v.accumulate(part)

        return self._record(out, back)

    def cross_entropy(self, logits, labels):
        loss, d = softmax_cross_entropy(logits.value, labels)
        out = Var(np.float64(loss))
        return self._record(out, lambda g: logits.accumulate(d * g))
