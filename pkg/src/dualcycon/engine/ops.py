"""Differentiable operations.

Each op computes its forward value with numpy and returns a :class:`Tensor`
whose backward closure maps the output gradient to one gradient per parent.
Image-like tensors are laid out as (batch, channel, height, width).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InputTooSmall, ShapeMismatch
from .tensor import Tensor, as_tensor

PROB_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _node(data, parents, backward):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def relu(x):
    mask = x.data > 0
    # maximum() keeps NaN visible; where(x > 0) would zero it
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


# -- shape ------------------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def total(x):
    return _node(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def concat(xs, axis):
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)):
            raise ShapeMismatch(f"cannot concatenate {x.shape} with {ref} on axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def take(x, start, stop):
    """Slice ``x[start:stop]`` along the leading (batch) axis."""
    def backward(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return _node(x.data[start:stop], (x,), backward)


def global_avg_pool(x, axes):
    """Mean over ``axes`` (dropped from the output shape)."""
    axes = tuple(a % x.ndim for a in np.atleast_1d(axes))
    count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)

    return _node(x.data.mean(axis=axes), (x,), backward)


def scale_along_axis(x, u, axis):
    """Multiply every slice ``x[..., k, ...]`` on ``axis`` by ``u[k]``.

    ``u`` is either a vector shared by the whole batch or a (batch, size)
    matrix holding one vector per batch element.
    """
    axis %= x.ndim
    size = x.shape[axis]
    if u.shape[-1] != size or u.ndim not in (1, 2) or (
            u.ndim == 2 and (axis == 0 or u.shape[0] != x.shape[0])):
        raise ShapeMismatch(f"cannot scale {x.shape} on axis {axis} by {u.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = size
    if u.ndim == 2:
        bshape[0] = x.shape[0]
    ub = u.data.reshape(bshape)
    keep = (0, axis) if u.ndim == 2 else (axis,)
    others = tuple(a for a in range(x.ndim) if a not in keep)

    def backward(g):
        gu = (g * x.data).sum(axis=others).reshape(u.shape)
        return g * ub, gu

    return _node(x.data * ub, (x, u), backward)


# -- layers -----------------------------------------------------------------

def conv_output_size(n, kernel, stride, pad=0):
    return (n + 2 * pad - kernel) // stride + 1


def conv2d(x, k, bias=None, stride=2, pad=0):
    """2-D cross-correlation of (B, C_in, H, W) with (C_out, C_in, kh, kw)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    B, C, H, W = x.shape
    O, Ck, kh, kw = k.shape
    if Ck != C:
        raise ShapeMismatch(f"kernel expects {Ck} input channels, got {C}")
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise InputTooSmall(f"input {H}x{W} smaller than kernel {kh}x{kw}")
    xd = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :Ho, :Wo]
    out = np.tensordot(win, k.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, k]
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)
        parents.append(bias)

    def backward(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, k.data[:, :, i, j], axes=([1], [0]))
                gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    contrib.transpose(0, 3, 1, 2)
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    out = _node(np.ascontiguousarray(out), parents, backward)
    return reshape(out, out.shape[1:]) if squeeze else out


def batchnorm2d(x, gamma, beta, running_mean, running_var, training=True,
                momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization of (B, C, H, W).

    In training mode batch statistics are used and the running estimates are
    updated in place (unbiased variance, as is customary); in eval mode the
    running estimates are used.
    """
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        n = x.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (inv.reshape(shape) / n) * (
                n * gxhat - gxhat.sum(axis=axes).reshape(shape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(shape))
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, gg, gb

    return _node(out, (x, gamma, beta), backward)


def fully_connected(x, W, b=None):
    """``x @ W.T + b`` for x of shape (B, in) and W of shape (out, in)."""
    if x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"input width {x.shape[-1]} != weight fan-in {W.shape[1]}")
    out = x.data @ W.data.T
    parents = [x, W]
    if b is not None:
        out = out + b.data
        parents.append(b)

    def backward(g):
        grads = [g @ W.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, backward)


# -- losses -----------------------------------------------------------------

def _clamp(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_loss(p, y):
    """Mean binary cross-entropy of probabilities ``p`` against labels ``y``."""
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), p.shape)
    pc = _clamp(p.data)
    inside = (p.data > PROB_CLAMP) & (p.data < 1.0 - PROB_CLAMP)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))

    def backward(g):
        return (g * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / p.size,)

    return _node(np.asarray(loss.mean()), (p,), backward)


_LOG_LO = np.log(PROB_CLAMP)
_LOG_HI = np.log1p(-PROB_CLAMP)


def bce_with_logits(z, y):
    """Per-element binary cross-entropy of ``sigmoid(z)`` against ``y``.

    Uses log-sigmoid directly so large logits never overflow; the
    probability clamp is applied in log space, giving the same value as
    :func:`bce_loss` on ``sigmoid(z)``.
    """
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), z.shape)
    # log sigmoid(z) = -softplus(-z), log(1 - sigmoid(z)) = -softplus(z)
    log_p = -np.logaddexp(0.0, -z.data)
    log_q = -np.logaddexp(0.0, z.data)
    lp = np.clip(log_p, _LOG_LO, _LOG_HI)
    lq = np.clip(log_q, _LOG_LO, _LOG_HI)
    loss = -(y * lp + (1.0 - y) * lq)
    p = _sigmoid(z.data)
    dlp = np.where(lp == log_p, 1.0 - p, 0.0)   # d log_p / dz
    dlq = np.where(lq == log_q, -p, 0.0)        # d log_q / dz

    def backward(g):
        return (-g * (y * dlp + (1.0 - y) * dlq),)

    return _node(loss, (z,), backward)


def bidirectional_kl(p, q):
    """mean(p log(p/q)) + mean(q log(q/p)) over all elements, clamped."""
    if p.shape != q.shape:
        raise ShapeMismatch(f"KL operands differ in shape: {p.shape} vs {q.shape}")
    pc, qc = _clamp(p.data), _clamp(q.data)
    mp = (p.data > PROB_CLAMP) & (p.data < 1.0 - PROB_CLAMP)
    mq = (q.data > PROB_CLAMP) & (q.data < 1.0 - PROB_CLAMP)
    diff = pc - qc
    logr = np.log(pc) - np.log(qc)
    n = p.size

    def backward(g):
        return (g * mp * (logr + diff / pc) / n,
                g * mq * (-logr - diff / qc) / n)

    return _node(np.asarray((diff * logr).sum() / n), (p, q), backward)
