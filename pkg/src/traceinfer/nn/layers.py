"""Forward/backward kernels for the fixed layer set.

Arrays are batch-major ``(batch, time, features)``.  Every ``*_forward``
returns ``(output, cache)`` and the matching ``*_backward`` consumes the
upstream gradient and that cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


# -- activations ---------------------------------------------------------------


def leaky_relu(x, alpha):
    return np.where(x >= 0, x, alpha * x)


def leaky_relu_grad(x, alpha):
    return np.where(x >= 0, 1.0, alpha).astype(x.dtype, copy=False)


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# -- convolution -----------------------------------------------------------------


def same_padding(kernel_size):
    """(left, right) zero padding that keeps the time length."""
    left = (kernel_size - 1) // 2
    return left, kernel_size - 1 - left


def _im2col(x, k):
    b, length, cin = x.shape
    left, right = same_padding(k)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    win = sliding_window_view(xp, k, axis=1)  # (b, length, cin, k)
    return win.transpose(0, 1, 3, 2).reshape(b * length, k * cin)


def conv1d_forward(x, weights, bias):
    """Stride-1 'same' cross-correlation: ``y[t] = sum_j x[t + j - left] W[j] + b``.

    ``weights`` has shape ``(kernel, in_channels, out_channels)``.
    """
    if x.ndim != 3 or weights.ndim != 3 or x.shape[2] != weights.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[2],):
        raise ShapeError(f"conv1d: bias {bias.shape} does not match {weights.shape[2]} filters")
    k, cin, cout = weights.shape
    b, length, _ = x.shape
    cols = _im2col(x, k)
    y = cols @ weights.reshape(k * cin, cout) + bias
    return y.reshape(b, length, cout), (x, weights)


def conv1d_backward(dy, cache, need_input_grad=True):
    """Gradients ``dx, dW, db``; ``dx`` is None when not requested."""
    x, weights = cache
    k, cin, cout = weights.shape
    b, length, _ = x.shape
    dy2 = dy.reshape(b * length, cout)
    cols = _im2col(x, k)
    dw = (cols.T @ dy2).reshape(k, cin, cout)
    db = dy2.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    dcols = (dy2 @ weights.reshape(k * cin, cout).T).reshape(b, length, k, cin)
    dxp = np.zeros((b, length + k - 1, cin), dtype=dy.dtype)
    for j in range(k):
        dxp[:, j : j + length, :] += dcols[:, :, j, :]
    left, _ = same_padding(k)
    return dxp[:, left : left + length, :], dw, db


# -- GRU -------------------------------------------------------------------------


def gru_forward(x, W, U, b):
    """Sequence-to-sequence GRU with h_0 = 0.

    Gate blocks in ``W`` (in x 3H), ``U`` (H x 3H) and ``b`` (3H) are ordered
    update z, reset r, candidate:

        z = sigmoid(x W_z + h U_z + b_z)
        r = sigmoid(x W_r + h U_r + b_r)
        c = tanh(x W_c + (r * h) U_c + b_c)
        h' = (1 - z) * h + z * c
    """
    if x.ndim != 3 or W.shape[0] != x.shape[2] or W.shape[1] != 3 * U.shape[0] or U.shape[1] != W.shape[1]:
        raise ShapeError(f"gru: input {x.shape}, W {W.shape}, U {U.shape} incompatible")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"gru: bias {b.shape} does not match {W.shape[1]}")
    batch, length, _ = x.shape
    hidden = U.shape[0]
    xt = np.ascontiguousarray(x.transpose(1, 0, 2))  # time-major
    xw = xt.reshape(length * batch, -1) @ W + b
    xw = xw.reshape(length, batch, 3 * hidden)
    u_zr = U[:, : 2 * hidden]
    u_c = U[:, 2 * hidden :]
    hs = np.empty((length, batch, hidden), dtype=x.dtype)
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    cs = np.empty_like(hs)
    h = np.zeros((batch, hidden), dtype=x.dtype)
    for t in range(length):
        zr = sigmoid(xw[t, :, : 2 * hidden] + h @ u_zr)
        z = zr[:, :hidden]
        r = zr[:, hidden:]
        c = np.tanh(xw[t, :, 2 * hidden :] + (r * h) @ u_c)
        h = h + z * (c - h)
        hs[t], zs[t], rs[t], cs[t] = h, z, r, c
    out = hs.transpose(1, 0, 2)
    return out, (xt, W, U, hs, zs, rs, cs)


def gru_backward(dout, cache):
    """Backpropagation through time; returns ``dx, dW, dU, db``."""
    xt, W, U, hs, zs, rs, cs = cache
    length, batch, hidden = hs.shape
    dhs = dout.transpose(1, 0, 2)
    u_zr_t = U[:, : 2 * hidden].T
    u_c_t = U[:, 2 * hidden :].T
    da = np.empty((length, batch, 3 * hidden), dtype=hs.dtype)
    dh_next = np.zeros((batch, hidden), dtype=hs.dtype)
    zero = np.zeros((batch, hidden), dtype=hs.dtype)
    for t in range(length - 1, -1, -1):
        dh = dhs[t] + dh_next
        hp = hs[t - 1] if t > 0 else zero
        z, r, c = zs[t], rs[t], cs[t]
        dc = dh * z * (1.0 - c * c)
        d_rh = dc @ u_c_t
        dz = dh * (c - hp) * z * (1.0 - z)
        dr = d_rh * hp * r * (1.0 - r)
        da[t, :, :hidden] = dz
        da[t, :, hidden : 2 * hidden] = dr
        da[t, :, 2 * hidden :] = dc
        dh_next = dh * (1.0 - z) + d_rh * r + da[t, :, : 2 * hidden] @ u_zr_t
    h_prev = np.concatenate([zero[None], hs[:-1]], axis=0).reshape(length * batch, hidden)
    da2 = da.reshape(length * batch, 3 * hidden)
    dW = xt.reshape(length * batch, -1).T @ da2
    db = da2.sum(axis=0)
    dU = np.empty_like(U)
    dU[:, : 2 * hidden] = h_prev.T @ da2[:, : 2 * hidden]
    rh = rs.reshape(length * batch, hidden) * h_prev
    dU[:, 2 * hidden :] = rh.T @ da2[:, 2 * hidden :]
    dx = (da2 @ W.T).reshape(length, batch, -1).transpose(1, 0, 2)
    return dx, dW, dU, db


# -- time-distributed dense --------------------------------------------------------

ACTIVATIONS = ("linear", "leaky_relu", "softmax")


def dense_forward(x, W, b, activation="linear", alpha=0.3):
    """Same affine map at every step, then ``activation``.

    Softmax runs over the last (class) axis.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense: input {x.shape}, W {W.shape}, b {b.shape} incompatible")
    a = x @ W + b
    if activation == "linear":
        y = a
    elif activation == "leaky_relu":
        y = leaky_relu(a, alpha)
    else:
        y = softmax(a)
    return y, (x, W, a, y, activation, alpha)


def dense_backward(dy, cache):
    x, W, a, y, activation, alpha = cache
    if activation == "linear":
        da = dy
    elif activation == "leaky_relu":
        da = dy * leaky_relu_grad(a, alpha)
    else:
        da = y * (dy - (dy * y).sum(axis=-1, keepdims=True))
    f_in = W.shape[0]
    da2 = da.reshape(-1, W.shape[1])
    dW = x.reshape(-1, f_in).T @ da2
    db = da2.sum(axis=0)
    dx = da @ W.T
    return dx, dW, db
