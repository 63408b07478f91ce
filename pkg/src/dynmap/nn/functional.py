"""Forward and backward kernels on plain numpy arrays.

Images are channels-last (``N, H, W, C``).  Convolution weights are stored as
``(k, k, C_in, C_out)`` and use the cross-correlation convention.  The
transposed convolution with weight ``W`` is the exact adjoint of the
convolution with the same ``W``, so its weight is laid out as
``(k, k, C_out_of_deconv, C_in_of_deconv)``.
"""
import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def deconv_out_size(size, k, stride, pad):
    return (size - 1) * stride - 2 * pad + k


# ---------------------------------------------------------------- dense

def dense_forward(x, W, b):
    return x @ W + b


def dense_backward(dy, x, W):
    """Returns ``(dx, dW, db)``."""
    return dy @ W.T, x.T @ dy, dy.sum(0)


# ---------------------------------------------------------------- convolution

def _im2col(x, k, stride, pad):
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (n, ho, wo, c, k, k) -> (n*ho*wo, k*k*c)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    return cols, ho, wo


@numba.njit(cache=True)
def _col2im_kernel(cols, out, k, stride, pad):
    n, ho, wo = cols.shape[0], cols.shape[1], cols.shape[2]
    h, w, c = out.shape[1], out.shape[2], out.shape[3]
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                for i in range(k):
                    y = oh * stride + i - pad
                    if y < 0 or y >= h:
                        continue
                    for j in range(k):
                        x = ow * stride + j - pad
                        if x < 0 or x >= w:
                            continue
                        for ch in range(c):
                            out[b, y, x, ch] += cols[b, oh, ow, i, j, ch]


def _col2im(cols, x_shape, k, stride, pad, ho, wo):
    n, h, w, c = x_shape
    cols = np.ascontiguousarray(cols.reshape(n, ho, wo, k, k, c))
    out = np.zeros((n, h, w, c), dtype=cols.dtype)
    _col2im_kernel(cols, out, k, stride, pad)
    return out


def conv2d_forward(x, W, b=None, stride=1, pad=0, return_cols=False):
    k, _, cin, cout = W.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[-1]} channels, weight expects {cin}")
    cols, ho, wo = _im2col(x, k, stride, pad)
    y = (cols @ W.reshape(-1, cout)).reshape(x.shape[0], ho, wo, cout)
    if b is not None:
        y += b
    return (y, cols) if return_cols else y


def conv2d_backward_input(dy, W, x_shape, stride=1, pad=0):
    k, _, cin, cout = W.shape
    n, ho, wo, _ = dy.shape
    dcols = dy.reshape(-1, cout) @ W.reshape(-1, cout).T
    return _col2im(dcols, x_shape, k, stride, pad, ho, wo)


def conv2d_backward_weight(dy, x=None, W_shape=None, stride=1, pad=0, cols=None):
    k = W_shape[0]
    if cols is None:
        cols, _, _ = _im2col(x, k, stride, pad)
    cout = W_shape[3]
    return (cols.T @ dy.reshape(-1, cout)).reshape(W_shape)


def conv2d_backward(dy, x, W, stride=1, pad=0, cols=None):
    """Returns ``(dx, dW, db)``."""
    dx = conv2d_backward_input(dy, W, x.shape, stride, pad)
    dW = conv2d_backward_weight(dy, x, W.shape, stride, pad, cols=cols)
    return dx, dW, dy.sum((0, 1, 2))


def deconv2d_forward(x, W, b=None, stride=1, pad=0):
    k, _, cout, cin = W.shape
    if x.shape[-1] != cin:
        raise ValueError(f"deconv2d: input has {x.shape[-1]} channels, weight expects {cin}")
    n, h, w, _ = x.shape
    out_shape = (n, deconv_out_size(h, k, stride, pad), deconv_out_size(w, k, stride, pad), cout)
    y = conv2d_backward_input(x, W, out_shape, stride, pad)
    if b is not None:
        y += b
    return y


def deconv2d_backward(dy, x, W, stride=1, pad=0):
    """Returns ``(dx, dW, db)``."""
    dx, cols = conv2d_forward(dy, W, None, stride, pad, return_cols=True)
    # the deconv output plays the role of the conv input
    cin = W.shape[3]
    dW = (cols.T @ x.reshape(-1, cin)).reshape(W.shape)
    return dx, dW, dy.sum((0, 1, 2))


# ---------------------------------------------------------------- LSTM

def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_cell_forward(x, h, c, Wx, Wh, b):
    """Gate order is input, forget, candidate, output.  Returns ``(h, c, cache)``."""
    n = h.shape[-1]
    z = x @ Wx + h @ Wh + b
    i = sigmoid(z[:, :n])
    f = sigmoid(z[:, n:2 * n])
    g = np.tanh(z[:, 2 * n:3 * n])
    o = sigmoid(z[:, 3 * n:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, g, o, tc)


def lstm_cell_backward(dh, dc, cache, Wx, Wh):
    """Returns ``(dx, dh_prev, dc_prev, dWx, dWh, db)``."""
    x, h, c, i, f, g, o, tc = cache
    if dh is None:
        dh = np.zeros_like(h)
    dc_total = dh * o * (1.0 - tc * tc)
    if dc is not None:
        dc_total = dc_total + dc
    do = dh * tc * o * (1.0 - o)
    di = dc_total * g * i * (1.0 - i)
    df = dc_total * c * f * (1.0 - f)
    dg = dc_total * i * (1.0 - g * g)
    dz = np.concatenate([di, df, dg, do], axis=1)
    return dz @ Wx.T, dz @ Wh.T, dc_total * f, x.T @ dz, h.T @ dz, dz.sum(0)


# ---------------------------------------------------------------- activations

@numba.vectorize(["float32(float32)", "float64(float64)"], cache=True)
def elu(x):
    return x if x > 0 else np.expm1(x)


@numba.vectorize(["float32(float32, float32)", "float64(float64, float64)"], cache=True)
def elu_grad(y, g):
    # derivative expressed through the output: 1 for y > 0, y + 1 otherwise
    return g if y > 0 else g * (y + 1)
