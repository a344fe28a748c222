"""Pure-numpy convolution / pooling kernels.

Fallback implementation used when the compiled extension is unavailable
(or when forced via AXIOMBENCH_BACKEND=numpy).  Same call signatures as
``_kernels_cy``; all arrays are C-contiguous float64.
"""

import numpy as np

NAME = "numpy"


def _pad2d(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def _im2col(xp, kh, kw, ho, wo, stride):
    """View the padded input as (C, kh, kw, ho, wo) sliding windows."""
    c = xp.shape[0]
    sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, ho, wo),
        strides=(sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return win.reshape(c * kh * kw, ho * wo)


def conv2d_forward(x, w, b, stride, pad):
    """x (C,H,W), w (F,C,kh,kw), b (F,) or None -> (F,Ho,Wo)."""
    f, c, kh, kw = w.shape
    h, wd = x.shape[1], x.shape[2]
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    cols = _im2col(_pad2d(x, pad), kh, kw, ho, wo, stride)
    y = w.reshape(f, c * kh * kw) @ cols
    if b is not None:
        y += b[:, None]
    return np.ascontiguousarray(y.reshape(f, ho, wo))


def conv2d_backward(x, w, gy, stride, pad):
    """Gradients of conv2d_forward w.r.t. (x, w, b)."""
    f, c, kh, kw = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    xp = _pad2d(x, pad)
    cols = _im2col(xp, kh, kw, ho, wo, stride)
    gy_flat = gy.reshape(f, ho * wo)

    gw = (gy_flat @ cols.T).reshape(f, c, kh, kw)
    gb = gy_flat.sum(axis=1)

    gcols = (w.reshape(f, c * kh * kw).T @ gy_flat).reshape(c, kh, kw, ho, wo)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[:, i, j]
    if pad:
        gx = np.ascontiguousarray(gxp[:, pad:-pad, pad:-pad])
    else:
        gx = gxp
    return gx, np.ascontiguousarray(gw), gb


def conv2d_backward_x(w, gy, x_shape, stride, pad):
    """Input gradient only (used when the weights take no gradient)."""
    f, c, kh, kw = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    h, wd = x_shape[1], x_shape[2]
    gcols = (w.reshape(f, c * kh * kw).T @ gy.reshape(f, ho * wo)).reshape(c, kh, kw, ho, wo)
    gxp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[:, i, j]
    if pad:
        return np.ascontiguousarray(gxp[:, pad:-pad, pad:-pad])
    return gxp


def maxpool2_forward(x):
    """Non-overlapping 2x2 max pool; also returns local argmax in {0,1,2,3}."""
    c, h, w = x.shape
    blocks = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=3).astype(np.int64)
    y = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(gy, idx, in_shape):
    """Scatter pooled gradients back to the argmax positions."""
    c, h, w = in_shape
    gblocks = np.zeros((c, h // 2, w // 2, 4))
    np.put_along_axis(gblocks, idx[..., None], gy[..., None], axis=3)
    gx = gblocks.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
    return np.ascontiguousarray(gx)
