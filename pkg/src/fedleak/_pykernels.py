"""numpy implementation of the ConvNet kernels (fallback for ``_ckernels``).

Layout is NCHW; kernels are ``[cout, cin, 9]`` with taps in row-major
(di, dj) order. The convolution runs as a BLAS contraction over shifted
views of the input.
"""
import numpy as np


def _crop(x):
    x = np.ascontiguousarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected an NCHW array, got shape {x.shape}")
    h2, w2 = (x.shape[2] - 2) // 2, (x.shape[3] - 2) // 2
    if h2 < 1 or w2 < 1:
        raise ValueError("input too small for conv3x3 + pool2x2")
    return x, h2, w2


def _patches(x, h2, w2):
    H, W = 2 * h2, 2 * w2
    return np.stack([x[:, :, di:di + H, dj:dj + W] for di in range(3) for dj in range(3)], axis=2)


def conv3x3_pool_forward(x, w):
    x, h2, w2 = _crop(x)
    w = np.asarray(w)
    if w.shape[1:] != (x.shape[1], 9):
        raise ValueError("kernel tensor does not match the input channels")
    z = np.tensordot(w, _patches(x, h2, w2), axes=([1, 2], [1, 2])).transpose(1, 0, 2, 3)
    best = z[:, :, 0::2, 0::2].copy()
    arg = np.zeros(best.shape, dtype=np.int8)
    for pos, (di, dj) in enumerate(((0, 1), (1, 0), (1, 1)), start=1):
        v = z[:, :, di::2, dj::2]
        better = v > best
        best[better] = v[better]
        arg[better] = pos
    return np.ascontiguousarray(best, dtype=x.dtype), arg


def conv3x3_pool_backward(x, w, dpool, arg, need_dx):
    x, h2, w2 = _crop(x)
    if dpool.shape[2:] != (h2, w2) or dpool.shape[1] != w.shape[0]:
        raise ValueError("gradient shapes do not match the forward pass")
    n, cout = dpool.shape[:2]
    dz = np.zeros((n, cout, 2 * h2, 2 * w2), dtype=dpool.dtype)
    for pos in range(4):
        di, dj = divmod(pos, 2)
        dz[:, :, di::2, dj::2] = np.where(arg == pos, dpool, 0)
    cols = _patches(x, h2, w2)
    dw = np.tensordot(dz.astype(np.float64), cols.astype(np.float64), axes=([0, 2, 3], [0, 3, 4]))
    dw = dw.astype(x.dtype)
    if not need_dx:
        return dw, None
    dcols = np.tensordot(w, dz, axes=([0], [1]))  # cin, 9, n, H, W
    dx = np.zeros_like(x)
    H, W = 2 * h2, 2 * w2
    for k in range(9):
        di, dj = divmod(k, 3)
        dx[:, :, di:di + H, dj:dj + W] += dcols[:, k].transpose(1, 0, 2, 3)
    return dw, dx
