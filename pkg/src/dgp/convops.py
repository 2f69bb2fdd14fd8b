"""Convolution primitives.

Feature vectors flatten channel-major, then row, then column (C order on
(c, y, x)), and kernels flatten the same way, so convolution is the matrix
product ``im2col(x) @ w`` with ``w`` of shape (c_in*k*k, c_out).  The same
patch extraction doubles as the reshape that carries per-sample gradient
rows into flattened-kernel space.
"""

from __future__ import annotations

import numpy as np

# conv_as_matrix is a test-scale explicit construction; refuse huge outputs.
_AS_MATRIX_CAP = 2**16


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"kernel {kernel} with stride {stride}, padding {padding} does not fit "
            f"input size {size}"
        )
    return out


def im2col(x4: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Extract sliding patches: (n, c, h, w) -> (n, oh*ow, c*k*k).

    Patch order is output-position row-major; within a patch the layout is
    channel-major, kernel row, kernel column.
    """
    if padding:
        x4 = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x4, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    n, c, oh, ow, k, _ = windows.shape
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * k * k)
    return np.ascontiguousarray(cols)


def col2im(
    cols: np.ndarray,
    in_shape: tuple,
    kernel: int,
    stride: int,
    padding: int,
) -> np.ndarray:
    """Adjoint of :func:`im2col`; scatter-adds patches back to (n, c, h, w)."""
    c, h, w = in_shape
    n = cols.shape[0]
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    xpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    cols6 = cols.reshape(n, oh, ow, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
    for ky in range(kernel):
        for kx in range(kernel):
            xpad[:, :, ky : ky + oh * stride : stride, kx : kx + ow * stride : stride] += (
                cols6[:, :, :, :, ky, kx]
            )
    if padding:
        xpad = xpad[:, :, padding:-padding, padding:-padding]
    return xpad


def conv_as_matrix(
    in_shape: tuple,
    weights: np.ndarray,
    kernel: int,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Materialize the convolution as an explicit (c*h*w) x (c_out*oh*ow) matrix.

    Built by direct index arithmetic, independent of the im2col route, so the
    two can oracle each other: flatten(conv(x)) == flatten(x) @ W.  Each
    column is zero except for one kernel's weights at that output position's
    receptive field.  Test-scale only; the product of the two matrix dims is
    capped at 2**16.
    """
    c, h, w = in_shape
    ckk, c_out = weights.shape
    if ckk != c * kernel * kernel:
        raise ValueError(
            f"weights rows {ckk} do not match c*k*k = {c * kernel * kernel}"
        )
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    n_in = c * h * w
    n_out = c_out * oh * ow
    if n_in * n_out > _AS_MATRIX_CAP:
        raise ValueError(
            f"conv_as_matrix is capped at {_AS_MATRIX_CAP} entries, "
            f"requested {n_in}x{n_out}"
        )
    wt = np.zeros((n_in, n_out))
    for co in range(c_out):
        for oy in range(oh):
            for ox in range(ow):
                col = (co * oh + oy) * ow + ox
                for ci in range(c):
                    for ky in range(kernel):
                        for kx in range(kernel):
                            iy = oy * stride + ky - padding
                            ix = ox * stride + kx - padding
                            if 0 <= iy < h and 0 <= ix < w:
                                row = (ci * h + iy) * w + ix
                                wt[row, col] = weights[
                                    (ci * kernel + ky) * kernel + kx, co
                                ]
    return wt


def avgpool2(x4: np.ndarray) -> np.ndarray:
    n, c, h, w = x4.shape
    return x4.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(d4: np.ndarray) -> np.ndarray:
    """Adjoint of 2x2 average pooling: spread each cotangent over its window / 4."""
    return np.repeat(np.repeat(d4, 2, axis=2), 2, axis=3) * 0.25
