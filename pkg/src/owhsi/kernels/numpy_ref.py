"""Pure-numpy reference implementations of the convolution primitives.

All three functions operate on channels-last batches and are the fallback
used when the compiled extension is unavailable (and always for float64).
Summation order per output element is fixed, so results are reproducible.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def corr_valid(x, kern):
    """Valid cross-correlation.

    x: [N, H, W, Ci], kern: [kh, kw, Ci, Co] -> [N, H-kh+1, W-kw+1, Co]
    """
    kh, kw = kern.shape[0], kern.shape[1]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # [N,Ho,Wo,Ci,kh,kw]
    out = np.tensordot(win, kern, axes=([4, 5, 3], [0, 1, 2]))
    return np.ascontiguousarray(out)


def scatter_full(g, kern):
    """Adjoint of corr_valid: scatter each input element over a kh x kw window.

    g: [N, P, Q, Cb], kern: [kh, kw, Co, Cb] -> [N, P+kh-1, Q+kw-1, Co]
    out[n, p+i, q+j, co] += g[n, p, q, cb] * kern[i, j, co, cb]
    """
    n, p, q, _ = g.shape
    kh, kw, co, _ = kern.shape
    out = np.zeros((n, p + kh - 1, q + kw - 1, co), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + p, j:j + q, :] += g @ kern[i, j].T
    return out


def kernel_grad(x, g):
    """Correlation of an input batch with an output-gradient batch.

    x: [N, H, W, Ca], g: [N, P, Q, Cb] with P <= H, Q <= W
    -> [H-P+1, W-Q+1, Ca, Cb]
    """
    n, h, w, ca = x.shape
    _, p, q, cb = g.shape
    kh, kw = h - p + 1, w - q + 1
    out = np.empty((kh, kw, ca, cb), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out[i, j] = np.tensordot(
                x[:, i:i + p, j:j + q, :], g, axes=([0, 1, 2], [0, 1, 2])
            )
    return out
