"""Convolution primitives with backend selection at import time.

Two interchangeable backends: a BLAS-backed numpy implementation and a
compiled OpenMP extension whose per-element reduction order is fixed, so
its results are bitwise identical for any thread count. The numpy path is
the default (it benchmarks faster wherever a tuned BLAS is present; see
benchmarks/bench_conv.py); set OWHSI_BACKEND=cython to select the
compiled core, OWHSI_THREADS to cap its worker threads. float64 inputs
(the gradient-test shadow mode) always use the numpy path.
"""

import os

import numpy as np

from . import numpy_ref

_choice = os.environ.get("OWHSI_BACKEND", "python").lower()
if _choice == "cython":
    try:
        from . import _convcy
    except ImportError:
        _convcy = None
elif _choice == "python":
    _convcy = None
else:
    raise ValueError(f"OWHSI_BACKEND must be 'python' or 'cython', got {_choice!r}")

BACKEND = "cython" if _convcy is not None else "python"


def _resolve_threads() -> int:
    raw = os.environ.get("OWHSI_THREADS", "")
    if raw.strip():
        return max(1, int(raw))
    return os.cpu_count() or 1


_threads = _resolve_threads()


def get_num_threads() -> int:
    return _threads


def set_num_threads(n: int) -> None:
    global _threads
    _threads = max(1, int(n))


def _use_compiled(*arrays) -> bool:
    return _convcy is not None and all(a.dtype == np.float32 for a in arrays)


def corr_valid(x, kern):
    """Valid cross-correlation: [N,H,W,Ci] x [kh,kw,Ci,Co] -> [N,Ho,Wo,Co]."""
    if _use_compiled(x, kern):
        n, h, w, _ = x.shape
        kh, kw, _, co = kern.shape
        out = np.empty((n, h - kh + 1, w - kw + 1, co), dtype=np.float32)
        _convcy.corr_valid_f32(x, kern, out, _threads)
        return out
    return numpy_ref.corr_valid(x, kern)


def scatter_full(g, kern):
    """Adjoint of corr_valid: [N,P,Q,Cb] x [kh,kw,Co,Cb] -> [N,P+kh-1,Q+kw-1,Co]."""
    if _use_compiled(g, kern):
        n, p, q, _ = g.shape
        kh, kw, co, _ = kern.shape
        out = np.empty((n, p + kh - 1, q + kw - 1, co), dtype=np.float32)
        _convcy.scatter_full_f32(
            g, np.ascontiguousarray(kern.transpose(0, 1, 3, 2)), out, _threads)
        return out
    return numpy_ref.scatter_full(g, kern)


def kernel_grad(x, g):
    """Window correlation: [N,H,W,Ca] x [N,P,Q,Cb] -> [H-P+1,W-Q+1,Ca,Cb]."""
    if _use_compiled(x, g):
        _, h, w, ca = x.shape
        _, p, q, cb = g.shape
        out = np.empty((h - p + 1, w - q + 1, ca, cb), dtype=np.float32)
        _convcy.kernel_grad_f32(x, g, out, _threads)
        return out
    return numpy_ref.kernel_grad(x, g)
