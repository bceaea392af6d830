"""Dense-tensor forward layers with taped reverse-mode gradients.

Tensors are contiguous channels-last float32 arrays (float64 is accepted
for high-precision gradient checking). Layer functions optionally record
a backward closure on a Tape; backward() replays the tape in reverse and
accumulates exact gradients into every input tensor it saw.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tensor:
    """Contiguous float array plus a lazily allocated gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=np.float32):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter:
    """Learnable tensor with gradient and AdaDelta accumulator state."""

    __slots__ = ("value", "accum_sq_grad", "accum_sq_update")

    def __init__(self, value):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value.grad = np.zeros_like(self.value.data)
        self.accum_sq_grad = np.zeros_like(self.value.data)
        self.accum_sq_update = np.zeros_like(self.value.data)

    @property
    def grad(self):
        return self.value.grad

    def zero_grad(self):
        self.value.grad[...] = 0


class Tape:
    """Ordered record of executed operations for one forward pass."""

    def __init__(self):
        self._entries = []
        self._outputs = set()

    def _record(self, fn, out):
        self._entries.append(fn)
        self._outputs.add(id(out))

    def __len__(self):
        return len(self._entries)


def _src(x):
    """Accept a Parameter or Tensor; gradients flow to the returned Tensor."""
    return x.value if isinstance(x, Parameter) else x


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_batch(a, rank):
    """Promote a single instance to a batch of one; report if it was single."""
    if a.ndim == rank - 1:
        return a[np.newaxis], True
    if a.ndim == rank:
        return a, False
    raise ShapeError(f"expected rank {rank - 1} or {rank}, got shape {a.shape}")


def conv2d(x, kernel, bias, padding="same", tape=None):
    """Stride-1 2-D convolution, kernel [k,k,Cin,Cout], zero 'same' padding."""
    xt, kt, bt = _src(x), _src(kernel), _src(bias)
    xd, single = _as_batch(xt.data, 4)
    kd, bd = kt.data, bt.data
    k = kd.shape[0]
    if kd.shape[1] != k or k % 2 != 1:
        raise ShapeError(f"kernel must be square with odd size, got {kd.shape}")
    if kd.shape[2] != xd.shape[3]:
        raise ShapeError(
            f"kernel expects {kd.shape[2]} input channels, input has {xd.shape[3]}")
    if bd.shape != (kd.shape[3],):
        raise ShapeError(f"bias shape {bd.shape} does not match {kd.shape[3]} filters")
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    if padding == "same":
        p = (k - 1) // 2
        xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)))
    else:
        p = 0
        xp = xd
    y = kernels.corr_valid(xp, kd) + bd
    out = Tensor(y[0] if single else y, dtype=y.dtype)
    if tape is not None:
        h, w = xd.shape[1], xd.shape[2]

        def bwd():
            if out.grad is None:
                return
            gy = np.ascontiguousarray(
                out.grad[np.newaxis] if single else out.grad)
            gx = kernels.scatter_full(gy, kd)
            if p:
                gx = gx[:, p:p + h, p:p + w, :]
            _accum(xt, gx[0] if single else gx)
            _accum(kt, kernels.kernel_grad(xp, gy))
            _accum(bt, gy.sum(axis=(0, 1, 2)))

        tape._record(bwd, out)
    return out


def conv2d_transpose(x, kernel, bias, tape=None):
    """Stride-1 transposed convolution, kernel [k,k,Cout,Cin].

    Adjoint of valid conv2d: every input element scatters kernel-weighted
    contributions into a k x k window, growing each spatial side by k-1.
    """
    xt, kt, bt = _src(x), _src(kernel), _src(bias)
    xd, single = _as_batch(xt.data, 4)
    kd, bd = kt.data, bt.data
    if kd.shape[3] != xd.shape[3]:
        raise ShapeError(
            f"kernel expects {kd.shape[3]} input channels, input has {xd.shape[3]}")
    if bd.shape != (kd.shape[2],):
        raise ShapeError(f"bias shape {bd.shape} does not match {kd.shape[2]} filters")
    y = kernels.scatter_full(xd, kd) + bd
    out = Tensor(y[0] if single else y, dtype=y.dtype)
    if tape is not None:

        def bwd():
            if out.grad is None:
                return
            gy = np.ascontiguousarray(
                out.grad[np.newaxis] if single else out.grad)
            gx = kernels.corr_valid(gy, kd)
            _accum(xt, gx[0] if single else gx)
            _accum(kt, kernels.kernel_grad(gy, xd))
            _accum(bt, gy.sum(axis=(0, 1, 2)))

        tape._record(bwd, out)
    return out


class BatchNormState:
    """Running per-channel statistics shared across calls."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps", "count")

    def __init__(self, channels=None, momentum=0.9, eps=1e-5):
        self.running_mean = None if channels is None else np.zeros(
            channels, dtype=np.float32)
        self.running_var = None if channels is None else np.ones(
            channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps
        self.count = 0

    @property
    def initialized(self):
        return self.count > 0


def batch_norm(x, gamma, beta, state, mode="train", tape=None):
    """Per-channel normalization over batch and spatial axes.

    Train mode normalizes by batch statistics (biased variance) and folds
    them into the running statistics with momentum; the first train batch
    seeds the running statistics directly. Infer mode requires initialized
    running statistics.
    """
    xt, gt, bt = _src(x), _src(gamma), _src(beta)
    xd, single = _as_batch(xt.data, 4)
    gd, bd = gt.data, bt.data
    axes = (0, 1, 2)
    if mode == "train":
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if state is not None:
            m = state.momentum
            if not state.initialized:
                state.running_mean = mean.astype(np.float32).copy()
                state.running_var = var.astype(np.float32).copy()
            else:
                state.running_mean = (m * state.running_mean
                                      + (1 - m) * mean).astype(np.float32)
                state.running_var = (m * state.running_var
                                     + (1 - m) * var).astype(np.float32)
            state.count += 1
        eps = state.eps if state is not None else 1e-5
    elif mode == "infer":
        if state is None or not state.initialized:
            raise RuntimeError("batch_norm infer mode requires initialized "
                               "running statistics")
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
        eps = state.eps
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    y = gd * xhat + bd
    out = Tensor(y[0] if single else y, dtype=y.dtype)
    if tape is not None:
        n_red = xd.shape[0] * xd.shape[1] * xd.shape[2]

        def bwd():
            if out.grad is None:
                return
            gy = out.grad[np.newaxis] if single else out.grad
            _accum(gt, (gy * xhat).sum(axis=axes))
            _accum(bt, gy.sum(axis=axes))
            dxhat = gy * gd
            if mode == "infer":
                gx = dxhat * inv
            else:
                # batch statistics depend on x, so fold their terms in
                dvar = (dxhat * (xd - mean)).sum(axis=axes) * (-0.5) * inv ** 3
                dmean = (-(dxhat).sum(axis=axes) * inv
                         - 2.0 * dvar * (xd - mean).sum(axis=axes) / n_red)
                gx = dxhat * inv + dvar * 2.0 * (xd - mean) / n_red + dmean / n_red
            _accum(xt, gx[0] if single else gx)

        tape._record(bwd, out)
    return out


def relu(x, tape=None):
    xt = _src(x)
    out = Tensor(np.maximum(xt.data, 0), dtype=xt.data.dtype)
    if tape is not None:
        mask = xt.data > 0

        def bwd():
            if out.grad is None:
                return
            _accum(xt, out.grad * mask)

        tape._record(bwd, out)
    return out


def add(x, y, tape=None):
    """Elementwise sum of two same-shape tensors (residual skip)."""
    xt, yt = _src(x), _src(y)
    if xt.data.shape != yt.data.shape:
        raise ShapeError(f"add shape mismatch {xt.data.shape} vs {yt.data.shape}")
    out = Tensor(xt.data + yt.data, dtype=xt.data.dtype)
    if tape is not None:

        def bwd():
            if out.grad is None:
                return
            _accum(xt, out.grad)
            _accum(yt, out.grad)

        tape._record(bwd, out)
    return out


def global_avg_pool(x, tape=None):
    """Spatial mean per channel: [H,W,C] -> [C] (or batched)."""
    xt = _src(x)
    xd, single = _as_batch(xt.data, 4)
    y = xd.mean(axis=(1, 2))
    out = Tensor(y[0] if single else y, dtype=y.dtype)
    if tape is not None:
        h, w = xd.shape[1], xd.shape[2]

        def bwd():
            if out.grad is None:
                return
            gy = out.grad[np.newaxis] if single else out.grad
            gx = np.broadcast_to(gy[:, np.newaxis, np.newaxis, :],
                                 xd.shape) / (h * w)
            _accum(xt, gx[0] if single else gx)

        tape._record(bwd, out)
    return out


def reshape(x, shape, tape=None):
    xt = _src(x)
    out = Tensor(xt.data.reshape(shape), dtype=xt.data.dtype)
    if tape is not None:

        def bwd():
            if out.grad is None:
                return
            _accum(xt, out.grad.reshape(xt.data.shape))

        tape._record(bwd, out)
    return out


def dense(x, weight, bias, tape=None):
    """Fully connected layer: out = x . weight + bias."""
    xt, wt, bt = _src(x), _src(weight), _src(bias)
    xd, single = _as_batch(xt.data, 2)
    wd, bd = wt.data, bt.data
    if xd.shape[1] != wd.shape[0]:
        raise ShapeError(
            f"dense expects input dim {wd.shape[0]}, got {xd.shape[1]}")
    y = xd @ wd + bd
    out = Tensor(y[0] if single else y, dtype=y.dtype)
    if tape is not None:

        def bwd():
            if out.grad is None:
                return
            gy = out.grad[np.newaxis] if single else out.grad
            _accum(xt, (gy @ wd.T)[0] if single else gy @ wd.T)
            _accum(wt, xd.T @ gy)
            _accum(bt, gy.sum(axis=0))

        tape._record(bwd, out)
    return out


def softmax(logits, tape=None):
    """Max-subtracted softmax over the last axis."""
    xt = _src(logits)
    z = xt.data
    zs = z - z.max(axis=-1, keepdims=True)
    e = np.exp(zs)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, dtype=y.dtype)
    if tape is not None:

        def bwd():
            if out.grad is None:
                return
            g = out.grad
            _accum(xt, y * (g - (g * y).sum(axis=-1, keepdims=True)))

        tape._record(bwd, out)
    return out


_PROB_FLOOR = 1e-12


def cross_entropy(prob, onehot, tape=None):
    """Negative log-likelihood of one-hot targets under given probabilities.

    Probabilities are clipped below at 1e-12 before the log. A batch input
    yields one loss per instance.
    """
    pt = _src(prob)
    oh = onehot.data if isinstance(onehot, (Tensor, Parameter)) else np.asarray(onehot)
    pd, single = _as_batch(pt.data, 2)
    ohd = oh[np.newaxis] if oh.ndim == 1 else oh
    if pd.shape != ohd.shape:
        raise ShapeError(f"prob shape {pd.shape} vs onehot shape {ohd.shape}")
    if not (np.all((ohd == 0) | (ohd == 1))
            and np.all(ohd.sum(axis=1) == 1)):
        raise ValueError("targets must be one-hot rows")
    pc = np.maximum(pd, _PROB_FLOOR)
    ce = -(ohd * np.log(pc)).sum(axis=1)
    out = Tensor(ce[0] if single else ce, dtype=pd.dtype)
    if tape is not None:
        live = pd >= _PROB_FLOOR

        def bwd():
            if out.grad is None:
                return
            g = out.grad[np.newaxis] if single else out.grad
            gp = -(ohd / pc) * live * g[:, np.newaxis]
            _accum(pt, gp[0] if single else gp)

        tape._record(bwd, out)
    return out


def l1_loss(x, xhat, tape=None):
    """Mean absolute elementwise difference (mean, not sum)."""
    xt, ht = _src(x), _src(xhat)
    if xt.data.shape != ht.data.shape:
        raise ShapeError(
            f"l1_loss shape mismatch {xt.data.shape} vs {ht.data.shape}")
    d = xt.data - ht.data
    out = Tensor(np.abs(d).mean(), dtype=d.dtype)
    if tape is not None:
        n = d.size

        def bwd():
            if out.grad is None:
                return
            s = np.sign(d) * (out.grad / n)
            _accum(xt, s)
            _accum(ht, -s)

        tape._record(bwd, out)
    return out


def l1_per_instance(x, xhat, tape=None):
    """Mean absolute difference per leading-axis instance: [N,...] -> [N]."""
    xt, ht = _src(x), _src(xhat)
    if xt.data.shape != ht.data.shape:
        raise ShapeError(
            f"l1 shape mismatch {xt.data.shape} vs {ht.data.shape}")
    d = xt.data - ht.data
    n = d.shape[0]
    flat = d.reshape(n, -1)
    out = Tensor(np.abs(flat).mean(axis=1), dtype=d.dtype)
    if tape is not None:
        per = flat.shape[1]

        def bwd():
            if out.grad is None:
                return
            s = np.sign(d) * (out.grad.reshape((n,) + (1,) * (d.ndim - 1)) / per)
            _accum(xt, s)
            _accum(ht, -s)

        tape._record(bwd, out)
    return out


def mean_vec(v, tape=None):
    """Mean of a vector, producing the scalar loss head."""
    vt = _src(v)
    out = Tensor(vt.data.mean(), dtype=vt.data.dtype)
    if tape is not None:
        n = vt.data.size

        def bwd():
            if out.grad is None:
                return
            _accum(vt, np.full_like(vt.data, 1.0 / n) * out.grad)

        tape._record(bwd, out)
    return out


def weighted_sum(a, x, b, y, tape=None):
    """a*x + b*y for scalar tensors with constant weights a, b."""
    xt, yt = _src(x), _src(y)
    out = Tensor(a * xt.data + b * yt.data, dtype=xt.data.dtype)
    if tape is not None:

        def bwd():
            if out.grad is None:
                return
            _accum(xt, a * out.grad)
            _accum(yt, b * out.grad)

        tape._record(bwd, out)
    return out


def backward(tape, loss):
    """Reverse the tape, writing d(loss)/d(input) into every input's grad."""
    if tape is None or len(tape) == 0:
        raise RuntimeError("backward called without a recorded forward pass")
    lt = _src(loss)
    if id(lt) not in tape._outputs:
        raise RuntimeError("loss tensor was not produced on this tape")
    if lt.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {lt.data.shape}")
    lt.grad = np.ones_like(lt.data)
    for fn in reversed(tape._entries):
        fn()


def adadelta_step(params, rho=0.95, epsilon=1e-6, lr=1.0):
    """One AdaDelta update over a collection of Parameters.

    Per element: E[g2] <- rho*E[g2] + (1-rho)*g2, dx = -sqrt(E[dx2]+eps) /
    sqrt(E[g2]+eps) * g, E[dx2] <- rho*E[dx2] + (1-rho)*dx2, x <- x + lr*dx.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must be in (0,1), got {rho}")
    for p in params:
        g = p.value.grad
        if g is None:
            g = np.zeros_like(p.value.data)
        p.accum_sq_grad *= rho
        p.accum_sq_grad += (1.0 - rho) * g * g
        dx = -np.sqrt(p.accum_sq_update + epsilon) / np.sqrt(
            p.accum_sq_grad + epsilon) * g
        p.accum_sq_update *= rho
        p.accum_sq_update += (1.0 - rho) * dx * dx
        p.value.data += (lr * dx).astype(p.value.data.dtype, copy=False)
