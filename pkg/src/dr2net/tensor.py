"""Numeric engine: forward/backward passes for the five layer types the
network needs, plus a central-difference gradient checker.

Tensors are plain numpy arrays. Every op keeps the dtype of its inputs, so
training runs in float32 and gradient checks run in float64 through the same
code. Batched image tensors are laid out as (B, C, H, W), row-major.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InvalidParameterError, NumericError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.99

# Upper bound on im2col buffer size (elements); larger batches are chunked.
_COL_BUDGET = 1 << 23


@dataclass
class LayerGrads:
    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


def _check_finite(arr, what="input"):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    """(B, C, H+2p, W+2p) -> (C*k*k, B*out_h*out_w)."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, oh, ow, k, k
    b, c = xp.shape[:2]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, b * out_h * out_w)


def _shift_scatter(d: np.ndarray, k: int, hp: int, wp: int) -> np.ndarray:
    """(C, B, h, w) -> (C*k*k, B*hp*wp) with entry [(c,i,j), (b,u,v)] = d[c,b,u-i,v-j].

    Out-of-range positions are zero. This is the transpose of im2col, used to
    unfold the output side of a convolution when it has fewer channels.
    """
    c, b, h, w = d.shape
    out = np.zeros((c, k, k, b, hp, wp), dtype=d.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i, j, :, i:i + h, j:j + w] = d
    return out.reshape(c * k * k, b * hp * wp)


def _shift_gather(z: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    """(C, k, k, B, hp, wp) -> (C, B, out_h, out_w), summing z[c,i,j,b,h+i,w+j] over (i, j)."""
    acc = z[:, 0, 0, :, :out_h, :out_w].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                acc += z[:, i, j, :, i:i + out_h, j:j + out_w]
    return acc


def _conv_shapes(x, kernels, pad):
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"kernels must be (C_out, C_in, k, k), got {kernels.shape}")
    if x.ndim != 4:
        raise DimensionError(f"conv input must be (C, H, W) or (B, C, H, W), got {x.shape}")
    c_out, c_in, k, _ = kernels.shape
    if x.shape[1] != c_in:
        raise DimensionError(
            f"input has {x.shape[1]} channels but kernels {kernels.shape} expect {c_in}")
    if k % 2 == 0:
        raise InvalidParameterError(f"kernel size must be odd, got {k}")
    if pad < 0:
        raise InvalidParameterError(f"padding must be >= 0, got {pad}")
    out_h = x.shape[2] + 2 * pad - k + 1
    out_w = x.shape[3] + 2 * pad - k + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"kernel {k} too large for input {x.shape} with pad {pad}")
    return c_out, c_in, k, out_h, out_w


def _chunks(n_batch, per_sample):
    step = max(1, _COL_BUDGET // max(per_sample, 1))
    for start in range(0, n_batch, step):
        yield slice(start, min(start + step, n_batch))


def _pad(x, pad):
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, pad: int) -> np.ndarray:
    """Stride-1 zero-padded cross-correlation.

    Accepts a single image (C, H, W) or a batch (B, C, H, W). When there are
    fewer output than input channels the input is first mixed per kernel tap
    (one GEMM) and the taps are then shifted and summed; otherwise the usual
    im2col + GEMM is used. Batches are processed in chunks to bound memory.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    c_out, c_in, k, out_h, out_w = _conv_shapes(x, kernels, pad)
    xp = _pad(x, pad)
    hp, wp = xp.shape[2:]
    out = np.empty((x.shape[0], c_out, out_h, out_w), dtype=np.result_type(x, kernels))
    if c_out < c_in:
        wtap = kernels.transpose(0, 2, 3, 1).reshape(c_out * k * k, c_in)
        for sl in _chunks(x.shape[0], c_out * k * k * hp * wp):
            xs = xp[sl]
            z = (wtap @ xs.transpose(1, 0, 2, 3).reshape(c_in, -1))
            z = z.reshape(c_out, k, k, xs.shape[0], hp, wp)
            out[sl] = _shift_gather(z, k, out_h, out_w).transpose(1, 0, 2, 3)
    else:
        wmat = kernels.reshape(c_out, -1)
        for sl in _chunks(x.shape[0], c_in * k * k * out_h * out_w):
            cols = _im2col(xp[sl], k, out_h, out_w)
            res = (wmat @ cols).reshape(c_out, -1, out_h, out_w)
            out[sl] = res.transpose(1, 0, 2, 3)
    out += bias.reshape(1, c_out, 1, 1)
    return out[0] if single else out


def conv2d_backward(x, kernels, pad, dout):
    """Gradients of conv2d_forward w.r.t. input, kernels and bias.

    Returns ``(dx, dkernels, dbias)``. Each product unfolds whichever side of
    the layer (input or output) has fewer channels.
    """
    single = x.ndim == 3
    if single:
        x, dout = x[None], dout[None]
    c_out, c_in, k, out_h, out_w = _conv_shapes(x, kernels, pad)
    if dout.shape != (x.shape[0], c_out, out_h, out_w):
        raise DimensionError(f"upstream grad shape {dout.shape} does not match conv output")
    xp = _pad(x, pad)
    h, w = x.shape[2:]
    hp, wp = xp.shape[2:]
    db = dout.sum(axis=(0, 2, 3))
    dx = np.empty_like(x)
    if c_in <= c_out:
        wmat = kernels.reshape(c_out, -1)
        dw = np.zeros_like(wmat)
        for sl in _chunks(x.shape[0], c_in * k * k * hp * wp):
            xs = xp[sl]
            dmat = dout[sl].transpose(1, 0, 2, 3).reshape(c_out, -1)
            cols = _im2col(xs, k, out_h, out_w)
            dw += dmat @ cols.T
            # gather the tap contributions back onto the padded input
            z = (wmat.T @ dmat).reshape(c_in, k, k, xs.shape[0], out_h, out_w)
            dxp = np.zeros((c_in, xs.shape[0], hp, wp), dtype=dx.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + out_h, j:j + out_w] += z[:, i, j]
            dx[sl] = dxp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3)
        dw = dw.reshape(kernels.shape)
    else:
        wtap = kernels.transpose(0, 2, 3, 1).reshape(c_out * k * k, c_in)
        dwtap = np.zeros_like(wtap)
        for sl in _chunks(x.shape[0], c_out * k * k * hp * wp):
            xs = xp[sl]
            nb = xs.shape[0]
            dcols = _shift_scatter(dout[sl].transpose(1, 0, 2, 3), k, hp, wp)
            xmat = xs.transpose(1, 0, 2, 3).reshape(c_in, -1)
            dwtap += dcols @ xmat.T
            dxp = (wtap.T @ dcols).reshape(c_in, nb, hp, wp)
            dx[sl] = dxp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3)
        dw = dwtap.reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2).copy()
    if single:
        dx = dx[0]
    return dx, dw, db


def conv2d_reference(x, kernels, bias, pad):
    """Nested-loop convolution, used as a test oracle."""
    c_out, c_in, k, _ = kernels.shape
    _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh, ow = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    out = np.zeros((c_out, oh, ow), dtype=np.result_type(x, kernels))
    for o in range(c_out):
        for r in range(oh):
            for c in range(ow):
                acc = bias[o]
                for ci in range(c_in):
                    for i in range(k):
                        for j in range(k):
                            acc += kernels[o, ci, i, j] * xp[ci, r + i, c + j]
                out[o, r, c] = acc
    return out


# ------------------------------------------------------------------ batchnorm

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    recorded: bool = False

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), False)


def batchnorm_forward(x, gamma, beta, mode, state: RunningStats,
                      eps=BN_EPS, momentum=BN_MOMENTUM, update_stats=True):
    """Per-channel batch normalization over (B, H, W).

    Returns ``(out, cache)``. In ``"train"`` mode the batch statistics are
    used and, if ``update_stats``, folded into ``state`` with an exponential
    moving average (``running = momentum*running + (1-momentum)*batch``).
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm expects (B, C, H, W), got {x.shape}")
    if eps <= 0:
        raise InvalidParameterError("epsilon must be positive")
    shape = (1, -1, 1, 1)
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise DimensionError("train-mode batchnorm needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        if update_stats:
            if state.recorded:
                state.mean[...] = momentum * state.mean + (1 - momentum) * mean
                state.var[...] = momentum * state.var + (1 - momentum) * var
            else:
                state.mean[...] = mean
                state.var[...] = var
                state.recorded = True
    elif mode == "infer":
        if not state.recorded:
            raise StateError("batchnorm running statistics were never recorded")
        mean, var = state.mean, state.var
        xc = x - mean.reshape(shape)
    else:
        raise InvalidParameterError(f"unknown batchnorm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, (mode, xhat, inv_std, gamma)


def batchnorm_backward(cache, dout):
    mode, xhat, inv_std, gamma = cache
    shape = (1, -1, 1, 1)
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    g = (gamma * inv_std).reshape(shape)
    if mode == "infer":
        return dout * g, dgamma, dbeta
    count = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = g * (dout - (dbeta / count).reshape(shape) - xhat * (dgamma / count).reshape(shape))
    return dx, dgamma, dbeta


# ------------------------------------------------------------- relu and loss

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dout):
    # gradient at exactly 0 is 0
    return dout * (x > 0)


def mse_loss(pred, target) -> float:
    """Mean over the batch of per-sample squared L2 distances.

    The first axis is the batch axis; a 1-D input is a batch of one.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    if pred.ndim == 1:
        pred, target = pred[None], target[None]
    diff = (pred - target).reshape(pred.shape[0], -1).astype(np.float64)
    per_sample = np.einsum("ij,ij->i", diff, diff)
    total = 0.0
    for v in per_sample:
        total += float(v)
    return total / pred.shape[0]


def mse_loss_grad(pred, target):
    pred = np.asarray(pred)
    batch = pred.shape[0] if pred.ndim > 1 else 1
    return (2.0 / batch) * (pred - target)


# -------------------------------------------------------------------- layers

class Layer:
    """A layer owns its parameters in ``params`` and exposes
    ``forward(x, mode) -> (out, cache)`` and ``backward(cache, dout)``."""

    params: dict[str, np.ndarray]

    def backward(self, cache, dout) -> LayerGrads:
        if cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a forward cache")
        return self._backward(cache, dout)


class Linear(Layer):
    def __init__(self, weight, bias):
        self.params = {"weight": weight, "bias": bias}

    def forward(self, x, mode="infer"):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise DimensionError(f"linear layer expects (B, {w.shape[1]}), got {x.shape}")
        return x @ w.T + self.params["bias"], x

    def _backward(self, x, dout):
        w = self.params["weight"]
        return LayerGrads(dout @ w, {"weight": dout.T @ x, "bias": dout.sum(axis=0)})


class Conv2d(Layer):
    def __init__(self, weight, bias, pad):
        self.params = {"weight": weight, "bias": bias}
        self.pad = pad

    def forward(self, x, mode="infer"):
        return conv2d_forward(x, self.params["weight"], self.params["bias"], self.pad), x

    def _backward(self, x, dout):
        dx, dw, db = conv2d_backward(x, self.params["weight"], self.pad, dout)
        return LayerGrads(dx, {"weight": dw, "bias": db})


class BatchNorm2d(Layer):
    def __init__(self, gamma, beta, stats: RunningStats):
        self.params = {"gamma": gamma, "beta": beta}
        self.stats = stats

    def forward(self, x, mode="infer", update_stats=True):
        return batchnorm_forward(x, self.params["gamma"], self.params["beta"], mode,
                                 self.stats, update_stats=update_stats)

    def _backward(self, cache, dout):
        dx, dgamma, dbeta = batchnorm_backward(cache, dout)
        return LayerGrads(dx, {"gamma": dgamma, "beta": dbeta})


class ReLU(Layer):
    params = {}

    def forward(self, x, mode="infer"):
        return relu(x), x

    def _backward(self, x, dout):
        return LayerGrads(relu_backward(x, dout))


class MSELoss(Layer):
    """Loss as a layer: forward returns the scalar, backward seeds the chain."""

    params = {}

    def forward(self, pred, target):
        return mse_loss(pred, target), (pred, target)

    def _backward(self, cache, dout=1.0):
        pred, target = cache
        return LayerGrads(dout * mse_loss_grad(pred, target))


def backward(layer: Layer, cache, upstream_grad) -> LayerGrads:
    return layer.backward(cache, upstream_grad)


# ------------------------------------------------------------ gradient check

def finite_difference_check(f, point, analytic, eps=1e-5, indices=None):
    """Largest elementwise relative error between ``analytic`` and a
    central-difference estimate of the gradient of scalar ``f`` at ``point``.

    ``indices`` optionally restricts the check to a subset of flat indices.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise InvalidParameterError("eps must be positive")
    x = np.array(point, dtype=np.float64, copy=True)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if analytic.size != x.size:
        raise DimensionError(f"analytic gradient has {analytic.size} entries, point has {x.size}")
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"function is not finite near flat index {i}")
        num = (fp - fm) / (2 * eps)
        a = analytic[i]
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
