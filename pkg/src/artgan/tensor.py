"""Numerical kernels on dense float64 arrays.

Images are laid out as (N, C, H, W). ``conv2d`` is a cross-correlation (the
kernel is not flipped) with zero padding, and ``deconv2d`` is its exact
adjoint: ``deconv2d(y, w)`` equals the gradient of ``<conv2d(x, w), y>`` with
respect to ``x``. Both go through an im2col/GEMM path; the ``*_naive``
variants are direct loops kept as a reference for tests.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LEAKY_ALPHA = 0.2


class ShapeError(ValueError):
    pass


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def deconv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def _check_conv_args(k, H, W, stride, pad):
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    if k > H + 2 * pad or k > W + 2 * pad:
        raise ShapeError(f"kernel {k} larger than padded input {H + 2 * pad}x{W + 2 * pad}")


def im2col(x, k, stride, pad):
    """Unfold (N, C, H, W) into a (C*k*k, N*Ho*Wo) patch matrix."""
    N, C, H, W = x.shape
    _check_conv_args(k, H, W, stride, pad)
    Ho, Wo = conv_out_size(H, k, stride, pad), conv_out_size(W, k, stride, pad)
    xp = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, k, k, N, Ho, Wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
    return cols.reshape(C * k * k, N * Ho * Wo), Ho, Wo


def col2im(cols, shape, k, stride, pad, Ho, Wo):
    """Adjoint of ``im2col``: scatter-add patches back into an (N, C, H, W) array."""
    N, C, H, W = shape
    patches = cols.reshape(C, k, k, N, Ho, Wo)
    out = np.zeros((C, N, H + 2 * pad, W + 2 * pad), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += patches[:, i, j]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _channel_major(x):
    """(N, C, H, W) -> (C, N*H*W)."""
    N, C, H, W = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(C, N * H * W)


def _from_channel_major(mat, N, H, W):
    C = mat.shape[0]
    return np.ascontiguousarray(mat.reshape(C, N, H, W).transpose(1, 0, 2, 3))


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D cross-correlation.

    Args:
        x: input of shape (N, C, H, W).
        w: filters of shape (F, C, k, k).
        b: optional bias of shape (F,).

    Returns:
        Output of shape (N, F, H', W') with H' = (H + 2*pad - k) // stride + 1.
    """
    out, _ = conv2d_forward(x, w, b, stride, pad)
    return out


def conv2d_forward(x, w, b, stride, pad):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    F, C, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d expects square kernels, got {w.shape}")
    if x.shape[1] != C:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels but weight expects {C}")
    cols, Ho, Wo = im2col(x, k, stride, pad)
    out = w.reshape(F, -1) @ cols
    if b is not None:
        out += b[:, None]
    return _from_channel_major(out, x.shape[0], Ho, Wo), cols


def conv2d_backward(dout, x_shape, cols, w, stride, pad):
    """Returns (dx, dw, db) for ``conv2d_forward`` given its cached patch matrix."""
    F, C, k, _ = w.shape
    _, _, Ho, Wo = dout.shape
    dmat = _channel_major(dout)
    dw = (dmat @ cols.T).reshape(w.shape)
    db = dmat.sum(axis=1)
    dx = col2im(w.reshape(F, -1).T @ dmat, x_shape, k, stride, pad, Ho, Wo)
    return dx, dw, db


def deconv2d(x, w, b=None, stride=1, pad=0):
    """Transposed convolution, the adjoint of ``conv2d`` with the same weight.

    Args:
        x: input of shape (N, Cin, H, W).
        w: weight of shape (Cin, Cout, k, k); as a ``conv2d`` weight it maps
            Cout channels to Cin channels.
        b: optional bias of shape (Cout,).

    Returns:
        Output of shape (N, Cout, H', W') with H' = (H - 1)*stride - 2*pad + k.
    """
    out, _ = deconv2d_forward(x, w, b, stride, pad)
    return out


def deconv2d_forward(x, w, b, stride, pad):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"deconv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    Cin, Cout, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"deconv2d expects square kernels, got {w.shape}")
    N, C, H, W = x.shape
    if C != Cin:
        raise ShapeError(f"deconv2d input has {C} channels but weight expects {Cin}")
    Ho, Wo = deconv_out_size(H, k, stride, pad), deconv_out_size(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"deconv2d output would be empty for input {H}x{W}")
    xmat = _channel_major(x)
    out = col2im(w.reshape(Cin, -1).T @ xmat, (N, Cout, Ho, Wo), k, stride, pad, H, W)
    if b is not None:
        out += b[None, :, None, None]
    return out, xmat


def deconv2d_backward(dout, xmat, x_shape, w, stride, pad):
    Cin, Cout, k, _ = w.shape
    N, _, H, W = x_shape
    dcols, Ho, Wo = im2col(dout, k, stride, pad)
    if (Ho, Wo) != (H, W):
        raise ShapeError(f"deconv2d gradient of shape {dout.shape} does not match input {x_shape}")
    dw = (xmat @ dcols.T).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dx = _from_channel_major(w.reshape(Cin, -1) @ dcols, N, H, W)
    return dx, dw, db


def conv2d_naive(x, w, b=None, stride=1, pad=0):
    N, C, H, W = x.shape
    F, Cw, k, _ = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d input has {C} channels but weight expects {Cw}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = conv_out_size(H, k, stride, pad), conv_out_size(W, k, stride, pad)
    out = np.zeros((N, F, Ho, Wo), dtype=DTYPE)
    for n in range(N):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, f, i, j] = np.sum(patch * w[f]) + (b[f] if b is not None else 0.0)
    return out


def deconv2d_naive(x, w, b=None, stride=1, pad=0):
    N, Cin, H, W = x.shape
    _, Cout, k, _ = w.shape
    Ho, Wo = deconv_out_size(H, k, stride, pad), deconv_out_size(W, k, stride, pad)
    full = np.zeros((N, Cout, Ho + 2 * pad, Wo + 2 * pad), dtype=DTYPE)
    for n in range(N):
        for c in range(Cin):
            for i in range(H):
                for j in range(W):
                    full[n, :, i * stride:i * stride + k, j * stride:j * stride + k] += x[n, c, i, j] * w[c]
    out = full[:, :, pad:pad + Ho, pad:pad + Wo]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


class BatchNormState:
    """Per-channel running mean/variance plus the number of batches folded in."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)
        self.count = np.zeros(1, dtype=DTYPE)

    @property
    def ready(self) -> bool:
        return self.count[0] > 0


def batchnorm_forward(x, gamma, beta, mode, state, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Spatial batch normalization over (N, H, W) for each channel.

    Train mode uses the biased batch variance for normalization and folds the
    batch statistics into ``state`` (exponential moving average, unbiased
    variance). "batch" mode normalizes like train mode but leaves ``state``
    alone. Eval mode reads ``state`` only.
    """
    if mode in ("train", "batch"):
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ValueError("batchnorm in train mode needs at least 2 values per channel")
        mu = x.mean(axis=(0, 2, 3))
        xc = x - mu[None, :, None, None]
        var = np.mean(xc * xc, axis=(0, 2, 3))
        if state is not None and mode == "train":
            state.mean *= momentum
            state.mean += (1 - momentum) * mu
            state.var *= momentum
            state.var += (1 - momentum) * var * (m / (m - 1))
            state.count += 1
    elif mode == "eval":
        if state is None or not state.ready:
            raise RuntimeError("batchnorm has no running statistics yet; "
                               "load a checkpoint or run in train mode first")
        xc = x - state.mean[None, :, None, None]
        var = state.var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (mode, xhat, inv_std, gamma)


def batchnorm_backward(dout, cache):
    """Returns (dx, dgamma, dbeta); in train mode the batch statistics are differentiated too."""
    mode, xhat, inv_std, gamma = cache
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = np.sum(dout * xhat, axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if mode == "eval":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    mean_dxhat = dxhat.mean(axis=(0, 2, 3))[None, :, None, None]
    mean_dxhat_xhat = np.mean(dxhat * xhat, axis=(0, 2, 3))[None, :, None, None]
    dx = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


def batchnorm(x, gamma, beta, mode, state, eps=BN_EPS):
    return batchnorm_forward(x, gamma, beta, mode, state, eps)[0]


def relu(x):
    return np.maximum(x, 0.0)


def leaky_relu(x, alpha=LEAKY_ALPHA):
    return np.where(x > 0, x, alpha * x)


def sigmoid(x):
    # exp of a non-positive argument only, so no overflow
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log_sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def activation(x, kind, alpha=LEAKY_ALPHA):
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind in (None, "linear"):
        return x
    raise ValueError(f"unknown activation {kind!r}")


class Rng:
    """Seeded random stream.

    Backed by numpy's PCG64 bit generator; normals come from numpy's ziggurat
    sampler. The full generator state is exposed as four integers so it can be
    written into checkpoints and restored exactly.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & (2**64 - 1)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape):
        return self._gen.standard_normal(shape, dtype=DTYPE)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def get_state(self) -> tuple[int, int, int, int]:
        st = self._gen.bit_generator.state
        return (st["state"]["state"], st["state"]["inc"], st["has_uint32"], st["uinteger"])

    def set_state(self, state) -> None:
        s, inc, has, uint = state
        self._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(s), "inc": int(inc)},
            "has_uint32": int(has),
            "uinteger": int(uint),
        }


def sample_normal(rng: Rng, shape):
    return rng.normal(shape)
