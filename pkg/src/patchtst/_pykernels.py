"""Pure numpy implementations of the fused kernels.

Used when the compiled extension is unavailable, and as the reference the
compiled versions are benchmarked and tested against.
"""
import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax_forward(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def gelu_forward(x):
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_backward(x, g):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def batchnorm_train_forward(x, gamma, beta, eps):
    """x is [B, D, N]; statistics are taken over axes (0, 2)."""
    mean = x.mean(axis=(0, 2))
    centered = x - mean[None, :, None]
    var = (centered * centered).mean(axis=(0, 2))
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * invstd[None, :, None]
    out = xhat * gamma[None, :, None] + beta[None, :, None]
    return out, xhat, mean, var, invstd


def batchnorm_train_backward(xhat, invstd, gamma, g):
    n = xhat.shape[0] * xhat.shape[2]
    dbeta = g.sum(axis=(0, 2))
    dgamma = (g * xhat).sum(axis=(0, 2))
    dxhat = g * gamma[None, :, None]
    s1 = dxhat.sum(axis=(0, 2))[None, :, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    dx = (invstd[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def patchify_padded(x, patch_len, stride):
    """x is [R, L]; returns [R, P, N] after padding `stride` copies of the last value."""
    rows, length = x.shape
    n = (length - patch_len) // stride + 2
    padded = np.concatenate([x, np.repeat(x[:, -1:], stride, axis=1)], axis=1)
    idx = np.arange(n)[None, :] * stride + np.arange(patch_len)[:, None]
    return padded[:, idx]
