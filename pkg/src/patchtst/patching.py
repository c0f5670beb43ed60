"""Patch tokenisation, channel reshapes and random patch masking.

Arrays follow the layout ``[..., P, N]``: patch values along the second to
last axis and patch (token) index along the last.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

PADDED = "padded-overlap"
NONOVERLAP = "nonoverlap-truncate"


@dataclass(frozen=True)
class PatchConfig:
    P: int
    S: int
    mode: str = PADDED

    def __post_init__(self):
        if self.P < 1 or self.S < 1:
            raise ConfigError(f"patch length and stride must be >= 1, got P={self.P}, S={self.S}")
        if self.mode not in (PADDED, NONOVERLAP):
            raise ConfigError(f"unknown patch mode {self.mode!r}")
        if self.mode == NONOVERLAP and self.S != self.P:
            raise ConfigError(f"non-overlapping patches need S == P, got P={self.P}, S={self.S}")

    def count(self, L):
        return num_patches(L, self.P, self.S, self.mode)

    def apply(self, x):
        if self.mode == NONOVERLAP:
            return patchify_nonoverlap(x, self.P)
        return patchify(x, self.P, self.S)


def num_patches(L, P, S, mode=PADDED):
    if L < P:
        raise ShapeError(f"look-back L={L} shorter than patch length P={P}")
    if mode == NONOVERLAP:
        return L // P
    return (L - P) // S + 2


def patchify(x, P, S):
    """Overlapping patches of ``x [..., L]`` after padding S copies of the last value.

    Returns ``[..., P, N]`` with ``N = (L - P) // S + 2``.
    """
    x = np.asarray(x, dtype=np.float64)
    num_patches(x.shape[-1], P, S)
    return kernels.patchify_padded(x, P, S)


def patchify_nonoverlap(x, P):
    """Disjoint patches covering a prefix of ``x``; the trailing ``L % P`` steps are dropped."""
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[-1]
    n = num_patches(L, P, P, NONOVERLAP)
    out = x[..., :n * P].reshape(x.shape[:-1] + (n, P))
    return np.ascontiguousarray(np.swapaxes(out, -1, -2))


def unpatchify_nonoverlap(patches):
    """Inverse of :func:`patchify_nonoverlap` on the covered prefix."""
    patches = np.asarray(patches)
    P, n = patches.shape[-2:]
    return np.swapaxes(patches, -1, -2).reshape(patches.shape[:-2] + (n * P,))


@dataclass
class PatchTensor:
    values: np.ndarray  # [B*M, P, N]
    batch: int
    channels: int

    @property
    def N(self):
        return self.values.shape[-1]


def channel_independent_reshape(x) -> PatchTensor:
    """``[B, M, P, N] -> [B*M, P, N]``; row ``b*M + m`` is channel m of item b."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected [B, M, P, N], got {x.shape}")
    B, M, P, N = x.shape
    return PatchTensor(x.reshape(B * M, P, N), B, M)


def channel_independent_inverse(pt: PatchTensor):
    rows, P, N = pt.values.shape
    return pt.values.reshape(pt.batch, pt.channels, P, N)


def channel_mixing_reshape(x):
    """``[B, M, P, N] -> [B, M*P, N]``; token features are ``[ch0 patch; ch1 patch; ...]``."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected [B, M, P, N], got {x.shape}")
    B, M, P, N = x.shape
    return x.reshape(B, M * P, N)


def channel_mixing_inverse(x, M):
    B, MP, N = x.shape
    return np.asarray(x).reshape(B, M, MP // M, N)


# -- masking ---------------------------------------------------------------

def mask_count(N, ratio):
    """round(ratio * N), halves rounded up."""
    return int(np.floor(ratio * N + 0.5))


@dataclass
class PatchMask:
    masked: np.ndarray  # bool [rows, N]
    ratio: float

    @property
    def masked_indices(self):
        return [np.flatnonzero(r) for r in self.masked]

    @property
    def k(self):
        return int(self.masked[0].sum()) if len(self.masked) else 0


def sample_mask(rows, N, ratio, rng: np.random.Generator) -> PatchMask:
    """Independent uniform subset of ``round(ratio*N)`` patch indices per row."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    k = mask_count(N, ratio)
    masked = np.zeros((rows, N), dtype=bool)
    if k:
        order = np.argsort(rng.random((rows, N)), axis=1, kind="stable")[:, :k]
        np.put_along_axis(masked, order, True, axis=1)
    return PatchMask(masked, ratio)


def mask_rng(seed, epoch, step):
    return np.random.default_rng([int(seed), int(epoch), int(step), 0x4D41534B])


def apply_mask(patches, mask: PatchMask):
    """Copy of ``patches [rows, P, N]`` with masked tokens set to 0.0."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or mask.masked.shape != (patches.shape[0], patches.shape[2]):
        raise ShapeError(f"mask {mask.masked.shape} does not fit patches {patches.shape}")
    return np.where(mask.masked[:, None, :], 0.0, patches)
