"""Fused numerical kernels with a compiled backend and a numpy fallback.

The backend is chosen once at import. Set ``PATCHTST_KERNELS=python`` to
force the numpy path, or ``PATCHTST_KERNELS=compiled`` to fail loudly when
the extension is missing.
"""
import logging
import os

import numpy as np

from . import _pykernels

logger = logging.getLogger(__name__)

_choice = os.environ.get("PATCHTST_KERNELS", "auto").lower()
if _choice not in ("auto", "python", "compiled"):
    raise ImportError(f"PATCHTST_KERNELS must be auto, python or compiled, got {_choice!r}")

_compiled = None
if _choice != "python":
    try:
        from . import _ckernels as _compiled
    except ImportError:
        if _choice == "compiled":
            raise
        logger.debug("compiled kernels unavailable, using numpy fallback")

BACKEND = "compiled" if _compiled is not None else "python"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


class _Backend:
    """Shape-normalising front end over one kernel implementation."""

    def __init__(self, impl, name):
        self.impl = impl
        self.name = name

    def softmax_forward(self, x):
        x = _c(x)
        return self.impl.softmax_forward(x.reshape(-1, x.shape[-1])).reshape(x.shape)

    def softmax_backward(self, y, g):
        y = _c(y)
        flat = (-1, y.shape[-1])
        return self.impl.softmax_backward(y.reshape(flat), _c(g).reshape(flat)).reshape(y.shape)

    def gelu_forward(self, x):
        x = _c(x)
        return self.impl.gelu_forward(x.reshape(-1)).reshape(x.shape)

    def gelu_backward(self, x, g):
        x = _c(x)
        return self.impl.gelu_backward(x.reshape(-1), _c(g).reshape(-1)).reshape(x.shape)

    def batchnorm_train_forward(self, x, gamma, beta, eps):
        return self.impl.batchnorm_train_forward(_c(x), _c(gamma), _c(beta), float(eps))

    def batchnorm_train_backward(self, xhat, invstd, gamma, g):
        return self.impl.batchnorm_train_backward(_c(xhat), _c(invstd), _c(gamma), _c(g))

    def patchify_padded(self, x, patch_len, stride):
        x = _c(x)
        lead = x.shape[:-1]
        out = self.impl.patchify_padded(x.reshape(-1, x.shape[-1]), int(patch_len), int(stride))
        return out.reshape(lead + out.shape[1:])


python_backend = _Backend(_pykernels, "python")
compiled_backend = _Backend(_compiled, "compiled") if _compiled is not None else None
active = compiled_backend or python_backend

softmax_forward = active.softmax_forward
softmax_backward = active.softmax_backward
gelu_forward = active.gelu_forward
gelu_backward = active.gelu_backward
batchnorm_train_forward = active.batchnorm_train_forward
batchnorm_train_backward = active.batchnorm_train_backward
patchify_padded = active.patchify_padded
