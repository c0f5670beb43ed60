import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from patchtst import kernels
from patchtst._pykernels import patchify_padded

compiled = pytest.mark.skipif(kernels.compiled_backend is None, reason="compiled kernels not built")


@compiled
@pytest.mark.parametrize("shape", [(1, 1), (3, 7), (2, 4, 5, 5)])
def test_softmax_backends_agree(rng, shape):
    x = rng.standard_normal(shape) * 5
    g = rng.standard_normal(shape)
    py, c = kernels.python_backend, kernels.compiled_backend
    np.testing.assert_allclose(c.softmax_forward(x), py.softmax_forward(x), rtol=0, atol=1e-14)
    y = py.softmax_forward(x)
    np.testing.assert_allclose(c.softmax_backward(y, g), py.softmax_backward(y, g), rtol=0, atol=1e-14)


@compiled
def test_gelu_backends_agree(rng):
    x = rng.standard_normal((4, 9)) * 3
    g = rng.standard_normal((4, 9))
    py, c = kernels.python_backend, kernels.compiled_backend
    np.testing.assert_allclose(c.gelu_forward(x), py.gelu_forward(x), rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(c.gelu_backward(x, g), py.gelu_backward(x, g), rtol=1e-13, atol=1e-15)


@compiled
def test_batchnorm_backends_agree(rng):
    x = rng.standard_normal((3, 4, 6)) * 2 + 1
    gamma, beta = rng.standard_normal(4), rng.standard_normal(4)
    g = rng.standard_normal((3, 4, 6))
    py, c = kernels.python_backend, kernels.compiled_backend
    for a, b in zip(c.batchnorm_train_forward(x, gamma, beta, 1e-5),
                    py.batchnorm_train_forward(x, gamma, beta, 1e-5)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
    _, xhat, _, _, invstd = py.batchnorm_train_forward(x, gamma, beta, 1e-5)
    for a, b in zip(c.batchnorm_train_backward(xhat, invstd, gamma, g),
                    py.batchnorm_train_backward(xhat, invstd, gamma, g)):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-12)


@compiled
@pytest.mark.parametrize("L,P,S", [(4, 2, 2), (16, 4, 4), (37, 5, 3), (8, 8, 1)])
def test_patchify_backends_agree(rng, L, P, S):
    x = rng.standard_normal((3, L))
    np.testing.assert_array_equal(kernels.compiled_backend.patchify_padded(x, P, S),
                                  kernels.python_backend.patchify_padded(x, P, S))


def test_python_patchify_padding_rule():
    out = patchify_padded(np.array([[1.0, 2, 3, 4]]), 2, 2)
    np.testing.assert_array_equal(out[0].T, [[1, 2], [3, 4], [4, 4]])


def test_env_var_forces_python_backend():
    env = dict(os.environ, PATCHTST_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "import patchtst.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_env_var_rejects_unknown_backend():
    env = dict(os.environ, PATCHTST_KERNELS="gpu")
    out = subprocess.run([sys.executable, "-c", "import patchtst.kernels"], env=env,
                         capture_output=True, text=True)
    assert out.returncode != 0


@pytest.mark.skipif(kernels.compiled_backend is None, reason="compiled kernels not built")
def test_benchmark_script_runs(capsys):
    import runpy
    bench = runpy.run_path(str(Path(__file__).parent.parent / "benchmarks" / "bench_kernels.py"))
    assert bench["main"](["--repeat", "1"]) == 0
    assert "softmax_forward" in capsys.readouterr().out
