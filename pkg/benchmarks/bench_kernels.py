"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the median time of each backend and the
speed-up. Shapes follow a desk-scale training step (64 windows x 7 channels,
L=336, P=16, S=8, D=16, H=4).
"""
import argparse
import statistics
import sys
import time

import numpy as np

from patchtst import kernels


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def cases(rng):
    rows, N, D, H = 64 * 7, 42, 16, 4
    scores = rng.standard_normal((rows * H * N, N))
    probs = kernels.python_backend.softmax_forward(scores)
    ffn = rng.standard_normal(rows * N * 128)
    bn_x = rng.standard_normal((rows, D, N))
    gamma, beta = rng.standard_normal(D), rng.standard_normal(D)
    _, xhat, _, _, invstd = kernels.python_backend.batchnorm_train_forward(bn_x, gamma, beta, 1e-5)
    series = rng.standard_normal((rows, 336))
    return {
        "softmax_forward": lambda k: k.softmax_forward(scores),
        "softmax_backward": lambda k: k.softmax_backward(probs, scores),
        "gelu_forward": lambda k: k.gelu_forward(ffn),
        "gelu_backward": lambda k: k.gelu_backward(ffn, ffn),
        "batchnorm_forward": lambda k: k.batchnorm_train_forward(bn_x, gamma, beta, 1e-5),
        "batchnorm_backward": lambda k: k.batchnorm_train_backward(xhat, invstd, gamma, bn_x),
        "patchify": lambda k: k.patchify_padded(series, 16, 8),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if kernels.compiled_backend is None:
        print("compiled kernels are not built; only the numpy fallback is available", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>10}{'compiled ms':>13}{'speed-up':>10}")
    for name, fn in cases(rng).items():
        py = median_time(lambda: fn(kernels.python_backend), args.repeat)
        c = median_time(lambda: fn(kernels.compiled_backend), args.repeat)
        print(f"{name:<20}{py * 1e3:>10.3f}{c * 1e3:>13.3f}{py / c:>9.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
