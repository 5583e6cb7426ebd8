"""Timing comparison between the compiled kernel core and the numpy fallback.

Runs the four hot kernels (1x1 and 3x3 convolution, forward and backward)
on shapes representative of real training runs, under each available
backend, and prints a table of median times with the speedup factor.
Also cross-checks that both backends produce matching numbers.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats N] [--dtype float32]
"""

import argparse
import statistics
import time

import numpy as np

from ppcn import backend

CASES = [
    # (kernel, N, c_in, c_out, H, W)
    ("conv1x1", 2, 4, 48, 64, 64),
    ("conv1x1", 2, 48, 96, 64, 64),
    ("conv1x1", 2, 96, 32, 64, 64),
    ("conv1x1", 8, 4, 16, 32, 32),
    ("conv3x3", 2, 3, 16, 64, 64),
    ("conv3x3", 2, 16, 16, 64, 64),
    ("conv3x3", 8, 3, 16, 32, 32),
]


def _setup(kernel, n, c_in, c_out, h, w, dtype, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c_in, h, w)).astype(dtype)
    if kernel == "conv1x1":
        wgt = rng.standard_normal((c_out, c_in)).astype(dtype)
    else:
        wgt = rng.standard_normal((c_out, c_in, 3, 3)).astype(dtype)
    b = rng.standard_normal(c_out).astype(dtype)
    gy = rng.standard_normal((n, c_out, h, w)).astype(dtype)
    return x, wgt, b, gy


def _run(kernel, direction, x, wgt, b, gy):
    if kernel == "conv1x1":
        if direction == "fwd":
            return backend.conv1x1_forward(x, wgt, b)
        return backend.conv1x1_backward(x, wgt, gy)
    if direction == "fwd":
        return backend.conv3x3_forward(x, wgt, b)
    return backend.conv3x3_backward(x, wgt, gy)


def _time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _flatten(result):
    if isinstance(result, tuple):
        return np.concatenate([np.asarray(r).ravel() for r in result])
    return np.asarray(result).ravel()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7, help="timing repeats per case")
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    args = ap.parse_args()

    names = backend.available_backends()
    if len(names) < 2:
        print(f"only one backend available ({names[0]}); build the compiled core "
              "to compare")
    dtype = np.dtype(args.dtype)

    header = f"{'kernel':<14}{'shape':<22}" + "".join(f"{n:>14}" for n in names)
    if len(names) == 2:
        header += f"{'compiled is':>12}{'max diff':>12}"
    print(header)
    print("-" * len(header))

    original = backend.backend_name()
    try:
        for kernel, n, c_in, c_out, h, w in CASES:
            arrays = _setup(kernel, n, c_in, c_out, h, w, dtype)
            for direction in ("fwd", "bwd"):
                row = f"{kernel + ' ' + direction:<14}{f'{n}x{c_in}->{c_out} {h}x{w}':<22}"
                medians = {}
                outputs = {}
                for name in names:
                    backend.set_backend(name)
                    _run(kernel, direction, *arrays)  # warm-up
                    medians[name] = _time(lambda: _run(kernel, direction, *arrays),
                                          args.repeats)
                    outputs[name] = _flatten(_run(kernel, direction, *arrays))
                    row += f"{medians[name] * 1e3:>12.2f}ms"
                if len(names) == 2:
                    a, b_ = names
                    diff = float(np.abs(outputs[a] - outputs[b_]).max())
                    ratio = medians["python"] / medians["compiled"]
                    row += f"{ratio:>10.1f}x{diff:>12.2e}"
                print(row)
    finally:
        backend.set_backend(original)


if __name__ == "__main__":
    main()
