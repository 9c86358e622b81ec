"""Time the numba kernels against their pure-numpy fallbacks.

Run from the repository root:

    python benchmarks/bench_kernels.py

Sizes mirror what one training step actually touches: attention softmax
rows for a batch of 32 sequences, layer norm over the hidden width, and
AdamW updates over the full parameter set. The numba path needs one warm
call per kernel to compile (cached on disk afterwards).
"""

import os
import time

import numpy as np

os.environ.setdefault("VQPROMPT_BACKEND", "numba")

from vqprompt import kernels  # noqa: E402

if kernels.BACKEND != "numba":
    raise SystemExit("numba backend unavailable; nothing to compare")

REPEATS = 200


def timeit(fn, *args):
    fn(*args)  # warm-up / JIT
    best = float("inf")
    for _ in range(5):
        start = time.perf_counter()
        for _ in range(REPEATS):
            fn(*args)
        best = min(best, (time.perf_counter() - start) / REPEATS)
    return best


def main():
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((32 * 17, 21))
    grad = rng.standard_normal(rows.shape)
    hidden = rng.standard_normal((32 * 17, 64))
    gain = rng.uniform(0.5, 1.5, 64)
    offset = rng.standard_normal(64)
    params = rng.standard_normal(120_000)
    pgrad = rng.standard_normal(120_000)

    soft_y = kernels.softmax_rows_numpy(rows)
    _, norm, rstd = kernels.layernorm_rows_numpy(hidden, gain, offset, 1e-5)

    cases = [
        ("softmax_rows (544x21)",
         (kernels.softmax_rows_numba, rows),
         (kernels.softmax_rows_numpy, rows)),
        ("softmax_rows_grad",
         (kernels.softmax_rows_grad_numba, soft_y, grad),
         (kernels.softmax_rows_grad_numpy, soft_y, grad)),
        ("layernorm_rows (544x64)",
         (kernels.layernorm_rows_numba, hidden, gain, offset, 1e-5),
         (kernels.layernorm_rows_numpy, hidden, gain, offset, 1e-5)),
        ("layernorm_rows_grad",
         (kernels.layernorm_rows_grad_numba, norm, rstd, gain,
          rng.standard_normal(hidden.shape)),
         (kernels.layernorm_rows_grad_numpy, norm, rstd, gain,
          rng.standard_normal(hidden.shape))),
        ("adamw_update (120k params)",
         (kernels.adamw_update_numba, params.copy(), pgrad,
          np.zeros_like(params), np.zeros_like(params),
          1, 2.5e-3, 0.9, 0.999, 1e-8, 0.0),
         (kernels.adamw_update_numpy, params.copy(), pgrad,
          np.zeros_like(params), np.zeros_like(params),
          1, 2.5e-3, 0.9, 0.999, 1e-8, 0.0)),
    ]

    print(f"{'kernel':28} {'numba':>12} {'numpy':>12} {'speedup':>9}")
    for name, numba_call, numpy_call in cases:
        t_numba = timeit(numba_call[0], *numba_call[1:])
        t_numpy = timeit(numpy_call[0], *numpy_call[1:])
        print(
            f"{name:28} {t_numba * 1e6:10.1f}us {t_numpy * 1e6:10.1f}us "
            f"{t_numpy / t_numba:8.2f}x"
        )


if __name__ == "__main__":
    main()
