"""Hot numeric kernels: numba-compiled by default, pure numpy as fallback.

The backend is chosen once at import time from the ``VQPROMPT_BACKEND``
environment variable: ``numba`` (default when numba imports), ``numpy``,
or ``auto``. Both paths compute the same quantities; they may differ in
the last couple of floating-point bits because summation order differs.
Within one backend results are bit-reproducible.

Matrix products are deliberately absent: numpy already dispatches those
to BLAS. The kernels here are the fused elementwise/reduction loops that
otherwise allocate a chain of numpy temporaries on every call: row-wise
softmax (attention and prompt scoring), layer normalization, and the
AdamW parameter update.

``benchmarks/bench_kernels.py`` times the two paths side by side.
"""

import os

import numpy as np


def _pick_backend() -> str:
    choice = os.environ.get("VQPROMPT_BACKEND", "auto").strip().lower()
    if choice in ("", "auto"):
        try:
            import numba  # noqa: F401
        except ImportError:
            return "numpy"
        return "numba"
    if choice not in ("numba", "numpy"):
        raise ValueError(
            f"VQPROMPT_BACKEND must be 'numba', 'numpy' or 'auto', got {choice!r}"
        )
    if choice == "numba":
        import numba  # noqa: F401  raises if unavailable
    return choice


BACKEND = _pick_backend()


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def softmax_rows_numpy(x):
    """Row-wise softmax of a (rows, n) array, max-shifted for overflow safety."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_grad_numpy(y, grad_out):
    """Backward of row softmax: y * (g - sum(g * y)) per row."""
    inner = (grad_out * y).sum(axis=1, keepdims=True)
    return y * (grad_out - inner)


def layernorm_rows_numpy(x, gain, offset, eps):
    """Normalize each row to zero mean / unit variance, then scale and shift.

    Returns (out, normalized, inv_std); the latter two feed the backward pass.
    """
    mean = x.mean(axis=1, keepdims=True)
    var = np.square(x - mean).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = (x - mean) * inv_std
    return normalized * gain + offset, normalized, inv_std[:, 0]


def layernorm_rows_grad_numpy(normalized, inv_std, gain, grad_out):
    gh = grad_out * gain
    m1 = gh.mean(axis=1, keepdims=True)
    m2 = (gh * normalized).mean(axis=1, keepdims=True)
    grad_x = (gh - m1 - normalized * m2) * inv_std[:, None]
    grad_gain = (grad_out * normalized).sum(axis=0)
    grad_offset = grad_out.sum(axis=0)
    return grad_x, grad_gain, grad_offset


def adamw_update_numpy(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay Adam step, in place on 1-D views."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * np.square(grad)
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def softmax_rows_numba(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for i in range(rows):
            mx = x[i, 0]
            for j in range(1, n):
                if x[i, j] > mx:
                    mx = x[i, j]
            total = 0.0
            for j in range(n):
                e = np.exp(x[i, j] - mx)
                out[i, j] = e
                total += e
            inv = 1.0 / total
            for j in range(n):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def softmax_rows_grad_numba(y, grad_out):
        rows, n = y.shape
        out = np.empty_like(y)
        for i in range(rows):
            inner = 0.0
            for j in range(n):
                inner += grad_out[i, j] * y[i, j]
            for j in range(n):
                out[i, j] = y[i, j] * (grad_out[i, j] - inner)
        return out

    @njit(cache=True)
    def layernorm_rows_numba(x, gain, offset, eps):
        rows, n = x.shape
        out = np.empty_like(x)
        normalized = np.empty_like(x)
        inv_std = np.empty(rows, dtype=np.float64)
        for i in range(rows):
            mean = 0.0
            for j in range(n):
                mean += x[i, j]
            mean /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mean
                var += d * d
            var /= n
            rs = 1.0 / np.sqrt(var + eps)
            inv_std[i] = rs
            for j in range(n):
                nj = (x[i, j] - mean) * rs
                normalized[i, j] = nj
                out[i, j] = nj * gain[j] + offset[j]
        return out, normalized, inv_std

    @njit(cache=True)
    def layernorm_rows_grad_numba(normalized, inv_std, gain, grad_out):
        rows, n = normalized.shape
        grad_x = np.empty_like(normalized)
        grad_gain = np.zeros(n, dtype=np.float64)
        grad_offset = np.zeros(n, dtype=np.float64)
        for i in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(n):
                gh = grad_out[i, j] * gain[j]
                m1 += gh
                m2 += gh * normalized[i, j]
            m1 /= n
            m2 /= n
            rs = inv_std[i]
            for j in range(n):
                gh = grad_out[i, j] * gain[j]
                grad_x[i, j] = (gh - m1 - normalized[i, j] * m2) * rs
                grad_gain[j] += grad_out[i, j] * normalized[i, j]
                grad_offset[j] += grad_out[i, j]
        return grad_x, grad_gain, grad_offset

    @njit(cache=True)
    def adamw_update_numba(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay):
        n = param.shape[0]
        bc1 = 1.0 - beta1 ** step
        bc2 = 1.0 - beta2 ** step
        for i in range(n):
            g = grad[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            m_hat = m[i] / bc1
            v_hat = v[i] / bc2
            param[i] -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param[i])

    softmax_rows = softmax_rows_numba
    softmax_rows_grad = softmax_rows_grad_numba
    layernorm_rows = layernorm_rows_numba
    layernorm_rows_grad = layernorm_rows_grad_numba
    adamw_update = adamw_update_numba
else:
    softmax_rows = softmax_rows_numpy
    softmax_rows_grad = softmax_rows_grad_numpy
    layernorm_rows = layernorm_rows_numpy
    layernorm_rows_grad = layernorm_rows_grad_numpy
    adamw_update = adamw_update_numpy
