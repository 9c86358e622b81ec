import numpy as np
import pytest

from vqprompt import AdamW, ContractError, Tensor, cosine_rate


def test_cosine_schedule_endpoints():
    base = 0.0025
    total = 200  # default: 20 epochs x 10 batches
    assert cosine_rate(0, total, base) == base
    assert cosine_rate(total - 1, total, base) <= 1e-3 * base


def test_cosine_schedule_monotone_decay():
    rates = [cosine_rate(s, 50, 1.0) for s in range(50)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_cosine_schedule_contracts():
    with pytest.raises(ContractError):
        cosine_rate(0, 0, 1.0)
    with pytest.raises(ContractError):
        cosine_rate(5, 5, 1.0)


def _reference_adamw(param, grads, lr, b1, b2, eps, wd):
    """Textbook per-step recomputation, independent of the kernel."""
    param = param.copy()
    m = np.zeros_like(param)
    v = np.zeros_like(param)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        param = param - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * param)
    return param


def test_adamw_matches_reference_trajectory():
    rng = np.random.default_rng(0)
    start = rng.standard_normal(12)
    grads = [rng.standard_normal(12) for _ in range(7)]
    param = Tensor(start.copy(), requires_grad=True)
    opt = AdamW([param], lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8,
                weight_decay=0.02)
    for g in grads:
        param.grad = g.copy()
        opt.step()
    want = _reference_adamw(start, grads, 0.05, 0.9, 0.999, 1e-8, 0.02)
    assert np.allclose(param.data, want, atol=1e-12)


def test_adamw_consumes_gradients():
    param = Tensor(np.ones(3), requires_grad=True)
    opt = AdamW([param], lr=0.1)
    param.grad = np.ones(3)
    opt.step()
    assert param.grad is None
    with pytest.raises(ContractError):
        opt.step()


def test_adamw_respects_step_rate_override():
    param = Tensor(np.zeros(1), requires_grad=True)
    opt = AdamW([param], lr=1.0)
    param.grad = np.ones(1)
    opt.step(lr=0.0)
    assert param.data[0] == 0.0
