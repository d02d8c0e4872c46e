import math

import numpy as np
import pytest

from esamp.errors import ContractError, DimensionError, NumericError
from esamp.numerics import (AdamState, SwiGLUWeights, adam_step, gated_swiglu_backward, gated_swiglu_forward,
                            global_norm, log_softmax, matmul, sigmoid, silu, silu_grad, softmax, sym_eigenvalues)


def test_matmul_identity_and_hand_case():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), a), a)
    assert np.array_equal(matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 1))), [[3.0], [7.0]])
    assert np.array_equal(matmul(np.zeros((2, 3)), np.ones((3, 4))), np.zeros((2, 4)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_bit_reproducible():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(17, 33)), rng.normal(size=(33, 9))
    assert matmul(a, b).tobytes() == matmul(a.copy(), b.copy()).tobytes()


def test_softmax_examples():
    assert np.allclose(softmax(np.zeros(3)), [1 / 3] * 3, atol=1e-15)
    for c in (-50.0, 0.0, 3.7, 800.0):
        assert np.allclose(softmax(np.array([c, c + math.log(2)])), [1 / 3, 2 / 3], atol=1e-12)


def test_softmax_direct_oracle():
    x = np.random.default_rng(1).normal(size=7)
    direct = np.array([math.exp(v) for v in x])
    direct /= direct.sum()
    assert np.max(np.abs(softmax(x) - direct)) < 1e-12


def test_softmax_temperature_and_errors():
    x = np.array([1.0, 2.0, 4.0])
    assert np.allclose(softmax(x, 2.0), softmax(x / 2.0), atol=1e-15)
    with pytest.raises(NumericError):
        softmax(np.array([0.0, np.nan]))
    with pytest.raises(NumericError):
        softmax(np.array([0.0, np.inf]))
    with pytest.raises(ContractError):
        softmax(x, 0.0)


def test_log_softmax_masked_entries():
    out = log_softmax(np.array([0.0, -np.inf, 0.0]))
    assert out[1] == -np.inf
    assert np.allclose(out[[0, 2]], math.log(0.5))
    with pytest.raises(NumericError):
        log_softmax(np.array([-np.inf, -np.inf]))


def test_silu_values():
    assert silu(np.array(0.0)) == 0.0
    assert abs(float(silu(np.array(1.0))) - 0.7310585786300049) < 1e-15
    assert float(silu_grad(np.array(0.0))) == 0.5
    # large magnitudes stay finite
    assert np.all(np.isfinite(sigmoid(np.array([-1e4, 1e4]))))


def test_silu_grad_finite_difference():
    x = np.linspace(-6, 6, 101)
    h = 1e-5
    fd = (silu(x + h) - silu(x - h)) / (2 * h)
    assert np.max(np.abs(fd - silu_grad(x))) < 1e-9


def _weights(rng, d, w, d_out=None):
    d_out = d if d_out is None else d_out
    return SwiGLUWeights(rng.normal(size=(d, w)) / np.sqrt(d), rng.normal(size=(d, w)) / np.sqrt(d),
                         rng.normal(size=(w, d_out)) / np.sqrt(w))


def test_swiglu_zero_weights():
    z = SwiGLUWeights(np.zeros((4, 6)), np.zeros((4, 6)), np.zeros((6, 4)))
    y, _ = gated_swiglu_forward(np.ones(4), z)
    assert np.array_equal(y, np.zeros(4))


def test_swiglu_reference_evaluation():
    rng = np.random.default_rng(2)
    w = _weights(rng, 5, 7)
    x = rng.normal(size=5)
    y, _ = gated_swiglu_forward(x, w)
    ref = np.zeros(5)
    for j in range(7):
        g = sum(x[i] * w.gate[i, j] for i in range(5))
        u = sum(x[i] * w.up[i, j] for i in range(5))
        hid = g / (1 + math.exp(-g)) * u
        ref += hid * w.down[j]
    assert np.max(np.abs(y - ref)) < 1e-12


def test_swiglu_shape_errors():
    rng = np.random.default_rng(3)
    w = _weights(rng, 4, 6)
    with pytest.raises(DimensionError):
        gated_swiglu_forward(np.ones(5), w)
    with pytest.raises(DimensionError):
        gated_swiglu_forward(np.ones(4), SwiGLUWeights(w.gate, w.up[:, :5], w.down))


def test_swiglu_backward_zero_grad_and_stale_cache():
    rng = np.random.default_rng(4)
    w = _weights(rng, 4, 6)
    y, cache = gated_swiglu_forward(rng.normal(size=(3, 4)), w)
    gx, gw = gated_swiglu_backward(np.zeros_like(y), cache)
    assert not gx.any() and not any(g.any() for g in gw)
    with pytest.raises(ContractError):
        gated_swiglu_backward(np.zeros_like(y), cache)
    _, cache = gated_swiglu_forward(rng.normal(size=(3, 4)), w)
    with pytest.raises(ContractError):
        gated_swiglu_backward(np.zeros((2, 4)), cache)


@pytest.mark.parametrize("case", range(100))
def test_swiglu_backward_finite_differences(case):
    rng = np.random.default_rng(100 + case)
    d, width, B = int(rng.integers(2, 6)), int(rng.integers(2, 8)), int(rng.integers(1, 4))
    w = _weights(rng, d, width)
    x = rng.normal(size=(B, d))
    gy = rng.normal(size=(B, d))

    def f(xx, ww):
        return float(np.sum(gated_swiglu_forward(xx, ww)[0] * gy))

    _, cache = gated_swiglu_forward(x, w)
    gx, gw = gated_swiglu_backward(gy, cache)
    h = 1e-5
    checks = [(x, gx, lambda t: f(t, w))]
    for k, name in enumerate(("gate", "up", "down")):
        checks.append((w[k], gw[k], lambda t, k=k: f(x, SwiGLUWeights(*(t if j == k else w[j] for j in range(3))))))
    for arr, grad, fn in checks:
        idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
        plus, minus = arr.copy(), arr.copy()
        plus[idx] += h
        minus[idx] -= h
        fd = (fn(plus) - fn(minus)) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-5 * max(1.0, abs(fd))


def test_adam_zero_grad_is_noop_but_counts():
    p = [np.array([1.0, -2.0])]
    st = AdamState.zeros_like(p)
    adam_step(p, [np.zeros(2)], st)
    assert np.array_equal(p[0], [1.0, -2.0]) and st.t == 1


def test_adam_scalar_hand_trace():
    # grad 1 clipped to 0.5; m_hat = 0.5, v_hat = 0.25, step = lr * 0.5 / (0.5 + eps)
    lr, eps = 4e-4, 1e-4
    p = [np.zeros(1)]
    st = AdamState.zeros_like(p, lr=lr, eps=eps, clip_norm=0.5)
    norm = adam_step(p, [np.ones(1)], st)
    assert norm == 1.0
    assert st.t == 1
    assert p[0][0] == pytest.approx(-lr / (1 + 2 * eps), rel=1e-14, abs=0)


def test_adam_clipping_scale():
    rng = np.random.default_rng(5)
    g = rng.normal(size=20)
    g *= 10.0 / np.linalg.norm(g)
    p = [np.zeros(20)]
    st = AdamState.zeros_like(p, clip_norm=0.5)
    adam_step(p, [g], st)
    # the first moment holds (1 - beta1) * clipped grad
    assert np.allclose(st.m[0] / (1 - st.beta1), 0.05 * g, rtol=1e-13)
    assert global_norm([st.m[0] / (1 - st.beta1)]) == pytest.approx(0.5, rel=1e-13)


def test_adam_non_finite_leaves_state():
    p = [np.ones(3)]
    st = AdamState.zeros_like(p)
    with pytest.raises(NumericError):
        adam_step(p, [np.array([1.0, np.nan, 0.0])], st)
    assert st.t == 0 and np.array_equal(p[0], np.ones(3)) and not st.m[0].any()


def test_adam_shape_mismatch():
    p = [np.ones(3)]
    with pytest.raises(DimensionError):
        adam_step(p, [np.ones(4)], AdamState.zeros_like(p))


def test_sym_eigenvalues_examples():
    assert np.allclose(sym_eigenvalues(np.eye(5)), np.ones(5))
    assert np.allclose(sym_eigenvalues(np.array([[2.0, 1.0], [1.0, 2.0]])), [1.0, 3.0], atol=1e-14)


@pytest.mark.parametrize("n", [1, 2, 3, 8, 17, 40])
def test_sym_eigenvalues_invariants(n):
    rng = np.random.default_rng(n)
    a = rng.normal(size=(n, n))
    k = a + a.T
    lam = sym_eigenvalues(k)
    assert abs(lam.sum() - np.trace(k)) < 1e-10 * max(1.0, abs(np.trace(k))) + 1e-10
    assert abs(np.sum(lam**2) - np.sum(k**2)) < 1e-9 * np.sum(k**2)


def test_sym_eigenvalues_rejects_asymmetric():
    with pytest.raises(ContractError):
        sym_eigenvalues(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(DimensionError):
        sym_eigenvalues(np.ones((2, 3)))
