"""
Tests for tensor ops, the tape, finite differences and AdamW
"""

import math

import numpy as np
import pytest

from tvts import numerics as nx
from tvts.errors import ConfigError, ContractError, DimensionError, NumericError
from tvts.numerics import Tape, Tensor


def test_matmul_plain_product():
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_trailing_axis_batches():
    a = np.arange(24.0).reshape(2, 3, 4)
    b = np.arange(20.0).reshape(4, 5)
    np.testing.assert_allclose(nx.matmul(a, b).data, a @ b)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        nx.matmul(np.ones((2, 3)), np.ones((4, 2)))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.ones((0, 3)))


def test_add_broadcasts_trailing_axes_only():
    out = nx.add(np.ones((2, 3)), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.data, [[2.0, 3.0, 4.0]] * 2)
    with pytest.raises(DimensionError):
        nx.add(np.ones((2, 3)), np.ones(2))


def test_softmax_values_and_normalisation():
    y = nx.softmax(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(y, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)
    assert abs(y.sum() - 1.0) < 1e-12


def test_softmax_is_shift_invariant():
    x = np.array([[1000.0, 1001.0, 1002.0]])
    np.testing.assert_allclose(nx.softmax(x).data, nx.softmax(x - 1000.0).data, atol=1e-15)


@pytest.mark.parametrize("op", [nx.softmax, nx.log_softmax])
def test_non_finite_input_rejected(op):
    with pytest.raises(NumericError):
        op(np.array([1.0, np.nan, 0.0]))


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(0).standard_normal((4, 5))
    np.testing.assert_allclose(nx.log_softmax(x).data, np.log(nx.softmax(x).data), atol=1e-12)


def test_layer_norm_known_values():
    out = nx.layer_norm(np.array([0.0, 2.0, 4.0]), np.ones(3), np.zeros(3)).data
    np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_layer_norm_rejects_nan():
    with pytest.raises(NumericError):
        nx.layer_norm(np.array([0.0, np.inf, 4.0]), np.ones(3), np.zeros(3))


def test_gelu_limits():
    y = nx.gelu(np.array([0.0, 10.0, -10.0])).data
    assert y[0] == 0.0
    assert abs(y[1] - 10.0) < 1e-6
    assert abs(y[2]) < 1e-6


def test_l2_normalize_unit_rows():
    x = np.random.default_rng(1).standard_normal((5, 3))
    norms = np.linalg.norm(nx.l2_normalize(x).data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


def test_attention_masked_key_is_ignored():
    rng = np.random.default_rng(2)
    q, k, v = rng.standard_normal((1, 3, 4)), rng.standard_normal((1, 5, 4)), rng.standard_normal((1, 5, 4))
    mask = np.array([[False, True, False, False, True]])
    masked = nx.multi_head_attention(q, k, v, heads=2, attn_mask=mask).data
    keep = ~mask[0]
    dropped = nx.multi_head_attention(q, k[:, keep], v[:, keep], heads=2).data
    np.testing.assert_allclose(masked, dropped, atol=1e-12)


def test_attention_all_keys_masked_raises():
    x = np.ones((1, 2, 4))
    with pytest.raises(NumericError):
        nx.multi_head_attention(x, x, x, heads=2, attn_mask=np.ones((1, 2), dtype=bool))


def test_attention_heads_must_divide_width():
    x = np.ones((1, 2, 6))
    with pytest.raises(ConfigError):
        nx.multi_head_attention(x, x, x, heads=4)


def test_tape_records_only_watched_inputs():
    with Tape() as tape:
        nx.add(np.ones(3), np.ones(3))
        assert len(tape) == 0
        x = tape.watch(np.ones(3))
        nx.add(x, np.ones(3))
    assert len(tape) == 1


def test_backward_accumulates_reused_inputs():
    with Tape() as tape:
        x = tape.watch(np.array([1.0, -2.0, 3.0]))
        loss = nx.sum(nx.mul(x, x))
    np.testing.assert_allclose(nx.backward(tape, loss)[x], [2.0, -4.0, 6.0])


def test_backward_needs_scalar():
    with Tape() as tape:
        x = tape.watch(np.ones(3))
        y = nx.scale(x, 2.0)
    with pytest.raises(ContractError):
        nx.backward(tape, y)


def test_unreached_leaf_gets_zero_gradient():
    with Tape() as tape:
        x = tape.watch(np.ones(2))
        unused = tape.watch(np.ones((2, 2)))
        loss = nx.sum(x)
    grads = nx.backward(tape, loss)
    np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))
    assert set(grads.by_name({"x": x, "unused": unused})) == {"x", "unused"}


def test_finite_diff_of_square():
    x = np.array([0.5, -1.5, 2.0])
    grad = nx.finite_diff_grad(lambda t: nx.sum(nx.mul(t, t)), x)
    np.testing.assert_allclose(grad.data, 2.0 * x, atol=1e-8)


def test_relative_error_uses_floor():
    assert nx.relative_error(np.array([1e-9]), np.array([2e-9])) == pytest.approx(1e-9 / 1e-4)
    assert nx.relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


def test_adamw_first_step_moves_by_lr_times_sign():
    params = {"w": np.array([1.0, 1.0])}
    grads = {"w": np.array([0.5, -0.5])}
    state = nx.AdamWState.init(params)
    new, new_state = nx.adamw_step(params, grads, state, lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(new["w"], [0.999 - 0.1, 0.999 + 0.1], atol=1e-7)
    assert new_state.step == 1
    np.testing.assert_array_equal(params["w"], [1.0, 1.0])


def test_adamw_decay_is_decoupled():
    params = {"w": np.array([2.0])}
    state = nx.AdamWState.init(params)
    new, _ = nx.adamw_step(params, {"w": np.zeros(1)}, state, lr=0.5, weight_decay=0.1)
    np.testing.assert_allclose(new["w"], [2.0 * (1 - 0.05)])


def test_clip_grad_norm():
    grads, norm = nx.clip_grad_norm({"a": np.array([3.0, 4.0])}, max_norm=1.0)
    assert norm == pytest.approx(5.0)
    assert nx.global_norm(grads.values()) == pytest.approx(1.0, abs=1e-9)
    unclipped, _ = nx.clip_grad_norm({"a": np.array([3.0, 4.0])}, max_norm=0.0)
    np.testing.assert_array_equal(unclipped["a"], [3.0, 4.0])


def test_trunc_normal_stays_within_two_std():
    sample = nx.trunc_normal(np.random.default_rng(0), (1000,), std=0.02)
    assert np.all(np.abs(sample) <= 0.04)
    assert 0.01 < sample.std() < 0.02


def test_precision_switch():
    nx.set_default_dtype("float32")
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ConfigError):
        nx.set_default_dtype("float16")


def test_gelu_gradient_rule():
    x = np.linspace(-3, 3, 7)
    with Tape() as tape:
        t = tape.watch(x)
        loss = nx.sum(nx.gelu(t))
    analytic = nx.backward(tape, loss)[t]
    numeric = nx.finite_diff_grad(lambda v: nx.sum(nx.gelu(v)), x).data
    assert nx.relative_error(analytic, numeric) < 1e-6
    assert math.isclose(analytic[3], 0.5)
