"""
Tests for the alignment and ordering losses
"""

import math

import numpy as np
import pytest

from tvts import numerics as nx
from tvts.errors import ConfigError, ContractError, DimensionError, LabelError
from tvts.numerics import Tensor
from tvts.objectives import (
    BatchEmbeddings,
    align_loss,
    combine,
    factorial_accuracy,
    factorial_sort_loss,
    factorial_targets,
    info_nce,
    pair_accuracy,
    pair_labels,
    pair_sort_loss,
    sort_accuracy,
    sort_loss,
    total_loss,
    video_sort_loss,
)
from tvts.sortformer import permutation_rank, slot_pairs


def unit_rows(rng, batch, dim):
    x = rng.standard_normal((batch, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.mark.parametrize("num", [2, 3, 4, 5, 6])
def test_uniform_logits_cost_log_k(num):
    loss = sort_loss(Tensor(np.zeros((3, num, num))), np.tile(np.arange(num), (3, 1)))
    assert loss.item() == pytest.approx(math.log(num))


def test_sort_loss_accepts_a_single_window():
    logits = np.array([[5.0, 0.0], [0.0, 5.0]])
    single = sort_loss(Tensor(logits), [0, 1]).item()
    assert single == pytest.approx(math.log(1 + math.exp(-5.0)))


def test_sort_loss_ignores_slot_relabelling():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        num = int(rng.integers(2, 7))
        logits = rng.standard_normal((3, num, num))
        order = np.stack([rng.permutation(num) for _ in range(3)])
        perm = rng.permutation(num)
        a = sort_loss(Tensor(logits), order).item()
        b = sort_loss(Tensor(logits[:, perm]), order[:, perm]).item()
        assert a == pytest.approx(b, abs=1e-12)


def test_sort_loss_ignores_row_offsets(rng):
    logits = rng.standard_normal((2, 4, 4))
    order = np.array([[3, 1, 0, 2], [0, 2, 1, 3]])
    shifted = logits + rng.uniform(-50, 50, size=(2, 4, 1))
    assert sort_loss(Tensor(shifted), order).item() == pytest.approx(sort_loss(Tensor(logits), order).item(), abs=1e-10)


def test_two_transcript_sort_loss_value():
    loss = sort_loss(Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])), [0, 1]).item()
    assert loss == pytest.approx(0.3133, abs=1e-4)


def test_saturated_sort_loss():
    logits = np.where(np.eye(4, dtype=bool), 20.0, 0.0)[None]
    assert sort_loss(Tensor(logits), [[0, 1, 2, 3]]).item() < 1e-8


def test_sort_loss_label_errors():
    with pytest.raises(LabelError):
        sort_loss(Tensor(np.zeros((1, 3, 3))), [[0, 0, 1]])
    with pytest.raises(LabelError):
        sort_loss(Tensor(np.zeros((2, 3, 3))), [[0, 1, 2]])
    with pytest.raises(DimensionError):
        sort_loss(Tensor(np.zeros((1, 3, 2))), [[0, 1, 2]])


def test_info_nce_single_pair_is_zero():
    v = np.array([[0.6, 0.8]])
    assert info_nce(Tensor(v), Tensor(v), 0.05).item() == pytest.approx(0.0, abs=1e-12)


def test_info_nce_orthonormal_pair():
    eye = Tensor(np.eye(2))
    assert info_nce(eye, eye, 1.0).item() == pytest.approx(math.log(1 + math.exp(-1.0)))
    batch = BatchEmbeddings(eye, eye, temperature=1.0)
    assert align_loss(batch).item() == pytest.approx(2 * math.log(1 + math.exp(-1.0)))


def test_info_nce_rejects_bad_temperature():
    eye = Tensor(np.eye(2))
    with pytest.raises(ConfigError):
        info_nce(eye, eye, 0.0)


def test_matched_pairs_beat_mismatched(rng):
    v = unit_rows(rng, 6, 4)
    matched = info_nce(Tensor(v), Tensor(v), 0.1).item()
    shifted = info_nce(Tensor(v), Tensor(np.roll(v, 1, axis=0)), 0.1).item()
    assert matched < shifted


def test_batch_embeddings_validation(rng):
    v = unit_rows(rng, 3, 4)
    with pytest.raises(ContractError):
        BatchEmbeddings(Tensor(v * 2.0), Tensor(v), 0.05)
    with pytest.raises(DimensionError):
        BatchEmbeddings(Tensor(v), Tensor(v[:2]), 0.05)
    with pytest.raises(ConfigError):
        BatchEmbeddings(Tensor(v), Tensor(v), 0.0)


def test_pair_labels_and_loss():
    order = np.array([[2, 0, 1]])
    pairs = slot_pairs(3)
    np.testing.assert_array_equal(pair_labels(order, pairs), [[0, 0, 1]])
    loss = pair_sort_loss(Tensor(np.zeros((1, 3, 2))), pairs, order)
    assert loss.item() == pytest.approx(math.log(2))
    logits = np.array([[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]])
    assert pair_accuracy(logits, pairs, order) == 1.0


def test_factorial_target_restores_the_order():
    order = np.array([[2, 0, 1]])
    target = factorial_targets(order)[0]
    assert target == permutation_rank([1, 2, 0])
    logits = np.full((1, 6), -5.0)
    logits[0, target] = 5.0
    assert factorial_accuracy(logits, order) == 1.0
    assert factorial_sort_loss(Tensor(logits), order).item() < 1e-3
    with pytest.raises(LabelError):
        factorial_sort_loss(Tensor(np.zeros((1, 5))), order)


def test_total_loss_report():
    report = total_loss(1.5, 0.25, lam=2.0)
    assert report.L_total == pytest.approx(2.0)
    assert total_loss(1.5, 0.25, lam=0.0).L_total == pytest.approx(1.5)
    with pytest.raises(ConfigError):
        total_loss(1.0, 1.0, lam=-1.0)


def test_combine_differentiates_both_terms():
    with nx.Tape() as tape:
        a = tape.watch(np.array(1.0))
        s = tape.watch(np.array(3.0))
        loss = combine(a, s, 2.0)
    grads = nx.backward(tape, loss)
    assert loss.item() == pytest.approx(7.0)
    assert grads[a] == pytest.approx(1.0)
    assert grads[s] == pytest.approx(2.0)
    assert combine(a, None, 2.0) is a


def test_sort_accuracy():
    logits = np.array([[[3.0, 0.0, 0.0], [0.0, 0.0, 3.0], [0.0, 3.0, 0.0]]])
    assert sort_accuracy(logits, np.array([[0, 2, 1]])) == 1.0
    assert sort_accuracy(logits, np.array([[0, 1, 2]])) == pytest.approx(1 / 3)


def test_video_sort_loss_scores_slice_positions(rng):
    logits = rng.standard_normal((2, 4, 4))
    perms = np.array([[1, 3, 0, 2], [2, 0, 3, 1]])
    assert video_sort_loss(Tensor(logits), perms).item() == pytest.approx(sort_loss(Tensor(logits), perms).item())
    assert video_sort_loss(Tensor(np.zeros((2, 4, 4))), perms).item() == pytest.approx(math.log(4))
    with pytest.raises(LabelError):
        video_sort_loss(Tensor(logits), [[0, 1, 1, 2], [0, 1, 2, 3]])


def test_random_embeddings_cost_about_log_batch():
    values = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        values.append(info_nce(Tensor(unit_rows(rng, 8, 64)), Tensor(unit_rows(rng, 8, 64)), 1.0).item())
    assert np.mean(values) == pytest.approx(math.log(8), abs=0.5)
