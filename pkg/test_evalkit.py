"""
Tests for retrieval metrics, the linear probe and the evaluation driver
"""

import json

import numpy as np
import pytest

from conftest import make_tiny_train
from tvts import evalkit
from tvts.errors import ContractError, DataError, DimensionError, InvariantViolationError
from tvts.evalkit import (
    EmbeddingIndex,
    fit_linear_probe,
    held_out_sort_accuracy,
    linear_probe,
    median_rank,
    run_evaluation,
    text_to_video_retrieval,
    window_pairs,
    write_report,
    zero_shot_video_retrieval,
)
from tvts.schemas import EvalConfig, EvalReport, ProbeConfig, RetrievalReport
from tvts.trainer import init_model, pretrain, resolve_encoder


def unit_rows(rng, n, dim):
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_index(rng, categories=10, per_category=4, dim=16):
    n = categories * per_category
    return EmbeddingIndex(ids=[f"v{i:03d}" for i in range(n)],
                          labels=[f"c{i % categories}" for i in range(n)],
                          embeddings=unit_rows(rng, n, dim))


def clustered_index(categories=10, per_category=3):
    ids, labels, rows = [], [], []
    for c in range(categories):
        for j in range(per_category):
            ids.append(f"c{c}-{j}")
            labels.append(f"c{c}")
            rows.append(np.eye(categories)[c])
    return EmbeddingIndex(ids=ids, labels=labels, embeddings=np.array(rows))


@pytest.fixture
def probe_config(tiny_train, corpus):
    return resolve_encoder(tiny_train, corpus.vocab)


@pytest.mark.parametrize("ranks, expected", [([1], 1.0), ([1, 2, 3, 4], 2.5), ([7, 7, 7], 7.0), ([1, 3, 5], 3.0)])
def test_median_rank(ranks, expected):
    assert median_rank(ranks) == expected


def test_median_rank_of_nothing():
    with pytest.raises(ContractError):
        median_rank([])


def test_perfect_clusters_retrieve_perfectly():
    report = zero_shot_video_retrieval(clustered_index())
    assert (report.r_at_1, report.r_at_10, report.median_rank) == (1.0, 1.0, 1.0)
    assert report.queries == 30


def test_query_never_retrieves_itself(caplog):
    index = EmbeddingIndex(ids=["a", "b", "c"], labels=["x", "x", "y"],
                           embeddings=np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
    report = zero_shot_video_retrieval(index)
    assert report.queries == 2
    assert report.r_at_1 == 0.5
    assert report.median_rank == 1.5
    assert "singleton" in caplog.text


def test_only_singletons_is_an_error():
    index = EmbeddingIndex(ids=["a", "b"], labels=["x", "y"], embeddings=np.eye(2))
    with pytest.raises(ContractError):
        zero_shot_video_retrieval(index)


def test_zero_shot_chance_level():
    r1 = [zero_shot_video_retrieval(random_index(np.random.default_rng(seed))).r_at_1 for seed in range(20)]
    assert np.mean(r1) == pytest.approx(3 / 39, abs=0.03)


def test_reports_are_rotation_invariant(rng):
    index = random_index(rng)
    rotation, _ = np.linalg.qr(rng.standard_normal((16, 16)))
    rotated = EmbeddingIndex(index.ids, index.labels, index.embeddings @ rotation)
    assert zero_shot_video_retrieval(rotated) == zero_shot_video_retrieval(index)
    texts = unit_rows(rng, 40, 16)
    assert text_to_video_retrieval(rotated, texts @ rotation, index.ids) == \
        text_to_video_retrieval(index, texts, index.ids)


def test_recall_is_monotone(rng):
    for seed in range(5):
        report = zero_shot_video_retrieval(random_index(np.random.default_rng(seed)))
        assert report.r_at_1 <= report.r_at_5 <= report.r_at_10 <= 1.0
    with pytest.raises(ValueError):
        RetrievalReport(r_at_1=0.5, r_at_5=0.4, r_at_10=0.9, median_rank=2, queries=3)


def test_identical_spaces_give_rank_one(rng):
    index = random_index(rng)
    report = text_to_video_retrieval(index, index.embeddings, index.ids)
    assert report.r_at_1 == 1.0 and report.median_rank == 1.0


def test_text_to_video_chance_median_rank():
    medians = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        index = random_index(rng, categories=10, per_category=5)
        medians.append(text_to_video_retrieval(index, unit_rows(rng, 50, 16), index.ids).median_rank)
    assert np.mean(medians) == pytest.approx(25, abs=5)


def test_text_to_video_pairing_errors(rng):
    index = random_index(rng)
    texts = unit_rows(rng, 2, 16)
    with pytest.raises(ContractError):
        text_to_video_retrieval(index, texts, ["v000", "v000"])
    with pytest.raises(ContractError):
        text_to_video_retrieval(index, texts, ["v000", "nope"])
    with pytest.raises(DimensionError):
        text_to_video_retrieval(index, texts, ["v000"])


def test_index_validation_and_storage(rng, tmp_path):
    index = random_index(rng)
    loaded = EmbeddingIndex.load(index.save(tmp_path / "index.npz"))
    assert loaded.ids == index.ids and loaded.labels == index.labels
    np.testing.assert_array_equal(loaded.embeddings, index.embeddings)
    with pytest.raises(ContractError):
        EmbeddingIndex(["a", "a"], ["x", "x"], np.eye(2))
    with pytest.raises(ContractError):
        EmbeddingIndex(["a", "b"], ["x", "x"], 2 * np.eye(2))
    with pytest.raises(DimensionError):
        EmbeddingIndex(["a"], ["x"], np.eye(2))


def test_probe_learns_separable_features(rng):
    centres = 4.0 * np.eye(5)
    y_train, y_test = rng.integers(0, 5, 200), rng.integers(0, 5, 100)
    x_train = centres[y_train] + rng.standard_normal((200, 5)) * 0.5
    x_test = centres[y_test] + rng.standard_normal((100, 5)) * 0.5
    top1, train_top1 = fit_linear_probe(x_train, y_train, x_test, y_test, 5, ProbeConfig(epochs=20, batch_size=32))
    assert top1 > 0.9 and train_top1 > 0.9


def test_probe_on_shuffled_labels_is_at_chance(rng):
    x_train, x_test = rng.standard_normal((500, 8)), rng.standard_normal((2000, 8))
    y_train, y_test = rng.integers(0, 10, 500), rng.integers(0, 10, 2000)
    top1, _ = fit_linear_probe(x_train, y_train, x_test, y_test, 10, ProbeConfig(epochs=20, batch_size=64))
    assert top1 == pytest.approx(0.1, abs=0.05)


def test_probe_keeps_the_encoder_frozen(probe_config, corpus):
    params = init_model(probe_config)
    train_ids, held_ids = corpus.split(probe_config.holdout_fraction, probe_config.seed)
    report = linear_probe(params, corpus, train_ids, held_ids, probe_config, ProbeConfig(epochs=5))
    assert report.encoder_unchanged
    assert report.num_classes == 10 and report.num_test == len(held_ids)
    assert 0.0 <= report.top1 <= 1.0


def test_probe_detects_encoder_changes(probe_config, corpus, monkeypatch):
    params = init_model(probe_config)
    train_ids, held_ids = corpus.split(probe_config.holdout_fraction, probe_config.seed)
    real = evalkit.extract_video_features

    def tamper(frozen, *args, **kwargs):
        params["video.cls"] = params["video.cls"] + 1.0
        return real(frozen, *args, **kwargs)

    monkeypatch.setattr(evalkit, "extract_video_features", tamper)
    with pytest.raises(InvariantViolationError):
        linear_probe(params, corpus, train_ids, held_ids, probe_config, ProbeConfig(epochs=1))


def test_window_pairs_line_up(probe_config, corpus):
    params = init_model(probe_config)
    held = corpus.split(probe_config.holdout_fraction, probe_config.seed)[1]
    index, texts, paired = window_pairs(params, corpus, held, probe_config)
    assert paired == index.ids == list(held)
    assert texts.shape == index.embeddings.shape
    np.testing.assert_allclose(np.linalg.norm(texts, axis=1), 1.0, atol=1e-9)


def test_held_out_sort_accuracy(probe_config, corpus):
    params = init_model(probe_config)
    held = corpus.split(probe_config.holdout_fraction, probe_config.seed)[1]
    accuracy = held_out_sort_accuracy(params, corpus, held, probe_config, batches=2)
    assert 0.0 <= accuracy <= 1.0
    assert accuracy == held_out_sort_accuracy(params, corpus, held, probe_config, batches=2)
    with pytest.raises(DataError):
        held_out_sort_accuracy(params, corpus, held[:1], probe_config)
    alignment_only = probe_config.model_copy(update={"proxy": "none"})
    assert held_out_sort_accuracy(init_model(alignment_only), corpus, held, alignment_only) is None


def test_write_report(tmp_path):
    report = EvalReport(zeroshot=zero_shot_video_retrieval(clustered_index()), sort_accuracy=0.5)
    json_path, csv_path = write_report(report, tmp_path / "out" / "report.json")
    data = json.loads(json_path.read_text())
    assert data["zeroshot"]["r_at_1"] == 1.0 and data["probe"] is None
    assert "sort,accuracy,0.5" in csv_path.read_text()


def test_evaluation_from_a_precomputed_index(tmp_path):
    path = clustered_index().save(tmp_path / "toy.npz")
    report = run_evaluation(EvalConfig(index=path, out=tmp_path / "report.json"))
    assert report.zeroshot.r_at_1 == 1.0
    assert (tmp_path / "report.csv").exists()
    with pytest.raises(ValueError):
        EvalConfig(index=path, tasks=["probe"])


def test_evaluation_of_a_checkpoint(corpus_dir, corpus, tmp_path):
    trained = pretrain(make_tiny_train(corpus_dir, tmp_path / "run", steps=0, holdout_fraction=0.5), corpus=corpus)
    config = EvalConfig(checkpoint=trained.checkpoint_path, tasks=["zeroshot", "t2v", "probe", "sort"],
                        out=tmp_path / "report.json", probe=ProbeConfig(epochs=3))
    report = run_evaluation(config)
    assert report.step == 0
    assert report.zeroshot.queries == 20
    assert report.t2v.queries == 20
    assert report.probe.encoder_unchanged
    assert report.sort_accuracy is not None
    saved = json.loads((tmp_path / "report.json").read_text())
    assert all(saved[task] is not None for task in ("zeroshot", "t2v", "probe", "sort_accuracy"))
