"""
Evaluation protocols: zero-shot same-category video retrieval, text-to-video
retrieval, the frozen-encoder linear probe and held-out sort accuracy
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler
from tqdm import tqdm

from tvts import numerics as nx
from tvts.checkpoint import load_checkpoint
from tvts.corpus import Corpus, augment_clip, draw_window, sample_clip_frames, tokenize
from tvts.encoders import encode_text, project_common, video_forward, video_param_names
from tvts.errors import ContractError, DataError, DimensionError, InvariantViolationError
from tvts.numerics import Tape, Tensor
from tvts.schemas import EvalConfig, EvalReport, ProbeConfig, ProbeReport, RetrievalReport, TrainConfig, build_config
from tvts.trainer import BatchSampler, forward_batch

logger = logging.getLogger(__name__)

RECALL_AT = (1, 5, 10)
EXTRACT_BATCH = 64
UNIT_NORM_TOL = 1e-6


@dataclass
class EmbeddingIndex:
    """Unit-norm embeddings with one row per item id"""
    ids: List[str]
    labels: List[str]
    embeddings: np.ndarray  # (n, D)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.labels = [str(c) for c in self.labels]
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or len(self.ids) != self.embeddings.shape[0] \
                or len(self.labels) != len(self.ids):
            raise DimensionError(
                f"{len(self.ids)} ids, {len(self.labels)} labels and embeddings {self.embeddings.shape} disagree"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("index ids must be unique")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ContractError(f"index embeddings must be unit-norm (got {norms.min():.6f}..{norms.max():.6f})")

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(f, ids=np.array(self.ids), labels=np.array(self.labels), embeddings=self.embeddings)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EmbeddingIndex":
        with np.load(path, allow_pickle=False) as data:
            return cls(ids=data["ids"].tolist(), labels=data["labels"].tolist(), embeddings=data["embeddings"])


def _id_ranks(ids: Sequence[str]) -> np.ndarray:
    """Position of every id in ascending id order, used as the tie-breaker"""
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[np.argsort(np.asarray(ids), kind="stable")] = np.arange(len(ids))
    return ranks


def rank_candidates(similarities: np.ndarray, tie_break: np.ndarray) -> np.ndarray:
    """Candidate positions by descending similarity, ties by ascending id"""
    return np.lexsort((tie_break, -similarities))


def median_rank(ranks: Sequence[float]) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ContractError("median rank of an empty rank list")
    return float(np.median(ranks))


def _report(first_hit_ranks: np.ndarray) -> RetrievalReport:
    recalls = {k: float(np.mean(first_hit_ranks <= k)) for k in RECALL_AT}
    return RetrievalReport(r_at_1=recalls[1], r_at_5=recalls[5], r_at_10=recalls[10],
                           median_rank=median_rank(first_hit_ranks), queries=int(first_hit_ranks.size))


def zero_shot_video_retrieval(index: EmbeddingIndex) -> RetrievalReport:
    """
    Leave-one-out retrieval: every item queries all other items, and a hit at k
    means a same-category item is among the first k. Queries from singleton
    categories have no positive and are skipped.
    """
    labels = np.asarray(index.labels)
    values, counts = np.unique(labels, return_counts=True)
    singletons = set(values[counts < 2].tolist())
    if singletons:
        logger.warning(f"⚠️ Excluding singleton categories from zero-shot queries: {', '.join(sorted(singletons))}")
    tie_break = _id_ranks(index.ids)
    sims = index.embeddings @ index.embeddings.T
    ranks = []
    for q in range(len(index)):
        if labels[q] in singletons:
            continue
        others = np.delete(np.arange(len(index)), q)
        order = others[rank_candidates(sims[q, others], tie_break[others])]
        same = np.nonzero(labels[order] == labels[q])[0]
        ranks.append(int(same[0]) + 1)
    if not ranks:
        raise ContractError("zero-shot retrieval needs at least one category with two or more items")
    return _report(np.asarray(ranks))


def text_to_video_retrieval(video_index: EmbeddingIndex, text_embeddings: np.ndarray,
                            paired_video_ids: Sequence[str]) -> RetrievalReport:
    """Each text query has exactly one positive, its paired video; ranks start at 1"""
    text = np.asarray(text_embeddings, dtype=np.float64)
    paired = [str(v) for v in paired_video_ids]
    if text.ndim != 2 or text.shape[0] != len(paired) or text.shape[1] != video_index.embeddings.shape[1]:
        raise DimensionError(f"text embeddings {text.shape} do not pair with {len(paired)} ids "
                             f"in a {video_index.embeddings.shape[1]}-dim index")
    if len(set(paired)) != len(paired):
        raise ContractError("text-to-video pairing must be one-to-one; a video is paired twice")
    position = {vid: i for i, vid in enumerate(video_index.ids)}
    missing = [vid for vid in paired if vid not in position]
    if missing:
        raise ContractError(f"paired videos missing from the index: {', '.join(missing[:5])}")
    tie_break = _id_ranks(video_index.ids)
    sims = text @ video_index.embeddings.T
    ranks = np.empty(len(paired), dtype=np.int64)
    for q, vid in enumerate(paired):
        order = rank_candidates(sims[q], tie_break)
        ranks[q] = int(np.nonzero(order == position[vid])[0][0]) + 1
    return _report(ranks)


# -----------------------------------------------------------------------------
# Feature extraction
# -----------------------------------------------------------------------------

def _chunks(items: Sequence, size: int) -> List[Sequence]:
    return [items[i:i + size] for i in range(0, len(items), size)]


def whole_video_clip(corpus: Corpus, video_id: str, config: TrainConfig) -> np.ndarray:
    """Centre-sampled frames over the whole video with the centre crop"""
    video = corpus[video_id]
    clip = sample_clip_frames(video, 0.0, video.duration, config.encoder.frames, center=True)
    return augment_clip(clip, config.crop_scale, None).frames


def _encode_clips(params: Mapping[str, Tensor], clips: np.ndarray, config: TrainConfig) -> Tuple[np.ndarray, np.ndarray]:
    if config.blank_video:
        clips = np.zeros_like(clips)
    video = video_forward(clips, params, config.encoder)
    v_hat = project_common(video.cls, params["head.video"])
    return video.cls.numpy(), v_hat.numpy()


def extract_video_features(params: Mapping[str, np.ndarray], corpus: Corpus, ids: Sequence[str],
                           config: TrainConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(v_0, v_hat) per video: raw CLS features and their unit-norm projection; no masking"""
    tensors = nx.as_tensors(params)
    raw, projected = [], []
    for chunk in tqdm(_chunks(list(ids), EXTRACT_BATCH), desc="features", disable=not config.progress):
        clips = np.stack([whole_video_clip(corpus, vid, config) for vid in chunk])
        cls, v_hat = _encode_clips(tensors, clips, config)
        raw.append(cls)
        projected.append(v_hat)
    return np.concatenate(raw), np.concatenate(projected)


def build_video_index(params: Mapping[str, np.ndarray], corpus: Corpus, ids: Sequence[str],
                      config: TrainConfig) -> EmbeddingIndex:
    _, v_hat = extract_video_features(params, corpus, ids, config)
    return EmbeddingIndex(ids=list(ids), labels=[corpus[vid].category for vid in ids], embeddings=v_hat)


def window_pairs(params: Mapping[str, np.ndarray], corpus: Corpus, ids: Sequence[str],
                 config: TrainConfig) -> Tuple[EmbeddingIndex, np.ndarray, List[str]]:
    """
    One fixed-seed window per video: the clip under the window is the video side,
    the averaged transcript vector of the same window is the text side.
    """
    tensors = nx.as_tensors(params)
    enc = config.encoder
    span_range = (config.window_seconds, config.window_seconds_max or config.window_seconds)
    kept, clips, token_ids = [], [], []
    for i, vid in enumerate(ids):
        video = corpus[vid]
        window = draw_window(video.transcript, config.num_transcripts, span_range,
                             np.random.default_rng([config.seed, 5, i]))
        if window is None:
            logger.warning(f"⚠️ {vid}: no usable window, left out of text-to-video retrieval")
            continue
        clip = sample_clip_frames(video, window.start, window.end, enc.frames, center=True)
        kept.append(vid)
        clips.append(augment_clip(clip, config.crop_scale, None).frames)
        token_ids.append([tokenize(text, corpus.vocab, enc.max_text_len) for text in window.texts])
    if not kept:
        raise DataError("no video yields a transcript window for text-to-video retrieval")

    video_rows, text_rows = [], []
    for lo in range(0, len(kept), EXTRACT_BATCH):
        hi = lo + EXTRACT_BATCH
        _, v_hat = _encode_clips(tensors, np.stack(clips[lo:hi]), config)
        ids_block = np.asarray(token_ids[lo:hi], dtype=np.int64)
        b, k, length = ids_block.shape
        texts = encode_text(ids_block.reshape(b * k, length), tensors, enc).vectors
        texts = nx.mean(nx.reshape(texts, (b, k, enc.hidden_dim)), axis=1)
        video_rows.append(v_hat)
        text_rows.append(project_common(texts, tensors["head.text"]).numpy())
    index = EmbeddingIndex(ids=kept, labels=[corpus[v].category for v in kept],
                           embeddings=np.concatenate(video_rows))
    return index, np.concatenate(text_rows), kept


# -----------------------------------------------------------------------------
# Linear probe
# -----------------------------------------------------------------------------

def parameter_hash(params: Mapping[str, np.ndarray], names: Sequence[str]) -> str:
    digest = hashlib.sha256()
    for name in sorted(names):
        arr = np.ascontiguousarray(params[name])
        digest.update(name.encode("utf-8"))
        digest.update(str(arr.dtype).encode("utf-8"))
        digest.update(str(arr.shape).encode("utf-8"))
        digest.update(arr.tobytes())
    return digest.hexdigest()


def freeze(params: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Read-only copies; any in-place write raises"""
    frozen = {}
    for name, arr in params.items():
        copy = np.array(arr, copy=True)
        copy.setflags(write=False)
        frozen[name] = copy
    return frozen


def fit_linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                     num_classes: int, probe: ProbeConfig) -> Tuple[float, float]:
    """
    Softmax regression trained with minibatch SGD on standardised features.
    Returns (test top-1, train top-1).
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if len(train_x) == 0 or len(test_x) == 0:
        raise DataError(f"linear probe needs train and test items, got {len(train_x)} and {len(test_x)}")
    scaler = StandardScaler().fit(train_x)
    xtr = scaler.transform(train_x)
    xte = scaler.transform(test_x)
    rng = np.random.default_rng([probe.seed, 7])
    weight = np.zeros((xtr.shape[1], num_classes))
    bias = np.zeros(num_classes)
    for _ in range(probe.epochs):
        for idx in _chunks(rng.permutation(len(xtr)), probe.batch_size):
            with Tape() as tape:
                w = tape.watch(weight)
                b = tape.watch(bias)
                logits = nx.add(nx.matmul(Tensor(xtr[idx]), w), b)
                picked = nx.getitem(nx.log_softmax(logits, axis=-1), (np.arange(len(idx)), train_y[idx]))
                loss = nx.neg(nx.mean(picked))
            grads = nx.backward(tape, loss)
            weight = weight - probe.lr * (grads[w] + probe.weight_decay * weight)
            bias = bias - probe.lr * grads[b]

    def top1(x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(np.argmax(x @ weight + bias, axis=1) == y))

    return top1(xte, test_y), top1(xtr, train_y)


def linear_probe(params: Mapping[str, np.ndarray], corpus: Corpus, train_ids: Sequence[str],
                 test_ids: Sequence[str], config: TrainConfig, probe: Optional[ProbeConfig] = None,
                 labels: Optional[Mapping[str, int]] = None) -> ProbeReport:
    """
    Train a linear classifier on frozen v_0 features. The video encoder is hashed
    before and after; any change raises InvariantViolationError.
    `labels` overrides the category labels (used for the shuffled-label control).
    """
    probe = probe or ProbeConfig()
    encoder_names = video_param_names(params)
    frozen = freeze(params)
    before = parameter_hash(frozen, encoder_names)

    label_of = labels if labels is not None else {vid: corpus.category_index(vid) for vid in corpus.ids}
    train_x, _ = extract_video_features(frozen, corpus, train_ids, config)
    test_x, _ = extract_video_features(frozen, corpus, test_ids, config)
    num_classes = len(corpus.categories)
    top1, train_top1 = fit_linear_probe(
        train_x, [label_of[v] for v in train_ids], test_x, [label_of[v] for v in test_ids], num_classes, probe,
    )

    after = parameter_hash(frozen, encoder_names)
    if after != before or parameter_hash(params, encoder_names) != before:
        logger.error("❌ Video encoder parameters changed during the linear probe")
        raise InvariantViolationError(f"encoder hash changed from {before[:12]} to {after[:12]}")
    logger.info(f"Linear probe top-1 {top1:.3f} (train {train_top1:.3f}) over {num_classes} classes")
    return ProbeReport(top1=top1, train_top1=train_top1, encoder_hash_before=before, encoder_hash_after=after,
                       num_train=len(train_ids), num_test=len(test_ids), num_classes=num_classes)


# -----------------------------------------------------------------------------
# Held-out sort accuracy
# -----------------------------------------------------------------------------

def held_out_sort_accuracy(params: Mapping[str, np.ndarray], corpus: Corpus, ids: Sequence[str],
                           config: TrainConfig, batches: Optional[int] = None) -> Optional[float]:
    """Sort accuracy of the trained head on fixed-seed, unaugmented windows of `ids`"""
    if config.proxy == "none":
        logger.warning("⚠️ proxy 'none' has no sort head; held-out sort accuracy is undefined")
        return None
    if len(ids) < 2:
        raise DataError(f"held-out sort accuracy needs at least 2 videos, got {len(ids)}")
    batches = batches or config.eval_batches
    eval_config = config.model_copy(update={"batch_size": min(config.batch_size, len(ids))})
    sampler = BatchSampler(corpus, ids, eval_config, augment=False, stream_tag=4)
    tensors = nx.as_tensors(params)
    correct = 0.0
    seen = 0
    for step in range(batches):
        batch = sampler.batch(step)
        out = forward_batch(tensors, batch, eval_config)
        correct += out.sort_acc * batch.size
        seen += batch.size
    accuracy = correct / seen
    logger.info(f"Held-out sort accuracy {accuracy:.3f} over {seen} windows ({config.proxy})")
    return accuracy


# -----------------------------------------------------------------------------
# Driver
# -----------------------------------------------------------------------------

def report_table(report: EvalReport) -> pd.DataFrame:
    rows = []
    for task in ("zeroshot", "t2v"):
        result = getattr(report, task)
        if result is not None:
            for metric, value in result.model_dump().items():
                rows.append({"task": task, "metric": metric, "value": value})
    if report.probe is not None:
        rows.append({"task": "probe", "metric": "top1", "value": report.probe.top1})
        rows.append({"task": "probe", "metric": "train_top1", "value": report.probe.train_top1})
    if report.sort_accuracy is not None:
        rows.append({"task": "sort", "metric": "accuracy", "value": report.sort_accuracy})
    return pd.DataFrame(rows, columns=["task", "metric", "value"])


def write_report(report: EvalReport, out: Union[str, Path]) -> Tuple[Path, Path]:
    """JSON report plus a CSV table of the same numbers next to it"""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")
    table = out.with_suffix(".csv")
    report_table(report).to_csv(table, index=False)
    return out, table


def run_evaluation(config: EvalConfig) -> EvalReport:
    """Run every task in config.tasks and write the report"""
    if config.checkpoint is None:
        index = EmbeddingIndex.load(config.index)
        report = EvalReport(zeroshot=zero_shot_video_retrieval(index))
        write_report(report, config.out)
        return report

    ckpt = load_checkpoint(config.checkpoint)
    train_config = build_config(TrainConfig, ckpt.config)
    nx.set_default_dtype(train_config.precision)
    corpus_path = config.corpus or train_config.corpus
    if corpus_path is None:
        raise DataError("no corpus given and none recorded in the checkpoint")
    corpus = Corpus.open(corpus_path)
    train_ids, held_ids = corpus.split(train_config.holdout_fraction, train_config.seed)
    if not held_ids:
        raise DataError("the checkpoint's holdout_fraction leaves no held-out videos to evaluate on")
    params = ckpt.params

    report = EvalReport(checkpoint=str(config.checkpoint), step=ckpt.step)
    if "zeroshot" in config.tasks:
        index = EmbeddingIndex.load(config.index) if config.index else \
            build_video_index(params, corpus, held_ids, train_config)
        report.zeroshot = zero_shot_video_retrieval(index)
        logger.info(f"Zero-shot R@1 {report.zeroshot.r_at_1:.3f}, MedR {report.zeroshot.median_rank}")
    if "t2v" in config.tasks:
        index, texts, paired = window_pairs(params, corpus, held_ids, train_config)
        report.t2v = text_to_video_retrieval(index, texts, paired)
        logger.info(f"Text-to-video R@1 {report.t2v.r_at_1:.3f}, MedR {report.t2v.median_rank}")
    if "probe" in config.tasks:
        report.probe = linear_probe(params, corpus, train_ids, held_ids, train_config, config.probe)
    if "sort" in config.tasks:
        report.sort_accuracy = held_out_sort_accuracy(params, corpus, held_ids, train_config)
    write_report(report, config.out)
    logger.info(f"✅ Evaluation report written to {config.out}")
    return report
