"""
TVTS pre-training loop

Batch contents are a pure function of (seed, step), so a run resumed from a
checkpoint replays exactly the batches the uninterrupted run would have seen.
"""

import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from tvts import numerics as nx
from tvts.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from tvts.corpus import (
    ClipFrames,
    Corpus,
    MaskPattern,
    NarratedVideo,
    TranscriptWindow,
    Vocabulary,
    augment_clip,
    build_mask,
    draw_window,
    sample_clip_frames,
    tokenize,
)
from tvts.encoders import encode_text, init_encoder_params, project_common, video_forward
from tvts.errors import ConfigError, DataError, NonFiniteLossError, NumericError
from tvts.numerics import AdamWState, Tape, Tensor
from tvts.objectives import (
    BatchEmbeddings,
    align_loss,
    combine,
    factorial_accuracy,
    factorial_sort_loss,
    pair_accuracy,
    pair_sort_loss,
    sort_accuracy,
    sort_loss,
    total_loss,
    video_sort_loss,
)
from tvts.schemas import LossReport, MetricsRecord, TrainConfig
from tvts.sortformer import (
    factorial_sort_forward,
    init_sort_params,
    pair_sort_forward,
    shuffle_slices,
    sort_forward,
    video_sort_forward,
)

logger = logging.getLogger(__name__)

PREFETCH_DEPTH = 2


# -----------------------------------------------------------------------------
# Batches
# -----------------------------------------------------------------------------

@dataclass
class Batch:
    step: int
    video_ids: List[str]
    frames: np.ndarray            # (B, M, H, W, 3)
    windows: List[TranscriptWindow]
    token_ids: np.ndarray         # (B, K, L), slot order
    orders: np.ndarray            # (B, K), true position of each slot
    masks: List[MaskPattern]
    slice_perms: np.ndarray       # (B, S), true slice held by each slot

    @property
    def size(self) -> int:
        return len(self.video_ids)


class BatchSampler:
    """
    Draws batch `step` from an endless stream of per-epoch video permutations.

    Epoch e visits the ids in default_rng([seed, 1, e]) order; batch b starts at
    stream position b * B and samples windows, frames and masks from
    default_rng([seed, 2, b]). Videos whose window keeps coming up empty are
    skipped, and a video is used at most once per batch.
    """

    def __init__(self, corpus: Corpus, video_ids: Sequence[str], config: TrainConfig,
                 mask_ratio: Optional[float] = None, augment: bool = True, stream_tag: int = 2):
        if len(video_ids) < config.batch_size:
            raise DataError(f"{len(video_ids)} usable videos cannot fill a batch of {config.batch_size}")
        self.corpus = corpus
        self.video_ids = list(video_ids)
        self.config = config
        self.encoder = config.encoder
        self.mask_ratio = config.mask_ratio if mask_ratio is None else mask_ratio
        self.augment = augment
        self.stream_tag = stream_tag
        self._epochs: Dict[int, np.ndarray] = {}

    def _epoch_order(self, epoch: int) -> np.ndarray:
        if epoch not in self._epochs:
            rng = np.random.default_rng([self.config.seed, 1, epoch])
            self._epochs[epoch] = rng.permutation(len(self.video_ids))
            if len(self._epochs) > 4:
                self._epochs.pop(min(self._epochs))
        return self._epochs[epoch]

    def _stream(self, start: int) -> Iterator[str]:
        n = len(self.video_ids)
        position = start
        while True:
            epoch, offset = divmod(position, n)
            yield self.video_ids[int(self._epoch_order(epoch)[offset])]
            position += 1

    def sample_one(self, video: NarratedVideo, rng: np.random.Generator,
                   shuffle_texts: bool = True) -> Optional[Tuple[TranscriptWindow, ClipFrames, MaskPattern]]:
        cfg = self.config
        span_range = (cfg.window_seconds, cfg.window_seconds_max or cfg.window_seconds)
        window = draw_window(video.transcript, cfg.num_transcripts, span_range, rng)
        if window is None:
            return None
        if shuffle_texts:
            window = window.permute(rng.permutation(cfg.num_transcripts))
        clip = sample_clip_frames(video, window.start, window.end, self.encoder.frames,
                                  rng=rng if self.augment else None, center=not self.augment)
        clip = augment_clip(clip, cfg.crop_scale, rng if self.augment else None)
        mask = build_mask(self.encoder.tokens_per_slice, self.encoder.num_slices, self.mask_ratio, rng)
        return window, clip, mask

    def batch(self, step: int) -> Batch:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, self.stream_tag, step])
        videosort = cfg.proxy == "videosort"
        chosen: List[str] = []
        samples = []
        for tries, video_id in enumerate(self._stream(step * cfg.batch_size)):
            if len(chosen) == cfg.batch_size:
                break
            if tries >= 2 * len(self.video_ids) + cfg.batch_size:
                raise DataError(f"only {len(chosen)} of {len(self.video_ids)} videos yield usable windows")
            if video_id in chosen:
                continue
            sample = self.sample_one(self.corpus[video_id], rng, shuffle_texts=not videosort)
            if sample is None:
                logger.warning(f"⚠️ {video_id}: no non-empty window after retries, skipped in step {step}")
                continue
            chosen.append(video_id)
            samples.append(sample)
        return self._collate(step, chosen, samples, rng)

    def _collate(self, step: int, ids: List[str], samples, rng: np.random.Generator) -> Batch:
        cfg = self.config
        vocab = self.corpus.vocab
        frames = np.stack([clip.frames for _, clip, _ in samples])
        if cfg.blank_video:
            frames = np.zeros_like(frames)
        slices = self.encoder.num_slices
        slice_perms = np.tile(np.arange(slices), (len(ids), 1))
        if cfg.proxy == "videosort":
            slice_perms = np.stack([rng.permutation(slices) for _ in ids])
            frames = np.stack([shuffle_slices(f, p, self.encoder.tubelet) for f, p in zip(frames, slice_perms)])
        windows = [w for w, _, _ in samples]
        token_ids = np.array([[tokenize(text, vocab, self.encoder.max_text_len) for text in w.texts]
                              for w in windows], dtype=np.int64)
        return Batch(
            step=step, video_ids=ids, frames=frames, windows=windows, token_ids=token_ids,
            orders=np.array([w.order for w in windows], dtype=np.int64),
            masks=[m for _, _, m in samples], slice_perms=slice_perms,
        )


class BatchPrefetcher:
    """Assembles batches for steps [start, stop) on a worker thread, at most two ahead"""

    _DONE = object()

    def __init__(self, sampler: BatchSampler, start: int, stop: int):
        self.sampler = sampler
        self.start = start
        self.stop = stop
        self._queue: "queue.Queue" = queue.Queue(maxsize=PREFETCH_DEPTH)
        self._halt = threading.Event()
        self._thread = threading.Thread(target=self._produce, name="tvts-prefetch", daemon=True)

    def _produce(self) -> None:
        try:
            for step in range(self.start, self.stop):
                if self._halt.is_set():
                    return
                self._put(self.sampler.batch(step))
        except Exception as exc:  # handed to the consumer
            self._put(exc)
            return
        self._put(self._DONE)

    def _put(self, item) -> None:
        while not self._halt.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self) -> Iterator[Batch]:
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is self._DONE:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self._halt.set()
            self._thread.join(timeout=5)


# -----------------------------------------------------------------------------
# Model
# -----------------------------------------------------------------------------

def resolve_encoder(config: TrainConfig, vocab: Vocabulary) -> TrainConfig:
    """Fill vocab_size from the corpus when the config leaves it at 0"""
    if config.encoder.vocab_size == 0:
        encoder = config.encoder.model_copy(update={"vocab_size": len(vocab)})
        return config.model_copy(update={"encoder": encoder})
    if config.encoder.vocab_size < len(vocab):
        raise ConfigError(f"vocab_size {config.encoder.vocab_size} is smaller than the corpus vocabulary {len(vocab)}")
    return config


def init_model(config: TrainConfig) -> Dict[str, np.ndarray]:
    """All parameters: encoders, projection heads and the selected sort head"""
    rng = np.random.default_rng([config.seed, 0])
    params = init_encoder_params(config.encoder, config.encoder.vocab_size, rng)
    params.update(init_sort_params(config.encoder.hidden_dim, config.num_transcripts, config.proxy,
                                   config.encoder.num_slices, rng))
    return params


@dataclass
class ForwardResult:
    align: Tensor
    sort: Optional[Tensor]
    sort_acc: Optional[float]
    video_cls: Tensor
    embeddings: BatchEmbeddings


def forward_batch(params: Dict[str, Tensor], batch: Batch, config: TrainConfig,
                  masked: bool = True) -> ForwardResult:
    enc = config.encoder
    b, k, length = batch.token_ids.shape
    video = video_forward(batch.frames, params, enc, batch.masks if masked else None)
    texts = encode_text(batch.token_ids.reshape(b * k, length), params, enc).vectors
    texts = nx.reshape(texts, (b, k, enc.hidden_dim))
    v_hat = project_common(video.cls, params["head.video"])
    t_hat = project_common(nx.mean(texts, axis=1), params["head.text"])
    embeddings = BatchEmbeddings(video=v_hat, text=t_hat, temperature=config.temperature)
    align = align_loss(embeddings)

    sort, acc = None, None
    if config.proxy == "kway":
        pred = sort_forward(texts, video.hidden, params, enc.heads)
        sort = sort_loss(pred.logits, batch.orders)
        acc = sort_accuracy(pred.logits.data, batch.orders)
    elif config.proxy == "pair":
        pred = pair_sort_forward(texts, video.hidden, params, enc.heads)
        sort = pair_sort_loss(pred.logits, pred.pairs, batch.orders)
        acc = pair_accuracy(pred.logits.data, pred.pairs, batch.orders)
    elif config.proxy == "factorial":
        pred = factorial_sort_forward(texts, video.hidden, params, enc.heads)
        sort = factorial_sort_loss(pred.logits, batch.orders)
        acc = factorial_accuracy(pred.logits.data, batch.orders)
    elif config.proxy == "videosort":
        pred = video_sort_forward(texts, video.hidden, enc.num_slices, params, enc.heads)
        sort = video_sort_loss(pred.logits, batch.slice_perms)
        acc = sort_accuracy(pred.logits.data, batch.slice_perms)
    return ForwardResult(align=align, sort=sort, sort_acc=acc, video_cls=video.cls, embeddings=embeddings)


# -----------------------------------------------------------------------------
# Steps
# -----------------------------------------------------------------------------

def learning_rate(config: TrainConfig, step: int) -> float:
    if config.warmup_steps and step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    return config.lr


def write_abort_dump(run_dir: Path, batch: Batch, report: Dict[str, float]) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / f"abort_step{batch.step}.json"
    dump = {
        "step": batch.step,
        "video_ids": batch.video_ids,
        "window_starts": [w.s_begin for w in batch.windows],
        "orders": batch.orders.tolist(),
        "slice_perms": batch.slice_perms.tolist(),
        "losses": {k: (v if math.isfinite(v) else repr(v)) for k, v in report.items()},
    }
    path.write_text(json.dumps(dump, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _abort(batch: Batch, losses: Dict[str, float], run_dir: Optional[Path],
           cause: Optional[Exception] = None) -> None:
    dump = write_abort_dump(run_dir, batch, losses) if run_dir is not None else None
    logger.error(f"❌ Non-finite loss at step {batch.step}: {losses}")
    raise NonFiniteLossError(batch.step, batch.video_ids, dump_path=dump, losses=losses) from cause


@dataclass
class StepResult:
    params: Dict[str, np.ndarray]
    opt_state: AdamWState
    report: LossReport
    sort_acc: Optional[float]
    lr: float
    grad_norm: float


def train_step(batch: Batch, params: Dict[str, np.ndarray], opt_state: AdamWState, config: TrainConfig,
               lam: Optional[float] = None, run_dir: Optional[Path] = None) -> StepResult:
    """Forward, L = L_align + lambda L_sort, backward, one AdamW update"""
    lam = config.lambda_sort if lam is None else lam
    with Tape() as tape:
        tracked = tape.watch_all(params)
        try:
            out = forward_batch(tracked, batch, config)
        except NumericError as exc:
            nan = float("nan")
            _abort(batch, {"L_align": nan, "L_sort": nan, "L_total": nan}, run_dir, exc)
        total = combine(out.align, out.sort, lam)

    l_align = out.align.item()
    l_sort = out.sort.item() if out.sort is not None else 0.0
    if not all(math.isfinite(v) for v in (l_align, l_sort, total.item())):
        _abort(batch, {"L_align": l_align, "L_sort": l_sort, "L_total": total.item()}, run_dir)

    norm_align = norm_sort = None
    if config.grad_diagnostics and out.sort is not None:
        g_align = backward_by_name(tape, out.align, tracked)
        g_sort = backward_by_name(tape, out.sort, tracked)
        norm_align = nx.global_norm(g_align.values())
        norm_sort = nx.global_norm(g_sort.values())
        grads = {name: g_align[name] + lam * g_sort[name] for name in params}
    else:
        grads = backward_by_name(tape, total, tracked)

    grads, grad_norm = nx.clip_grad_norm(grads, config.grad_clip)
    lr = learning_rate(config, batch.step)
    new_params, new_state = nx.adamw_step(params, grads, opt_state, lr, config.beta1, config.beta2,
                                          config.adam_eps, config.weight_decay)
    report = total_loss(l_align, l_sort, lam, grad_norm_align=norm_align, grad_norm_sort=norm_sort)
    return StepResult(new_params, new_state, report, out.sort_acc, lr, grad_norm)


def backward_by_name(tape: Tape, loss: Tensor, tracked: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return nx.backward(tape, loss).by_name(tracked)


# -----------------------------------------------------------------------------
# Loop
# -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: Dict[str, np.ndarray]
    opt_state: AdamWState
    step: int
    config: TrainConfig
    metrics_path: Path
    checkpoint_path: Path
    history: List[MetricsRecord] = field(default_factory=list)


def make_checkpoint(params, opt_state, step: int, config: TrainConfig) -> Checkpoint:
    return Checkpoint(params=params, opt_state=opt_state, step=step,
                      config=config.model_dump(mode="json"),
                      rng={"bit_generator": "PCG64", "seed": config.seed, "next_step": step})


def _restore_metrics(path: Path, keep_below: int) -> List[MetricsRecord]:
    if not path.exists():
        return []
    kept = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            record = MetricsRecord.model_validate_json(line)
            if record.step < keep_below:
                kept.append(record)
    return kept


def _compatible(saved: dict, config: TrainConfig) -> List[str]:
    volatile = {"steps", "resume_from", "progress", "run_dir", "checkpoint_every", "corpus", "post_pretrain_steps"}
    current = config.model_dump(mode="json")
    return sorted(k for k in current if k not in volatile and saved.get(k) != current[k])


def pretrain(config: TrainConfig, corpus: Optional[Corpus] = None) -> TrainResult:
    """Run `steps` TVTS steps then `post_pretrain_steps` contrastive-only steps"""
    nx.set_default_dtype(config.precision)
    if corpus is None:
        if config.corpus is None:
            raise ConfigError("pretrain needs a corpus path")
        corpus = Corpus.open(config.corpus)
    config = resolve_encoder(config, corpus.vocab)
    train_ids, held_ids = corpus.split(config.holdout_fraction, config.seed)
    logger.info(f"Training on {len(train_ids)} videos ({len(held_ids)} held out), proxy={config.proxy}")

    params = init_model(config)
    opt_state = AdamWState.init(params)
    start = 0
    if config.resume_from is not None:
        ckpt = load_checkpoint(config.resume_from)
        mismatched = _compatible(ckpt.config, config)
        if mismatched:
            logger.warning(f"⚠️ Resuming with changed settings: {', '.join(mismatched)}")
        params, opt_state, start = ckpt.params, ckpt.opt_state, ckpt.step
        logger.info(f"Resuming from step {start}")

    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.jsonl"
    history = _restore_metrics(metrics_path, start) if start else []
    with open(metrics_path, "w", encoding="utf-8") as f:
        for record in history:
            f.write(record.model_dump_json() + "\n")

    total_steps = config.steps + config.post_pretrain_steps
    phases = [("pretrain", 0, config.steps, config.lambda_sort, config.mask_ratio),
              ("post", config.steps, total_steps, 0.0, 0.0)]
    bar = tqdm(total=total_steps, initial=start, disable=not config.progress, desc="pretrain")
    step = start
    try:
        for phase, lo, hi, lam, ratio in phases:
            if step >= hi:
                continue
            sampler = BatchSampler(corpus, train_ids, config, mask_ratio=ratio)
            for batch in BatchPrefetcher(sampler, max(step, lo), hi):
                began = time.perf_counter()
                result = train_step(batch, params, opt_state, config, lam=lam, run_dir=run_dir)
                params, opt_state = result.params, result.opt_state
                step = batch.step + 1
                record = MetricsRecord(
                    step=batch.step, L_align=result.report.L_align, L_sort=result.report.L_sort,
                    L_total=result.report.L_total, sort_acc=result.sort_acc,
                    wallclock_ms=(time.perf_counter() - began) * 1000.0, lr=result.lr,
                    grad_norm=result.grad_norm, grad_norm_align=result.report.grad_norm_align,
                    grad_norm_sort=result.report.grad_norm_sort, phase=phase,
                )
                history.append(record)
                with open(metrics_path, "a", encoding="utf-8") as f:
                    f.write(record.model_dump_json() + "\n")
                bar.update(1)
                bar.set_postfix(loss=f"{record.L_total:.3f}", acc="-" if record.sort_acc is None else f"{record.sort_acc:.2f}")
                if config.checkpoint_every and step % config.checkpoint_every == 0 and step < total_steps:
                    save_checkpoint(make_checkpoint(params, opt_state, step, config),
                                    run_dir / f"ckpt_step{step}.tvts")
    finally:
        bar.close()

    final = save_checkpoint(make_checkpoint(params, opt_state, step, config), run_dir / "final.tvts")
    logger.info(f"✅ Finished at step {step}; final checkpoint {final}")
    return TrainResult(params=params, opt_state=opt_state, step=step, config=config,
                       metrics_path=metrics_path, checkpoint_path=final, history=history)
