"""
Training objectives: bidirectional InfoNCE alignment, the K-way sort NLL,
the pairwise / K! / video-sort variants and their weighted sum
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from tvts import numerics as nx
from tvts.errors import ConfigError, ContractError, DimensionError, LabelError
from tvts.numerics import Tensor
from tvts.schemas import LossReport
from tvts.sortformer import inverse_permutation, permutation_rank

logger = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-6


@dataclass
class BatchEmbeddings:
    """Projected clip vectors and averaged-transcript vectors, one row per video"""
    video: Tensor
    text: Tensor
    temperature: float

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.video.shape != self.text.shape or self.video.ndim != 2:
            raise DimensionError(f"video {self.video.shape} and text {self.text.shape} must both be (B, D)")
        for name, emb in (("video", self.video), ("text", self.text)):
            norms = np.linalg.norm(emb.data, axis=-1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise ContractError(f"{name} embeddings must be unit-norm (got norms {norms.min():.6f}..{norms.max():.6f})")


def info_nce(q: Tensor, k: Tensor, temperature: float) -> Tensor:
    """Mean over rows of -log softmax(q_b . k / tau)[b]; positives sit on the diagonal"""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if q.ndim != 2 or q.shape != k.shape:
        raise DimensionError(f"info_nce needs two (B, D) inputs, got {q.shape} and {k.shape}")
    batch = q.shape[0]
    logits = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / temperature)
    log_probs = nx.log_softmax(logits, axis=-1)
    diagonal = nx.getitem(log_probs, (np.arange(batch), np.arange(batch)))
    return nx.neg(nx.mean(diagonal))


def align_loss(batch: BatchEmbeddings) -> Tensor:
    return nx.add(info_nce(batch.text, batch.video, batch.temperature),
                  info_nce(batch.video, batch.text, batch.temperature))


def _as_orders(order: Union[Sequence[int], np.ndarray], batch: int, num: int) -> np.ndarray:
    orders = np.asarray(order, dtype=np.int64)
    if orders.ndim == 1:
        orders = orders[None, :]
    if orders.shape != (batch, num):
        raise LabelError(f"labels of shape {orders.shape} do not fit predictions for batch {batch}, K={num}")
    expected = np.arange(num)
    for row in orders:
        if not np.array_equal(np.sort(row), expected):
            raise LabelError(f"{row.tolist()} is not a permutation of 0..{num - 1}")
    return orders


def _batched(logits: Tensor) -> Tuple[Tensor, bool]:
    if logits.ndim == 2:
        return nx.reshape(logits, (1,) + logits.shape), True
    return logits, False


def sort_loss(logits: Tensor, order: Union[Sequence[int], np.ndarray]) -> Tensor:
    """
    Mean NLL of each shuffled slot's true position.

    logits (K, K) or (B, K, K); order[b, i] is the true position of slot i.
    """
    logits, _ = _batched(logits)
    if logits.ndim != 3 or logits.shape[1] != logits.shape[2]:
        raise DimensionError(f"sort logits must be (B, K, K), got {logits.shape}")
    batch, num, _ = logits.shape
    orders = _as_orders(order, batch, num)
    log_probs = nx.log_softmax(logits, axis=-1)
    rows = np.repeat(np.arange(batch), num)
    slots = np.tile(np.arange(num), batch)
    picked = nx.getitem(log_probs, (rows, slots, orders.reshape(-1)))
    return nx.neg(nx.mean(picked))


def pair_labels(order: np.ndarray, pairs: Sequence[Tuple[int, int]]) -> np.ndarray:
    """1 where slot i's transcript truly precedes slot j's, for each pair (i, j)"""
    order = np.asarray(order)
    return np.stack([(order[..., i] < order[..., j]).astype(np.int64) for i, j in pairs], axis=-1)


def pair_sort_loss(logits: Tensor, pairs: Sequence[Tuple[int, int]],
                   order: Union[Sequence[int], np.ndarray]) -> Tensor:
    """Mean 2-way cross-entropy over all slot pairs (i < j)"""
    logits, _ = _batched(logits)
    batch, count, two = logits.shape
    if two != 2 or count != len(pairs):
        raise DimensionError(f"pair logits {logits.shape} do not match {len(pairs)} pairs")
    num = max(j for _, j in pairs) + 1
    labels = pair_labels(_as_orders(order, batch, num), pairs)
    log_probs = nx.log_softmax(logits, axis=-1)
    rows = np.repeat(np.arange(batch), count)
    cols = np.tile(np.arange(count), batch)
    picked = nx.getitem(log_probs, (rows, cols, labels.reshape(-1)))
    return nx.neg(nx.mean(picked))


def factorial_targets(order: np.ndarray) -> np.ndarray:
    """Rank of the inverse permutation, the one that restores the true order"""
    return np.array([permutation_rank(inverse_permutation(row)) for row in np.atleast_2d(order)], dtype=np.int64)


def factorial_sort_loss(logits: Tensor, order: Union[Sequence[int], np.ndarray]) -> Tensor:
    if logits.ndim == 1:
        logits = nx.reshape(logits, (1,) + logits.shape)
    batch, width = logits.shape
    orders = np.atleast_2d(np.asarray(order, dtype=np.int64))
    num = orders.shape[-1]
    if width != math.factorial(num):
        raise LabelError(f"{width} logits cannot score permutations of K={num}")
    targets = factorial_targets(_as_orders(orders, batch, num))
    log_probs = nx.log_softmax(logits, axis=-1)
    picked = nx.getitem(log_probs, (np.arange(batch), targets))
    return nx.neg(nx.mean(picked))


def video_sort_loss(logits: Tensor, slice_perm: Union[Sequence[int], np.ndarray]) -> Tensor:
    """Slice ordering is the same NLL with slices in place of transcripts"""
    return sort_loss(logits, slice_perm)


def combine(align: Tensor, sort: Optional[Tensor], lam: float) -> Tensor:
    """L = L_align + lambda * L_sort as a differentiable tensor"""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if sort is None:
        return align
    return nx.add(align, nx.scale(sort, lam))


def _scalar(value: Union[float, Tensor]) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def total_loss(l_align: Union[float, Tensor], l_sort: Union[float, Tensor], lam: float = 2.0,
               grad_norm_align: Optional[float] = None, grad_norm_sort: Optional[float] = None) -> LossReport:
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return LossReport(L_align=_scalar(l_align), L_sort=_scalar(l_sort), lam=lam,
                      grad_norm_align=grad_norm_align, grad_norm_sort=grad_norm_sort)


# -----------------------------------------------------------------------------
# Accuracy
# -----------------------------------------------------------------------------

def sort_accuracy(logits: np.ndarray, order: np.ndarray) -> float:
    """Fraction of slots whose argmax equals their true position"""
    logits = np.asarray(logits)
    order = np.asarray(order)
    return float(np.mean(np.argmax(logits, axis=-1) == order.reshape(np.argmax(logits, axis=-1).shape)))


def pair_accuracy(logits: np.ndarray, pairs: Sequence[Tuple[int, int]], order: np.ndarray) -> float:
    labels = pair_labels(np.atleast_2d(order), pairs)
    return float(np.mean(np.argmax(np.asarray(logits), axis=-1).reshape(labels.shape) == labels))


def factorial_accuracy(logits: np.ndarray, order: np.ndarray) -> float:
    targets = factorial_targets(order)
    return float(np.mean(np.argmax(np.atleast_2d(logits), axis=-1) == targets))
