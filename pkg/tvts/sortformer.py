"""
SortFormer: two bidirectional transformer blocks over [transcripts; video tokens]
plus the order-prediction heads (K-way, pairwise, K! and video sort)
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from tvts import numerics as nx
from tvts.encoders import INIT_STD, Params, init_block, transformer_forward
from tvts.errors import ConfigError, DimensionError, LabelError
from tvts.numerics import Tensor
from tvts.schemas import FACTORIAL_MAX_K, PROXIES

logger = logging.getLogger(__name__)

TRUNK_DEPTH = 2
TRUNK_PREFIX = "sort.trunk"


@dataclass
class SortPrediction:
    logits: Tensor  # (B, K, K): row i scores the true position of shuffled slot i


@dataclass
class PairPrediction:
    logits: Tensor  # (B, K(K-1)/2, 2): [slot j first, slot i first] for pair (i, j)
    pairs: Tuple[Tuple[int, int], ...]


@dataclass
class FactorialPrediction:
    logits: Tensor  # (B, K!) over permutations in lexicographic order


@dataclass
class FrameSortPrediction:
    logits: Tensor  # (B, S, S): row s scores the true position of shuffled slice s


def _check_k(num: int) -> None:
    if num < 2:
        raise ConfigError(f"sorting needs K >= 2 transcripts, got {num}")


def slot_pairs(num: int) -> Tuple[Tuple[int, int], ...]:
    return tuple(itertools.combinations(range(num), 2))


# -----------------------------------------------------------------------------
# Permutation ranks
# -----------------------------------------------------------------------------

def permutation_rank(perm: Sequence[int]) -> int:
    """Lexicographic rank among all permutations of 0..K-1 (identity -> 0)"""
    perm = [int(p) for p in perm]
    if sorted(perm) != list(range(len(perm))):
        raise LabelError(f"{perm} is not a permutation")
    rank = 0
    remaining = sorted(perm)
    for i, p in enumerate(perm):
        pos = remaining.index(p)
        rank += pos * math.factorial(len(perm) - 1 - i)
        remaining.pop(pos)
    return rank


def permutation_unrank(rank: int, num: int) -> Tuple[int, ...]:
    if not 0 <= rank < math.factorial(num):
        raise LabelError(f"rank {rank} out of range for K={num}")
    remaining = list(range(num))
    out = []
    for i in range(num):
        f = math.factorial(num - 1 - i)
        out.append(remaining.pop(rank // f))
        rank %= f
    return tuple(out)


def inverse_permutation(order: Sequence[int]) -> Tuple[int, ...]:
    inv = [0] * len(order)
    for slot, position in enumerate(order):
        inv[int(position)] = slot
    return tuple(inv)


# -----------------------------------------------------------------------------
# Parameters
# -----------------------------------------------------------------------------

def _init_ln(prefix: str, width: int) -> Dict[str, np.ndarray]:
    dtype = nx.get_default_dtype()
    return {f"{prefix}.gain": np.ones(width, dtype=dtype), f"{prefix}.bias": np.zeros(width, dtype=dtype)}


def init_sort_params(width: int, num: int, proxy: str, num_slices: int,
                     rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Shared trunk plus the head for `proxy`; "none" has no parameters"""
    if proxy not in PROXIES:
        raise ConfigError(f"proxy must be one of {PROXIES}, got {proxy!r}")
    if proxy == "none":
        return {}
    _check_k(num)
    dtype = nx.get_default_dtype()
    params: Dict[str, np.ndarray] = {}
    for i in range(TRUNK_DEPTH):
        params.update(init_block(f"{TRUNK_PREFIX}.blocks.{i}", width, rng))
    head = f"sort.{proxy}"
    params.update(_init_ln(f"{head}.ln", width))
    if proxy == "kway":
        params[f"{head}.weight"] = nx.trunc_normal(rng, (width, num), INIT_STD)
        params[f"{head}.bias"] = np.zeros(num, dtype=dtype)
    elif proxy == "pair":
        params[f"{head}.weight"] = nx.trunc_normal(rng, (2 * width, 1), INIT_STD)
        params[f"{head}.bias"] = np.zeros(1, dtype=dtype)
    elif proxy == "factorial":
        if num > FACTORIAL_MAX_K:
            raise ConfigError(f"K! head supports K <= {FACTORIAL_MAX_K}, got {num}")
        params[f"{head}.token"] = nx.trunc_normal(rng, (width,), INIT_STD)
        params[f"{head}.weight"] = nx.trunc_normal(rng, (width, math.factorial(num)), INIT_STD)
        params[f"{head}.bias"] = np.zeros(math.factorial(num), dtype=dtype)
    elif proxy == "videosort":
        params[f"{head}.weight"] = nx.trunc_normal(rng, (width, num_slices), INIT_STD)
        params[f"{head}.bias"] = np.zeros(num_slices, dtype=dtype)
    return params


# -----------------------------------------------------------------------------
# Forward passes
# -----------------------------------------------------------------------------

def trunk_forward(params: Params, x: Tensor, heads: int) -> Tensor:
    """The two shared blocks; full attention, no positional information added"""
    return transformer_forward(params, TRUNK_PREFIX, x, TRUNK_DEPTH, heads)


def _check_inputs(transcripts: Tensor, video: Tensor) -> None:
    if transcripts.ndim != 3 or video.ndim != 3 or transcripts.shape[0] != video.shape[0] \
            or transcripts.shape[2] != video.shape[2]:
        raise DimensionError(f"transcripts {transcripts.shape} and video {video.shape} must be (B, *, D_h)")
    _check_k(transcripts.shape[1])


def _head(params: Params, proxy: str, z: Tensor) -> Tensor:
    h = nx.layer_norm(z, params[f"sort.{proxy}.ln.gain"], params[f"sort.{proxy}.ln.bias"])
    return nx.add(nx.matmul(h, params[f"sort.{proxy}.weight"]), params[f"sort.{proxy}.bias"])


def sort_forward(transcripts: Tensor, video: Tensor, params: Params, heads: int) -> SortPrediction:
    """
    transcripts: (B, K, D_h) in shuffled slot order; video: (B, 1 + N, D_h) from the encoder.
    The first K trunk outputs go through one classifier shared by all slots.
    """
    _check_inputs(transcripts, video)
    num = transcripts.shape[1]
    z = trunk_forward(params, nx.concat([transcripts, video], axis=1), heads)
    z = nx.getitem(z, (slice(None), slice(0, num)))
    return SortPrediction(_head(params, "kway", z))


def pair_sort_forward(transcripts: Tensor, video: Tensor, params: Params, heads: int) -> PairPrediction:
    """Antisymmetric pair head: logits(i, j) = [s(z_j, z_i), s(z_i, z_j)]"""
    _check_inputs(transcripts, video)
    num = transcripts.shape[1]
    z = trunk_forward(params, nx.concat([transcripts, video], axis=1), heads)
    z = nx.getitem(z, (slice(None), slice(0, num)))
    z = nx.layer_norm(z, params["sort.pair.ln.gain"], params["sort.pair.ln.bias"])
    pairs = slot_pairs(num)
    first = nx.getitem(z, (slice(None), np.array([i for i, _ in pairs])))
    second = nx.getitem(z, (slice(None), np.array([j for _, j in pairs])))

    def score(a: Tensor, b: Tensor) -> Tensor:
        ab = nx.concat([a, b], axis=-1)
        return nx.add(nx.matmul(ab, params["sort.pair.weight"]), params["sort.pair.bias"])

    logits = nx.concat([score(second, first), score(first, second)], axis=-1)
    return PairPrediction(logits, pairs)


def factorial_sort_forward(transcripts: Tensor, video: Tensor, params: Params, heads: int) -> FactorialPrediction:
    """A learned ordering token is prepended; its output scores all K! orderings"""
    _check_inputs(transcripts, video)
    num = transcripts.shape[1]
    if num > FACTORIAL_MAX_K:
        raise ConfigError(f"K! head supports K <= {FACTORIAL_MAX_K}, got {num}")
    width = params["sort.factorial.weight"].shape[1]
    if width != math.factorial(num):
        raise ConfigError(f"K! head was built for {width} orderings, got K={num}")
    b, _, d = transcripts.shape
    token = nx.expand(nx.reshape(params["sort.factorial.token"], (1, d)), (b, 1, d))
    z = trunk_forward(params, nx.concat([token, transcripts, video], axis=1), heads)
    return FactorialPrediction(_head(params, "factorial", nx.getitem(z, (slice(None), 0))))


def shuffle_slices(clip: np.ndarray, slice_perm: Sequence[int], tubelet: int) -> np.ndarray:
    """
    Reorder a (M, H, W, 3) clip by whole temporal slices: slot s receives true slice
    slice_perm[s]. Position embeddings later follow the slot order.
    """
    m = clip.shape[0]
    slices = clip.reshape((m // tubelet, tubelet) + clip.shape[1:])
    return slices[np.asarray(slice_perm)].reshape(clip.shape)


def video_sort_forward(transcripts: Tensor, video: Tensor, num_slices: int, params: Params,
                       heads: int) -> FrameSortPrediction:
    """
    transcripts: (B, K, D_h) in true order; video: (B, 1 + N, D_h) encoded from a
    slice-shuffled clip whose visible tokens are sorted slice-major.
    Each slice's trunk outputs are mean-pooled and classified over true positions.
    """
    _check_inputs(transcripts, video)
    b, num, d = transcripts.shape
    n = video.shape[1] - 1
    if n % num_slices:
        raise DimensionError(f"{n} video tokens do not split evenly over {num_slices} slices")
    z = trunk_forward(params, nx.concat([transcripts, video], axis=1), heads)
    z = nx.getitem(z, (slice(None), slice(num + 1, None)))
    pooled = nx.mean(nx.reshape(z, (b, num_slices, n // num_slices, d)), axis=2)
    return FrameSortPrediction(_head(params, "videosort", pooled))


def predict_order(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax of (B, K, K) logits"""
    return np.argmax(logits, axis=-1)


def all_permutations(num: int) -> List[Tuple[int, ...]]:
    return list(itertools.permutations(range(num)))
