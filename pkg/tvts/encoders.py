"""
Video encoder, text encoder and the contrastive projection heads

Both encoders are stacks of pre-norm transformer blocks:
    x = x + Attn(LN(x));  x = x + MLP(LN(x))
The video side embeds 2 x P x P cubes, adds divided space-time position
vectors, drops masked tokens and attends jointly over what is left.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np

from tvts import numerics as nx
from tvts.corpus import MaskPattern
from tvts.errors import ConfigError, ContractError, DimensionError, VocabError
from tvts.numerics import Tensor
from tvts.schemas import EncoderConfig

logger = logging.getLogger(__name__)

MLP_RATIO = 4
INIT_STD = 0.02

Params = Mapping[str, Tensor]


# -----------------------------------------------------------------------------
# Transformer blocks
# -----------------------------------------------------------------------------

def init_block(prefix: str, width: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    dtype = nx.get_default_dtype()
    hidden = MLP_RATIO * width
    params = {
        f"{prefix}.ln1.gain": np.ones(width, dtype=dtype),
        f"{prefix}.ln1.bias": np.zeros(width, dtype=dtype),
        f"{prefix}.ln2.gain": np.ones(width, dtype=dtype),
        f"{prefix}.ln2.bias": np.zeros(width, dtype=dtype),
        f"{prefix}.mlp.b1": np.zeros(hidden, dtype=dtype),
        f"{prefix}.mlp.b2": np.zeros(width, dtype=dtype),
        f"{prefix}.mlp.w1": nx.trunc_normal(rng, (width, hidden), INIT_STD),
        f"{prefix}.mlp.w2": nx.trunc_normal(rng, (hidden, width), INIT_STD),
    }
    for name in ("q", "k", "v", "o"):
        params[f"{prefix}.attn.w{name}"] = nx.trunc_normal(rng, (width, width), INIT_STD)
        params[f"{prefix}.attn.b{name}"] = np.zeros(width, dtype=dtype)
    return params


def _linear(x: Tensor, params: Params, weight: str, bias: Optional[str] = None) -> Tensor:
    out = nx.matmul(x, params[weight])
    return nx.add(out, params[bias]) if bias is not None else out


def block_forward(params: Params, prefix: str, x: Tensor, heads: int,
                  attn_mask: Optional[np.ndarray] = None) -> Tensor:
    h = nx.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    q = _linear(h, params, f"{prefix}.attn.wq", f"{prefix}.attn.bq")
    k = _linear(h, params, f"{prefix}.attn.wk", f"{prefix}.attn.bk")
    v = _linear(h, params, f"{prefix}.attn.wv", f"{prefix}.attn.bv")
    attn = nx.multi_head_attention(q, k, v, heads, attn_mask)
    x = nx.add(x, _linear(attn, params, f"{prefix}.attn.wo", f"{prefix}.attn.bo"))
    h = nx.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    h = nx.gelu(_linear(h, params, f"{prefix}.mlp.w1", f"{prefix}.mlp.b1"))
    return nx.add(x, _linear(h, params, f"{prefix}.mlp.w2", f"{prefix}.mlp.b2"))


def transformer_forward(params: Params, prefix: str, x: Tensor, depth: int, heads: int,
                        attn_mask: Optional[np.ndarray] = None) -> Tensor:
    for i in range(depth):
        x = block_forward(params, f"{prefix}.blocks.{i}", x, heads, attn_mask)
    return x


# -----------------------------------------------------------------------------
# Parameters
# -----------------------------------------------------------------------------

def init_encoder_params(config: EncoderConfig, vocab_size: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Video encoder, text encoder and both projection heads, truncated-normal initialised"""
    if vocab_size < 4:
        raise ConfigError(f"vocabulary of {vocab_size} ids is too small")
    d = config.hidden_dim
    dtype = nx.get_default_dtype()
    params: Dict[str, np.ndarray] = {
        "video.cube.weight": nx.trunc_normal(rng, (config.cube_dim, d), INIT_STD),
        "video.cube.bias": np.zeros(d, dtype=dtype),
        "video.cls": nx.trunc_normal(rng, (d,), INIT_STD),
        "video.pos.cls": nx.trunc_normal(rng, (d,), INIT_STD),
        "video.pos.temporal": nx.trunc_normal(rng, (config.num_slices, d), INIT_STD),
        "video.pos.spatial": nx.trunc_normal(rng, (config.tokens_per_slice, d), INIT_STD),
    }
    for i in range(config.depth):
        params.update(init_block(f"video.blocks.{i}", d, rng))
    params["text.embed"] = nx.trunc_normal(rng, (vocab_size, d), INIT_STD)
    params["text.pos"] = nx.trunc_normal(rng, (config.max_text_len, d), INIT_STD)
    for i in range(config.text_depth):
        params.update(init_block(f"text.blocks.{i}", d, rng))
    params["head.video"] = nx.trunc_normal(rng, (d, config.common_dim), INIT_STD)
    params["head.text"] = nx.trunc_normal(rng, (d, config.common_dim), INIT_STD)
    return params


def video_param_names(params: Mapping[str, object]) -> list:
    return sorted(name for name in params if name.startswith("video."))


# -----------------------------------------------------------------------------
# Video
# -----------------------------------------------------------------------------

@dataclass
class ClipTokens:
    """
    tokens: (B, 1 + N, D_h), CLS at position 0.
    slice_index / spatial_index: (B, N) grid coordinates of every non-CLS token.
    """
    tokens: Tensor
    slice_index: np.ndarray
    spatial_index: np.ndarray
    num_slices: int
    num_spatial: int

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1] - 1


@dataclass
class VideoRepresentation:
    cls: Tensor      # v_0, (B, D_h)
    tokens: Tensor   # v_1..v_N, (B, N, D_h)
    hidden: Tensor   # v_0..v_N, (B, 1 + N, D_h)


@dataclass
class TranscriptRepresentation:
    vectors: Tensor  # (B, D_h), one per transcript, input order


def _check_clip(shape, config: EncoderConfig) -> None:
    if len(shape) != 5 or shape[-1] != 3:
        raise DimensionError(f"clip must be (B, M, H, W, 3), got {tuple(shape)}")
    _, m, h, w, _ = shape
    if m % config.tubelet:
        raise ConfigError(f"M={m} frames is not divisible by tubelet {config.tubelet}")
    if h % config.patch or w % config.patch:
        raise ConfigError(f"frame size {h}x{w} is not divisible by patch size {config.patch}")
    if (m, h, w) != (config.frames, config.height, config.width):
        raise ConfigError(
            f"clip (M={m}, H={h}, W={w}) does not match encoder config "
            f"(M={config.frames}, H={config.height}, W={config.width})"
        )


def cube_embed(clip: Union[Tensor, np.ndarray], params: Params, config: EncoderConfig) -> ClipTokens:
    """Linear embedding of every tubelet x P x P x 3 cube, traversed (slice, row, column); CLS prepended"""
    clip = clip if isinstance(clip, Tensor) else Tensor(clip)
    _check_clip(clip.shape, config)
    b, m, h, w, c = clip.shape
    t, p = config.tubelet, config.patch
    s, hp, wp = m // t, h // p, w // p
    x = nx.reshape(clip, (b, s, t, hp, p, wp, p, c))
    x = nx.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    x = nx.reshape(x, (b, s * hp * wp, t * p * p * c))
    x = nx.add(nx.matmul(x, params["video.cube.weight"]), params["video.cube.bias"])
    d = x.shape[-1]
    cls = nx.expand(nx.reshape(params["video.cls"], (1, d)), (b, 1, d))
    tokens = nx.concat([cls, x], axis=1)
    tps = hp * wp
    slice_index = np.tile(np.repeat(np.arange(s), tps), (b, 1))
    spatial_index = np.tile(np.tile(np.arange(tps), s), (b, 1))
    return ClipTokens(tokens, slice_index, spatial_index, s, tps)


def add_spacetime_pos(tokens: ClipTokens, params: Params) -> ClipTokens:
    """token += temporal[slice] + spatial[position]; CLS gets its own vector"""
    b, _, d = tokens.tokens.shape
    temporal = nx.getitem(params["video.pos.temporal"], tokens.slice_index)
    spatial = nx.getitem(params["video.pos.spatial"], tokens.spatial_index)
    cls_pos = nx.expand(nx.reshape(params["video.pos.cls"], (1, d)), (b, 1, d))
    pos = nx.concat([cls_pos, nx.add(temporal, spatial)], axis=1)
    return ClipTokens(nx.add(tokens.tokens, pos), tokens.slice_index, tokens.spatial_index,
                      tokens.num_slices, tokens.num_spatial)


def apply_mask(tokens: ClipTokens, masks: Union[MaskPattern, Sequence[MaskPattern]]) -> ClipTokens:
    """Remove masked tokens (no [MASK] placeholder); CLS and relative order are kept"""
    batch = tokens.tokens.shape[0]
    masks = [masks] * batch if isinstance(masks, MaskPattern) else list(masks)
    if len(masks) != batch:
        raise ContractError(f"{len(masks)} masks for a batch of {batch}")
    if tokens.num_tokens != tokens.num_slices * tokens.num_spatial:
        raise ContractError("tokens were already masked")
    counts = {m.num_visible for m in masks}
    if len(counts) != 1:
        raise ContractError(f"masks keep different token counts {sorted(counts)}")
    for mask in masks:
        if mask.num_slices != tokens.num_slices or mask.tokens_per_slice != tokens.num_spatial:
            raise ContractError(
                f"mask grid {mask.num_slices}x{mask.tokens_per_slice} does not match "
                f"token grid {tokens.num_slices}x{tokens.num_spatial}"
            )
    kept = np.stack([
        (np.arange(m.num_slices)[:, None] * m.tokens_per_slice + m.visible).reshape(-1) for m in masks
    ])
    gather = np.concatenate([np.zeros((batch, 1), dtype=np.int64), kept + 1], axis=1)
    rows = np.arange(batch)[:, None]
    selected = nx.getitem(tokens.tokens, (rows, gather))
    return ClipTokens(
        selected,
        np.take_along_axis(tokens.slice_index, kept, axis=1),
        np.take_along_axis(tokens.spatial_index, kept, axis=1),
        tokens.num_slices,
        tokens.num_spatial,
    )


def encode_video(tokens: ClipTokens, params: Params, config: EncoderConfig) -> VideoRepresentation:
    """Joint space-time attention over CLS plus every visible token"""
    hidden = transformer_forward(params, "video", tokens.tokens, config.depth, config.heads)
    return VideoRepresentation(
        cls=nx.getitem(hidden, (slice(None), 0)),
        tokens=nx.getitem(hidden, (slice(None), slice(1, None))),
        hidden=hidden,
    )


def video_forward(clip: Union[Tensor, np.ndarray], params: Params, config: EncoderConfig,
                  masks: Optional[Union[MaskPattern, Sequence[MaskPattern]]] = None) -> VideoRepresentation:
    tokens = add_spacetime_pos(cube_embed(clip, params, config), params)
    if masks is not None:
        tokens = apply_mask(tokens, masks)
    return encode_video(tokens, params, config)


# -----------------------------------------------------------------------------
# Text
# -----------------------------------------------------------------------------

def encode_text(token_ids: np.ndarray, params: Params, config: EncoderConfig,
                pad_id: int = 0) -> TranscriptRepresentation:
    """(B, L) ids -> (B, D_h) vectors read at the [CLS] slot; [PAD] keys are masked out"""
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise DimensionError(f"token ids must be (B, L), got {ids.shape}")
    vocab_size = params["text.embed"].shape[0]
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise VocabError(f"token id outside [0, {vocab_size}): min {ids.min()}, max {ids.max()}")
    length = ids.shape[1]
    if length > params["text.pos"].shape[0]:
        raise DimensionError(f"{length} token slots exceed max_text_len {params['text.pos'].shape[0]}")
    x = nx.getitem(params["text.embed"], ids)
    x = nx.add(x, nx.getitem(params["text.pos"], slice(0, length)))
    hidden = transformer_forward(params, "text", x, config.text_depth, config.heads, attn_mask=ids == pad_id)
    return TranscriptRepresentation(nx.getitem(hidden, (slice(None), 0)))


def project_common(x: Tensor, weight: Tensor, eps: float = 1e-12) -> Tensor:
    """Bias-free linear map to the common space followed by L2 normalisation"""
    return nx.l2_normalize(nx.matmul(x, weight), eps=eps)
