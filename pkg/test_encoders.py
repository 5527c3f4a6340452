"""
Tests for cube embedding, masking, both encoders and the projection heads
"""

import numpy as np
import pytest

from conftest import make_tiny_encoder
from tvts.corpus import build_mask
from tvts.encoders import (
    ClipTokens,
    add_spacetime_pos,
    apply_mask,
    cube_embed,
    encode_text,
    encode_video,
    init_encoder_params,
    project_common,
    video_forward,
    video_param_names,
)
from tvts import numerics as nx
from tvts.errors import ConfigError, ContractError, DimensionError, VocabError
from tvts.numerics import Tape, Tensor
from tvts.objectives import sort_loss
from tvts.sortformer import init_sort_params, sort_forward


@pytest.fixture
def params(tiny_encoder, rng):
    return init_encoder_params(tiny_encoder, 40, rng)


@pytest.fixture
def clip(rng):
    return rng.uniform(0, 1, size=(2, 4, 16, 16, 3))


def test_cube_embed_layout(tiny_encoder, params, clip):
    tokens = cube_embed(clip, params, tiny_encoder)
    assert tokens.tokens.shape == (2, 1 + 2 * 4, 8)
    assert (tokens.num_slices, tokens.num_spatial) == (2, 4)
    np.testing.assert_array_equal(tokens.slice_index[0], [0, 0, 0, 0, 1, 1, 1, 1])
    np.testing.assert_array_equal(tokens.spatial_index[0], [0, 1, 2, 3, 0, 1, 2, 3])
    np.testing.assert_allclose(tokens.tokens.data[:, 0], np.tile(params["video.cls"], (2, 1)))


def test_cube_embed_traverses_slice_row_column(tiny_encoder, params, clip):
    tokens = cube_embed(clip, params, tiny_encoder).tokens.data
    weight, bias = params["video.cube.weight"], params["video.cube.bias"]
    for j in range(2):
        for r in range(2):
            for c in range(2):
                cube = clip[1, 2 * j:2 * j + 2, 8 * r:8 * r + 8, 8 * c:8 * c + 8, :].reshape(-1)
                np.testing.assert_allclose(tokens[1, 1 + j * 4 + r * 2 + c], cube @ weight + bias, atol=1e-12)


def test_clip_shape_mismatch(tiny_encoder, params):
    with pytest.raises(ConfigError):
        cube_embed(np.zeros((1, 4, 24, 16, 3)), params, tiny_encoder)
    with pytest.raises(DimensionError):
        cube_embed(np.zeros((4, 16, 16, 3)), params, tiny_encoder)


def test_mask_drops_tokens_and_keeps_cls(tiny_encoder, params, clip, rng):
    full = add_spacetime_pos(cube_embed(clip, params, tiny_encoder), params)
    mask = build_mask(4, 2, 0.5, rng)
    masked = apply_mask(full, mask)
    assert masked.tokens.shape == (2, 1 + 2 * 2, 8)
    np.testing.assert_array_equal(masked.tokens.data[:, 0], full.tokens.data[:, 0])
    kept = (np.arange(2)[:, None] * 4 + mask.visible).reshape(-1)
    np.testing.assert_array_equal(masked.tokens.data[:, 1:], full.tokens.data[:, 1 + kept])
    np.testing.assert_array_equal(masked.slice_index[0], [0, 0, 1, 1])


def test_mask_grid_must_match(tiny_encoder, params, clip, rng):
    tokens = cube_embed(clip, params, tiny_encoder)
    with pytest.raises(ContractError):
        apply_mask(tokens, build_mask(9, 2, 0.5, rng))
    with pytest.raises(ContractError):
        apply_mask(tokens, [build_mask(4, 2, 0.5, rng)])


def test_depth_zero_encoder_is_identity(rng, clip):
    config = make_tiny_encoder(depth=0, vocab_size=40)
    params = init_encoder_params(config, 40, rng)
    tokens = add_spacetime_pos(cube_embed(clip, params, config), params)
    rep = encode_video(tokens, params, config)
    np.testing.assert_array_equal(rep.hidden.data, tokens.tokens.data)
    np.testing.assert_array_equal(rep.cls.data, tokens.tokens.data[:, 0])


def test_video_forward_with_masks(tiny_encoder, params, clip, rng):
    rep = video_forward(clip, params, tiny_encoder, masks=build_mask(4, 2, 0.75, rng))
    assert rep.cls.shape == (2, 8)
    assert rep.tokens.shape == (2, 2, 8)


def test_text_padding_does_not_change_output(tiny_encoder, params):
    short = encode_text(np.array([[1, 5, 9]]), params, tiny_encoder).vectors.data
    padded = encode_text(np.array([[1, 5, 9, 0, 0, 0]]), params, tiny_encoder).vectors.data
    np.testing.assert_allclose(short, padded, atol=1e-12)


def test_text_rejects_out_of_vocabulary_ids(tiny_encoder, params):
    with pytest.raises(VocabError):
        encode_text(np.array([[1, 40]]), params, tiny_encoder)
    with pytest.raises(DimensionError):
        encode_text(np.ones((1, 7), dtype=int), params, tiny_encoder)


def test_projection_is_unit_norm(tiny_encoder, params, rng):
    x = Tensor(rng.standard_normal((5, 8)))
    out = project_common(x, params["head.video"]).data
    assert out.shape == (5, 4)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_parameter_layout(tiny_encoder, params):
    names = video_param_names(params)
    assert "video.cube.weight" in names and "text.embed" not in names
    assert params["text.embed"].shape == (40, 8)
    assert params["text.pos"].shape == (6, 8)
    with pytest.raises(ConfigError):
        init_encoder_params(tiny_encoder, 3, np.random.default_rng(0))


def test_projection_closed_form():
    out = project_common(Tensor(np.array([[3.0, 4.0]])), np.eye(2)).data
    np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-12)


def test_projection_ignores_input_scale(params, rng):
    x = rng.standard_normal((3, 8))
    np.testing.assert_allclose(project_common(Tensor(x), params["head.text"]).data,
                               project_common(Tensor(2.0 * x), params["head.text"]).data, atol=1e-12)


def test_video_tokens_are_permutation_equivariant(tiny_encoder, params, clip, rng):
    tokens = add_spacetime_pos(cube_embed(clip, params, tiny_encoder), params)
    perm = rng.permutation(tokens.num_tokens)
    gather = np.concatenate([[0], perm + 1])
    moved = ClipTokens(Tensor(tokens.tokens.data[:, gather]), tokens.slice_index[:, perm],
                       tokens.spatial_index[:, perm], tokens.num_slices, tokens.num_spatial)
    base = encode_video(tokens, params, tiny_encoder)
    shuffled = encode_video(moved, params, tiny_encoder)
    np.testing.assert_allclose(shuffled.cls.data, base.cls.data, atol=1e-10)
    np.testing.assert_allclose(shuffled.tokens.data, base.tokens.data[:, perm], atol=1e-10)


def test_sort_gradient_reaches_visible_cubes_only(tiny_encoder, params, clip, rng):
    model = dict(params)
    model.update(init_sort_params(8, 3, "kway", 2, rng))
    mask = build_mask(4, 2, 0.75, rng)
    transcripts = Tensor(rng.standard_normal((2, 3, 8)))
    with Tape() as tape:
        pixels = tape.watch(clip)
        video = video_forward(pixels, model, tiny_encoder, masks=mask)
        loss = sort_loss(sort_forward(transcripts, video.hidden, model, 2).logits, [[2, 0, 1], [1, 2, 0]])
    grad = nx.backward(tape, loss)[pixels]
    for j in range(2):
        for position in range(4):
            r, c = divmod(position, 2)
            cube = np.abs(grad[:, 2 * j:2 * j + 2, 8 * r:8 * r + 8, 8 * c:8 * c + 8, :])
            if position in mask.visible[j]:
                assert (cube.reshape(2, -1).max(axis=1) > 0).all()
            else:
                assert cube.max() == 0.0
