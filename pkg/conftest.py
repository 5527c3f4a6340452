"""
Shared pytest fixtures: tiny model configs and a small generated corpus
"""

import os

import numpy as np
import pytest

from tvts import numerics as nx
from tvts.corpus import Corpus, generate_corpus
from tvts.schemas import EncoderConfig, GenConfig, TrainConfig

RUN_SLOW = os.environ.get("TVTS_RUN_SLOW") == "1"

collect_ignore = ["examples"]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training experiments (set TVTS_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set TVTS_RUN_SLOW=1 to run training experiments")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def float64_numerics():
    nx.set_default_dtype("float64")
    yield
    nx.set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tiny_encoder(**overrides) -> EncoderConfig:
    values = dict(hidden_dim=8, depth=1, text_depth=1, heads=2, patch=8, tubelet=2, frames=4,
                  height=16, width=16, max_text_len=6, vocab_size=0, common_dim=4)
    values.update(overrides)
    return EncoderConfig(**values)


def make_tiny_train(corpus_dir=None, run_dir=None, **overrides) -> TrainConfig:
    values = dict(corpus=corpus_dir, run_dir=run_dir or "runs/test", num_transcripts=3, window_seconds=2.0,
                  batch_size=4, steps=2, lr=1e-3, warmup_steps=0, checkpoint_every=1, holdout_fraction=0.25,
                  progress=False, eval_batches=2, encoder=make_tiny_encoder())
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def tiny_encoder() -> EncoderConfig:
    return make_tiny_encoder(vocab_size=40)


TINY_GEN = GenConfig(count=40, duration=12.0, fps=4.0, height=16, width=16, patch=8, window_seconds=2.0)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(TINY_GEN, seed=3, out=out)
    return out


@pytest.fixture(scope="session")
def corpus(corpus_dir) -> Corpus:
    return Corpus.open(corpus_dir)


@pytest.fixture
def tiny_train(corpus_dir, tmp_path) -> TrainConfig:
    return make_tiny_train(corpus_dir=corpus_dir, run_dir=tmp_path / "run")
