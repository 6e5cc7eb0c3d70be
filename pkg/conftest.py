"""
共通フィクスチャ
"""

import os

import numpy as np
import pytest

from corpus import SkipGramExample, WordSegment
from dsp_features import FeatureSequence
from neuralnet import ModelConfig


def pytest_collection_modifyitems(config, items):
    if os.environ.get("AUDIO2VEC_SLOW_TESTS") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set AUDIO2VEC_SLOW_TESTS=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """エンコーダ 2×6、デコーダ 6、d=3、k=2"""
    return ModelConfig(input_dim=3, hidden_size=6, encoder_layers=2, window=2, precision="f64")


@pytest.fixture
def make_utterance():
    def factory(rng, lengths, dim=3, utterance_id="u0", offset=0.0):
        return [
            WordSegment(
                utterance_id,
                index,
                f"w{index}",
                FeatureSequence(rng.normal(size=(length, dim)) + offset),
            )
            for index, length in enumerate(lengths)
        ]

    return factory


@pytest.fixture
def make_example():
    def factory(group, center, k):
        targets = tuple(
            (offset, group[center + offset])
            for offset in list(range(-k, 0)) + list(range(1, k + 1))
            if 0 <= center + offset < len(group)
        )
        return SkipGramExample(center=group[center], targets=targets)

    return factory
