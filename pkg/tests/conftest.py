"""Shared builders for randomized, GOP-shaped test fixtures."""

import numpy as np
import pytest

from gopt.features import GopSequence
from gopt.metrics import ScoreLabels


def make_sequence(rng, num_phones: int, length: int, uid: str = "") -> GopSequence:
    """A structurally valid GOP sequence with random feature content."""
    canon = rng.integers(0, num_phones, size=length)
    base = rng.uniform(-4.0, -0.05, size=(length, num_phones))
    feats = np.concatenate([base, base - base[np.arange(length), canon][:, None]], axis=1)
    words = np.zeros(length, dtype=np.int64)
    pos, word = 0, 0
    while pos < length:
        step = int(rng.integers(1, 4))
        words[pos : pos + step] = word
        pos += step
        word += 1
    return GopSequence(feats, canon, words, utterance_id=uid or f"u{rng.integers(1e6)}")


def make_labels(rng, seq: GopSequence) -> ScoreLabels:
    return ScoreLabels(
        phone_accuracy=rng.uniform(0.2, 1.8, size=len(seq)),
        word_scores=rng.uniform(0.2, 1.8, size=(seq.num_words, 3)),
        utterance_scores=rng.uniform(0.2, 1.8, size=5),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def sequence_factory():
    return make_sequence


@pytest.fixture
def labels_factory():
    return make_labels
