"""Input validation helpers for the estimator-facing API.

These accept the loose things callers actually pass (our own dataclasses,
plain arrays, tuples) and hand back validated package types with consistent
shapes, raising early with messages that name the offending utterance.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError, LabelError
from .features import GopSequence
from .metrics import ScoreLabels


def check_gop_sequences(X, feature_dim: int | None = None) -> list[GopSequence]:
    """Coerce X into a list of GopSequence with one shared feature width.

    Accepts GopSequence instances or (features, canonical_phones,
    word_of_phone) triples.
    """
    if isinstance(X, (GopSequence, np.ndarray)):
        raise DimensionError("X must be a sequence of utterances, not a single one")
    sequences: list[GopSequence] = []
    for i, item in enumerate(X):
        if isinstance(item, GopSequence):
            seq = item
        else:
            try:
                features, phones, words = item
            except (TypeError, ValueError) as exc:
                raise DimensionError(
                    f"utterance {i}: expected GopSequence or a "
                    f"(features, phones, words) triple"
                ) from exc
            seq = GopSequence(
                features=np.asarray(features, dtype=np.float64),
                canonical_phones=phones,
                word_of_phone=words,
                utterance_id=f"utt{i:05d}",
            )
        sequences.append(seq)
    if not sequences:
        raise DimensionError("X contains no utterances")
    widths = {s.features.shape[1] for s in sequences}
    if len(widths) > 1:
        raise DimensionError(f"inconsistent feature widths across utterances: {sorted(widths)}")
    width = widths.pop()
    if feature_dim is not None and width != feature_dim:
        raise DimensionError(f"expected feature width {feature_dim}, got {width}")
    return sequences


def check_score_labels(y, sequences: Sequence[GopSequence]) -> list[ScoreLabels]:
    """Coerce y into ScoreLabels aligned with the given sequences.

    Accepts ScoreLabels instances or (phone_scores, word_scores,
    utterance_scores) triples, already on the unified 0-2 scale.
    """
    labels: list[ScoreLabels] = []
    items = list(y)
    if len(items) != len(sequences):
        raise LabelError(f"{len(items)} label sets for {len(sequences)} utterances")
    for seq, item in zip(sequences, items):
        if isinstance(item, ScoreLabels):
            lab = item
        else:
            try:
                phone, word, utt = item
            except (TypeError, ValueError) as exc:
                raise LabelError(
                    f"utterance {seq.utterance_id!r}: expected ScoreLabels or a "
                    f"(phone, word, utterance) score triple"
                ) from exc
            lab = ScoreLabels(
                phone_accuracy=np.asarray(phone, dtype=np.float64),
                word_scores=np.asarray(word, dtype=np.float64),
                utterance_scores=np.asarray(utt, dtype=np.float64),
            )
        if lab.phone_accuracy.size != len(seq):
            raise LabelError(
                f"utterance {seq.utterance_id!r}: {lab.phone_accuracy.size} phone scores "
                f"for {len(seq)} phones"
            )
        expected_words = seq.num_words
        if lab.num_words != expected_words:
            raise LabelError(
                f"utterance {seq.utterance_id!r}: {lab.num_words} word-score rows "
                f"for {expected_words} words"
            )
        labels.append(lab)
    return labels
