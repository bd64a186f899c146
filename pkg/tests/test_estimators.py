"""The scikit-learn facing API: protocol compliance and basic behavior."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gopt.data import SyntheticConfig, generate_synthetic
from gopt.errors import DimensionError, LabelError
from gopt.estimators import GopFeatureExtractor, PronunciationScorer
from gopt.features import (
    AlignedSegment,
    Alignment,
    PhoneInventory,
    PhonePosteriorgram,
    extract_utterance,
)
from gopt.metrics import UtterancePrediction


@pytest.fixture(scope="module")
def tiny_corpus():
    data = generate_synthetic(SyntheticConfig(num_train=24, num_test=10), seed=6)
    train = data.dataset.pairs("train")
    test = data.dataset.pairs("test")
    return train, test


def _scorer(**overrides):
    defaults = dict(embed_dim=8, num_layers=1, max_phones=12, epochs=4, batch_size=8, seed=0)
    defaults.update(overrides)
    return PronunciationScorer(**defaults)


class TestSklearnProtocol:
    def test_get_params_round_trip(self):
        scorer = _scorer(num_heads=2)
        params = scorer.get_params()
        assert params["num_heads"] == 2 and params["epochs"] == 4
        other = PronunciationScorer(**params)
        assert other.get_params() == params

    def test_set_params_returns_self(self):
        scorer = _scorer()
        assert scorer.set_params(epochs=7) is scorer
        assert scorer.epochs == 7

    def test_clone_preserves_params_and_drops_state(self, tiny_corpus):
        train, _ = tiny_corpus
        X = [seq for seq, _ in train]
        y = [lab for _, lab in train]
        scorer = _scorer().fit(X, y)
        fresh = clone(scorer)
        assert fresh.get_params() == scorer.get_params()
        assert not hasattr(fresh, "model_")

    def test_predict_before_fit_raises(self, tiny_corpus):
        train, _ = tiny_corpus
        with pytest.raises(NotFittedError):
            _scorer().predict([seq for seq, _ in train])


class TestFitPredict:
    def test_fit_predict_shapes(self, tiny_corpus):
        train, test = tiny_corpus
        X = [seq for seq, _ in train]
        y = [lab for _, lab in train]
        scorer = _scorer().fit(X, y)
        assert scorer.n_features_in_ == 20
        assert scorer.config_.num_phones == 10
        preds = scorer.predict([seq for seq, _ in test])
        assert len(preds) == len(test)
        for (seq, labels), pred in zip(test, preds):
            assert isinstance(pred, UtterancePrediction)
            assert pred.phone_scores.shape == (len(seq),)
            assert pred.word_scores.shape == labels.word_scores.shape
            assert pred.utterance_scores.shape == (5,)

    def test_score_is_phoneme_pcc(self, tiny_corpus):
        train, test = tiny_corpus
        scorer = _scorer(epochs=10).fit(
            [seq for seq, _ in train], [lab for _, lab in train]
        )
        value = scorer.score([seq for seq, _ in test], [lab for _, lab in test])
        result = scorer.evaluate([seq for seq, _ in test], [lab for _, lab in test])
        assert value == result.phoneme_pcc
        assert -1.0 <= value <= 1.0

    def test_same_seed_reproduces_fit(self, tiny_corpus):
        train, test = tiny_corpus
        X = [seq for seq, _ in train]
        y = [lab for _, lab in train]
        a = _scorer().fit(X, y)
        b = _scorer().fit(X, y)
        for name in a.model_.params:
            assert np.array_equal(a.model_.params[name].data, b.model_.params[name].data)

    def test_lstm_backbone(self, tiny_corpus):
        train, test = tiny_corpus
        scorer = _scorer(backbone="lstm").fit(
            [seq for seq, _ in train], [lab for _, lab in train]
        )
        preds = scorer.predict([seq for seq, _ in test])
        assert len(preds) == len(test)

    def test_tuple_inputs_accepted(self, tiny_corpus):
        train, _ = tiny_corpus
        X = [(seq.features, seq.canonical_phones, seq.word_of_phone) for seq, _ in train]
        y = [
            (lab.phone_accuracy, lab.word_scores, lab.utterance_scores)
            for _, lab in train
        ]
        scorer = _scorer(epochs=1).fit(X, y)
        assert hasattr(scorer, "model_")


class TestValidationErrors:
    def test_mismatched_label_count(self, tiny_corpus):
        train, _ = tiny_corpus
        X = [seq for seq, _ in train]
        y = [lab for _, lab in train][:-1]
        with pytest.raises(LabelError):
            _scorer().fit(X, y)

    def test_inconsistent_feature_widths(self, tiny_corpus, rng):
        from conftest import make_labels, make_sequence

        train, _ = tiny_corpus
        odd = make_sequence(rng, 7, 5, uid="odd")
        X = [train[0][0], odd]
        y = [train[0][1], make_labels(rng, odd)]
        with pytest.raises(DimensionError):
            _scorer().fit(X, y)

    def test_single_utterance_not_iterable_of_utterances(self, tiny_corpus):
        train, _ = tiny_corpus
        with pytest.raises(DimensionError):
            _scorer().fit(train[0][0], [train[0][1]])


class TestFeatureExtractorTransformer:
    def test_transform_matches_direct_extraction(self, rng):
        inv = PhoneInventory(names=("a", "b", "c"), state_to_phone=np.array([0, 0, 1, 1, 2, 2]))
        pg = PhonePosteriorgram(rng.dirichlet(np.ones(6), size=9))
        alignment = Alignment((AlignedSegment(0, 0, 3, 0), AlignedSegment(2, 4, 8, 1)))
        extractor = GopFeatureExtractor(inventory=inv)
        out = extractor.fit_transform([(pg, alignment)])
        expected = extract_utterance(pg, alignment, inv)
        assert np.array_equal(out[0].features, expected.features)

    def test_clone(self):
        inv = PhoneInventory(names=("a", "b"), state_to_phone=np.array([0, 1]))
        cloned = clone(GopFeatureExtractor(inventory=inv)).inventory
        assert cloned.names == inv.names
        assert np.array_equal(cloned.state_to_phone, inv.state_to_phone)
