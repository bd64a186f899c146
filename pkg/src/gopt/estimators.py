"""scikit-learn compatible wrappers around the feature extractor and scorer.

These follow the estimator protocol (params stored verbatim in __init__,
learned state in trailing-underscore attributes, get_params/set_params via
BaseEstimator), so the scorer clones, grid-searches, and pipelines like any
other estimator.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .features import extract_utterance
from .metrics import evaluate, predict_utterances
from .model import ModelConfig, build_model
from .train import TrainConfig, train
from .validation import check_gop_sequences, check_score_labels


class GopFeatureExtractor(BaseEstimator, TransformerMixin):
    """Stateless transformer: (posteriorgram, alignment) pairs to GOP sequences.

    Parameters
    ----------
    inventory : PhoneInventory
        Phone symbols and the acoustic-state membership map.
    """

    def __init__(self, inventory):
        self.inventory = inventory

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [
            extract_utterance(pg, alignment, self.inventory) for pg, alignment in X
        ]


class PronunciationScorer(BaseEstimator, RegressorMixin):
    """Multi-aspect, multi-granularity pronunciation scorer.

    ``fit`` expects GOP sequences plus labels on the unified 0-2 scale and
    trains the selected backbone end to end with the standard protocol
    (Adam, MSE multi-task loss, halving schedule). ``predict`` returns one
    :class:`~gopt.metrics.UtterancePrediction` per utterance with phone,
    word (already averaged per word), and utterance scores. ``score``
    reports the pooled phoneme-score Pearson correlation.

    Passing ``num_phones=None`` infers the inventory size from the feature
    width at fit time.
    """

    def __init__(
        self,
        backbone: str = "gopt",
        num_phones: int | None = None,
        embed_dim: int = 24,
        num_layers: int = 3,
        num_heads: int = 1,
        ffn_dim: int | None = None,
        max_phones: int = 50,
        dropout: float = 0.0,
        activation: str = "relu",
        cls_positional: bool = False,
        use_phone_embedding: bool = True,
        learning_rate: float = 1e-3,
        batch_size: int = 25,
        epochs: int = 100,
        schedule: str = "after",
        tasks: str = "joint",
        seed: int = 0,
    ):
        self.backbone = backbone
        self.num_phones = num_phones
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.ffn_dim = ffn_dim
        self.max_phones = max_phones
        self.dropout = dropout
        self.activation = activation
        self.cls_positional = cls_positional
        self.use_phone_embedding = use_phone_embedding
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.schedule = schedule
        self.tasks = tasks
        self.seed = seed

    def _model_config(self, feature_dim: int) -> ModelConfig:
        num_phones = self.num_phones if self.num_phones is not None else feature_dim // 2
        return ModelConfig(
            num_phones=num_phones,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            ffn_dim=self.ffn_dim,
            max_phones=self.max_phones,
            dropout=self.dropout,
            activation=self.activation,
            cls_positional=self.cls_positional,
            use_phone_embedding=self.use_phone_embedding,
        )

    def fit(self, X, y):
        sequences = check_gop_sequences(X)
        labels = check_score_labels(y, sequences)
        config = self._model_config(sequences[0].features.shape[1])
        train_cfg = TrainConfig(
            lr0=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            schedule=self.schedule,
            tasks=self.tasks,
            seeds=(self.seed,),
            eval_every=0,
        )
        model = build_model(config, backbone=self.backbone, seed=self.seed)
        records = train(model, list(zip(sequences, labels)), train_cfg, self.seed)
        self.model_ = model
        self.config_ = config
        self.train_records_ = records
        self.n_features_in_ = config.feature_dim
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        sequences = check_gop_sequences(X, feature_dim=self.n_features_in_)
        return predict_utterances(self.model_, sequences, batch_size=self.batch_size)

    def score(self, X, y):
        """Pooled phoneme-score PCC on the given data."""
        check_is_fitted(self, "model_")
        sequences = check_gop_sequences(X, feature_dim=self.n_features_in_)
        labels = check_score_labels(y, sequences)
        result = evaluate(self.model_, list(zip(sequences, labels)))
        return result.phoneme_pcc

    def evaluate(self, X, y):
        """Full pooled metrics (phoneme/word/utterance) on the given data."""
        check_is_fitted(self, "model_")
        sequences = check_gop_sequences(X, feature_dim=self.n_features_in_)
        labels = check_score_labels(y, sequences)
        return evaluate(self.model_, list(zip(sequences, labels)))


__all__ = ["GopFeatureExtractor", "PronunciationScorer"]
