"""Multi-aspect, multi-granularity pronunciation scoring from GOP features.

The pipeline: frame-level phone posteriorgrams plus forced alignments are
turned into per-phone GOP vectors (:mod:`gopt.features`), a small Transformer
(or LSTM) scores them at phoneme, word, and utterance granularity
(:mod:`gopt.model`), trained with a multi-task MSE loss (:mod:`gopt.train`)
on a tape-based float64 autodiff core (:mod:`gopt.autodiff`), and evaluated
with pooled Pearson correlations (:mod:`gopt.metrics`). File formats and the
synthetic test corpus live in :mod:`gopt.data`; :mod:`gopt.estimators` wraps
it all in scikit-learn compatible classes, and ``gopt.cli`` provides the
command-line front end.
"""

from .errors import GoptError
from .estimators import GopFeatureExtractor, PronunciationScorer
from .features import (
    Alignment,
    AlignedSegment,
    GopSequence,
    PhoneInventory,
    PhonePosteriorgram,
    extract_utterance,
    gop_vector,
    lpp,
    lpr,
    phone_posteriors,
)
from .metrics import (
    EvalReport,
    EvalResult,
    ScoreLabels,
    UtterancePrediction,
    aggregate_word_predictions,
    evaluate,
    mse,
    pcc,
    rescale,
)
from .model import GoptModel, LstmModel, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .train import TrainConfig, lr_at_epoch, multitask_loss, propagate_word_scores, train, train_multiseed

__version__ = "0.1.0"

__all__ = [
    "GoptError",
    "GopFeatureExtractor",
    "PronunciationScorer",
    "Alignment",
    "AlignedSegment",
    "GopSequence",
    "PhoneInventory",
    "PhonePosteriorgram",
    "extract_utterance",
    "gop_vector",
    "lpp",
    "lpr",
    "phone_posteriors",
    "EvalReport",
    "EvalResult",
    "ScoreLabels",
    "UtterancePrediction",
    "aggregate_word_predictions",
    "evaluate",
    "mse",
    "pcc",
    "rescale",
    "GoptModel",
    "LstmModel",
    "ModelConfig",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "lr_at_epoch",
    "multitask_loss",
    "propagate_word_scores",
    "train",
    "train_multiseed",
    "__version__",
]
