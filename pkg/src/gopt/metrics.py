"""Score scaling, agreement metrics, and test-set evaluation reports.

Labels arrive on two native scales: phone accuracy already lives on 0-2,
word and utterance scores on 0-10. :func:`rescale` maps everything onto the
unified 0-2 scale the model trains on. Pearson correlation is unaffected by
that affine map, which :func:`evaluate` relies on (and tests assert).

All functions here operate on frozen predictions and labels; they hold no
state and are safe to call concurrently.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ContractError, DegenerateDataError, DimensionError, LabelError

if TYPE_CHECKING:  # pragma: no cover
    from .features import GopSequence

UTTERANCE_ASPECTS = ("accuracy", "completeness", "fluency", "prosodic", "total")
WORD_ASPECTS = ("accuracy", "stress", "total")

# Multiplier taking raw 0-10 word/utterance scores onto the unified 0-2 scale.
WORD_UTTERANCE_SCALE = 0.2

_GRANULARITIES = ("phoneme", "word", "utterance")


@dataclass(frozen=True)
class ScoreLabels:
    """Supervision targets for one utterance, on the unified 0-2 scale.

    ``phone_accuracy`` holds one score per aligned phone, ``word_scores`` one
    (accuracy, stress, total) row per word, ``utterance_scores`` the five
    aspects in UTTERANCE_ASPECTS order.
    """

    phone_accuracy: np.ndarray
    word_scores: np.ndarray
    utterance_scores: np.ndarray

    def __post_init__(self):
        phone = np.ascontiguousarray(np.asarray(self.phone_accuracy, dtype=np.float64))
        word = np.ascontiguousarray(np.asarray(self.word_scores, dtype=np.float64))
        utt = np.ascontiguousarray(np.asarray(self.utterance_scores, dtype=np.float64))
        object.__setattr__(self, "phone_accuracy", phone)
        object.__setattr__(self, "word_scores", word)
        object.__setattr__(self, "utterance_scores", utt)
        if phone.ndim != 1:
            raise LabelError(f"phone scores must be 1-d, got shape {phone.shape}")
        if word.ndim != 2 or word.shape[1] != len(WORD_ASPECTS):
            raise LabelError(f"word scores must be (W, 3), got shape {word.shape}")
        if utt.shape != (len(UTTERANCE_ASPECTS),):
            raise LabelError(f"utterance scores must be (5,), got shape {utt.shape}")
        for name, arr in (("phone", phone), ("word", word), ("utterance", utt)):
            if arr.size and (arr.min() < 0.0 or arr.max() > 2.0):
                raise LabelError(f"{name} scores outside the unified [0, 2] scale")

    @property
    def num_words(self) -> int:
        return self.word_scores.shape[0]


def rescale(raw, granularity: str):
    """Map a raw score onto the unified 0-2 scale.

    Word and utterance scores (natively 0-10) are multiplied by 0.2; phoneme
    scores are already on 0-2 and pass through unchanged. Accepts scalars or
    arrays.
    """
    if granularity not in _GRANULARITIES:
        raise ContractError(f"granularity must be one of {_GRANULARITIES}, got {granularity!r}")
    if granularity == "phoneme":
        return raw
    if isinstance(raw, np.ndarray):
        return raw * WORD_UTTERANCE_SCALE
    return float(raw) * WORD_UTTERANCE_SCALE


def pcc(x, y) -> float:
    """Pearson correlation coefficient of two equal-length vectors.

    Raises DegenerateDataError instead of returning NaN when either input is
    constant, since the statistic is undefined there.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise DimensionError(f"pcc needs equal lengths, got {x.size} and {y.size}")
    if x.size < 2:
        raise ContractError(f"pcc needs at least 2 points, got {x.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(np.dot(xc, xc)))
    sy = float(np.sqrt(np.dot(yc, yc)))
    if sx == 0.0 and sy == 0.0:
        raise DegenerateDataError("pcc undefined: both inputs are constant")
    if sx == 0.0 or sy == 0.0:
        which = "first" if sx == 0.0 else "second"
        raise DegenerateDataError(f"pcc undefined: the {which} input is constant")
    r = float(np.dot(xc, yc) / (sx * sy))
    return min(1.0, max(-1.0, r))


def mse(x, y) -> float:
    """Mean squared error between two equal-length vectors."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise DimensionError(f"mse needs equal lengths, got {x.size} and {y.size}")
    if x.size == 0:
        raise ContractError("mse of empty vectors")
    d = x - y
    return float(np.dot(d, d) / d.size)


def aggregate_word_predictions(
    phone_level_scores: np.ndarray, word_of_phone: np.ndarray
) -> np.ndarray:
    """Average per-phone word-score predictions within each word.

    ``phone_level_scores`` is (N, 3); the result is (W, 3) with W the number
    of distinct word indices, which must be contiguous from 0.
    """
    scores = np.asarray(phone_level_scores, dtype=np.float64)
    words = np.asarray(word_of_phone, dtype=np.int64)
    if scores.ndim != 2:
        raise DimensionError(f"phone-level word scores must be 2-d, got {scores.shape}")
    if words.shape != (scores.shape[0],):
        raise DimensionError(
            f"word_of_phone length {words.shape} does not match {scores.shape[0]} phones"
        )
    if words.size == 0:
        return np.zeros((0, scores.shape[1]), dtype=np.float64)
    if words.min() < 0:
        raise LabelError("negative word index")
    w = int(words.max()) + 1
    counts = np.bincount(words, minlength=w)
    if (counts == 0).any():
        raise LabelError(f"word indices are not contiguous: no phones for word {int(np.flatnonzero(counts == 0)[0])}")
    sums = np.zeros((w, scores.shape[1]), dtype=np.float64)
    np.add.at(sums, words, scores)
    return sums / counts[:, None]


@dataclass(frozen=True)
class UtterancePrediction:
    """Model outputs for one utterance, already aggregated to word level."""

    phone_scores: np.ndarray
    word_scores: np.ndarray
    utterance_scores: np.ndarray


def predict_utterances(model, sequences: Sequence["GopSequence"], batch_size: int = 25):
    """Run the scorer on GOP sequences and aggregate word heads per word."""
    from .model import make_batch  # local import keeps module load order flexible

    if batch_size < 1:
        raise ContractError(f"batch_size must be positive, got {batch_size}")
    predictions: list[UtterancePrediction] = []
    for start in range(0, len(sequences), batch_size):
        chunk = list(sequences[start : start + batch_size])
        batch = make_batch(chunk, model.config)
        out = model.forward(batch)
        utt = out.utterance.data
        phone = out.phone.data
        word = out.word.data
        for i, seq in enumerate(chunk):
            n = len(seq)
            predictions.append(
                UtterancePrediction(
                    phone_scores=phone[i, :n].copy(),
                    word_scores=aggregate_word_predictions(word[i, :n], seq.word_of_phone),
                    utterance_scores=utt[i].copy(),
                )
            )
    return predictions


@dataclass(frozen=True)
class EvalResult:
    """Pooled test-set metrics for a single trained model."""

    phoneme_pcc: float
    phoneme_mse: float
    word_pcc: tuple[float, float, float]
    utterance_pcc: tuple[float, float, float, float, float]
    num_phones: int
    num_words: int
    num_utterances: int

    def metric_vector(self) -> np.ndarray:
        """All ten metrics in report order (phoneme mse, phoneme pcc, words, utterances)."""
        return np.array(
            [self.phoneme_mse, self.phoneme_pcc, *self.word_pcc, *self.utterance_pcc]
        )


def evaluate(model, pairs: Sequence[tuple["GopSequence", ScoreLabels]]) -> EvalResult:
    """Score every test utterance and pool predictions across the whole set.

    Phones are pooled individually, words after per-word averaging of the
    phone-level word heads, utterances one row each. Correlations are
    computed on the pooled vectors, not averaged per utterance.
    """
    if not pairs:
        raise ContractError("evaluate needs at least one labeled utterance")
    sequences = [seq for seq, _ in pairs]
    predictions = predict_utterances(model, sequences)

    phone_pred = np.concatenate([p.phone_scores for p in predictions])
    phone_true = np.concatenate([labels.phone_accuracy for _, labels in pairs])
    word_pred = np.concatenate([p.word_scores for p in predictions])
    word_true = np.concatenate([labels.word_scores for _, labels in pairs])
    utt_pred = np.stack([p.utterance_scores for p in predictions])
    utt_true = np.stack([labels.utterance_scores for _, labels in pairs])
    if word_pred.shape != word_true.shape:
        raise LabelError(
            f"word count mismatch between predictions {word_pred.shape} "
            f"and labels {word_true.shape}"
        )

    return EvalResult(
        phoneme_pcc=pcc(phone_pred, phone_true),
        phoneme_mse=mse(phone_pred, phone_true),
        word_pcc=tuple(pcc(word_pred[:, j], word_true[:, j]) for j in range(3)),
        utterance_pcc=tuple(pcc(utt_pred[:, k], utt_true[:, k]) for k in range(5)),
        num_phones=int(phone_true.size),
        num_words=int(word_true.shape[0]),
        num_utterances=len(pairs),
    )


@dataclass(frozen=True)
class ReportRow:
    task: str
    metric: str
    mean: float
    std: float
    n: int


@dataclass(frozen=True)
class EvalReport:
    """Per-task metrics aggregated over seeds (mean and population std)."""

    rows: tuple[ReportRow, ...]
    num_seeds: int

    def row(self, task: str, metric: str) -> ReportRow:
        for r in self.rows:
            if r.task == task and r.metric == metric:
                return r
        raise KeyError(f"no report row for task={task!r} metric={metric!r}")

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("task,metric,mean,std,n\n")
        for r in self.rows:
            out.write(f"{r.task},{r.metric},{r.mean:.6f},{r.std:.6f},{r.n}\n")
        return out.getvalue()

    def to_text(self) -> str:
        """Aligned table with one metric column per task, mean +/- std."""
        headers = ["Phn MSE", "Phn PCC"]
        headers += [f"Word {a.title()}" for a in WORD_ASPECTS]
        headers += [f"Utt {a.title()}" for a in UTTERANCE_ASPECTS]
        cells = []
        order = [("phoneme", "mse"), ("phoneme", "pcc")]
        order += [(f"word.{a}", "pcc") for a in WORD_ASPECTS]
        order += [(f"utterance.{a}", "pcc") for a in UTTERANCE_ASPECTS]
        for task, metric in order:
            r = self.row(task, metric)
            cells.append(f"{r.mean:.3f}±{r.std:.3f}")
        width = max(len(h) for h in headers + cells) + 2
        lines = [
            "".join(h.rjust(width) for h in headers),
            "".join(c.rjust(width) for c in cells),
        ]
        counts = self.row("phoneme", "pcc").n, self.row("word.accuracy", "pcc").n, self.row(
            "utterance.total", "pcc"
        ).n
        lines.append(
            f"seeds={self.num_seeds}  phones={counts[0]}  words={counts[1]}  "
            f"utterances={counts[2]}"
        )
        return "\n".join(lines)


def build_report(results: Sequence[EvalResult]) -> EvalReport:
    """Aggregate per-seed evaluation results into mean +/- std rows."""
    if not results:
        raise ContractError("cannot build a report from zero results")
    matrix = np.stack([r.metric_vector() for r in results])
    means = matrix.mean(axis=0)
    stds = matrix.std(axis=0)  # population std over seeds
    first = results[0]
    names = [("phoneme", "mse", first.num_phones), ("phoneme", "pcc", first.num_phones)]
    names += [(f"word.{a}", "pcc", first.num_words) for a in WORD_ASPECTS]
    names += [(f"utterance.{a}", "pcc", first.num_utterances) for a in UTTERANCE_ASPECTS]
    rows = tuple(
        ReportRow(task=t, metric=m, mean=float(means[i]), std=float(stds[i]), n=n)
        for i, (t, m, n) in enumerate(names)
    )
    return EvalReport(rows=rows, num_seeds=len(results))
