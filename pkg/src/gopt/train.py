"""Multi-task loss, Adam, the learning-rate schedule, and the training loop.

The loss first averages the per-aspect MSEs inside each granularity and then
sums the three granularity means with equal weight. Summation order is fixed
and documented (see :func:`multitask_loss`), so the decomposition identity
``total == (utterance + word) + phoneme`` holds bitwise.

Word supervision reaches the model through its phones: every phone of a word
receives that word's three scores as targets during training, and word-level
predictions are recovered at inference by averaging phone outputs per word
(see :mod:`gopt.metrics`).

One training run is strictly sequential; separate seeds share nothing and
may run in parallel processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, tape_scope
from .errors import CapacityError, ContractError, LabelError, NumericError
from .features import GopSequence
from .metrics import EvalReport, EvalResult, ScoreLabels, build_report, evaluate
from .model import Batch, BatchOutput, ModelConfig, build_model, make_batch

TASK_CHOICES = ("joint", "phoneme", "word", "utterance")
SCHEDULE_CHOICES = ("after", "from")

Pair = tuple[GopSequence, ScoreLabels]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol: Adam at 1e-3, batches of 25, 100 epochs,
    halving the rate every five epochs once past epoch 20.

    ``schedule`` picks how "past epoch 20" is read: "after" keeps the rate
    constant through epoch 24 and halves at 25, 30, ...; "from" halves
    already at 21, 26, ... . ``tasks`` restricts the loss to one granularity
    for single-task ablations.
    """

    lr0: float = 1e-3
    batch_size: int = 25
    epochs: int = 100
    schedule: str = "after"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tasks: str = "joint"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    eval_every: int = 1

    def __post_init__(self):
        if self.lr0 <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ContractError("lr0, batch_size and epochs must all be positive")
        if self.schedule not in SCHEDULE_CHOICES:
            raise ContractError(f"schedule must be one of {SCHEDULE_CHOICES}")
        if self.tasks not in TASK_CHOICES:
            raise ContractError(f"tasks must be one of {TASK_CHOICES}")
        if not self.seeds:
            raise ContractError("at least one seed is required")
        if self.eval_every < 0:
            raise ContractError("eval_every must be >= 0 (0 disables per-epoch eval)")


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 1-based epoch index.

    Under the default "after" reading the rate is lr0 * 2**(-floor(max(0,
    epoch - 20) / 5)): constant through epoch 24, halved at 25, 30, ...
    The "from" reading starts halving at epoch 21.
    """
    if epoch < 1:
        raise ContractError(f"epochs are 1-based, got {epoch}")
    pivot = 20 if cfg.schedule == "after" else 16
    halvings = max(0, (epoch - pivot) // 5)
    return cfg.lr0 * 0.5**halvings


class AdamState:
    """First/second moment buffers with bias correction, one set per run."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.adam_eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One in-place Adam update from the gradients stored on the tensors.

    Parameters without a gradient (nothing reached them this step) are
    treated as having a zero gradient.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def propagate_word_scores(labels: ScoreLabels, word_of_phone: np.ndarray) -> np.ndarray:
    """Copy each word's three scores onto every one of its phones, (N, 3)."""
    words = np.asarray(word_of_phone, dtype=np.int64)
    w = labels.num_words
    if words.size and (words.min() < 0 or words.max() >= w):
        raise LabelError(
            f"phone refers to word {int(words.max())} but only {w} words are labeled"
        )
    return labels.word_scores[words]


@dataclass(frozen=True)
class BatchTargets:
    """Padded supervision aligned with a Batch; padded cells are zero and
    excluded from every loss through the mask."""

    utterance: np.ndarray  # (B, 5)
    phone: np.ndarray  # (B, N)
    word: np.ndarray  # (B, N, 3)


def make_targets(batch: Batch, pairs: Sequence[Pair]) -> BatchTargets:
    """Targets for a batch built from the same (sequence, labels) pairs."""
    if len(pairs) != batch.num_utterances:
        raise LabelError(f"batch has {batch.num_utterances} utterances but {len(pairs)} pairs")
    b, n = batch.num_utterances, batch.max_len
    utt = np.zeros((b, 5), dtype=np.float64)
    phone = np.zeros((b, n), dtype=np.float64)
    word = np.zeros((b, n, 3), dtype=np.float64)
    for i, (seq, lab) in enumerate(pairs):
        count = len(seq)
        if lab.phone_accuracy.size != count:
            raise LabelError(
                f"utterance {seq.utterance_id!r}: {lab.phone_accuracy.size} phone scores "
                f"for {count} phones"
            )
        utt[i] = lab.utterance_scores
        phone[i, :count] = lab.phone_accuracy
        word[i, :count] = propagate_word_scores(lab, seq.word_of_phone)
    return BatchTargets(utterance=utt, phone=phone, word=word)


def multitask_loss(
    output: BatchOutput, targets: BatchTargets, tasks: str = "joint"
) -> tuple[Tensor, dict[str, float]]:
    """Combined MSE loss plus its per-granularity breakdown.

    Summation order, fixed so the decomposition is reproducible bitwise:
    within a granularity, per-aspect MSEs are added left to right in
    canonical aspect order and divided by the aspect count; the total is
    ``(utterance + word) + phoneme``. Padded positions contribute nothing.
    With ``tasks`` other than "joint" the total is just that granularity's
    mean, though all three are still computed for the breakdown.
    """
    if tasks not in TASK_CHOICES:
        raise ContractError(f"tasks must be one of {TASK_CHOICES}")
    mask = output.mask
    if not mask.any():
        raise ContractError("all positions in the batch are padding")

    utt_terms = []
    for k in range(5):
        diff = ad.sub(ad.select_index(output.utterance, 1, k), Tensor(targets.utterance[:, k]))
        utt_terms.append(ad.mean_all(ad.mul(diff, diff)))
    utt_mean = ad.div_scalar(_sum_left_to_right(utt_terms), 5.0)

    word_terms = []
    for j in range(3):
        diff = ad.sub(ad.select_index(output.word, 2, j), Tensor(targets.word[:, :, j]))
        word_terms.append(ad.masked_mean(ad.mul(diff, diff), mask))
    word_mean = ad.div_scalar(_sum_left_to_right(word_terms), 3.0)

    diff = ad.sub(output.phone, Tensor(targets.phone))
    phoneme_mean = ad.masked_mean(ad.mul(diff, diff), mask)

    if tasks == "joint":
        total = ad.add(ad.add(utt_mean, word_mean), phoneme_mean)
    else:
        total = {"utterance": utt_mean, "word": word_mean, "phoneme": phoneme_mean}[tasks]
    breakdown = {
        "utterance": utt_mean.item(),
        "word": word_mean.item(),
        "phoneme": phoneme_mean.item(),
    }
    return total, breakdown


def _sum_left_to_right(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


@dataclass(frozen=True)
class EpochRecord:
    """One training-log line; rendered tab-separated, '-' where eval was skipped."""

    epoch: int
    lr: float
    loss: float
    loss_utterance: float
    loss_word: float
    loss_phoneme: float
    eval_result: EvalResult | None = None

    TSV_HEADER = (
        "epoch\tlr\tloss\tloss_utt\tloss_word\tloss_phn\tpcc_phn\t"
        "pcc_word_accuracy\tpcc_word_stress\tpcc_word_total\t"
        "pcc_utt_accuracy\tpcc_utt_completeness\tpcc_utt_fluency\t"
        "pcc_utt_prosodic\tpcc_utt_total"
    )

    def to_tsv(self) -> str:
        cells = [
            str(self.epoch),
            format(self.lr, ".10g"),
            format(self.loss, ".10g"),
            format(self.loss_utterance, ".10g"),
            format(self.loss_word, ".10g"),
            format(self.loss_phoneme, ".10g"),
        ]
        if self.eval_result is None:
            cells += ["-"] * 9
        else:
            r = self.eval_result
            pccs = [r.phoneme_pcc, *r.word_pcc, *r.utterance_pcc]
            cells += [format(v, ".10g") for v in pccs]
        return "\t".join(cells)


def train(
    model,
    train_pairs: Sequence[Pair],
    cfg: TrainConfig,
    seed: int,
    test_pairs: Sequence[Pair] | None = None,
    log_fn: Callable[[str], None] | None = None,
) -> list[EpochRecord]:
    """Train in place for cfg.epochs and return the per-epoch log.

    Each epoch shuffles the training utterances with the run's seeded
    generator and walks them in batches of cfg.batch_size (the final short
    batch is kept). The model of the last epoch is what remains; there is no
    early stopping or model selection. A non-finite loss aborts immediately.
    """
    if not train_pairs:
        raise ContractError("training set is empty")
    train_pairs = list(train_pairs)
    test_pairs = list(test_pairs) if test_pairs else []
    # Fail fast on capacity before spending epochs.
    for seq, _ in train_pairs + test_pairs:
        if len(seq) > model.config.max_phones:
            raise CapacityError(
                f"utterance {seq.utterance_id!r} has {len(seq)} phones, "
                f"model capacity is {model.config.max_phones}"
            )
    rng = np.random.default_rng(seed)
    params = model.parameters()
    state = AdamState(params, cfg)
    records: list[EpochRecord] = []
    if log_fn:
        log_fn(EpochRecord.TSV_HEADER)
    n = len(train_pairs)
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(epoch, cfg)
        order = rng.permutation(n)
        seen = 0
        sums = {"total": 0.0, "utterance": 0.0, "word": 0.0, "phoneme": 0.0}
        for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
            chunk = [train_pairs[j] for j in order[start : start + cfg.batch_size]]
            batch = make_batch([seq for seq, _ in chunk], model.config)
            targets = make_targets(batch, chunk)
            try:
                with tape_scope():
                    out = model.forward(
                        batch, dropout_rng=rng if model.config.dropout > 0 else None
                    )
                    total, breakdown = multitask_loss(out, targets, cfg.tasks)
                    loss_value = total.item()
                    if not math.isfinite(loss_value):
                        raise NumericError("non-finite loss")
                    backward(total)
            except NumericError as exc:
                raise NumericError(
                    f"{exc} at epoch {epoch}, batch {batch_index}"
                ) from exc
            adam_step(params, state, lr)
            weight = batch.num_utterances
            seen += weight
            sums["total"] += loss_value * weight
            for key in ("utterance", "word", "phoneme"):
                sums[key] += breakdown[key] * weight
        do_eval = bool(test_pairs) and (
            (cfg.eval_every > 0 and epoch % cfg.eval_every == 0) or epoch == cfg.epochs
        )
        result = evaluate(model, test_pairs) if do_eval else None
        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            loss=sums["total"] / seen,
            loss_utterance=sums["utterance"] / seen,
            loss_word=sums["word"] / seen,
            loss_phoneme=sums["phoneme"] / seen,
            eval_result=result,
        )
        records.append(record)
        if log_fn:
            log_fn(record.to_tsv())
    return records


@dataclass
class SeedRun:
    seed: int
    model: object
    records: list[EpochRecord]
    result: EvalResult


@dataclass
class MultiSeedResult:
    runs: list[SeedRun]
    report: EvalReport


def train_multiseed(
    model_config: ModelConfig,
    train_pairs: Sequence[Pair],
    test_pairs: Sequence[Pair],
    cfg: TrainConfig,
    backbone: str = "gopt",
    log_fn: Callable[[int, str], None] | None = None,
) -> MultiSeedResult:
    """Run the protocol once per seed and aggregate last-epoch test metrics."""
    if not test_pairs:
        raise ContractError("multi-seed training needs a test set to report on")
    runs: list[SeedRun] = []
    for seed in cfg.seeds:
        model = build_model(model_config, backbone=backbone, seed=seed)
        seed_log = (lambda line, s=seed: log_fn(s, line)) if log_fn else None
        records = train(model, train_pairs, cfg, seed, test_pairs=test_pairs, log_fn=seed_log)
        result = records[-1].eval_result
        if result is None:  # eval_every == 0 still evaluates the last epoch
            result = evaluate(model, test_pairs)
        runs.append(SeedRun(seed=seed, model=model, records=records, result=result))
    report = build_report([r.result for r in runs])
    return MultiSeedResult(runs=runs, report=report)
