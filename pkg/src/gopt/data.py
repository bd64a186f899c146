"""File formats, dataset manifests, and a synthetic planted-model generator.

Binary formats (all little-endian, float64, exact-length checked):

* feature file  -- magic ``GOPF``, version u32 = 1, P u32, N u32, the N x 2P
  feature matrix row-major, N u32 canonical phone indices, N u32 word
  indices. Exactly ``16 + N*2P*8 + N*8`` bytes.
* posteriorgram -- magic ``POST``, T u32, S u32, the T x S posterior matrix.

Text formats:

* inventory -- one phone symbol per line (line number = phone index), plus
  "state_index phone_index" pairs on two-token lines mapping every acoustic
  state to its phone; blank lines and ``#`` comments are ignored.
* alignment -- one "phone_index start_frame end_frame word_index" line per
  segment, frame endpoints inclusive.
* manifest  -- JSON lines, one utterance per line with fields ``id``,
  ``phones``, ``words``, ``scores`` {phone[], word[][], utt[]}, ``feat_path``
  (or ``post_path`` + ``align_path`` for extraction on load), ``split``.
  Scores are stored on their native scales (phone 0-2, word/utterance 0-10)
  and rescaled onto 0-2 while loading.

Word indices are per-utterance, 0-based and contiguous; nothing ever needs a
global word identity. All readers reject trailing bytes. Loaded objects are
read-only; loading different files from different threads is safe.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, LabelError
from .features import (
    AlignedSegment,
    Alignment,
    GopSequence,
    PhoneInventory,
    PhonePosteriorgram,
    extract_utterance,
)
from .metrics import ScoreLabels, rescale

FEATURE_MAGIC = b"GOPF"
FEATURE_VERSION = 1
POSTERIOR_MAGIC = b"POST"

# Reference sizes of the speechocean762-derived corpus: (utterances, words,
# phones) per split. Loading a manifest that claims to be the official one
# but disagrees with these should raise eyebrows, not exceptions.
OFFICIAL_COUNTS = {"train": (2500, 15849, 47076), "test": (2500, 15967, 47369)}

_SPLITS = ("train", "test")


# ---------------------------------------------------------------------------
# feature files


def write_feature_file(path, seq: GopSequence) -> None:
    path = Path(path)
    n = len(seq)
    p = seq.num_phones_in_inventory
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, p, n))
        fh.write(seq.features.astype("<f8", copy=False).tobytes())
        fh.write(seq.canonical_phones.astype("<u4").tobytes())
        fh.write(seq.word_of_phone.astype("<u4").tobytes())


def read_feature_file(path, utterance_id: str = "") -> GopSequence:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16:
        raise DataFormatError(f"{path}: too short for a feature file ({len(blob)} bytes)")
    if blob[:4] != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, p, n = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported feature-file version {version}")
    expected = 16 + n * 2 * p * 8 + n * 8
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes for N={n}, P={p}, found {len(blob)}"
        )
    offset = 16
    feats = np.frombuffer(blob, dtype="<f8", count=n * 2 * p, offset=offset)
    feats = feats.astype(np.float64).reshape(n, 2 * p)
    offset += n * 2 * p * 8
    phones = np.frombuffer(blob, dtype="<u4", count=n, offset=offset).astype(np.int64)
    offset += n * 4
    words = np.frombuffer(blob, dtype="<u4", count=n, offset=offset).astype(np.int64)
    if n and phones.max() >= p:
        raise DataFormatError(f"{path}: canonical phone {int(phones.max())} outside inventory of {p}")
    return GopSequence(
        features=feats,
        canonical_phones=phones,
        word_of_phone=words,
        utterance_id=utterance_id or path.stem,
    )


# ---------------------------------------------------------------------------
# posteriorgrams, alignments, inventories


def write_posteriorgram(path, pg: PhonePosteriorgram) -> None:
    with open(path, "wb") as fh:
        fh.write(POSTERIOR_MAGIC)
        fh.write(struct.pack("<II", pg.num_frames, pg.num_states))
        fh.write(pg.probs.astype("<f8", copy=False).tobytes())


def load_posteriorgram(path) -> PhonePosteriorgram:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != POSTERIOR_MAGIC:
        raise DataFormatError(f"{path}: not a posteriorgram file")
    frames, states = struct.unpack("<II", blob[4:12])
    expected = 12 + frames * states * 8
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes for T={frames}, S={states}, found {len(blob)}"
        )
    probs = np.frombuffer(blob, dtype="<f8", offset=12).astype(np.float64)
    try:
        return PhonePosteriorgram(probs.reshape(frames, states))
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def _content_lines(path) -> list[tuple[int, str]]:
    lines = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if text:
            lines.append((lineno, text))
    return lines


def write_alignment(path, alignment: Alignment) -> None:
    with open(path, "w") as fh:
        for seg in alignment.segments:
            fh.write(f"{seg.phone} {seg.start} {seg.end} {seg.word}\n")


def load_alignment(path) -> Alignment:
    segments = []
    for lineno, text in _content_lines(path):
        parts = text.split()
        if len(parts) != 4:
            raise DataFormatError(
                f"{path}:{lineno}: expected 'phone start end word', got {text!r}"
            )
        try:
            phone, start, end, word = (int(v) for v in parts)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: non-integer field in {text!r}") from exc
        segments.append(AlignedSegment(phone=phone, start=start, end=end, word=word))
    return Alignment(tuple(segments))


def write_inventory(path, inventory: PhoneInventory) -> None:
    with open(path, "w") as fh:
        for name in inventory.names:
            fh.write(f"{name}\n")
        for state, phone in enumerate(inventory.state_to_phone):
            fh.write(f"{state} {int(phone)}\n")


def load_inventory(path) -> PhoneInventory:
    """Parse the combined inventory file.

    One-token lines are phone symbols in index order; two-token lines are
    "state_index phone_index" map entries. States must cover 0..S-1 exactly
    once.
    """
    names: list[str] = []
    mapping: dict[int, int] = {}
    for lineno, text in _content_lines(path):
        parts = text.split()
        if len(parts) == 1:
            if mapping:
                raise DataFormatError(
                    f"{path}:{lineno}: phone symbol after state map entries"
                )
            names.append(parts[0])
        elif len(parts) == 2:
            try:
                state, phone = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad state map entry {text!r}") from exc
            if state in mapping:
                raise DataFormatError(f"{path}:{lineno}: state {state} mapped twice")
            mapping[state] = phone
        else:
            raise DataFormatError(f"{path}:{lineno}: unrecognized line {text!r}")
    if not names:
        raise DataFormatError(f"{path}: no phone symbols found")
    if not mapping:
        raise DataFormatError(f"{path}: no state map entries found")
    num_states = max(mapping) + 1
    if sorted(mapping) != list(range(num_states)):
        missing = sorted(set(range(num_states)) - set(mapping))
        raise DataFormatError(f"{path}: state indices not contiguous, missing {missing[:5]}")
    state_to_phone = np.array([mapping[s] for s in range(num_states)], dtype=np.int64)
    return PhoneInventory(names=tuple(names), state_to_phone=state_to_phone)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class Utterance:
    id: str
    gop: GopSequence
    labels: ScoreLabels
    split: str


@dataclass(frozen=True)
class Dataset:
    utterances: tuple[Utterance, ...]

    def split(self, name: str) -> list[Utterance]:
        if name not in _SPLITS:
            raise LabelError(f"split must be one of {_SPLITS}, got {name!r}")
        return [u for u in self.utterances if u.split == name]

    def pairs(self, name: str) -> list[tuple[GopSequence, ScoreLabels]]:
        return [(u.gop, u.labels) for u in self.split(name)]

    def counts(self, name: str) -> tuple[int, int, int]:
        """(utterances, words, phones) in a split."""
        utts = self.split(name)
        words = sum(u.labels.num_words for u in utts)
        phones = sum(len(u.gop) for u in utts)
        return len(utts), words, phones

    @property
    def num_phones_in_inventory(self) -> int:
        if not self.utterances:
            raise LabelError("empty dataset has no inventory size")
        return self.utterances[0].gop.num_phones_in_inventory

    @property
    def max_utterance_length(self) -> int:
        return max((len(u.gop) for u in self.utterances), default=0)


def check_official_counts(dataset: Dataset) -> list[str]:
    """Compare split sizes against the reference corpus; return mismatches."""
    problems = []
    for split_name, expected in OFFICIAL_COUNTS.items():
        got = dataset.counts(split_name)
        if got != expected:
            problems.append(
                f"{split_name} split has utterances/words/phones {got}, "
                f"official corpus has {expected}"
            )
    return problems


def _check_scores_raw(record_id: str, phone, word, utt) -> None:
    phone = np.asarray(phone, dtype=np.float64)
    word = np.asarray(word, dtype=np.float64)
    utt = np.asarray(utt, dtype=np.float64)
    if phone.size and (phone.min() < 0.0 or phone.max() > 2.0):
        raise DataFormatError(f"utterance {record_id!r}: phone score outside [0, 2]")
    for name, arr in (("word", word), ("utterance", utt)):
        if arr.size and (arr.min() < 0.0 or arr.max() > 10.0):
            raise DataFormatError(f"utterance {record_id!r}: {name} score outside [0, 10]")


def _labels_from_raw(record_id: str, phone, word, utt) -> ScoreLabels:
    _check_scores_raw(record_id, phone, word, utt)
    word = np.asarray(word, dtype=np.float64).reshape(-1, 3)
    utt = np.asarray(utt, dtype=np.float64).reshape(-1)
    # Rescaling 10 -> 2 can overshoot by one ulp; clamp to the unified range.
    return ScoreLabels(
        phone_accuracy=np.asarray(phone, dtype=np.float64),
        word_scores=np.clip(rescale(word, "word"), 0.0, 2.0),
        utterance_scores=np.clip(rescale(utt, "utterance"), 0.0, 2.0),
    )


def load_manifest(path, inventory: PhoneInventory | None = None) -> Dataset:
    """Load a JSON-lines manifest and every feature file it references.

    Records carrying ``post_path``/``align_path`` instead of ``feat_path``
    are extracted on the fly, which requires ``inventory``. Errors carry the
    utterance id wherever one is known.
    """
    path = Path(path)
    base = path.parent
    seen: set[str] = set()
    utterances: list[Utterance] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            uid = rec["id"]
            phones = np.asarray(rec["phones"], dtype=np.int64)
            words = np.asarray(rec["words"], dtype=np.int64)
            scores = rec["scores"]
            split_name = rec["split"]
        except KeyError as exc:
            raise DataFormatError(f"{path}:{lineno}: missing manifest field {exc}") from exc
        if uid in seen:
            raise DataFormatError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
        seen.add(uid)
        if split_name not in _SPLITS:
            raise DataFormatError(f"utterance {uid!r}: unknown split {split_name!r}")

        if "feat_path" in rec:
            feat_path = base / rec["feat_path"]
            if not feat_path.is_file():
                raise DataFormatError(f"utterance {uid!r}: feature file {feat_path} missing")
            seq = read_feature_file(feat_path, utterance_id=uid)
        elif "post_path" in rec and "align_path" in rec:
            if inventory is None:
                raise DataFormatError(
                    f"utterance {uid!r} needs extraction but no inventory was supplied"
                )
            pg = load_posteriorgram(base / rec["post_path"])
            alignment = load_alignment(base / rec["align_path"])
            seq = extract_utterance(pg, alignment, inventory, utterance_id=uid)
        else:
            raise DataFormatError(
                f"utterance {uid!r}: needs feat_path or post_path+align_path"
            )

        if not np.array_equal(seq.canonical_phones, phones):
            raise DataFormatError(
                f"utterance {uid!r}: manifest phones disagree with the feature data"
            )
        if not np.array_equal(seq.word_of_phone, words):
            raise DataFormatError(
                f"utterance {uid!r}: manifest word indices disagree with the feature data"
            )
        try:
            labels = _labels_from_raw(uid, scores["phone"], scores["word"], scores["utt"])
        except KeyError as exc:
            raise DataFormatError(f"utterance {uid!r}: missing score block {exc}") from exc
        if labels.phone_accuracy.size != len(seq):
            raise DataFormatError(
                f"utterance {uid!r}: {labels.phone_accuracy.size} phone scores "
                f"for {len(seq)} phones"
            )
        expected_words = int(words.max()) + 1 if words.size else 0
        if labels.num_words != expected_words:
            raise DataFormatError(
                f"utterance {uid!r}: {labels.num_words} word-score rows "
                f"for {expected_words} words"
            )
        utterances.append(Utterance(id=uid, gop=seq, labels=labels, split=split_name))
    if not utterances:
        raise DataFormatError(f"{path}: manifest contains no utterances")
    return Dataset(utterances=tuple(utterances))


def write_manifest(dataset: Dataset, out_dir, feature_subdir: str = "features") -> Path:
    """Write feature files plus a manifest.jsonl; returns the manifest path.

    Scores go out on their native scales, so word/utterance values are
    multiplied back to 0-10.
    """
    out_dir = Path(out_dir)
    feat_dir = out_dir / feature_subdir
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for utt in dataset.utterances:
            feat_rel = f"{feature_subdir}/{utt.id}.gopf"
            write_feature_file(out_dir / feat_rel, utt.gop)
            record = {
                "id": utt.id,
                "phones": [int(v) for v in utt.gop.canonical_phones],
                "words": [int(v) for v in utt.gop.word_of_phone],
                "scores": {
                    "phone": [float(v) for v in utt.labels.phone_accuracy],
                    "word": [[float(v * 5.0) for v in row] for row in utt.labels.word_scores],
                    "utt": [float(v * 5.0) for v in utt.labels.utterance_scores],
                },
                "feat_path": feat_rel,
                "split": utt.split,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# synthetic data with a planted linear scoring model


@dataclass(frozen=True)
class SyntheticConfig:
    """Shape of the generated corpus; defaults give the acceptance-scale set."""

    num_train: int = 500
    num_test: int = 200
    num_phones: int = 10
    min_phones: int = 5
    max_phones: int = 11
    max_word_len: int = 3
    noise_sigma: float = 0.05


@dataclass(frozen=True)
class PlantedModel:
    """Ground truth of the generator: score = features @ w + offset[phone] + intercept."""

    w: np.ndarray
    phone_offsets: np.ndarray
    intercept: float


@dataclass(frozen=True)
class SyntheticData:
    dataset: Dataset
    planted: PlantedModel
    config: SyntheticConfig


# Per-aspect affine jitter applied to utterance scores so the five aspects
# stay distinct but correlated.
_UTT_SLOPES = (1.0, 0.85, 0.95, 1.05, 1.0)
_UTT_OFFSETS = (0.0, 0.25, 0.08, -0.05, 0.0)


def generate_synthetic(config: SyntheticConfig, seed: int) -> SyntheticData:
    """Build a corpus whose scores follow a known linear map.

    The generative process, which tests rely on:

    * Feature rows are GOP-shaped: a random LPP-like block with entries in
      [-4, -0.05] followed by an LPR-like block in [-4, 4] whose canonical
      entry is exactly 0. The two blocks are drawn independently (real
      extraction derives one from the other, which makes the columns
      linearly dependent; independence keeps the feature matrix full rank
      so least squares identifies ``w`` uniquely). Block values carry no
      information about the canonical phone beyond the zeroed slot.
    * Phone score = features @ w + phone_offsets[canonical] + intercept +
      Normal(0, noise_sigma), clipped to [0, 2]. The planted parameters are
      affinely calibrated so that noise-free scores span [0.15, 1.85]; with
      noise_sigma == 0 the clip never binds and ordinary least squares on
      [features, one-hot(canonical)] recovers ``w`` exactly.
    * The phone-offset term carries a substantial share of the variance, so
      a model denied the canonical-phoneme embedding has a visibly lower
      phoneme-score ceiling.
    * Word scores are the mean of the member phones' scores (same value for
      all three aspects); utterance scores apply fixed per-aspect affine
      jitter to the utterance-mean phone score. Everything is clipped to
      [0, 2].

    The same (config, seed) always produces byte-identical datasets.
    """
    if config.min_phones < 1 or config.max_phones < config.min_phones:
        raise LabelError("need 1 <= min_phones <= max_phones")
    rng = np.random.default_rng(seed)
    p = config.num_phones
    w_raw = rng.uniform(-1.0, 1.0, size=2 * p)
    offsets_raw = rng.uniform(-1.0, 1.0, size=p) * 5.0

    total = config.num_train + config.num_test
    lengths = rng.integers(config.min_phones, config.max_phones + 1, size=total)
    per_utt = []
    raw_scores = []
    for n in lengths:
        canon = rng.integers(0, p, size=n)
        words = np.zeros(n, dtype=np.int64)
        pos, word_index = 0, 0
        while pos < n:
            step = int(rng.integers(1, config.max_word_len + 1))
            words[pos : pos + step] = word_index
            pos += step
            word_index += 1
        base = rng.uniform(-4.0, -0.05, size=(n, p))
        ratios = rng.uniform(-4.0, 4.0, size=(n, p))
        ratios[np.arange(n), canon] = 0.0
        feats = np.concatenate([base, ratios], axis=1)
        raw = feats @ w_raw + offsets_raw[canon]
        per_utt.append((canon, words, feats))
        raw_scores.append(raw)

    flat = np.concatenate(raw_scores)
    lo, hi = 0.15, 1.85
    alpha = (hi - lo) / (flat.max() - flat.min())
    beta = lo - alpha * flat.min()
    planted = PlantedModel(
        w=w_raw * alpha, phone_offsets=offsets_raw * alpha, intercept=float(beta)
    )

    utterances = []
    for i, ((canon, words, feats), raw) in enumerate(zip(per_utt, raw_scores)):
        split_name = "train" if i < config.num_train else "test"
        noise = rng.normal(0.0, config.noise_sigma, size=raw.shape) if config.noise_sigma else 0.0
        phone_scores = np.clip(alpha * raw + beta + noise, 0.0, 2.0)
        word_means = np.bincount(words, weights=phone_scores) / np.bincount(words)
        word_scores = np.repeat(word_means[:, None], 3, axis=1)
        mean_score = phone_scores.mean()
        utt_scores = np.clip(
            np.array(_UTT_SLOPES) * mean_score + np.array(_UTT_OFFSETS), 0.0, 2.0
        )
        uid = f"syn{i:05d}"
        utterances.append(
            Utterance(
                id=uid,
                gop=GopSequence(
                    features=feats,
                    canonical_phones=canon,
                    word_of_phone=words,
                    utterance_id=uid,
                ),
                labels=ScoreLabels(
                    phone_accuracy=phone_scores,
                    word_scores=np.clip(word_scores, 0.0, 2.0),
                    utterance_scores=utt_scores,
                ),
                split=split_name,
            )
        )
    return SyntheticData(
        dataset=Dataset(utterances=tuple(utterances)), planted=planted, config=config
    )
