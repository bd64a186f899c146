"""Goodness-of-pronunciation features from phone posteriorgrams.

A forced alignment assigns each canonical phone a frame span inside a
frames-by-states posterior matrix. For every aligned phone this module
computes the segment-averaged log phone posterior (LPP) over the whole
inventory, the log posterior ratio (LPR) of every phone against the
canonical one, and concatenates the two into one GOP vector of width 2P.

Everything here is pure float64 numpy; the scoring model wraps the results
in autodiff tensors itself. Functions are side-effect free, so calling them
from several threads on distinct utterances is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignmentError,
    BoundsError,
    DataFormatError,
    DimensionError,
    InventoryError,
    SegmentError,
)

# Posteriors are clamped here before the log; exact zeros otherwise map to
# -inf and poison every downstream mean.
POSTERIOR_FLOOR = 1e-10

# Maximum deviation of a posterior row sum from 1 accepted on load.
ROW_SUM_TOLERANCE = 1e-3


@dataclass(frozen=True)
class PhoneInventory:
    """The pure-phone set and the acoustic-state-to-phone membership map.

    ``state_to_phone[s]`` gives the phone owning acoustic state ``s``. Every
    state maps to exactly one phone and every phone owns at least one state.
    """

    names: tuple[str, ...]
    state_to_phone: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        mapping = np.asarray(self.state_to_phone, dtype=np.int64)
        object.__setattr__(self, "state_to_phone", mapping)
        p = len(self.names)
        if p < 2:
            raise InventoryError(f"inventory needs at least 2 phones, got {p}")
        if mapping.ndim != 1 or mapping.size == 0:
            raise InventoryError("state_to_phone must be a non-empty 1-d index array")
        if mapping.min() < 0 or mapping.max() >= p:
            raise InventoryError(
                f"state_to_phone references phone {int(mapping.max())} "
                f"but the inventory has only {p} phones"
            )
        owned = np.bincount(mapping, minlength=p)
        if (owned == 0).any():
            missing = [self.names[i] for i in np.flatnonzero(owned == 0)]
            raise InventoryError(f"phones with no acoustic state: {missing}")

    @property
    def num_phones(self) -> int:
        return len(self.names)

    @property
    def num_states(self) -> int:
        return int(self.state_to_phone.size)


@dataclass(frozen=True)
class PhonePosteriorgram:
    """Frames-by-states posterior matrix; rows are per-frame distributions."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.ascontiguousarray(np.asarray(self.probs, dtype=np.float64))
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 2:
            raise DimensionError(f"posteriorgram must be 2-d, got shape {probs.shape}")
        if probs.size:
            if probs.min() < 0.0 or probs.max() > 1.0:
                raise DataFormatError("posteriorgram entries must lie in [0, 1]")
            sums = probs.sum(axis=1)
            bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOLERANCE)
            if bad.size:
                t = int(bad[0])
                raise DataFormatError(
                    f"posterior row {t} sums to {sums[t]:.6f}, "
                    f"outside 1 +/- {ROW_SUM_TOLERANCE}"
                )

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    @property
    def num_states(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class AlignedSegment:
    """One canonical phone aligned to an inclusive frame span."""

    phone: int
    start: int
    end: int
    word: int


@dataclass(frozen=True)
class Alignment:
    """Ordered, non-overlapping phone segments with word membership."""

    segments: tuple[AlignedSegment, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        previous: AlignedSegment | None = None
        for i, seg in enumerate(self.segments):
            if seg.start < 0:
                raise AlignmentError(f"segment {i} starts at negative frame {seg.start}")
            if seg.end < seg.start:
                raise SegmentError(f"segment {i} ends ({seg.end}) before it starts ({seg.start})")
            if previous is not None:
                if seg.start <= previous.end:
                    raise AlignmentError(
                        f"segment {i} (frames {seg.start}..{seg.end}) overlaps or precedes "
                        f"segment {i - 1} (frames {previous.start}..{previous.end})"
                    )
                if seg.word < previous.word:
                    raise AlignmentError(
                        f"word index decreases at segment {i} ({previous.word} -> {seg.word})"
                    )
            previous = seg

    def __len__(self) -> int:
        return len(self.segments)


@dataclass(frozen=True)
class GopSequence:
    """Per-utterance GOP features with canonical phones and word membership.

    ``features`` has one row per aligned phone and width 2P: the LPP block
    followed by the LPR block. Row i has an exact 0 at column P + phone_i.
    """

    features: np.ndarray
    canonical_phones: np.ndarray
    word_of_phone: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        phones = np.ascontiguousarray(np.asarray(self.canonical_phones, dtype=np.int64))
        words = np.ascontiguousarray(np.asarray(self.word_of_phone, dtype=np.int64))
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "canonical_phones", phones)
        object.__setattr__(self, "word_of_phone", words)
        if feats.ndim != 2:
            raise DimensionError(f"features must be 2-d, got shape {feats.shape}")
        n = feats.shape[0]
        if feats.shape[1] % 2 != 0:
            raise DimensionError(f"feature width must be 2P (even), got {feats.shape[1]}")
        if phones.shape != (n,) or words.shape != (n,):
            raise DimensionError(
                f"phone/word index lengths {phones.shape}/{words.shape} "
                f"do not match {n} feature rows"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_phones_in_inventory(self) -> int:
        return self.features.shape[1] // 2

    @property
    def num_words(self) -> int:
        return int(self.word_of_phone.max()) + 1 if len(self) else 0


def phone_posteriors(pg: PhonePosteriorgram, inventory: PhoneInventory) -> np.ndarray:
    """Collapse state posteriors to phone posteriors, frame by frame.

    Entry (t, p) is the sum of the posteriors of the states owned by phone
    p at frame t; accumulation runs in state order, matching a scalar loop
    bit for bit.
    """
    if inventory.num_states != pg.num_states:
        raise InventoryError(
            f"posteriorgram has {pg.num_states} states but the inventory maps "
            f"{inventory.num_states}"
        )
    out = np.zeros((pg.num_frames, inventory.num_phones), dtype=np.float64)
    for s in range(inventory.num_states):
        out[:, inventory.state_to_phone[s]] += pg.probs[:, s]
    return out


def lpp(phone_post: np.ndarray, start: int, end: int) -> np.ndarray:
    """Mean log phone posterior over the inclusive frame span [start, end].

    Posteriors are clamped to POSTERIOR_FLOOR before the log, so every
    output is finite and nonpositive.
    """
    frames = phone_post.shape[0]
    if end < start:
        raise SegmentError(f"segment end {end} precedes start {start}")
    if start < 0 or end >= frames:
        raise BoundsError(f"segment [{start}, {end}] outside posteriorgram with {frames} frames")
    window = np.maximum(phone_post[start : end + 1], POSTERIOR_FLOOR)
    return np.log(window).mean(axis=0)


def lpr(lpp_vec: np.ndarray, canonical: int) -> np.ndarray:
    """Log posterior ratio of every phone against the canonical phone.

    Both logs are segment means over the same span, so the ratio does not
    depend on segment duration. The canonical entry is exactly 0.
    """
    p = lpp_vec.shape[0]
    if not 0 <= canonical < p:
        raise InventoryError(f"canonical phone {canonical} outside inventory of {p} phones")
    return lpp_vec - lpp_vec[canonical]


def gop_vector(phone_post: np.ndarray, segment: AlignedSegment) -> np.ndarray:
    """The 2P GOP vector for one aligned phone: [LPP block, LPR block]."""
    v = lpp(phone_post, segment.start, segment.end)
    return np.concatenate([v, lpr(v, segment.phone)])


def extract_utterance(
    pg: PhonePosteriorgram,
    alignment: Alignment,
    inventory: PhoneInventory,
    utterance_id: str = "",
) -> GopSequence:
    """One GOP row per aligned segment, in alignment order.

    Deterministic: identical inputs give bit-identical outputs.
    """
    if alignment.segments and alignment.segments[-1].end >= pg.num_frames:
        last = alignment.segments[-1]
        raise BoundsError(
            f"alignment reaches frame {last.end} but the posteriorgram has "
            f"only {pg.num_frames} frames"
        )
    post = phone_posteriors(pg, inventory)
    p = inventory.num_phones
    if alignment.segments:
        rows = np.stack([gop_vector(post, seg) for seg in alignment.segments])
    else:
        rows = np.zeros((0, 2 * p), dtype=np.float64)
    return GopSequence(
        features=rows,
        canonical_phones=np.array([s.phone for s in alignment.segments], dtype=np.int64),
        word_of_phone=np.array([s.word for s in alignment.segments], dtype=np.int64),
        utterance_id=utterance_id,
    )
