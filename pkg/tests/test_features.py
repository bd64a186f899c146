"""GOP feature extraction against independent scalar-loop oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gopt.errors import (
    AlignmentError,
    BoundsError,
    DataFormatError,
    InventoryError,
    SegmentError,
)
from gopt.features import (
    POSTERIOR_FLOOR,
    AlignedSegment,
    Alignment,
    PhoneInventory,
    PhonePosteriorgram,
    extract_utterance,
    gop_vector,
    lpp,
    lpr,
    phone_posteriors,
)


def scalar_loop_extract(probs, state_to_phone, segments, num_phones):
    """Independent re-derivation of the whole pipeline with plain loops."""
    frames = probs.shape[0]
    post = [[0.0] * num_phones for _ in range(frames)]
    for t in range(frames):
        for s in range(probs.shape[1]):
            post[t][state_to_phone[s]] += probs[t, s]
    rows = []
    for phone, start, end, _word in segments:
        mean_log = [0.0] * num_phones
        for p in range(num_phones):
            acc = 0.0
            for t in range(start, end + 1):
                acc += math.log(max(post[t][p], POSTERIOR_FLOOR))
            mean_log[p] = acc / (end - start + 1)
        ratios = [mean_log[p] - mean_log[phone] for p in range(num_phones)]
        rows.append(mean_log + ratios)
    return np.array(rows) if rows else np.zeros((0, 2 * num_phones))


def random_posteriorgram(rng, frames, states):
    return PhonePosteriorgram(rng.dirichlet(np.ones(states), size=frames))


class TestPhonePosteriors:
    def test_phone_owning_dominant_states(self):
        # phone 0 owns two states that carry all the mass -> column of ones
        probs = np.array([[0.25, 0.75, 0.0], [0.6, 0.4, 0.0]])
        inv = PhoneInventory(names=("a", "b"), state_to_phone=np.array([0, 0, 1]))
        out = phone_posteriors(PhonePosteriorgram(probs), inv)
        np.testing.assert_array_equal(out[:, 0], [1.0, 1.0])
        np.testing.assert_array_equal(out[:, 1], [0.0, 0.0])

    def test_uniform_two_by_two(self):
        probs = np.full((3, 4), 0.25)
        inv = PhoneInventory(names=("a", "b"), state_to_phone=np.array([0, 0, 1, 1]))
        out = phone_posteriors(PhonePosteriorgram(probs), inv)
        np.testing.assert_array_equal(out, np.full((3, 2), 0.5))

    def test_matches_summation_oracle_exactly(self, rng):
        pg = random_posteriorgram(rng, 3, 6)
        mapping = np.array([0, 2, 1, 0, 2, 1])
        inv = PhoneInventory(names=("a", "b", "c"), state_to_phone=mapping)
        out = phone_posteriors(pg, inv)
        expected = np.zeros((3, 3))
        for t in range(3):
            for s in range(6):
                expected[t, mapping[s]] += pg.probs[t, s]
        np.testing.assert_array_equal(out, expected)

    def test_unmapped_states_rejected(self, rng):
        pg = random_posteriorgram(rng, 2, 5)
        inv = PhoneInventory(names=("a", "b"), state_to_phone=np.array([0, 1, 0]))
        with pytest.raises(InventoryError):
            phone_posteriors(pg, inv)

    def test_rows_still_sum_to_one(self, rng):
        pg = random_posteriorgram(rng, 10, 8)
        inv = PhoneInventory(names=("a", "b", "c"), state_to_phone=np.array([0, 1, 2, 0, 1, 2, 0, 1]))
        out = phone_posteriors(pg, inv)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-3)


class TestLpp:
    def test_uniform_posteriors_42_phones(self):
        post = np.full((5, 42), 1.0 / 42.0)
        out = lpp(post, 0, 4)
        np.testing.assert_allclose(out, math.log(1.0 / 42.0), atol=1e-12, rtol=0)
        assert abs(out[0] - (-3.7376696182833684)) < 1e-12

    def test_single_frame_segment(self, rng):
        post = rng.dirichlet(np.ones(4), size=6)
        out = lpp(post, 3, 3)
        np.testing.assert_allclose(out, np.log(np.maximum(post[3], POSTERIOR_FLOOR)), atol=0)

    def test_three_frame_oracle(self):
        post = np.array(
            [[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4]]
        )
        out = lpp(post, 0, 2)
        expected = [
            (math.log(0.7) + math.log(0.1) + math.log(0.3)) / 3,
            (math.log(0.2) + math.log(0.8) + math.log(0.3)) / 3,
            (math.log(0.1) + math.log(0.1) + math.log(0.4)) / 3,
        ]
        np.testing.assert_allclose(out, expected, atol=1e-12, rtol=0)

    def test_all_values_nonpositive(self, rng):
        pg = random_posteriorgram(rng, 8, 5)
        inv = PhoneInventory(names=("a", "b"), state_to_phone=np.array([0, 0, 1, 1, 1]))
        post = phone_posteriors(pg, inv)
        assert (lpp(post, 0, 7) <= 0).all()

    def test_zero_posterior_is_floored(self):
        post = np.array([[1.0, 0.0]])
        out = lpp(post, 0, 0)
        assert out[1] == math.log(POSTERIOR_FLOOR)

    def test_reversed_segment(self):
        with pytest.raises(SegmentError):
            lpp(np.zeros((4, 2)), 3, 1)

    def test_out_of_bounds(self):
        with pytest.raises(BoundsError):
            lpp(np.zeros((4, 2)), 2, 4)


class TestLpr:
    def test_self_ratio_is_exactly_zero(self, rng):
        vec = -rng.uniform(0.1, 5.0, size=7)
        for canonical in range(7):
            assert lpr(vec, canonical)[canonical] == 0.0

    def test_hand_computed(self):
        np.testing.assert_array_equal(lpr(np.array([-1.0, -2.0]), 0), [0.0, -1.0])

    def test_antisymmetry_across_canonicals(self, rng):
        vec = -rng.uniform(0.1, 5.0, size=6)
        for i in range(6):
            for j in range(6):
                assert lpr(vec, i)[j] == -lpr(vec, j)[i]

    def test_canonical_out_of_range(self):
        with pytest.raises(InventoryError):
            lpr(np.zeros(4), 4)


class TestGopVector:
    def test_width_is_84_for_42_phones(self, rng):
        pg = random_posteriorgram(rng, 6, 84)
        inv = PhoneInventory(
            names=tuple(f"p{i}" for i in range(42)),
            state_to_phone=np.repeat(np.arange(42), 2),
        )
        post = phone_posteriors(pg, inv)
        vec = gop_vector(post, AlignedSegment(phone=3, start=1, end=4, word=0))
        assert vec.shape == (84,)

    def test_canonical_ratio_slot_zero(self, rng):
        post = phone_posteriors(
            random_posteriorgram(rng, 5, 6),
            PhoneInventory(names=("a", "b", "c"), state_to_phone=np.array([0, 1, 2, 0, 1, 2])),
        )
        for canonical in range(3):
            vec = gop_vector(post, AlignedSegment(phone=canonical, start=0, end=4, word=0))
            assert vec[3 + canonical] == 0.0

    def test_end_to_end_scalar_oracle(self, rng):
        probs = rng.dirichlet(np.ones(8), size=3)
        mapping = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        inv = PhoneInventory(names=("a", "b", "c", "d"), state_to_phone=mapping)
        post = phone_posteriors(PhonePosteriorgram(probs), inv)
        seg = AlignedSegment(phone=2, start=0, end=2, word=0)
        vec = gop_vector(post, seg)
        oracle = scalar_loop_extract(probs, mapping, [(2, 0, 2, 0)], 4)[0]
        np.testing.assert_allclose(vec, oracle, atol=1e-12, rtol=0)

    def test_invariant_to_frames_outside_segment(self, rng):
        pg = random_posteriorgram(rng, 4, 6)
        inv = PhoneInventory(names=("a", "b", "c"), state_to_phone=np.array([0, 1, 2, 0, 1, 2]))
        post = phone_posteriors(pg, inv)
        seg = AlignedSegment(phone=1, start=1, end=3, word=0)
        vec = gop_vector(post, seg)
        extra = np.concatenate([post, phone_posteriors(random_posteriorgram(rng, 5, 6), inv)])
        np.testing.assert_array_equal(vec, gop_vector(extra, seg))


class TestExtractUtterance:
    def test_segments_in_order_with_metadata(self, rng):
        pg = random_posteriorgram(rng, 12, 6)
        inv = PhoneInventory(names=("a", "b", "c"), state_to_phone=np.array([0, 0, 1, 1, 2, 2]))
        alignment = Alignment(
            (
                AlignedSegment(0, 0, 3, 0),
                AlignedSegment(2, 4, 6, 0),
                AlignedSegment(1, 7, 11, 1),
            )
        )
        seq = extract_utterance(pg, alignment, inv, utterance_id="u1")
        assert seq.utterance_id == "u1"
        np.testing.assert_array_equal(seq.canonical_phones, [0, 2, 1])
        np.testing.assert_array_equal(seq.word_of_phone, [0, 0, 1])
        assert seq.features.shape == (3, 6)
        assert (seq.features[np.arange(3), 3 + seq.canonical_phones] == 0).all()

    def test_deterministic(self, rng):
        pg = random_posteriorgram(rng, 12, 6)
        inv = PhoneInventory(names=("a", "b", "c"), state_to_phone=np.array([0, 0, 1, 1, 2, 2]))
        alignment = Alignment((AlignedSegment(0, 0, 5, 0), AlignedSegment(1, 6, 11, 1)))
        a = extract_utterance(pg, alignment, inv)
        b = extract_utterance(pg, alignment, inv)
        assert a.features.tobytes() == b.features.tobytes()

    def test_overlapping_segments_rejected(self):
        with pytest.raises(AlignmentError):
            Alignment((AlignedSegment(0, 0, 5, 0), AlignedSegment(1, 5, 8, 0)))

    def test_out_of_order_segments_rejected(self):
        with pytest.raises(AlignmentError):
            Alignment((AlignedSegment(0, 6, 8, 0), AlignedSegment(1, 0, 4, 0)))

    def test_decreasing_word_index_rejected(self):
        with pytest.raises(AlignmentError):
            Alignment((AlignedSegment(0, 0, 2, 1), AlignedSegment(1, 3, 4, 0)))

    def test_reversed_segment_rejected(self):
        with pytest.raises(SegmentError):
            Alignment((AlignedSegment(0, 4, 2, 0),))

    def test_alignment_beyond_posteriorgram(self, rng):
        pg = random_posteriorgram(rng, 5, 4)
        inv = PhoneInventory(names=("a", "b"), state_to_phone=np.array([0, 0, 1, 1]))
        with pytest.raises(BoundsError):
            extract_utterance(pg, Alignment((AlignedSegment(0, 0, 5, 0),)), inv)

    def test_empty_alignment_gives_empty_sequence(self, rng):
        pg = random_posteriorgram(rng, 5, 4)
        inv = PhoneInventory(names=("a", "b"), state_to_phone=np.array([0, 0, 1, 1]))
        seq = extract_utterance(pg, Alignment(()), inv)
        assert len(seq) == 0 and seq.features.shape == (0, 4)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_matches_scalar_loop_on_random_cases(self, seed):
        rng = np.random.default_rng(seed)
        num_phones = int(rng.integers(2, 6))
        states = int(rng.integers(num_phones, 2 * num_phones + 1))
        mapping = np.concatenate(
            [np.arange(num_phones), rng.integers(0, num_phones, size=states - num_phones)]
        )
        frames = int(rng.integers(4, 12))
        pg = random_posteriorgram(rng, frames, states)
        inv = PhoneInventory(
            names=tuple(f"p{i}" for i in range(num_phones)), state_to_phone=mapping
        )
        cuts = sorted(rng.choice(np.arange(1, frames), size=2, replace=False))
        segments = []
        word = 0
        for i, (start, end) in enumerate(
            zip([0, cuts[0], cuts[1]], [cuts[0] - 1, cuts[1] - 1, frames - 1])
        ):
            segments.append(
                AlignedSegment(int(rng.integers(0, num_phones)), start, end, word)
            )
            word += int(rng.integers(0, 2))
        seq = extract_utterance(pg, Alignment(tuple(segments)), inv)
        oracle = scalar_loop_extract(
            pg.probs, mapping, [(s.phone, s.start, s.end, s.word) for s in segments], num_phones
        )
        np.testing.assert_allclose(seq.features, oracle, atol=1e-12, rtol=0)


class TestValidation:
    def test_posteriorgram_row_sum_violation_names_frame(self):
        probs = np.full((3, 2), 0.5)
        probs[1] = [0.7, 0.7]
        with pytest.raises(DataFormatError, match="row 1"):
            PhonePosteriorgram(probs)

    def test_posteriorgram_entries_outside_unit_interval(self):
        with pytest.raises(DataFormatError):
            PhonePosteriorgram(np.array([[1.2, -0.2]]))

    def test_inventory_needs_two_phones(self):
        with pytest.raises(InventoryError):
            PhoneInventory(names=("a",), state_to_phone=np.array([0]))

    def test_inventory_every_phone_needs_a_state(self):
        with pytest.raises(InventoryError):
            PhoneInventory(names=("a", "b"), state_to_phone=np.array([0, 0]))

    def test_inventory_rejects_out_of_range_phone(self):
        with pytest.raises(InventoryError):
            PhoneInventory(names=("a", "b"), state_to_phone=np.array([0, 2]))
