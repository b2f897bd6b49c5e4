"""Vocabulary bijection, grammar, quantization, and round-trip properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remidiff.midi import NoteEvent, Score, parse_midi, write_midi
from remidiff.remi import (
    RemiVocab,
    decode,
    encode,
    grammar_violations,
    load_tokens_binary,
    load_tokens_text,
    quantize,
    save_tokens_binary,
    save_tokens_text,
)

from conftest import make_random_score


class TestVocab:
    def test_size_and_reserved_indices(self, vocab):
        assert vocab.size == 1 + 16 + 128 + 64 + 32 + 32 + 2
        assert vocab.mask_index == vocab.size - 1
        assert vocab.pad_index == vocab.size - 2
        assert vocab.token(vocab.mask_index) == "MASK"

    def test_bijection_over_all_indices(self, vocab):
        for i in range(vocab.size):
            assert vocab.index(vocab.token(i)) == i

    def test_build_order(self, vocab):
        assert vocab.token(0) == "Bar"
        assert vocab.token(1) == "Position_0"
        assert vocab.token(17) == "Pitch_0"
        assert vocab.token(17 + 128) == "Duration_1"

    @pytest.mark.parametrize("bin_idx", range(32))
    def test_velocity_bin_idempotent(self, vocab, bin_idx):
        assert vocab.velocity_bin(vocab.velocity_value(bin_idx)) == bin_idx

    @pytest.mark.parametrize("bin_idx", range(32))
    def test_tempo_bin_idempotent(self, vocab, bin_idx):
        assert vocab.tempo_bin(vocab.tempo_value(bin_idx)) == bin_idx

    def test_tempo_clipping(self, vocab):
        assert vocab.tempo_bin(1.0) == 0
        assert vocab.tempo_bin(10000.0) == 31


class TestQuantize:
    def test_idempotent(self, random_score):
        once = quantize(random_score, 16)
        assert quantize(once, 16) == once

    @given(onset_frac=st.integers(0, 200))
    @settings(max_examples=40, deadline=None)
    def test_idempotent_property(self, onset_frac):
        grid = 120  # 480 tpb, 16 positions
        note = NoteEvent(pitch=60, onset=onset_frac * 17, duration=250, velocity=77)
        score = Score(notes=[note], ticks_per_beat=480)
        once = quantize(score, 16)
        assert quantize(once, 16) == once
        assert once.notes[0].onset % grid == 0

    def test_rounding_rule(self):
        grid = 120
        low = Score(notes=[NoteEvent(60, int(0.49 * grid), 240, 64)], ticks_per_beat=480)
        high = Score(notes=[NoteEvent(60, int(0.51 * grid) + 1, 240, 64)], ticks_per_beat=480)
        tie = Score(notes=[NoteEvent(60, grid // 2, 240, 64)], ticks_per_beat=480)
        assert quantize(low, 16).notes[0].onset == 0
        assert quantize(high, 16).notes[0].onset == grid
        assert quantize(tie, 16).notes[0].onset == 0  # ties round down

    def test_minimum_duration(self):
        score = Score(notes=[NoteEvent(60, 0, 24, 64)], ticks_per_beat=480)  # 0.2 grid units
        assert quantize(score, 16).notes[0].duration == 120

    def test_long_duration_capped_to_vocab(self, vocab):
        score = Score(notes=[NoteEvent(60, 0, 120 * 100, 64)], ticks_per_beat=480)
        assert quantize(score, 16).notes[0].duration == 120 * vocab.max_duration


class TestEncode:
    def test_empty_score(self, vocab):
        score = quantize(Score(ticks_per_beat=480), 16, vocab)
        tokens = encode(score, vocab)
        assert tokens[0] == vocab.bar_index
        assert vocab.is_tempo(tokens[1])
        assert len(tokens) == 2

    def test_one_note_layout(self, vocab):
        note = NoteEvent(pitch=60, onset=0, duration=480, velocity=vocab.velocity_value(16))
        score = quantize(Score(notes=[note], ticks_per_beat=480), 16, vocab)
        tokens = encode(score, vocab)
        assert tokens.tolist() == [
            vocab.bar_index,
            vocab.tempo_index(score.tempo_bpm),
            vocab.position_index(0),
            vocab.pitch_index(60),
            vocab.duration_index(4),
            vocab.velocity_index(score.notes[0].velocity),
        ]

    def test_simultaneous_notes_share_position(self, vocab):
        v = vocab.velocity_value(10)
        notes = [NoteEvent(64, 0, 120, v), NoteEvent(60, 0, 120, v)]
        score = quantize(Score(notes=notes, ticks_per_beat=480), 16, vocab)
        tokens = encode(score, vocab).tolist()
        positions = [t for t in tokens if vocab.is_position(t)]
        assert len(positions) == 1
        pitches = [t - vocab.pitch_index(0) for t in tokens if vocab.is_pitch(t)]
        assert pitches == [60, 64]  # ascending pitch order

    def test_unquantized_rejected(self, vocab):
        score = Score(notes=[NoteEvent(60, 7, 480, 64)], ticks_per_beat=480)
        with pytest.raises(ValueError, match="not quantized"):
            encode(score, vocab)

    def test_grammar_of_encoded_output(self, rng, vocab):
        score = make_random_score(rng, n_notes=60, vocab=vocab)
        assert grammar_violations(encode(score, vocab), vocab) == []


class TestDecode:
    def test_roundtrip_random_scores(self, rng, vocab):
        for _ in range(10):
            score = make_random_score(rng, n_notes=50, vocab=vocab)
            back, stats = decode(encode(score, vocab), vocab, ticks_per_beat=score.ticks_per_beat)
            assert back == score
            assert stats.dropped == 0

    def test_stray_duration_dropped(self, vocab):
        tokens = [vocab.bar_index, vocab.tempo_index(120.0), vocab.duration_index(4)]
        score, stats = decode(tokens, vocab)
        assert stats.dropped == 1
        assert score.notes == []

    def test_all_mask_sequence(self, vocab):
        tokens = np.full(32, vocab.mask_index)
        score, stats = decode(tokens, vocab)
        assert score.notes == []
        assert stats.dropped == 32

    def test_pitch_without_followers_dropped(self, vocab):
        tokens = [vocab.bar_index, vocab.pitch_index(60), vocab.bar_index]
        _, stats = decode(tokens, vocab)
        assert stats.dropped == 1

    def test_position_before_bar_dropped(self, vocab):
        tokens = [vocab.position_index(3), vocab.bar_index]
        _, stats = decode(tokens, vocab)
        assert stats.dropped == 1


class TestGrammar:
    def test_violations_reported(self, vocab):
        tokens = [vocab.position_index(0), vocab.bar_index, vocab.duration_index(1)]
        violations = grammar_violations(tokens, vocab)
        assert [pos for pos, _ in violations] == [0, 2]

    def test_pitch_sequence_valid(self, vocab):
        tokens = [
            vocab.bar_index,
            vocab.position_index(0),
            vocab.pitch_index(60),
            vocab.duration_index(2),
            vocab.velocity_index(64),
        ]
        assert grammar_violations(tokens, vocab) == []


class TestSerialization:
    def test_text_roundtrip(self, tmp_path, rng):
        tokens = rng.integers(0, 274, size=64).astype(np.int32)
        path = tmp_path / "a.txt"
        save_tokens_text(tokens, path)
        assert np.array_equal(load_tokens_text(path), tokens)

    def test_binary_roundtrip(self, tmp_path, rng, vocab):
        tokens = rng.integers(0, vocab.size, size=64).astype(np.int32)
        path = tmp_path / "a.tokb"
        save_tokens_binary(tokens, path, vocab.size)
        back, v = load_tokens_binary(path)
        assert v == vocab.size
        assert np.array_equal(back, tokens)

    def test_binary_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tokb"
        path.write_bytes(b"NOTTOKEN" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_tokens_binary(path)

    def test_binary_rejects_out_of_range(self, tmp_path):
        path = tmp_path / "a.tokb"
        save_tokens_binary(np.array([5, 6], dtype=np.int32), path, vocab_size=6)
        with pytest.raises(ValueError, match="exceeds"):
            load_tokens_binary(path)


class TestFullRoundTrips:
    """decode(encode(s)) == s and parse(write(s)) == s on one corpus."""

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_both_roundtrips_random(self, seed):
        rng = np.random.default_rng(seed)
        vocab = RemiVocab()
        score = make_random_score(rng, n_notes=int(rng.integers(1, 80)), vocab=vocab)
        assert parse_midi(write_midi(score)) == score
        back, stats = decode(encode(score, vocab), vocab, ticks_per_beat=score.ticks_per_beat)
        assert back == score and stats.dropped == 0

    def test_quantize_then_roundtrip_raw_scores(self, rng, vocab):
        for _ in range(10):
            notes = [
                NoteEvent(
                    pitch=int(rng.integers(0, 128)),
                    onset=int(rng.integers(0, 4000)),
                    duration=int(rng.integers(1, 3000)),
                    velocity=int(rng.integers(1, 128)),
                )
                for _ in range(30)
            ]
            raw = Score(notes=notes, ticks_per_beat=480, tempo_bpm=float(rng.uniform(40, 200)))
            score = quantize(raw, 16, vocab)
            assert parse_midi(write_midi(score)) == score
            back, _ = decode(encode(score, vocab), vocab, ticks_per_beat=480)
            assert back == score
