import numpy as np
import pytest

from remidiff.midi import NoteEvent, Score
from remidiff.remi import RemiVocab


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def vocab():
    return RemiVocab()


def make_random_score(rng, n_notes=20, bars=4, tpb=480, vocab=None, pitch_lo=21, pitch_hi=109):
    """A score already on the vocabulary grid (quantize is a no-op on it)."""
    if vocab is None:
        vocab = RemiVocab()
    grid = tpb * 4 // vocab.positions_per_bar
    notes = []
    for _ in range(n_notes):
        onset = int(rng.integers(0, bars * vocab.positions_per_bar)) * grid
        dur = int(rng.integers(1, 17)) * grid
        pitch = int(rng.integers(pitch_lo, pitch_hi))
        velocity = vocab.velocity_value(int(rng.integers(0, vocab.velocity_bins)))
        notes.append(NoteEvent(pitch=pitch, onset=onset, duration=dur, velocity=velocity))
    tempo = vocab.tempo_value(int(rng.integers(0, vocab.tempo_bins)))
    return Score(notes=notes, ticks_per_beat=tpb, tempo_bpm=tempo)


@pytest.fixture
def random_score(rng, vocab):
    return make_random_score(rng, vocab=vocab)
