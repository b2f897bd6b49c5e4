"""REMI token vocabulary, encoder/decoder, and token-file serialization.

Tokens cover bars, intra-bar positions on a fixed grid, pitches,
grid-unit durations, binned velocities and binned tempi, plus reserved
PAD and MASK indices. The build order is fixed (Bar, Positions, Pitches,
Durations, Velocities, Tempos, PAD, MASK) so indices are stable.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace

import numpy as np

from .midi import NoteEvent, Score

__all__ = [
    "RemiVocab",
    "DecodeStats",
    "quantize",
    "encode",
    "decode",
    "grammar_violations",
    "save_tokens_text",
    "load_tokens_text",
    "save_tokens_binary",
    "load_tokens_binary",
]

log = logging.getLogger(__name__)

TOKEN_MAGIC = b"REMITOK1"
TOKEN_VERSION = 1


class RemiVocab:
    """Bijective token<->index mapping with MASK as the final index."""

    def __init__(
        self,
        positions_per_bar: int = 16,
        max_duration: int = 64,
        velocity_bins: int = 32,
        tempo_bins: int = 32,
        tempo_range: tuple[float, float] = (30.0, 210.0),
    ):
        self.positions_per_bar = positions_per_bar
        self.max_duration = max_duration
        self.velocity_bins = velocity_bins
        self.tempo_bins = tempo_bins
        self.tempo_range = tempo_range
        tokens = ["Bar"]
        tokens += [f"Position_{p}" for p in range(positions_per_bar)]
        tokens += [f"Pitch_{p}" for p in range(128)]
        tokens += [f"Duration_{d}" for d in range(1, max_duration + 1)]
        tokens += [f"Velocity_{b}" for b in range(velocity_bins)]
        tokens += [f"Tempo_{b}" for b in range(tempo_bins)]
        tokens += ["PAD", "MASK"]
        self.tokens = tokens
        self._index = {tok: i for i, tok in enumerate(tokens)}
        self._bar = self._index["Bar"]
        self._position0 = self._index["Position_0"]
        self._pitch0 = self._index["Pitch_0"]
        self._duration1 = self._index["Duration_1"]
        self._velocity0 = self._index["Velocity_0"]
        self._tempo0 = self._index["Tempo_0"]

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_index(self) -> int:
        return self.size - 2

    @property
    def mask_index(self) -> int:
        return self.size - 1

    def token(self, index: int) -> str:
        return self.tokens[index]

    def index(self, token: str) -> int:
        return self._index[token]

    # --- family constructors -------------------------------------------
    @property
    def bar_index(self) -> int:
        return self._bar

    def position_index(self, pos: int) -> int:
        if not 0 <= pos < self.positions_per_bar:
            raise ValueError(f"position {pos} outside grid 0-{self.positions_per_bar - 1}")
        return self._position0 + pos

    def pitch_index(self, pitch: int) -> int:
        if not 0 <= pitch <= 127:
            raise ValueError(f"pitch {pitch} outside 0-127")
        return self._pitch0 + pitch

    def duration_index(self, units: int) -> int:
        if not 1 <= units <= self.max_duration:
            raise ValueError(f"duration {units} outside 1-{self.max_duration}")
        return self._duration1 + units - 1

    def velocity_index(self, velocity: int) -> int:
        return self._velocity0 + self.velocity_bin(velocity)

    def tempo_index(self, bpm: float) -> int:
        return self._tempo0 + self.tempo_bin(bpm)

    # --- family tests ----------------------------------------------------
    def is_position(self, idx: int) -> bool:
        return self._position0 <= idx < self._position0 + self.positions_per_bar

    def is_pitch(self, idx: int) -> bool:
        return self._pitch0 <= idx < self._pitch0 + 128

    def is_duration(self, idx: int) -> bool:
        return self._duration1 <= idx < self._duration1 + self.max_duration

    def is_velocity(self, idx: int) -> bool:
        return self._velocity0 <= idx < self._velocity0 + self.velocity_bins

    def is_tempo(self, idx: int) -> bool:
        return self._tempo0 <= idx < self._tempo0 + self.tempo_bins

    # --- bin arithmetic ---------------------------------------------------
    def velocity_bin(self, velocity: int) -> int:
        if not 1 <= velocity <= 127:
            raise ValueError(f"velocity {velocity} outside 1-127")
        return min(self.velocity_bins - 1, (velocity - 1) * self.velocity_bins // 127)

    def velocity_value(self, bin_idx: int) -> int:
        width = 127 / self.velocity_bins
        return max(1, min(127, int(1 + (bin_idx + 0.5) * width)))

    def tempo_bin(self, bpm: float) -> int:
        lo, hi = self.tempo_range
        width = (hi - lo) / self.tempo_bins
        return int(np.clip((bpm - lo) // width, 0, self.tempo_bins - 1))

    def tempo_value(self, bin_idx: int) -> float:
        """Canonical bpm for a tempo bin: the bin centre snapped to the
        nearest value expressible as an integer number of MIDI
        microseconds-per-quarter, so write/parse round trips are exact."""
        lo, hi = self.tempo_range
        width = (hi - lo) / self.tempo_bins
        centre = lo + (bin_idx + 0.5) * width
        return 60_000_000.0 / round(60_000_000.0 / centre)


def default_vocab() -> RemiVocab:
    return RemiVocab()


# ---------------------------------------------------------------------------
# quantization


def _snap_half_down(numerator: int, denominator: int) -> int:
    """Round numerator/denominator to the nearest integer, ties toward zero."""
    return (2 * numerator + denominator - 1) // (2 * denominator)


def quantize(score: Score, positions_per_bar: int = 16, vocab: RemiVocab | None = None) -> Score:
    """Snap a score onto the vocabulary grid; idempotent.

    Onsets snap to the nearest grid line (ties round down); durations to
    the nearest positive grid multiple, capped at the vocabulary maximum.
    Velocity and tempo snap to their bin representatives so that
    encode/decode and write/parse round trips are exact on quantized scores.
    """
    if positions_per_bar < 1:
        raise ValueError("positions_per_bar must be >= 1")
    if vocab is None:
        vocab = RemiVocab(positions_per_bar=positions_per_bar)
    grid = score.ticks_per_bar // positions_per_bar
    if grid * positions_per_bar != score.ticks_per_bar:
        raise ValueError(
            f"bar of {score.ticks_per_bar} ticks not divisible into {positions_per_bar} positions"
        )
    notes = []
    for n in score.notes:
        onset = _snap_half_down(n.onset, grid) * grid
        units = min(vocab.max_duration, max(1, _snap_half_down(n.duration, grid)))
        notes.append(
            NoteEvent(
                pitch=n.pitch,
                onset=onset,
                duration=units * grid,
                velocity=vocab.velocity_value(vocab.velocity_bin(n.velocity)),
            )
        )
    tempo = vocab.tempo_value(vocab.tempo_bin(score.tempo_bpm))
    return replace(score, notes=notes, tempo_bpm=tempo)


# ---------------------------------------------------------------------------
# encoding / decoding


def encode(score: Score, vocab: RemiVocab) -> np.ndarray:
    """Encode a quantized score as a REMI token index sequence.

    Emits Bar at each bar boundary, a Tempo token after the first Bar,
    Position before each onset group, and (Pitch, Duration, Velocity)
    per note. Durations above the vocabulary maximum are clipped with a
    warning; out-of-range pitches are rejected.
    """
    grid = score.ticks_per_bar // vocab.positions_per_bar
    tokens = [vocab.bar_index, vocab.tempo_index(score.tempo_bpm)]
    current_bar = 0
    current_position = None
    for note in score.notes:
        bar, rem = divmod(note.onset, score.ticks_per_bar)
        if rem % grid != 0 or note.duration % grid != 0:
            raise ValueError("score is not quantized to the vocabulary grid")
        while current_bar < bar:
            tokens.append(vocab.bar_index)
            current_bar += 1
            current_position = None
        pos = rem // grid
        if pos != current_position:
            tokens.append(vocab.position_index(pos))
            current_position = pos
        units = note.duration // grid
        if units > vocab.max_duration:
            log.warning("clipping duration of %d grid units to %d", units, vocab.max_duration)
            units = vocab.max_duration
        tokens.append(vocab.pitch_index(note.pitch))
        tokens.append(vocab.duration_index(units))
        tokens.append(vocab.velocity_index(note.velocity))
    return np.array(tokens, dtype=np.int32)


@dataclass
class DecodeStats:
    dropped: int = 0
    notes: int = 0


def decode(tokens, vocab: RemiVocab, ticks_per_beat: int = 480) -> tuple[Score, DecodeStats]:
    """Decode tokens into a Score, skipping ungrammatical fragments.

    Tolerates arbitrary model output: stray Duration/Velocity tokens,
    positions before any Bar, PAD and MASK are all dropped and counted.
    """
    tokens = np.asarray(tokens).tolist()
    stats = DecodeStats()
    grid = ticks_per_beat * 4 // vocab.positions_per_bar
    bar_ticks = grid * vocab.positions_per_bar

    notes: list[NoteEvent] = []
    tempo: float | None = None
    bar = -1
    position = 0
    pending_pitch: int | None = None
    pending_units: int | None = None

    def drop(count: int = 1):
        stats.dropped += count

    for idx in tokens:
        if idx == vocab.bar_index:
            if pending_pitch is not None:
                drop(1 if pending_units is None else 2)
                pending_pitch = pending_units = None
            bar += 1
            position = 0
            continue
        if vocab.is_tempo(idx):
            if tempo is None and bar >= 0:
                tempo = vocab.tempo_value(idx - vocab._tempo0)
            else:
                drop()
            continue
        if vocab.is_position(idx):
            if pending_pitch is not None:
                drop(1 if pending_units is None else 2)
                pending_pitch = pending_units = None
            if bar < 0:
                drop()
                continue
            position = idx - vocab._position0
            continue
        if vocab.is_pitch(idx):
            if pending_pitch is not None:
                drop(1 if pending_units is None else 2)
                pending_units = None
            if bar < 0:
                drop()
                pending_pitch = None
                continue
            pending_pitch = idx - vocab._pitch0
            continue
        if vocab.is_duration(idx):
            if pending_pitch is None or pending_units is not None:
                drop()
                continue
            pending_units = idx - vocab._duration1 + 1
            continue
        if vocab.is_velocity(idx):
            if pending_pitch is None or pending_units is None:
                drop()
                continue
            velocity = vocab.velocity_value(idx - vocab._velocity0)
            notes.append(
                NoteEvent(
                    pitch=pending_pitch,
                    onset=bar * bar_ticks + position * grid,
                    duration=pending_units * grid,
                    velocity=velocity,
                )
            )
            pending_pitch = pending_units = None
            continue
        drop()  # PAD, MASK, or out-of-family index

    if pending_pitch is not None:
        drop(1 if pending_units is None else 2)
    stats.notes = len(notes)
    score = Score(
        notes=notes,
        ticks_per_beat=ticks_per_beat,
        tempo_bpm=tempo if tempo is not None else vocab.tempo_value(vocab.tempo_bin(120.0)),
    )
    return score, stats


def grammar_violations(tokens, vocab: RemiVocab) -> list[tuple[int, str]]:
    """Check the token grammar; returns (position, reason) per violation.

    Rules: every Pitch is followed by Duration then Velocity; Position
    tokens only occur after a Bar within the current bar.
    """
    tokens = np.asarray(tokens).tolist()
    violations = []
    seen_bar = False
    i = 0
    while i < len(tokens):
        idx = tokens[i]
        if idx == vocab.bar_index:
            seen_bar = True
        elif vocab.is_position(idx):
            if not seen_bar:
                violations.append((i, "Position before any Bar"))
        elif vocab.is_pitch(idx):
            if i + 2 >= len(tokens) or not vocab.is_duration(tokens[i + 1]) or not vocab.is_velocity(tokens[i + 2]):
                violations.append((i, "Pitch not followed by Duration, Velocity"))
            else:
                i += 3
                continue
        elif vocab.is_duration(idx):
            violations.append((i, "Duration without preceding Pitch"))
        elif vocab.is_velocity(idx):
            violations.append((i, "Velocity without preceding Pitch, Duration"))
        i += 1
    return violations


# ---------------------------------------------------------------------------
# token-file serialization


def save_tokens_text(tokens, path):
    """One integer token index per line."""
    tokens = np.asarray(tokens, dtype=np.int64)
    with open(path, "w") as fh:
        for idx in tokens:
            fh.write(f"{int(idx)}\n")


def load_tokens_text(path) -> np.ndarray:
    with open(path) as fh:
        values = [int(line) for line in fh if line.strip()]
    return np.array(values, dtype=np.int32)


def save_tokens_binary(tokens, path, vocab_size: int):
    """Length-prefixed binary form: magic, version, V, L, then uint32 tokens."""
    tokens = np.asarray(tokens, dtype=np.uint32)
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC)
        fh.write(struct.pack("<III", TOKEN_VERSION, vocab_size, len(tokens)))
        fh.write(tokens.astype("<u4").tobytes())


def load_tokens_binary(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != TOKEN_MAGIC:
            raise ValueError(f"bad token-file magic {magic!r}")
        version, vocab_size, length = struct.unpack("<III", fh.read(12))
        if version != TOKEN_VERSION:
            raise ValueError(f"unsupported token-file version {version}")
        data = np.frombuffer(fh.read(4 * length), dtype="<u4")
        if len(data) != length:
            raise ValueError("truncated token file")
    tokens = data.astype(np.int32)
    if tokens.size and tokens.max() >= vocab_size:
        raise ValueError("token index exceeds declared vocabulary size")
    return tokens, vocab_size
