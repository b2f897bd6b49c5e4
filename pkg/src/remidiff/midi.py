"""Standard MIDI File reading and writing for quantized note scores.

Supports SMF format 0 and 1 with ticks-per-quarter timing. All note
tracks are merged into one voice; the first tempo and time-signature
events win. Writing emits a single-track format-0 file that parses back
to an identical Score.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

__all__ = ["NoteEvent", "Score", "MidiFormatError", "parse_midi", "write_midi"]

log = logging.getLogger(__name__)

DEFAULT_TEMPO_BPM = 120.0
DEFAULT_TIME_SIGNATURE = (4, 4)


class MidiFormatError(ValueError):
    """The byte stream is not a supported Standard MIDI File."""


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: int
    duration: int
    velocity: int

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside 0-127")
        if self.onset < 0:
            raise ValueError(f"onset {self.onset} negative")
        if self.duration < 1:
            raise ValueError(f"duration {self.duration} must be >= 1 tick")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside 1-127")

    @property
    def sort_key(self):
        return (self.onset, self.pitch, self.duration, self.velocity)


@dataclass
class Score:
    """Quantizable note content plus the timing context needed to render it."""

    notes: list[NoteEvent] = field(default_factory=list)
    ticks_per_beat: int = 480
    time_signature: tuple[int, int] = DEFAULT_TIME_SIGNATURE
    tempo_bpm: float = DEFAULT_TEMPO_BPM

    def __post_init__(self):
        if self.ticks_per_beat < 1:
            raise ValueError("ticks_per_beat must be positive")
        if self.tempo_bpm <= 0:
            raise ValueError("tempo_bpm must be positive")
        self.notes = sorted(self.notes, key=lambda n: n.sort_key)

    @property
    def ticks_per_bar(self) -> int:
        num, den = self.time_signature
        return self.ticks_per_beat * 4 * num // den

    @property
    def bar_count(self) -> int:
        if not self.notes:
            return 1
        return max(n.onset for n in self.notes) // self.ticks_per_bar + 1


def _read_vlq(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= len(data):
            raise MidiFormatError("truncated variable-length quantity")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiFormatError("variable-length quantity longer than 4 bytes")


def _write_vlq(value: int) -> bytes:
    if value < 0:
        raise ValueError("delta time must be non-negative")
    chunks = [value & 0x7F]
    value >>= 7
    while value:
        chunks.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(chunks))


def parse_midi(data: bytes) -> Score:
    """Parse SMF bytes into a Score.

    Note-on/note-off pairs are matched FIFO per (channel, pitch); a
    note-on with velocity 0 acts as note-off. Unmatched note-ons are
    closed at track end with a warning. SMPTE division and formats
    other than 0/1 are rejected.
    """
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiFormatError("missing MThd header")
    header_len = int.from_bytes(data[4:8], "big")
    if header_len < 6:
        raise MidiFormatError(f"header length {header_len} too short")
    fmt = int.from_bytes(data[8:10], "big")
    if fmt not in (0, 1):
        raise MidiFormatError(f"unsupported SMF format {fmt}")
    n_tracks = int.from_bytes(data[10:12], "big")
    division = int.from_bytes(data[12:14], "big")
    if division & 0x8000:
        raise MidiFormatError("SMPTE division is not supported")
    if division == 0:
        raise MidiFormatError("division of 0 ticks per quarter")

    notes: list[NoteEvent] = []
    tempo_bpm: float | None = None
    time_sig: tuple[int, int] | None = None

    pos = 8 + header_len
    tracks_seen = 0
    while pos < len(data):
        if pos + 8 > len(data):
            raise MidiFormatError("truncated chunk header")
        chunk_type = data[pos : pos + 4]
        chunk_len = int.from_bytes(data[pos + 4 : pos + 8], "big")
        pos += 8
        if pos + chunk_len > len(data):
            raise MidiFormatError(f"chunk length {chunk_len} overflows the file")
        if chunk_type != b"MTrk":
            log.warning("skipping unknown chunk %r", chunk_type)
            pos += chunk_len
            continue
        tracks_seen += 1
        track = data[pos : pos + chunk_len]
        pos += chunk_len
        track_notes, track_tempo, track_sig = _parse_track(track)
        notes.extend(track_notes)
        if track_tempo is not None:
            if tempo_bpm is None:
                tempo_bpm = track_tempo
            else:
                log.warning("ignoring additional tempo event")
        if track_sig is not None:
            if time_sig is None:
                time_sig = track_sig
            else:
                log.warning("ignoring additional time-signature event")

    if tracks_seen == 0:
        raise MidiFormatError("file contains no MTrk chunk")
    if tracks_seen != n_tracks:
        log.warning("header declares %d tracks, found %d", n_tracks, tracks_seen)

    return Score(
        notes=notes,
        ticks_per_beat=division,
        time_signature=time_sig or DEFAULT_TIME_SIGNATURE,
        tempo_bpm=tempo_bpm if tempo_bpm is not None else DEFAULT_TEMPO_BPM,
    )


def _parse_track(track: bytes):
    notes: list[NoteEvent] = []
    pending: dict[tuple[int, int], list[tuple[int, int]]] = {}
    tempo_bpm: float | None = None
    extra_tempo_seen = False
    time_sig: tuple[int, int] | None = None
    extra_sig_seen = False
    tick = 0
    running_status: int | None = None
    pos = 0
    while pos < len(track):
        delta, pos = _read_vlq(track, pos)
        tick += delta
        if pos >= len(track):
            raise MidiFormatError("truncated event")
        byte = track[pos]
        if byte == 0xFF:
            pos += 1
            if pos >= len(track):
                raise MidiFormatError("truncated meta event")
            meta_type = track[pos]
            pos += 1
            length, pos = _read_vlq(track, pos)
            payload = track[pos : pos + length]
            if len(payload) < length:
                raise MidiFormatError("truncated meta payload")
            pos += length
            if meta_type == 0x51 and length == 3:
                uspq = int.from_bytes(payload, "big")
                if tempo_bpm is None and not extra_tempo_seen:
                    tempo_bpm = 60_000_000.0 / uspq
                else:
                    extra_tempo_seen = True
                    log.warning("ignoring additional tempo event at tick %d", tick)
            elif meta_type == 0x58 and length >= 2:
                sig = (payload[0], 1 << payload[1])
                if time_sig is None and not extra_sig_seen:
                    time_sig = sig
                else:
                    extra_sig_seen = True
                    log.warning("ignoring additional time-signature event at tick %d", tick)
            elif meta_type == 0x2F:
                break
            continue
        if byte in (0xF0, 0xF7):
            pos += 1
            length, pos = _read_vlq(track, pos)
            if pos + length > len(track):
                raise MidiFormatError("truncated sysex event")
            pos += length
            continue
        if byte & 0x80:
            status = byte
            running_status = status
            pos += 1
        else:
            if running_status is None:
                raise MidiFormatError("data byte with no running status")
            status = running_status
        kind = status & 0xF0
        channel = status & 0x0F
        if kind in (0x80, 0x90, 0xA0, 0xB0, 0xE0):
            if pos + 2 > len(track):
                raise MidiFormatError("truncated channel event")
            d1, d2 = track[pos], track[pos + 1]
            pos += 2
        elif kind in (0xC0, 0xD0):
            if pos + 1 > len(track):
                raise MidiFormatError("truncated channel event")
            d1, d2 = track[pos], 0
            pos += 1
        else:
            raise MidiFormatError(f"unexpected status byte 0x{status:02x}")

        if kind == 0x90 and d2 > 0:
            pending.setdefault((channel, d1), []).append((tick, d2))
        elif kind == 0x80 or (kind == 0x90 and d2 == 0):
            queue = pending.get((channel, d1))
            if queue:
                onset, velocity = queue.pop(0)
                notes.append(
                    NoteEvent(pitch=d1, onset=onset, duration=max(1, tick - onset), velocity=velocity)
                )
            else:
                log.warning("note-off with no matching note-on (pitch %d, tick %d)", d1, tick)

    for (channel, pitch), queue in pending.items():
        for onset, velocity in queue:
            log.warning("closing unmatched note-on (pitch %d) at track end", pitch)
            notes.append(
                NoteEvent(pitch=pitch, onset=onset, duration=max(1, tick - onset), velocity=velocity)
            )
    return notes, tempo_bpm, time_sig


def write_midi(score: Score) -> bytes:
    """Serialize a Score as a single-track format-0 SMF byte string.

    Overlapping notes of the same pitch are spread over distinct channels
    so that FIFO note-on/off pairing reproduces every duration exactly on
    re-parse.
    """
    num, den = score.time_signature
    den_log = int(round(math.log2(den)))
    if 1 << den_log != den:
        raise ValueError(f"time-signature denominator {den} is not a power of two")
    uspq = round(60_000_000.0 / score.tempo_bpm)

    # (tick, order, event bytes): note-offs sort ahead of note-ons at a tick
    events: list[tuple[int, int, bytes]] = [
        (0, 0, bytes([0xFF, 0x58, 0x04, num, den_log, 24, 8])),
        (0, 0, bytes([0xFF, 0x51, 0x03]) + uspq.to_bytes(3, "big")),
    ]
    sounding: dict[int, list[tuple[int, int]]] = {}  # pitch -> [(end, channel)]
    for note in score.notes:
        slots = sounding.setdefault(note.pitch, [])
        slots[:] = [(end, ch) for end, ch in slots if end > note.onset]
        used = {ch for _, ch in slots}
        channel = next((c for c in range(16) if c not in used), None)
        if channel is None:
            channel = 0
            log.warning("more than 16 overlapping notes of pitch %d; pairing may drift", note.pitch)
        slots.append((note.onset + note.duration, channel))
        events.append((note.onset, 1, bytes([0x90 | channel, note.pitch, note.velocity])))
        events.append((note.onset + note.duration, 0, bytes([0x80 | channel, note.pitch, 0x40])))
    events.sort(key=lambda e: (e[0], e[1]))

    body = bytearray()
    tick = 0
    for event_tick, _, payload in events:
        body += _write_vlq(event_tick - tick)
        body += payload
        tick = event_tick
    body += _write_vlq(0) + bytes([0xFF, 0x2F, 0x00])

    header = b"MThd" + (6).to_bytes(4, "big") + (0).to_bytes(2, "big")
    header += (1).to_bytes(2, "big") + score.ticks_per_beat.to_bytes(2, "big")
    return header + b"MTrk" + len(body).to_bytes(4, "big") + bytes(body)
