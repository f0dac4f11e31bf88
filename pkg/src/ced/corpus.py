"""Dyadic conversation data: transcripts, per-turn feature store, turn pairs,
fake-session shuffling and a synthetic entrained corpus generator.

On-disk corpus layout::

    <root>/transcripts/<session_id>.tsv   session_id, speaker, start, end[, text]
    <root>/features/manifest.json         per-turn index into the blobs below
    <root>/features/<session_id>.f32      little-endian float32, row-major [T x D]
    <root>/metadata.json                  session_id -> {gender, age, scores...}
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DegenerateSessionError,
    DimensionError,
    EmptyCorpusError,
    ParseError,
    UnsupportedSessionError,
)

log = logging.getLogger(__name__)

PAUSE_THRESHOLD = 0.5
FRAME_PERIOD = 0.02
MIN_FRAMES = 2
FEATURE_DTYPE = np.dtype("<f4")
STORE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Turn:
    session_id: str
    speaker: str
    start: float
    end: float
    segments: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if not self.segments:
            object.__setattr__(self, "segments", ((self.start, self.end),))
        if not self.end > self.start:
            raise DataError(f"turn end {self.end} must exceed start {self.start}")
        prev_end = self.start
        for s, e in self.segments:
            if not (e > s and s >= prev_end - 1e-9 and e <= self.end + 1e-9):
                raise DataError(f"bad voiced sub-spans {self.segments} for turn [{self.start}, {self.end}]")
            prev_end = e

    @property
    def voiced_duration(self) -> float:
        return sum(e - s for s, e in self.segments)


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    session_id: str
    turn_index: int
    speaker: str
    frames: np.ndarray
    frame_period: float = FRAME_PERIOD

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise DimensionError(f"frames must be a non-empty [T x D] matrix, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise DataError(f"non-finite feature values in {self.session_id} turn {self.turn_index}")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class Conversation:
    session_id: str
    turns: list[Turn]
    speaker_a: str
    speaker_b: str
    metadata: dict = field(default_factory=dict)
    features: list[FeatureSequence] | None = None
    # order[i] = index of the original turn whose content now sits in slot i
    order: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.order is None:
            self.order = tuple(range(len(self.turns)))
        if self.features is not None and len(self.features) != len(self.turns):
            raise DataError(f"{self.session_id}: {len(self.features)} feature sequences for {len(self.turns)} turns")

    @property
    def speakers(self) -> list[str]:
        return [t.speaker for t in self.turns]

    @property
    def is_shuffled(self) -> bool:
        return self.order != tuple(range(len(self.turns)))


@dataclass(frozen=True, eq=False)
class TurnPair:
    leading: FeatureSequence
    responding: FeatureSequence
    index: int = 0
    session_id: str = ""

    @property
    def direction(self) -> tuple[str, str]:
        return (self.leading.speaker, self.responding.speaker)


@dataclass(frozen=True)
class SynthConfig:
    n_sessions: int = 200
    turns_per_session: int = 10
    dim: int = 32
    alpha: float = 0.8
    noise_scale: float = 1.0
    seed: int = 0
    frames_min: int = 8
    frames_max: int = 24
    frame_period: float = FRAME_PERIOD
    pause_prob: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.noise_scale > 0:
            raise ConfigError(f"noise_scale must be > 0, got {self.noise_scale}")
        for name in ("n_sessions", "turns_per_session", "dim", "frames_min"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.frames_max < self.frames_min:
            raise ConfigError("frames_max must be >= frames_min")
        if not self.frame_period > 0:
            raise ConfigError("frame_period must be > 0")
        if not 0.0 <= self.pause_prob <= 1.0:
            raise ConfigError("pause_prob must lie in [0, 1]")


# -- transcripts --------------------------------------------------------------


def parse_transcript(path, pause_threshold: float = PAUSE_THRESHOLD) -> Conversation:
    """Read one session's transcript and merge same-speaker segments into turns.

    Consecutive segments of one speaker separated by less than
    ``pause_threshold`` seconds become a single turn; the gaps survive as
    holes between the turn's voiced sub-spans.
    """
    path = Path(path)
    records = []
    session_id = None
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t", 4)
            if len(parts) < 4:
                raise ParseError(path, line_no, f"expected >= 4 tab-separated fields, got {len(parts)}")
            sid, speaker = parts[0].strip(), parts[1].strip()
            try:
                start, end = float(parts[2]), float(parts[3])
            except ValueError:
                raise ParseError(path, line_no, f"non-numeric time in {parts[2]!r}, {parts[3]!r}") from None
            if not (math.isfinite(start) and math.isfinite(end)) or end <= start:
                raise ParseError(path, line_no, f"invalid segment [{start}, {end}]")
            if not sid or not speaker:
                raise ParseError(path, line_no, "empty session_id or speaker")
            if session_id is None:
                session_id = sid
            elif sid != session_id:
                raise ParseError(path, line_no, f"mixed sessions {session_id!r} and {sid!r} in one file")
            records.append((start, end, speaker))
    if not records:
        raise EmptyCorpusError(f"{path}: no transcript records")

    speakers = list(dict.fromkeys(spk for _, _, spk in sorted(records)))
    if len(speakers) != 2:
        raise UnsupportedSessionError(f"{path}: expected exactly 2 speakers, found {speakers}")

    records.sort(key=lambda r: (r[0], r[1]))
    grouped: list[tuple[str, list[list[float]]]] = []
    for start, end, speaker in records:
        if grouped and grouped[-1][0] == speaker and start - grouped[-1][1][-1][1] < pause_threshold:
            segs = grouped[-1][1]
            if start <= segs[-1][1]:
                segs[-1][1] = max(segs[-1][1], end)
            else:
                segs.append([start, end])
        else:
            grouped.append((speaker, [[start, end]]))

    turns = [
        Turn(session_id, spk, segs[0][0], segs[-1][1], tuple((s, e) for s, e in segs))
        for spk, segs in grouped
    ]
    return Conversation(session_id, turns, speakers[0], speakers[1])


def write_transcript(path, conv: Conversation) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for turn in conv.turns:
            for s, e in turn.segments:
                fh.write(f"{conv.session_id}\t{turn.speaker}\t{s:.6f}\t{e:.6f}\n")


# -- feature store --------------------------------------------------------------


class FeatureStore:
    """Read-only access to per-turn feature matrices listed in a manifest.

    Reads go through ``np.fromfile`` with explicit offsets, so concurrent
    readers never share a file cursor.
    """

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"feature manifest not found: {manifest_path}")
        with open(manifest_path, encoding="utf-8") as fh:
            self.manifest = json.load(fh)
        self.dim = int(self.manifest["dim"])
        self.frame_period = float(self.manifest.get("frame_period", FRAME_PERIOD))
        self._index = {
            sid: {int(e["turn_index"]): e for e in entries}
            for sid, entries in self.manifest["sessions"].items()
        }

    def sessions(self) -> list[str]:
        return sorted(self._index)

    def entries(self, session_id: str) -> dict:
        try:
            return self._index[session_id]
        except KeyError:
            raise DataError(f"session {session_id!r} missing from feature store") from None

    def get(self, session_id: str, turn_index: int) -> np.ndarray:
        entry = self.entries(session_id).get(turn_index)
        if entry is None:
            raise DataError(f"no features for {session_id!r} turn {turn_index}")
        count = int(entry["frame_count"]) * self.dim
        data = np.fromfile(self.root / entry["file"], dtype=FEATURE_DTYPE, count=count, offset=int(entry.get("offset", 0)))
        if data.size != count:
            raise DataError(f"truncated feature blob for {session_id!r} turn {turn_index}")
        return data.reshape(int(entry["frame_count"]), self.dim).astype(np.float32)


def write_feature_store(root, conversations: Iterable[Conversation], frame_period: float = FRAME_PERIOD) -> list[Path]:
    """Write one blob per session plus the manifest. Returns written paths."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sessions: dict[str, list[dict]] = {}
    written = []
    dim = None
    for conv in conversations:
        if conv.features is None:
            raise DataError(f"{conv.session_id}: no features to write")
        fname = f"{conv.session_id}.f32"
        entries, offset = [], 0
        with open(root / fname, "wb") as fh:
            for idx, fs in enumerate(conv.features):
                if dim is None:
                    dim = fs.dim
                elif fs.dim != dim:
                    raise DimensionError(f"feature dim {fs.dim} != corpus dim {dim}")
                blob = np.ascontiguousarray(fs.frames, dtype=FEATURE_DTYPE).tobytes()
                fh.write(blob)
                entries.append({
                    "turn_index": idx,
                    "speaker": fs.speaker,
                    "frame_count": fs.n_frames,
                    "file": fname,
                    "offset": offset,
                })
                offset += len(blob)
        sessions[conv.session_id] = entries
        written.append(root / fname)
    manifest = {"format_version": STORE_FORMAT_VERSION, "dim": dim, "frame_period": frame_period,
                "dtype": "float32", "byte_order": "little", "sessions": sessions}
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    written.append(root / "manifest.json")
    return written


def attach_features(conv: Conversation, store: FeatureStore, min_frames: int = MIN_FRAMES) -> Conversation:
    """Return a copy of ``conv`` carrying features; turns shorter than
    ``min_frames`` are dropped with a warning."""
    entries = store.entries(conv.session_id)
    turns, feats = [], []
    for idx, turn in enumerate(conv.turns):
        entry = entries.get(idx)
        if entry is None:
            raise DataError(f"{conv.session_id}: feature store lacks turn {idx}")
        if entry.get("speaker", turn.speaker) != turn.speaker:
            raise DataError(f"{conv.session_id} turn {idx}: speaker mismatch with feature store")
        n = int(entry["frame_count"])
        expected = turn.voiced_duration / store.frame_period
        if abs(n - expected) > 1 + 1e-6:
            raise DataError(
                f"{conv.session_id} turn {idx}: {n} frames but voiced duration implies {expected:.2f}"
            )
        if n < min_frames:
            log.warning("dropping %s turn %d: %d frames < %d", conv.session_id, idx, n, min_frames)
            continue
        turns.append(turn)
        feats.append(FeatureSequence(conv.session_id, idx, turn.speaker, store.get(conv.session_id, idx), store.frame_period))
    return dataclasses.replace(conv, turns=turns, features=feats, order=None)


def load_metadata(path) -> dict[str, dict]:
    path = Path(path)
    if not path.exists():
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_metadata(path, metadata: dict[str, dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metadata, fh, indent=1, sort_keys=True)


def load_corpus(root, pause_threshold: float = PAUSE_THRESHOLD, metadata_path=None) -> list[Conversation]:
    root = Path(root)
    tdir = root / "transcripts"
    if not tdir.is_dir():
        raise DataError(f"no transcripts directory under {root}")
    paths = sorted(tdir.glob("*.tsv"))
    if not paths:
        raise EmptyCorpusError(f"no transcripts in {tdir}")
    store = FeatureStore(root / "features")
    metadata = load_metadata(metadata_path or root / "metadata.json")
    corpus = []
    for p in paths:
        conv = attach_features(parse_transcript(p, pause_threshold), store)
        conv.metadata = dict(metadata.get(conv.session_id, {}))
        corpus.append(conv)
    return corpus


def write_corpus(root, corpus: Sequence[Conversation], frame_period: float = FRAME_PERIOD) -> list[Path]:
    root = Path(root)
    (root / "transcripts").mkdir(parents=True, exist_ok=True)
    written = []
    for conv in corpus:
        p = root / "transcripts" / f"{conv.session_id}.tsv"
        write_transcript(p, conv)
        written.append(p)
    written += write_feature_store(root / "features", corpus, frame_period)
    write_metadata(root / "metadata.json", {c.session_id: c.metadata for c in corpus})
    written.append(root / "metadata.json")
    return written


# -- pairs and shuffling ------------------------------------------------------------


def make_turn_pairs(conv: Conversation) -> list[TurnPair]:
    if conv.features is None:
        raise DataError(f"{conv.session_id}: features not attached")
    pairs = []
    for i in range(len(conv.turns) - 1):
        if conv.turns[i].speaker != conv.turns[i + 1].speaker:
            pairs.append(TurnPair(conv.features[i], conv.features[i + 1], len(pairs), conv.session_id))
    return pairs


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def shuffle_session(conv: Conversation, rng_seed) -> Conversation:
    """Build a fake session by permuting each speaker's turn contents among
    that speaker's own slots.

    Speakers with two or more turns get a derangement, so no slot keeps its
    original content unless its speaker has a single turn. Timing and the
    speaker pattern of the slots are untouched.
    """
    rng = np.random.default_rng(rng_seed)
    n = len(conv.turns)
    order = list(range(n))
    moved = False
    for speaker in (conv.speaker_a, conv.speaker_b):
        slots = [i for i, t in enumerate(conv.turns) if t.speaker == speaker]
        if len(slots) < 2:
            continue
        perm = _derangement(len(slots), rng)
        for dst, src in zip(slots, perm):
            order[dst] = conv.order[slots[src]]
        moved = True
    if not moved:
        raise DegenerateSessionError(f"{conv.session_id}: {n} turns admit no non-identity within-speaker shuffle")
    base = {orig: k for k, orig in enumerate(conv.order)}
    feats = None
    if conv.features is not None:
        feats = [conv.features[base[o]] for o in order]
    return dataclasses.replace(conv, features=feats, order=tuple(order), metadata=dict(conv.metadata))


# -- synthetic corpus -----------------------------------------------------------------


def synth_session(cfg: SynthConfig, index: int, seed_seq: np.random.SeedSequence) -> Conversation:
    rng = np.random.default_rng(seed_seq)
    sid = f"synth{index:04d}"
    speakers = ("A", "B")
    style = {s: rng.standard_normal(cfg.dim) for s in speakers}
    turns, feats = [], []
    t = 0.0
    prev_summary = None
    for k in range(cfg.turns_per_session):
        spk = speakers[k % 2]
        n = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
        base = style[spk] if prev_summary is None else cfg.alpha * prev_summary + (1 - cfg.alpha) * style[spk]
        frames = base + cfg.noise_scale * rng.standard_normal((n, cfg.dim))
        prev_summary = frames.mean(axis=0)

        # voiced segments; an optional short intra-turn pause splits the turn
        start = round(t, 6)
        if n >= 2 * MIN_FRAMES and rng.random() < cfg.pause_prob:
            n1 = int(rng.integers(1, n))
            pause = round(float(rng.uniform(0.05, 0.4)), 3)
            s1 = (start, round(start + n1 * cfg.frame_period, 6))
            s2_start = round(s1[1] + pause, 6)
            s2 = (s2_start, round(s2_start + (n - n1) * cfg.frame_period, 6))
            segs = (s1, s2)
        else:
            segs = ((start, round(start + n * cfg.frame_period, 6)),)
        turns.append(Turn(sid, spk, segs[0][0], segs[-1][1], segs))
        feats.append(FeatureSequence(sid, k, spk, frames.astype(np.float32), cfg.frame_period))
        t = segs[-1][1] + float(rng.uniform(0.6, 1.2))

    metadata = {
        "gender": str(rng.choice(["M", "F"])),
        "age": round(float(rng.uniform(3.5, 13.5)), 2),
        "random_score": float(rng.standard_normal()),
    }
    return Conversation(sid, turns, "A", "B", metadata, feats)


def synth_corpus(cfg: SynthConfig) -> list[Conversation]:
    """Generate dyadic sessions in which each turn drifts toward the pooled
    features of the turn before it.

    Every frame of turn t is ``alpha * mean(frames of turn t-1)
    + (1 - alpha) * style[speaker] + noise_scale * N(0, I)``; the first turn
    uses its speaker's style alone. ``alpha = 0`` gives independent speakers.
    """
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_sessions)
    return [synth_session(cfg, i, s) for i, s in enumerate(seqs)]
