"""Conversation data: utterances, the GXEB embedding file, context windows,
dialogue-level splits and a synthetic conversation generator."""

from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

EMOTIONS = ("anger", "happiness", "neutrality", "sadness")
LABEL_INDEX = {name: i for i, name in enumerate(EMOTIONS)}
ROLES = ("self", "interlocutor")
MODALITIES = ("audio", "text")

MAGIC = b"GXEB"
VERSION = 1
_HEADER = struct.Struct("<4sHIIQ")
_U64 = struct.Struct("<Q")


class CorpusError(Exception):
    """Base class for corpus problems."""


class FormatError(CorpusError):
    """Not a GXEB file, or an unsupported version."""


class CorruptionError(CorpusError):
    """The file ends early or its sections disagree in size."""


class ValidationError(CorpusError, ValueError):
    """Content violates a corpus invariant."""


@dataclass(frozen=True, eq=False)
class Utterance:
    dialogue_id: str
    index: int
    speaker_id: str
    label: str
    audio: np.ndarray
    text: np.ndarray

    @property
    def label_index(self) -> int:
        return LABEL_INDEX[self.label]

    def embedding(self, modality: str) -> np.ndarray:
        return self.audio if modality == "audio" else self.text

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            (self.dialogue_id, self.index, self.speaker_id, self.label)
            == (other.dialogue_id, other.index, other.speaker_id, other.label)
            and np.array_equal(self.audio, other.audio)
            and np.array_equal(self.text, other.text)
        )


@dataclass(frozen=True)
class Dialogue:
    id: str
    utterances: tuple

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, i) -> Utterance:
        return self.utterances[i]

    @property
    def speakers(self) -> frozenset:
        return frozenset(u.speaker_id for u in self.utterances)

    @property
    def speaker_ids(self) -> list:
        return [u.speaker_id for u in self.utterances]

    @property
    def labels(self) -> list:
        return [u.label for u in self.utterances]


@dataclass(frozen=True)
class Corpus:
    dialogues: tuple
    embedding_dim: int

    def __post_init__(self):
        object.__setattr__(self, "dialogues", tuple(self.dialogues))
        validate(self)

    @property
    def label_histogram(self) -> dict:
        counts = Counter(u.label for d in self.dialogues for u in d.utterances)
        return {e: counts.get(e, 0) for e in EMOTIONS}

    @property
    def n_utterances(self) -> int:
        return sum(len(d) for d in self.dialogues)

    def utterances(self) -> Iterable[Utterance]:
        for d in self.dialogues:
            yield from d.utterances

    def __len__(self):
        return len(self.dialogues)


def validate(corpus: Corpus) -> None:
    D = corpus.embedding_dim
    seen = set()
    for d in corpus.dialogues:
        if d.id in seen:
            raise ValidationError(f"dialogue id {d.id!r} appears twice")
        seen.add(d.id)
        for i, u in enumerate(d.utterances):
            if u.dialogue_id != d.id:
                raise ValidationError(f"utterance of {u.dialogue_id!r} filed under dialogue {d.id!r}")
            if u.index != i:
                raise ValidationError(f"dialogue {d.id!r}: expected utterance index {i}, found {u.index}")
            if u.label not in LABEL_INDEX:
                raise ValidationError(f"unknown label {u.label!r} in dialogue {d.id!r}")
            if u.audio.shape != (D,) or u.text.shape != (D,):
                raise ValidationError(
                    f"dialogue {d.id!r} utterance {i}: embedding shapes {u.audio.shape}/{u.text.shape}, expected ({D},)"
                )


def make_corpus(records: Iterable[dict], embedding_dim: int) -> Corpus:
    """Group flat utterance records (in order) into dialogues."""
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r["dialogue_id"], []).append(
            Utterance(r["dialogue_id"], int(r["index"]), r["speaker_id"], r["label"],
                      np.asarray(r["audio"], dtype=np.float32), np.asarray(r["text"], dtype=np.float32))
        )
    return Corpus(tuple(Dialogue(k, tuple(v)) for k, v in groups.items()), embedding_dim)


# ---------------------------------------------------------------------------
# GXEB file format


def corpus_bytes(corpus: Corpus) -> bytes:
    meta = "".join(
        json.dumps(
            {"dialogue_id": u.dialogue_id, "index": u.index, "speaker_id": u.speaker_id, "label": u.label},
            sort_keys=True, separators=(",", ":"), ensure_ascii=False,
        ) + "\n"
        for u in corpus.utterances()
    ).encode("utf-8")
    parts = [
        _HEADER.pack(MAGIC, VERSION, corpus.embedding_dim, len(corpus.dialogues), corpus.n_utterances),
        _U64.pack(len(meta)),
        meta,
    ]
    for u in corpus.utterances():
        parts.append(u.audio.astype("<f4").tobytes())
        parts.append(u.text.astype("<f4").tobytes())
    return b"".join(parts)


def write_corpus(corpus: Corpus, path) -> None:
    Path(path).write_bytes(corpus_bytes(corpus))


def parse_corpus(buf: bytes) -> Corpus:
    if len(buf) < _HEADER.size:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise FormatError("not a GXEB file (bad magic)")
        raise CorruptionError(f"file too short for header ({len(buf)} bytes)")
    magic, version, dim, n_dialogues, n_utt = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"not a GXEB file (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"unsupported GXEB version {version}")
    off = _HEADER.size
    if len(buf) < off + _U64.size:
        raise CorruptionError("file ends before metadata length")
    (meta_len,) = _U64.unpack_from(buf, off)
    off += _U64.size
    if len(buf) < off + meta_len:
        raise CorruptionError("file ends inside the metadata block")
    try:
        lines = buf[off : off + meta_len].decode("utf-8").splitlines()
        meta = [json.loads(line) for line in lines if line]
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable metadata block: {exc}") from exc
    off += meta_len
    if len(meta) != n_utt:
        raise CorruptionError(f"header announces {n_utt} utterances, metadata has {len(meta)}")
    need = n_utt * 2 * dim * 4
    if len(buf) - off < need:
        raise CorruptionError(f"payload truncated: {len(buf) - off} of {need} bytes")
    if len(buf) - off > need:
        raise CorruptionError(f"{len(buf) - off - need} trailing bytes after payload")
    payload = np.frombuffer(buf, dtype="<f4", count=n_utt * 2 * dim, offset=off).reshape(n_utt, 2, dim)
    payload = payload.astype(np.float32)
    records = []
    for m, emb in zip(meta, payload):
        try:
            records.append({**{k: m[k] for k in ("dialogue_id", "index", "speaker_id", "label")},
                            "audio": emb[0], "text": emb[1]})
        except KeyError as exc:
            raise ValidationError(f"metadata line missing field {exc}") from exc
    corpus = make_corpus(records, dim)
    if len(corpus.dialogues) != n_dialogues:
        raise ValidationError(
            f"header announces {n_dialogues} dialogues, metadata groups into {len(corpus.dialogues)}"
        )
    return corpus


def load_corpus(path) -> Corpus:
    return parse_corpus(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# context windows


@dataclass(frozen=True)
class StreamRef:
    role: str
    modality: str
    frame: int
    utterance_index: Optional[int] = None

    @property
    def padded(self) -> bool:
        return self.utterance_index is None

    @property
    def slot(self) -> int:
        return stream_slot(self.role, self.modality, self.frame)

    @property
    def is_reference(self) -> bool:
        return self.role == "self" and self.modality == "audio" and self.frame == 0

    @property
    def label(self) -> str:
        # short tag in the style "0A0": role (0 self, 1 interlocutor), modality, frame
        return f"{ROLES.index(self.role)}{self.modality[0].upper()}{self.frame}"


def stream_slot(role: str, modality: str, frame: int) -> int:
    """Canonical position: frame-major, then role, then modality."""
    return frame * 4 + ROLES.index(role) * 2 + MODALITIES.index(modality)


def canonical_refs(frames: int) -> list:
    return [StreamRef(r, m, f) for f in range(frames) for r in ROLES for m in MODALITIES]


@dataclass(frozen=True, eq=False)
class StreamSet:
    refs: tuple  # StreamRefs in canonical slot order
    embeddings: np.ndarray  # (n_streams, D); zero rows where padded

    @property
    def n_streams(self) -> int:
        return len(self.refs)

    @property
    def padded_mask(self) -> np.ndarray:
        return np.array([r.padded for r in self.refs])


def find_interlocutor(dialogue, t: int) -> Optional[int]:
    """Latest utterance before ``t`` spoken by someone other than the speaker of ``t``."""
    speakers = dialogue.speaker_ids if isinstance(dialogue, Dialogue) else list(dialogue)
    if not 0 <= t < len(speakers):
        raise IndexError(f"utterance {t} outside dialogue of length {len(speakers)}")
    me = speakers[t]
    for j in range(t - 1, -1, -1):
        if speakers[j] != me:
            return j
    return None


def previous_own(dialogue, t: int) -> Optional[int]:
    """Latest utterance before ``t`` by the same speaker."""
    speakers = dialogue.speaker_ids if isinstance(dialogue, Dialogue) else list(dialogue)
    me = speakers[t]
    for j in range(t - 1, -1, -1):
        if speakers[j] == me:
            return j
    return None


def context_indices(dialogue, t: int, frames: int = 3) -> list:
    """Per frame, the (self, interlocutor) utterance indices, None when missing."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    out, anchor = [], t
    for _ in range(frames):
        if anchor is None:
            out.append((None, None))
            continue
        out.append((anchor, find_interlocutor(dialogue, anchor)))
        anchor = previous_own(dialogue, anchor)
    return out


def build_context_window(dialogue: Dialogue, t: int, frames: int = 3) -> StreamSet:
    if not 0 <= t < len(dialogue):
        raise IndexError(f"utterance {t} outside dialogue of length {len(dialogue)}")
    D = dialogue[0].audio.shape[0]
    refs, rows = [], []
    for f, (own, other) in enumerate(context_indices(dialogue, t, frames)):
        for role, idx in (("self", own), ("interlocutor", other)):
            for mod in MODALITIES:
                refs.append(StreamRef(role, mod, f, idx))
                rows.append(np.zeros(D, np.float32) if idx is None else dialogue[idx].embedding(mod))
    return StreamSet(tuple(refs), np.stack(rows))


# ---------------------------------------------------------------------------
# splitting


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dialogues(corpus: Corpus, ratios=(8, 1, 1), seed: int = 42):
    """Dialogue-level train/val/test partition; train absorbs rounding."""
    n = len(corpus.dialogues)
    if n == 0:
        raise ValueError("cannot split an empty corpus")
    if n < 3:
        raise ValueError(f"need at least 3 dialogues to split, got {n}")
    total = float(sum(ratios))
    n_val = _round_half_up(n * ratios[1] / total)
    n_test = _round_half_up(n * ratios[2] / total)
    order = np.random.default_rng(seed).permutation(n)
    test_idx = sorted(order[:n_test])
    val_idx = sorted(order[n_test : n_test + n_val])
    train_idx = sorted(order[n_test + n_val :])
    pick = lambda idx: Corpus(tuple(corpus.dialogues[i] for i in idx), corpus.embedding_dim)
    return pick(train_idx), pick(val_idx), pick(test_idx)


# ---------------------------------------------------------------------------
# synthetic conversations


@dataclass
class SyntheticConfig:
    n_dialogues: int = 200
    utterances_per_dialogue: tuple = (6, 12)
    self_transition_prob: float = 0.8
    # signal scale per modality; the same utterance is the "self" stream of its
    # own targets and the "interlocutor" stream of the partner's targets
    signal_scale: dict = field(default_factory=lambda: {"audio": 1.0, "text": 0.5})
    class_separation: float = 4.0
    sigma: float = 1.0
    seed: int = 7
    embedding_dim: int = 64
    turn_switch_prob: float = 0.8
    class_probs: tuple = (0.25, 0.25, 0.25, 0.25)
    # "tiled": one prototype of width embedding_dim/steps repeated in every
    # segment, so each step of a segmented embedding carries the class;
    # "orthogonal": unstructured orthogonal directions over the full vector
    mean_layout: str = "tiled"
    steps: int = 16

    def validate(self):
        if not 0.0 <= self.self_transition_prob <= 1.0:
            raise ValueError("self_transition_prob must lie in [0, 1]")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n_dialogues < 0:
            raise ValueError("n_dialogues must be non-negative")
        lo, hi = self.utterances_per_dialogue
        if not 1 <= lo <= hi:
            raise ValueError("utterances_per_dialogue must be a range 1 <= lo <= hi")
        if set(self.signal_scale) - set(MODALITIES):
            raise ValueError(f"signal_scale keys must be among {MODALITIES}")
        if any(v < 0 for v in self.signal_scale.values()):
            raise ValueError("signal scales must be >= 0")
        if self.embedding_dim < 4:
            raise ValueError("embedding_dim must be at least 4 (one direction per class)")
        if self.mean_layout not in ("tiled", "orthogonal"):
            raise ValueError(f"unknown mean_layout {self.mean_layout!r}")
        if self.mean_layout == "tiled":
            if self.steps < 1 or self.embedding_dim % self.steps:
                raise ValueError(f"{self.steps} steps do not divide embedding_dim {self.embedding_dim}")
            if self.embedding_dim // self.steps < 4:
                raise ValueError("tiled class means need embedding_dim / steps >= 4")
        if not 0.0 <= self.turn_switch_prob <= 1.0:
            raise ValueError("turn_switch_prob must lie in [0, 1]")
        p = np.asarray(self.class_probs, float)
        if p.shape != (4,) or (p < 0).any() or not np.isclose(p.sum(), 1.0):
            raise ValueError("class_probs must be 4 non-negative weights summing to 1")


def synthetic_class_means(config: SyntheticConfig) -> np.ndarray:
    """Mutually orthogonal class means of length ``class_separation``, (4, D).

    Both layouts give the same pairwise distances, hence the same Bayes rate.
    """
    rng = np.random.default_rng([config.seed, 0xC1A55])
    if config.mean_layout == "orthogonal":
        q, _ = np.linalg.qr(rng.standard_normal((config.embedding_dim, 4)))
        return config.class_separation * q.T
    steps = config.steps
    q, _ = np.linalg.qr(rng.standard_normal((config.embedding_dim // steps, 4)))
    return config.class_separation * np.tile(q.T, (1, steps)) / np.sqrt(steps)


def generate_synthetic(config: SyntheticConfig) -> Corpus:
    """Two-speaker dialogues whose per-speaker emotions follow a sticky Markov chain."""
    config.validate()
    means = synthetic_class_means(config)
    rng = np.random.default_rng(config.seed)
    q = config.self_transition_prob
    scale = {m: float(config.signal_scale.get(m, 0.0)) for m in MODALITIES}
    lo, hi = config.utterances_per_dialogue
    D = config.embedding_dim
    dialogues = []
    for di in range(config.n_dialogues):
        did = f"syn{di:05d}"
        n = int(rng.integers(lo, hi + 1))
        speaker = int(rng.integers(2))
        current = [None, None]
        utts = []
        for t in range(n):
            if t > 0 and rng.random() < config.turn_switch_prob:
                speaker = 1 - speaker
            prev = current[speaker]
            if prev is None:
                label = int(rng.choice(4, p=config.class_probs))
            elif rng.random() < q:
                label = prev
            else:
                label = int(rng.choice([c for c in range(4) if c != prev]))
            current[speaker] = label
            audio = scale["audio"] * means[label] + config.sigma * rng.standard_normal(D)
            text = scale["text"] * means[label] + config.sigma * rng.standard_normal(D)
            utts.append(Utterance(did, t, f"{did}_{'AB'[speaker]}", EMOTIONS[label],
                                  audio.astype(np.float32), text.astype(np.float32)))
        dialogues.append(Dialogue(did, tuple(utts)))
    return Corpus(tuple(dialogues), D)


def same_speaker_pairs(corpus: Corpus):
    """(previous, current) label pairs of consecutive turns by the same speaker."""
    for d in corpus.dialogues:
        last = {}
        for u in d.utterances:
            if u.speaker_id in last:
                yield last[u.speaker_id], u.label
            last[u.speaker_id] = u.label
