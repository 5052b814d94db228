"""Dialogical emotion decoding: rescoring per-utterance posteriors over a
whole dialogue.

A hypothesis is scored, utterance by utterance, as

    log p(y_k | x_k) + log p(shift) + log ddCRP(y_k | earlier labels)

where the shift is measured against the same speaker's previous label
(continuation costs ``log(1 - p0)`` and skips the ddCRP term; a change costs
``log p0`` plus the ddCRP term; a speaker's first turn gets the ddCRP term
only).  The ddCRP favours labels with large existing blocks and reserves
mass ``alpha`` for labels not yet seen in the dialogue.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .corpus import EMOTIONS, LABEL_INDEX, Corpus

N_LABELS = len(EMOTIONS)
P0_EPS = 1e-6
MAX_BRUTE_FORCE = 10


@dataclass(frozen=True)
class ShiftModel:
    p0: float

    def __post_init__(self):
        object.__setattr__(self, "p0", float(min(max(self.p0, P0_EPS), 1.0 - P0_EPS)))


@dataclass(frozen=True)
class BlockState:
    counts: tuple = (0.0,) * N_LABELS
    alpha: float = 1.0

    def add(self, label: int, decay: float = 1.0) -> "BlockState":
        c = [x * decay for x in self.counts]
        c[label] += 1.0
        return BlockState(tuple(c), self.alpha)


@dataclass
class DecodeConfig:
    beam_width: int = 16
    alpha: float = 1.0
    p0: Optional[float] = None  # overrides the estimate when set
    decay: float = 1.0  # 1.0: every earlier utterance counts fully
    selection: str = "nested"  # or "topk"

    def __post_init__(self):
        if self.selection not in ("nested", "topk"):
            raise ValueError(f"unknown beam selection {self.selection!r}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")


@dataclass(frozen=True)
class BeamHypothesis:
    labels: tuple
    shifts: tuple
    last: tuple  # (speaker, label) pairs, one per speaker seen so far
    blocks: BlockState
    log_score: float

    def last_label(self, speaker) -> Optional[int]:
        for s, lab in self.last:
            if s == speaker:
                return lab
        return None


def estimate_p0(train, per_speaker: bool = False):
    """Fraction of consecutive same-speaker turns whose label changes.

    ``train`` is a Corpus or an iterable of (speaker, label) sequences.
    With ``per_speaker`` the estimate is returned per speaker id instead of
    pooled.
    """
    pairs = _pairs(train)
    if per_speaker:
        out = {}
        for spk, a, b in pairs:
            n, k = out.get(spk, (0, 0))
            out[spk] = (n + 1, k + (a != b))
        return {s: ShiftModel(k / n).p0 for s, (n, k) in out.items()}
    if not pairs:
        raise ValueError("no consecutive same-speaker utterances to estimate p0 from")
    changed = sum(a != b for _, a, b in pairs)
    return ShiftModel(changed / len(pairs)).p0


def _pairs(train):
    if isinstance(train, Corpus):
        out = []
        for d in train.dialogues:
            last = {}
            for u in d.utterances:
                if u.speaker_id in last:
                    out.append((u.speaker_id, last[u.speaker_id], u.label))
                last[u.speaker_id] = u.label
        return out
    out = []
    for seq in train:
        last = {}
        for spk, lab in seq:
            if spk in last:
                out.append((spk, last[spk], lab))
            last[spk] = lab
    return out


def ddcrp_prior(blocks: BlockState) -> np.ndarray:
    """Label distribution given the block sizes seen so far in the dialogue."""
    if not blocks.alpha > 0:
        raise ValueError("alpha must be positive")
    counts = np.asarray(blocks.counts, dtype=float)
    seen = counts > 0
    n_unseen = N_LABELS - int(seen.sum())
    if n_unseen == 0:
        return counts / counts.sum()
    mass = np.where(seen, counts, blocks.alpha / n_unseen)
    return mass / (counts.sum() + blocks.alpha)


def _prior_of(blocks: BlockState, label: int) -> float:
    # scalar twin of ddcrp_prior, same arithmetic
    counts = blocks.counts
    n_seen = sum(1 for c in counts if c > 0)
    total = sum(counts)
    if n_seen == N_LABELS:
        return counts[label] / total
    mass = counts[label] if counts[label] > 0 else blocks.alpha / (N_LABELS - n_seen)
    return mass / (total + blocks.alpha)


def step_score(hyp: BeamHypothesis, label: int, posterior: Sequence[float], shift: ShiftModel, speaker) -> float:
    """Log-score increment for appending ``label`` spoken by ``speaker``."""
    p = float(posterior[label])
    lp = math.log(p) if p > 0 else -math.inf
    prev = hyp.last_label(speaker)
    if prev is not None and prev == label:
        return lp + math.log1p(-shift.p0)
    prior = _prior_of(hyp.blocks, label)
    shift_term = 0.0 if prev is None else math.log(shift.p0)
    return lp + shift_term + math.log(prior)


def _extend(hyp: BeamHypothesis, label: int, inc: float, speaker, decay: float) -> BeamHypothesis:
    prev = hyp.last_label(speaker)
    shifted = prev is not None and prev != label
    last = tuple((s, l) for s, l in hyp.last if s != speaker) + ((speaker, label),)
    return BeamHypothesis(hyp.labels + (label,), hyp.shifts + (int(shifted),), last,
                          hyp.blocks.add(label, decay), hyp.log_score + inc)


def _start(alpha: float) -> BeamHypothesis:
    return BeamHypothesis((), (), (), BlockState((0.0,) * N_LABELS, alpha), 0.0)


def _check_inputs(posteriors, speakers):
    post = np.asarray(posteriors, dtype=float)
    if post.ndim != 2 or post.shape[1] != N_LABELS:
        raise ValueError(f"posteriors must be (K, {N_LABELS}), got {post.shape}")
    if len(speakers) != post.shape[0]:
        raise ValueError("need one speaker id per utterance")
    if post.shape[0] == 0:
        raise ValueError("cannot decode an empty dialogue")
    return post


def sequence_score(labels, posteriors, speakers, shift: ShiftModel, alpha: float = 1.0, decay: float = 1.0) -> float:
    """Objective log p(X, Y) of a full label sequence."""
    post = _check_inputs(posteriors, speakers)
    hyp = _start(alpha)
    for k, lab in enumerate(labels):
        hyp = _extend(hyp, int(lab), step_score(hyp, int(lab), post[k], shift, speakers[k]), speakers[k], decay)
    return hyp.log_score


def ded_decode_full(posteriors, speakers, config: DecodeConfig, shift: ShiftModel) -> BeamHypothesis:
    """Beam search; returns the best complete hypothesis.

    With ``selection="nested"`` (default) slot 0 of every step holds the
    per-utterance argmax path, and slot j holds the best unchosen extension
    of parents 0..j.  Slot j never depends on the width, so widening the beam
    only adds hypotheses: the result is monotone in the width and never worse
    than the argmax path.  ``selection="topk"`` is the textbook variant that
    keeps the overall top-B extensions.
    """
    post = _check_inputs(posteriors, speakers)
    if config.p0 is not None:
        shift = ShiftModel(config.p0)
    key = lambda h: (-h.log_score, h.labels)
    beam = [_start(config.alpha)]
    for k in range(post.shape[0]):
        expand = lambda hyp: [
            _extend(hyp, lab, inc, speakers[k], config.decay)
            for lab in range(N_LABELS)
            if (inc := step_score(hyp, lab, post[k], shift, speakers[k])) != -math.inf
        ]
        if config.selection == "topk":
            cands = sorted((c for hyp in beam for c in expand(hyp)), key=key)
            beam = cands[: config.beam_width]
            continue
        anchor_label = int(np.argmax(post[k]))
        first = expand(beam[0])
        anchor = next(h for h in first if h.labels[-1] == anchor_label)
        chosen, taken = [anchor], {anchor.labels}
        heap = [(key(h), i, h) for i, h in enumerate(first) if h is not anchor]
        heapq.heapify(heap)
        tick = len(heap)
        for j in range(1, config.beam_width):
            if j < len(beam):
                for h in expand(beam[j]):
                    heapq.heappush(heap, (key(h), tick, h))
                    tick += 1
            while heap and heap[0][2].labels in taken:
                heapq.heappop(heap)
            if not heap:
                break
            h = heapq.heappop(heap)[2]
            chosen.append(h)
            taken.add(h.labels)
        beam = chosen
    return min(beam, key=key)


def ded_decode(posteriors, speakers, config: DecodeConfig | None = None, shift: ShiftModel | None = None) -> list:
    """Most probable label sequence (label indices) under the dialogue model."""
    config = config or DecodeConfig()
    if shift is None:
        if config.p0 is None:
            raise ValueError("need a ShiftModel or DecodeConfig.p0")
        shift = ShiftModel(config.p0)
    return list(ded_decode_full(posteriors, speakers, config, shift).labels)


def brute_force_decode_full(posteriors, speakers, shift: ShiftModel, alpha: float = 1.0, decay: float = 1.0):
    """Exact argmax by enumerating all 4**K sequences; returns (labels, score)."""
    post = _check_inputs(posteriors, speakers)
    K = post.shape[0]
    if K > MAX_BRUTE_FORCE:
        raise ValueError(f"brute force limited to {MAX_BRUTE_FORCE} utterances, got {K}")
    best, best_score = None, -math.inf

    # depth-first in lexicographic order; prefixes are scored once and the
    # running sum is accumulated exactly as the beam does it
    def visit(hyp, k):
        nonlocal best, best_score
        if k == K:
            if hyp.log_score > best_score:
                best, best_score = hyp.labels, hyp.log_score
            return
        for lab in range(N_LABELS):
            inc = step_score(hyp, lab, post[k], shift, speakers[k])
            if inc != -math.inf:
                visit(_extend(hyp, lab, inc, speakers[k], decay), k + 1)

    visit(_start(alpha), 0)
    if best is None:
        raise ValueError("no label sequence has non-zero probability")
    return list(best), best_score


def brute_force_decode(posteriors, speakers, shift: ShiftModel, alpha: float = 1.0) -> list:
    return brute_force_decode_full(posteriors, speakers, shift, alpha)[0]


# ---------------------------------------------------------------------------
# posterior interchange (JSON lines)


@dataclass
class PosteriorRecord:
    dialogue_id: str
    index: int
    speaker_id: str
    posterior: list
    gold: Optional[str] = None


def write_posteriors(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            row = {"dialogue_id": r.dialogue_id, "index": int(r.index), "speaker_id": r.speaker_id,
                   "posterior": [float(x) for x in r.posterior]}
            if r.gold is not None:
                row["gold"] = r.gold
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_posteriors(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rec = PosteriorRecord(row["dialogue_id"], int(row["index"]), row["speaker_id"],
                                      [float(x) for x in row["posterior"]], row.get("gold"))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: bad posterior record ({exc})") from exc
            if len(rec.posterior) != N_LABELS:
                raise ValueError(f"{path}:{n}: posterior must have {N_LABELS} entries")
            if rec.gold is not None and rec.gold not in LABEL_INDEX:
                raise ValueError(f"{path}:{n}: unknown gold label {rec.gold!r}")
            out.append(rec)
    return out


def group_dialogues(records) -> dict:
    """dialogue_id -> records sorted by index (first-appearance order of dialogues)."""
    groups: dict = {}
    for r in records:
        groups.setdefault(r.dialogue_id, []).append(r)
    for k in groups:
        groups[k].sort(key=lambda r: r.index)
    return groups


def decode_records(records, config: DecodeConfig, shift: ShiftModel) -> dict:
    """Decode every dialogue in a posterior file; dialogue_id -> label names."""
    out = {}
    for did, rows in group_dialogues(records).items():
        labels = ded_decode([r.posterior for r in rows], [r.speaker_id for r in rows], config, shift)
        out[did] = [(r.index, EMOTIONS[lab]) for r, lab in zip(rows, labels)]
    return out
