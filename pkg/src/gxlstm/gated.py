"""Gated fusion of per-stream xLSTM encodings into emotion logits.

Each prediction target sees ``4 * frames`` streams (self/interlocutor x
audio/text x frame).  Every stream has its own xLSTM encoder; a scalar
sigmoid gate computed from the raw embedding scales that encoder's output,
and the scaled outputs are concatenated (canonical slot order) into a
linear 4-way head.  The current speaker's audio (slot 0) has a fixed gate
of exactly 1.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .corpus import EMOTIONS, Corpus, Dialogue, StreamRef, StreamSet, build_context_window, canonical_refs
from .numerics import Tensor
from .xlstm import XlstmConfig, init_stack, segment_embedding, xlstm_forward

N_CLASSES = len(EMOTIONS)


@dataclass
class ModelConfig:
    embedding_dim: int = 512
    steps: int = 16
    frames: int = 3
    hidden_dim: int = 32
    layers: int = 8
    heads: int = 4
    kernel_size: int = 4
    qkv_blocks: int = 4
    ff_factor: float = 1.3
    pattern: str = "ms"
    cell_gates: str = "exp"
    mode: str = "gated"  # "gated" or "base" (every gate frozen at 1)
    share_frames: bool = False  # one encoder per (role, modality) across frames
    shared_gate: bool = False  # one gate map for all non-reference streams
    strict_mask: bool = False  # padded streams get gate 0
    normalize_ref_audio: bool = False  # L2-normalise the current speaker's audio
    gate_bias_init: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.mode not in ("gated", "base"):
            raise ValueError(f"unknown model mode {self.mode!r}")
        if self.embedding_dim % self.steps:
            raise ValueError(f"{self.steps} steps do not divide embedding dim {self.embedding_dim}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")

    @property
    def n_streams(self) -> int:
        return 4 * self.frames

    def xlstm(self) -> XlstmConfig:
        return XlstmConfig(
            input_dim=self.embedding_dim // self.steps, hidden_dim=self.hidden_dim, layers=self.layers,
            heads=self.heads, kernel_size=self.kernel_size, qkv_blocks=self.qkv_blocks,
            ff_factor=self.ff_factor, pattern=self.pattern, gates=self.cell_gates,
        )


@dataclass
class StreamBatch:
    embeddings: np.ndarray  # (B, S, D)
    padded: np.ndarray  # (B, S) bool
    labels: np.ndarray | None = None  # (B,)

    def __len__(self):
        return self.embeddings.shape[0]

    def subset(self, idx) -> "StreamBatch":
        return StreamBatch(self.embeddings[idx], self.padded[idx],
                           None if self.labels is None else self.labels[idx])


def batch_from_streamsets(sets, labels=None) -> StreamBatch:
    """Stack StreamSets, re-ordering each one into canonical slot order."""
    embs, pads = [], []
    for s in sets:
        order = np.argsort([r.slot for r in s.refs])
        embs.append(s.embeddings[order])
        pads.append(np.array([s.refs[i].padded for i in order]))
    return StreamBatch(np.stack(embs), np.stack(pads), None if labels is None else np.asarray(labels))


@dataclass
class EncodedCorpus:
    """Every utterance of a corpus as a prediction target, context resolved up front."""
    batch: StreamBatch
    dialogue_ids: list
    indices: np.ndarray
    speakers: list

    def __len__(self):
        return len(self.batch)


def encode_corpus(corpus: Corpus, frames: int) -> EncodedCorpus:
    sets, labels, dids, idx, spk = [], [], [], [], []
    for d in corpus.dialogues:
        for t, u in enumerate(d.utterances):
            sets.append(build_context_window(d, t, frames))
            labels.append(u.label_index)
            dids.append(d.id)
            idx.append(t)
            spk.append(u.speaker_id)
    if not sets:
        D = corpus.embedding_dim
        empty = StreamBatch(np.zeros((0, 4 * frames, D), np.float32), np.zeros((0, 4 * frames), bool),
                            np.zeros(0, np.int64))
        return EncodedCorpus(empty, [], np.zeros(0, np.int64), [])
    return EncodedCorpus(batch_from_streamsets(sets, labels), dids, np.asarray(idx), spk)


class GatedXlstm:
    """Twelve-stream (by default) gated xLSTM classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        c = config
        S = c.n_streams
        P = 4 if c.share_frames else S
        self.params = init_stack(c.xlstm(), P, rng, prefix="enc", dtype=self.dtype)
        if c.mode == "gated":
            G = 1 if c.shared_gate else S - 1
            self.params["gate.W"] = Tensor(np.zeros((G, c.embedding_dim, 1), self.dtype), True, "gate.W")
            self.params["gate.b"] = Tensor(np.full((G, 1, 1), c.gate_bias_init, self.dtype), True, "gate.b")
        self.params["head.W"] = Tensor(np.zeros((S * c.hidden_dim, N_CLASSES), self.dtype), True, "head.W")
        self.params["head.b"] = Tensor(np.zeros(N_CLASSES, self.dtype), True, "head.b")

    # ------------------------------------------------------------------
    def _prepare(self, embeddings: np.ndarray) -> np.ndarray:
        E = np.asarray(embeddings, dtype=self.dtype)
        if E.ndim != 3 or E.shape[1:] != (self.config.n_streams, self.config.embedding_dim):
            raise ValueError(
                f"expected (batch, {self.config.n_streams}, {self.config.embedding_dim}) embeddings, got {E.shape}"
            )
        E = np.ascontiguousarray(np.transpose(E, (1, 0, 2)))  # (S, B, D)
        if self.config.normalize_ref_audio:
            norm = np.linalg.norm(E[0], axis=-1, keepdims=True)
            E[0] = np.where(norm > 0, E[0] / np.where(norm > 0, norm, 1.0), 0.0)
        return E

    def encode(self, E: np.ndarray) -> Tensor:
        """Per-stream sequence representations x_j, (S, B, d)."""
        c = self.config
        S, B, D = E.shape
        seq = segment_embedding(E, c.steps)  # (S, B, T, w)
        if c.share_frames:
            F = c.frames
            seq = seq.reshape(F, 4, B, *seq.shape[2:]).transpose(1, 0, 2, 3, 4).reshape(4, F * B, *seq.shape[2:])
            x = xlstm_forward(self.params, c.xlstm(), seq, prefix="enc")  # (4, F*B, d)
            x = x.reshape(4, F, B, c.hidden_dim).transpose(1, 0, 2, 3).reshape(S, B, c.hidden_dim)
            return x
        return xlstm_forward(self.params, c.xlstm(), seq, prefix="enc")

    def gate_weights(self, E: np.ndarray, padded: np.ndarray | None = None, override: dict | None = None) -> Tensor:
        """Gate per stream and target, (S, B); slot 0 is exactly 1."""
        c = self.config
        S, B, _ = E.shape
        ones = Tensor(np.ones((1, B), self.dtype))
        if c.mode == "base":
            w = Tensor(np.ones((S, B), self.dtype))
        else:
            W, b = self.params["gate.W"], self.params["gate.b"]
            pre = nx.matmul(E[1:], W) + b  # (S-1, B, 1), shared gate broadcasts over streams
            w = nx.concat([ones, nx.sigmoid(pre).reshape(S - 1, B)], axis=0)
        if c.strict_mask and padded is not None:
            keep = (~np.asarray(padded, bool)).T.astype(self.dtype)
            keep[0] = 1.0
            w = w * keep
        if override:
            keep = np.ones((S, B), self.dtype)
            fixed = np.zeros((S, B), self.dtype)
            for slot, value in override.items():
                if slot == 0:
                    raise ValueError("the reference stream's gate is fixed at 1")
                keep[slot] = 0.0
                fixed[slot] = value
            w = w * keep + fixed
        return w

    def forward(self, embeddings: np.ndarray, padded: np.ndarray | None = None, gate_override: dict | None = None):
        """Logits (B, 4) and gate weights (S, B) for a batch of stream stacks (B, S, D)."""
        E = self._prepare(embeddings)
        S, B, _ = E.shape
        x = self.encode(E)
        w = self.gate_weights(E, padded, gate_override)
        z = w.reshape(S, B, 1) * x
        Z = z.transpose(1, 0, 2).reshape(B, S * self.config.hidden_dim)
        logits = Z @ self.params["head.W"] + self.params["head.b"]
        return logits, w

    def logits(self, batch: StreamBatch, gate_override=None) -> Tensor:
        return self.forward(batch.embeddings, batch.padded, gate_override)[0]

    def forward_streamsets(self, sets) -> Tensor:
        return self.logits(batch_from_streamsets(sets))

    # ------------------------------------------------------------------
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ValueError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise ValueError(f"{k}: shape {a.shape} != {p.shape}")
            p.data = np.array(a, dtype=self.dtype)


def predict_batches(model: GatedXlstm, batch: StreamBatch, batch_size: int = 256):
    """Posteriors (N, 4) and gate weights (N, S) without building gradients."""
    probs, gates = [], []
    for s in range(0, len(batch), batch_size):
        sub = batch.subset(slice(s, s + batch_size))
        logits, w = model.forward(sub.embeddings, sub.padded)
        probs.append(nx.softmax_np(logits.data, axis=1))
        gates.append(w.data.T)
    if not probs:
        return np.zeros((0, N_CLASSES)), np.zeros((0, model.config.n_streams))
    return np.concatenate(probs), np.concatenate(gates)


def predict_posteriors(model: GatedXlstm, dialogue: Dialogue) -> np.ndarray:
    """Emotion posterior per utterance of one dialogue, (K, 4)."""
    sets = [build_context_window(dialogue, t, model.config.frames) for t in range(len(dialogue))]
    probs, _ = predict_batches(model, batch_from_streamsets(sets))
    return probs


# ---------------------------------------------------------------------------
# gate report


@dataclass
class GateReport:
    refs: list  # StreamRef per slot, canonical order
    mean_abs_weight: np.ndarray
    n: int

    def rows(self):
        # reference row first, then the rest in slot order
        order = sorted(range(len(self.refs)), key=lambda i: (not self.refs[i].is_reference, i))
        for i in order:
            r = self.refs[i]
            yield r.role, r.modality, r.frame, float(self.mean_abs_weight[i]), self.n

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["role", "modality", "frame", "mean_abs_weight", "n"])
        for role, mod, frame, value, n in self.rows():
            w.writerow([role, mod, frame, repr(value), n])
        return buf.getvalue()

    def weight(self, role: str, modality: str, frame: int) -> float:
        for i, r in enumerate(self.refs):
            if (r.role, r.modality, r.frame) == (role, modality, frame):
                return float(self.mean_abs_weight[i])
        raise KeyError((role, modality, frame))

    def to_svg(self, width: int = 640, height: int = 300) -> str:
        """Bar chart of mean |gate| per stream."""
        n = len(self.refs)
        left, bottom, top = 40, 40, 20
        plot_h = height - bottom - top
        bar_w = (width - left - 10) / n
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
            f'<line x1="{left}" y1="{top + plot_h}" x2="{width - 10}" y2="{top + plot_h}" stroke="black"/>',
        ]
        for tick in (0.0, 0.5, 1.0):
            y = top + plot_h * (1 - tick)
            parts.append(f'<text x="{left - 4}" y="{y + 3:.1f}" text-anchor="end">{tick:.1f}</text>')
        for i, (r, v) in enumerate(zip(self.refs, self.mean_abs_weight)):
            h = plot_h * float(np.clip(v, 0, 1))
            x = left + i * bar_w + 2
            fill = "#3b6ea8" if r.modality == "audio" else "#d08c3a"
            parts.append(
                f'<rect x="{x:.1f}" y="{top + plot_h - h:.1f}" width="{bar_w - 4:.1f}" height="{h:.1f}" fill="{fill}"/>'
            )
            parts.append(
                f'<text x="{x + (bar_w - 4) / 2:.1f}" y="{top + plot_h + 14}" text-anchor="middle">{r.label}</text>'
            )
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def gate_report_from_weights(weights: np.ndarray, frames: int) -> GateReport:
    if weights.shape[0] == 0:
        raise ValueError("cannot build a gate report from zero prediction targets")
    return GateReport(canonical_refs(frames), np.abs(weights).mean(axis=0), int(weights.shape[0]))


def export_gate_report(model: GatedXlstm, corpus: Corpus, csv_path=None, svg_path=None) -> GateReport:
    """Average |gate| per stream over every utterance of ``corpus``."""
    enc = encode_corpus(corpus, model.config.frames)
    if len(enc) == 0:
        raise ValueError("cannot report gates on an empty corpus")
    _, gates = predict_batches(model, enc.batch)
    report = gate_report_from_weights(gates, model.config.frames)
    if csv_path is not None:
        Path(csv_path).write_text(report.to_csv())
    if svg_path is not None:
        Path(svg_path).write_text(report.to_svg())
    return report


def read_gate_csv(path) -> list:
    with open(path, newline="") as fh:
        return [
            {"role": r["role"], "modality": r["modality"], "frame": int(r["frame"]),
             "mean_abs_weight": float(r["mean_abs_weight"]), "n": int(r["n"])}
            for r in csv.DictReader(fh)
        ]
