"""Experiment harness: run configuration, training, evaluation, ablation grid
and multi-seed protocol, plus checkpoint and result files."""

from __future__ import annotations

import ast
import copy
import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nx
from .corpus import EMOTIONS, Corpus, SyntheticConfig, generate_synthetic, load_corpus, split_dialogues
from .ded import DecodeConfig, ShiftModel, ded_decode, estimate_p0
from .gated import GatedXlstm, ModelConfig, encode_corpus, export_gate_report, predict_batches
from .metrics import MetricsReport
from .numerics import AdamState, NumericError

log = logging.getLogger(__name__)

REFERENCE_SEEDS = (42, 43, 45, 46, 50)


@dataclass
class RunConfig:
    # data
    feature_mode: str = "synthetic"  # "synthetic" or "clap-file"
    corpus: Optional[str] = None
    synthetic: SyntheticConfig = field(default_factory=lambda: SyntheticConfig(embedding_dim=512))
    split_seed: int = 42
    seeds: tuple = REFERENCE_SEEDS
    # optimisation
    batch_size: int = 32
    learning_rate: float = 0.001
    epochs: int = 10
    patience: int = 5
    # architecture
    embedding_dim: int = 512
    steps: int = 16
    max_seq_len: int = 256
    layers: int = 8
    heads: int = 4
    kernel_size: int = 4
    qkv_blocks: int = 4
    ff_factor: float = 1.3
    activation: str = "gelu"
    hidden_dim: int = 32
    pattern: str = "ms"
    cell_gates: str = "exp"
    frames: int = 3
    model_mode: str = "gated"  # "gated" or "base"
    share_frames: bool = False
    shared_gate: bool = False
    strict_mask: bool = False
    normalize_ref_audio: bool = False
    gate_bias_init: float = 1.0
    dtype: str = "float64"
    # decoding
    decoder: str = "none"  # "none" or "ded"
    beam_width: int = 16
    alpha: float = 1.0
    p0: Optional[float] = None
    # noise added to log-posteriors before scoring (every decoder and model alike)
    posterior_noise: float = 0.0
    noise_seed: int = 1234

    def validate(self):
        choices = {
            "feature_mode": ("synthetic", "clap-file"),
            "model_mode": ("gated", "base"),
            "decoder": ("none", "ded"),
            "activation": ("gelu",),
            "dtype": ("float64", "float32"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.feature_mode == "clap-file" and not self.corpus:
            raise ValueError("feature_mode clap-file needs a corpus path")
        if self.steps > self.max_seq_len:
            raise ValueError(f"steps {self.steps} exceed max_seq_len {self.max_seq_len}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not self.seeds:
            raise ValueError("need at least one run seed")
        if self.feature_mode == "synthetic" and self.synthetic.embedding_dim != self.embedding_dim:
            raise ValueError("synthetic.embedding_dim must equal embedding_dim")
        self.model_config()
        self.decode_config()
        return self

    def model_config(self, mode: Optional[str] = None) -> ModelConfig:
        return ModelConfig(
            embedding_dim=self.embedding_dim, steps=self.steps, frames=self.frames, hidden_dim=self.hidden_dim,
            layers=self.layers, heads=self.heads, kernel_size=self.kernel_size, qkv_blocks=self.qkv_blocks,
            ff_factor=self.ff_factor, pattern=self.pattern, cell_gates=self.cell_gates,
            mode=mode or self.model_mode, share_frames=self.share_frames, shared_gate=self.shared_gate,
            strict_mask=self.strict_mask, normalize_ref_audio=self.normalize_ref_audio,
            gate_bias_init=self.gate_bias_init, dtype=self.dtype,
        )

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(beam_width=self.beam_width, alpha=self.alpha, p0=self.p0)

    # -- serialisation --------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        syn = d["synthetic"]
        syn["utterances_per_dialogue"] = list(syn["utterances_per_dialogue"])
        syn["class_probs"] = list(syn["class_probs"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        syn = dict(d.pop("synthetic", {}) or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        syn_known = {f.name for f in fields(SyntheticConfig)}
        if set(syn) - syn_known:
            raise ValueError(f"unknown synthetic keys: {', '.join(sorted(set(syn) - syn_known))}")
        if "utterances_per_dialogue" in syn:
            syn["utterances_per_dialogue"] = tuple(syn["utterances_per_dialogue"])
        if "class_probs" in syn:
            syn["class_probs"] = tuple(syn["class_probs"])
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        base = cls()
        # the generator follows the run's embedding size and segmentation unless set explicitly
        syn = {"embedding_dim": d.get("embedding_dim", base.embedding_dim), "steps": d.get("steps", base.steps),
               **syn}
        synthetic = replace(base.synthetic, **syn)
        return replace(base, synthetic=synthetic, **d)


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; dotted keys nest.

    Values are Python literals (numbers, quoted strings, lists, dicts,
    True/False/None); anything else is taken as a bare string.
    """
    out: dict = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith("#") else ""
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            parsed = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            parsed = value
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = parsed
    return out


def format_config_text(cfg: RunConfig) -> str:
    lines = ["# run configuration"]
    d = cfg.to_dict()
    syn = d.pop("synthetic")
    for k, v in d.items():
        lines.append(f"{k} = {v!r}")
    for k, v in syn.items():
        lines.append(f"synthetic.{k} = {v!r}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(parse_config_text(Path(path).read_text())).validate()


# ---------------------------------------------------------------------------
# data


def load_data(cfg: RunConfig) -> Corpus:
    if cfg.feature_mode == "clap-file":
        corpus = load_corpus(cfg.corpus)
        if corpus.embedding_dim != cfg.embedding_dim:
            raise ValueError(f"corpus embedding dim {corpus.embedding_dim} != configured {cfg.embedding_dim}")
        return corpus
    return generate_synthetic(cfg.synthetic)


@dataclass
class Splits:
    train: Corpus
    val: Corpus
    test: Corpus


def make_splits(cfg: RunConfig, corpus: Optional[Corpus] = None) -> Splits:
    corpus = corpus if corpus is not None else load_data(cfg)
    return Splits(*split_dialogues(corpus, (8, 1, 1), cfg.split_seed))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: RunConfig
    seed: int
    epoch: int
    params: dict  # name -> ndarray
    optimizer: AdamState
    p0: Optional[float] = None
    model_mode: str = "gated"
    history: list = field(default_factory=list)

    def model(self) -> GatedXlstm:
        m = GatedXlstm(self.config.model_config(self.model_mode), seed=self.seed)
        m.load_arrays(self.params)
        return m


CK_MAGIC = b"GXCK"
CK_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    meta = {
        "config": ck.config.to_dict(), "seed": ck.seed, "epoch": ck.epoch, "p0": ck.p0,
        "model_mode": ck.model_mode, "history": ck.history,
        "adam": {"lr": ck.optimizer.lr, "beta1": ck.optimizer.beta1, "beta2": ck.optimizer.beta2,
                 "eps": ck.optimizer.eps, "step": ck.optimizer.step},
    }
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    blobs = [(f"param/{k}", v) for k, v in ck.params.items()]
    blobs += [(f"adam_m/{k}", v) for k, v in ck.optimizer.m.items()]
    blobs += [(f"adam_v/{k}", v) for k, v in ck.optimizer.v.items()]
    out = [CK_MAGIC, struct.pack("<HQ", CK_VERSION, len(meta_b)), meta_b, struct.pack("<I", len(blobs))]
    for name, arr in blobs:
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes())
    return b"".join(out)


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    from .corpus import CorruptionError, FormatError

    buf = Path(path).read_bytes()
    if buf[:4] != CK_MAGIC:
        raise FormatError("not a GXCK checkpoint")
    try:
        version, meta_len = struct.unpack_from("<HQ", buf, 4)
        if version != CK_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        off = 14
        meta = json.loads(buf[off : off + meta_len].decode("utf-8"))
        off += meta_len
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        blobs = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + ln].decode("utf-8")
            off += ln
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if ndim else 1
            if off + count * dt.itemsize > len(buf):
                raise CorruptionError(f"checkpoint truncated inside {name}")
            blobs[name] = np.frombuffer(buf, dt, count, off).reshape(shape).astype(dt.newbyteorder("="))
            off += count * dt.itemsize
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable checkpoint: {exc}") from exc
    if off != len(buf):
        raise CorruptionError("trailing bytes after checkpoint payload")
    pick = lambda prefix: {k[len(prefix) :]: v for k, v in blobs.items() if k.startswith(prefix)}
    a = meta["adam"]
    opt = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"], pick("adam_m/"), pick("adam_v/"))
    return Checkpoint(RunConfig.from_dict(meta["config"]), meta["seed"], meta["epoch"], pick("param/"), opt,
                      meta["p0"], meta["model_mode"], meta["history"])


# ---------------------------------------------------------------------------
# training


def _snapshot(model: GatedXlstm, opt: AdamState):
    return ({k: p.data.copy() for k, p in model.params.items()}, copy.deepcopy(opt))


def train(cfg: RunConfig, seed: Optional[int] = None, splits: Optional[Splits] = None,
          mode: Optional[str] = None) -> Checkpoint:
    """Mini-batch Adam training; returns the best-validation checkpoint."""
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    mode = mode or cfg.model_mode
    splits = splits or make_splits(cfg)
    model = GatedXlstm(cfg.model_config(mode), seed=seed)
    opt = AdamState(lr=cfg.learning_rate)
    p0 = _p0_or_none(splits.train)
    train_enc = encode_corpus(splits.train, cfg.frames)
    val_enc = encode_corpus(splits.val, cfg.frames)
    rng = np.random.default_rng([seed, 0x5EED])

    best = _snapshot(model, opt)
    best_score, best_epoch, history, stale = -math.inf, 0, [], 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_enc))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = train_enc.batch.subset(order[start : start + cfg.batch_size])
            try:
                loss = nx.softmax_cross_entropy(model.logits(batch), batch.labels)
                nx.backward(loss, model.params.values())
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            nx.adam_step(opt, model.params)
            losses.append(float(loss.data))
        score = _val_score(model, val_enc if len(val_enc) else train_enc)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
                        "val_weighted_f1": score})
        log.info("seed %d epoch %d loss %.4f val W-F1 %.4f", seed, epoch, history[-1]["loss"], score)
        if score > best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best = _snapshot(model, opt)
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    params, opt_best = best
    return Checkpoint(cfg, seed, best_epoch, params, opt_best, p0, mode, history)


def _p0_or_none(train: Corpus):
    try:
        return estimate_p0(train)
    except ValueError:
        return None


def _val_score(model, enc) -> float:
    probs, _ = predict_batches(model, enc.batch)
    return MetricsReport.from_predictions(enc.batch.labels, probs.argmax(axis=1)).weighted_f1


# ---------------------------------------------------------------------------
# evaluation


def noisy_posteriors(probs: np.ndarray, scale: float, seed) -> np.ndarray:
    """Perturb log-posteriors with Gaussian noise and renormalise."""
    if scale <= 0:
        return probs
    rng = np.random.default_rng(seed)
    logp = np.log(np.clip(probs, 1e-300, None)) + scale * rng.standard_normal(probs.shape)
    return nx.softmax_np(logp, axis=1)


@dataclass
class Evaluation:
    report: MetricsReport
    posteriors: np.ndarray
    predictions: np.ndarray
    gates: np.ndarray
    encoded: object


def evaluate_full(ck: Checkpoint, corpus: Corpus, decoder: str = "none", model: Optional[GatedXlstm] = None,
                  posterior_noise: Optional[float] = None) -> Evaluation:
    cfg = ck.config
    model = model or ck.model()
    enc = encode_corpus(corpus, cfg.frames)
    if len(enc) == 0:
        raise ValueError("cannot evaluate on an empty corpus")
    probs, gates = predict_batches(model, enc.batch)
    noise = cfg.posterior_noise if posterior_noise is None else posterior_noise
    probs = noisy_posteriors(probs, noise, [cfg.noise_seed, ck.seed])
    if decoder == "ded":
        pred = decode_posteriors(probs, enc, cfg.decode_config(), ck.p0)
    elif decoder == "none":
        pred = probs.argmax(axis=1)
    else:
        raise ValueError(f"unknown decoder {decoder!r}")
    return Evaluation(MetricsReport.from_predictions(enc.batch.labels, pred), probs, pred, gates, enc)


def evaluate(ck: Checkpoint, corpus: Corpus, decoder: str = "none") -> MetricsReport:
    return evaluate_full(ck, corpus, decoder).report


def decode_posteriors(probs, enc, dcfg: DecodeConfig, p0: Optional[float]) -> np.ndarray:
    """Apply DED dialogue by dialogue; p0 comes from the training split."""
    if dcfg.p0 is None and p0 is None:
        raise ValueError("DED needs p0: the training split had no same-speaker turn pairs")
    shift = ShiftModel(dcfg.p0 if dcfg.p0 is not None else p0)
    pred = probs.argmax(axis=1).copy()
    start = 0
    ids = enc.dialogue_ids
    while start < len(ids):
        end = start
        while end < len(ids) and ids[end] == ids[start]:
            end += 1
        pred[start:end] = ded_decode(probs[start:end], enc.speakers[start:end], dcfg, shift)
        start = end
    return pred


# ---------------------------------------------------------------------------
# protocol and ablation


def fmt_pm(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def mean_std(values) -> tuple:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class ProtocolResult:
    per_seed: dict  # seed -> MetricsReport
    summary: dict  # metric -> (mean, std) in percent

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "mean", "std", "formatted", "n_seeds"])
        for k, (m, s) in self.summary.items():
            w.writerow([k, f"{m:.6f}", f"{s:.6f}", fmt_pm(m, s), len(self.per_seed)])
        return buf.getvalue()


SUMMARY_METRICS = ("weighted_accuracy", "weighted_f1", "balanced_accuracy") + tuple(
    f"{kind}_{e}" for e in EMOTIONS for kind in ("acc", "f1")
)


def read_summary_csv(text: str) -> dict:
    return {r["metric"]: (float(r["mean"]), float(r["std"]), r["formatted"], int(r["n_seeds"]))
            for r in csv.DictReader(io.StringIO(text))}


def run_protocol(cfg: RunConfig, out_dir=None, splits: Optional[Splits] = None) -> ProtocolResult:
    """Train and test once per seed; mean and sample std over seeds (percent)."""
    cfg.validate()
    splits = splits or make_splits(cfg)
    per_seed = {}
    for seed in cfg.seeds:
        ck = train(cfg, seed, splits)
        per_seed[seed] = evaluate(ck, splits.test, cfg.decoder)
    summary = {}
    for k in SUMMARY_METRICS:
        summary[k] = mean_std([100 * r.flat()[k] for r in per_seed.values()])
    result = ProtocolResult(per_seed, summary)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(result.summary_csv())
    return result


@dataclass
class AblationRow:
    feature: str
    model: str
    decoder: str
    w_acc: float  # percent, mean over seeds
    w_f1: float
    w_acc_std: float = 0.0
    w_f1_std: float = 0.0


MODEL_NAMES = {"base": "base xLSTM", "gated": "Gated-xLSTM"}


@dataclass
class AblationResult:
    rows: list
    per_seed: dict  # (mode, decoder) -> list of MetricsReport
    test_utterances: int

    def table(self) -> str:
        base = self.rows[0]
        lines = [f"{'Feature':<10} {'Model':<12} {'Post':<5} {'W-Acc':>16} {'W-F1':>16}"]
        for r in self.rows:
            da, df = r.w_acc - base.w_acc, r.w_f1 - base.w_f1
            fa = f"{r.w_acc:.2f}" + ("" if r is base else f" ({da:+.2f})")
            ff = f"{r.w_f1:.2f}" + ("" if r is base else f" ({df:+.2f})")
            lines.append(f"{r.feature:<10} {r.model:<12} {('-' if r.decoder == 'none' else 'DED'):<5} {fa:>16} {ff:>16}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "model", "decoder", "w_acc", "w_f1", "w_acc_std", "w_f1_std",
                    "delta_w_acc", "delta_w_f1"])
        base = self.rows[0]
        for r in self.rows:
            w.writerow([r.feature, r.model, r.decoder, f"{r.w_acc:.4f}", f"{r.w_f1:.4f}", f"{r.w_acc_std:.4f}",
                        f"{r.w_f1_std:.4f}", f"{r.w_acc - base.w_acc:.4f}", f"{r.w_f1 - base.w_f1:.4f}"])
        return buf.getvalue()


def ablate(cfg: RunConfig, splits: Optional[Splits] = None) -> AblationResult:
    """{base, gated} x {none, ded} on one split, averaged over the run seeds."""
    cfg.validate()
    splits = splits or make_splits(cfg)
    grid = [("base", "none"), ("base", "ded"), ("gated", "none"), ("gated", "ded")]
    per_seed = {g: [] for g in grid}
    for seed in cfg.seeds:
        for mode in ("base", "gated"):
            ck = train(cfg, seed, splits, mode=mode)
            model = ck.model()
            for m, dec in grid:
                if m == mode:
                    per_seed[(m, dec)].append(evaluate_full(ck, splits.test, dec, model=model).report)
    feature = "synthetic" if cfg.feature_mode == "synthetic" else "CLAP"
    rows = []
    for m, dec in grid:
        acc = mean_std([100 * r.weighted_accuracy for r in per_seed[(m, dec)]])
        f1 = mean_std([100 * r.weighted_f1 for r in per_seed[(m, dec)]])
        rows.append(AblationRow(feature, MODEL_NAMES[m], dec, acc[0], f1[0], acc[1], f1[1]))
    return AblationResult(rows, per_seed, splits.test.n_utterances)


def write_run_outputs(out_dir, ck: Checkpoint, ev: Evaluation, with_svg: bool = True) -> None:
    """metrics.csv, confusion.csv, gates.csv (+ gates.svg) and checkpoint.bin."""
    from .gated import gate_report_from_weights

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(ev.report.metrics_csv())
    (out / "confusion.csv").write_text(ev.report.confusion_csv())
    report = gate_report_from_weights(ev.gates, ck.config.frames)
    (out / "gates.csv").write_text(report.to_csv())
    if with_svg:
        (out / "gates.svg").write_text(report.to_svg())
    save_checkpoint(ck, out / "checkpoint.bin")


# ---------------------------------------------------------------------------
# gradient check


def model_grad_check(seed: int = 0, embedding_dim: int = 64, hidden_dim: int = 8, layers: int = 2, frames: int = 2,
                     batch: int = 3, coords_per_param: int = 14, tolerance: float = 1e-4) -> nx.GradCheckReport:
    """Backprop vs central differences through the whole gated model (float64).

    The zero-initialised head and gate weights are replaced by random values so
    every parameter receives a non-trivial gradient.
    """
    cfg = ModelConfig(embedding_dim=embedding_dim, hidden_dim=hidden_dim, layers=layers, frames=frames,
                      dtype="float64")
    model = GatedXlstm(cfg, seed=seed)
    rng = np.random.default_rng([seed, 0x6C])
    for name in ("head.W", "head.b", "gate.W", "gate.b"):
        p = model.params[name]
        p.data = 0.5 * rng.standard_normal(p.shape)
    E = rng.standard_normal((batch, cfg.n_streams, embedding_dim))
    labels = rng.integers(0, 4, batch)
    loss_fn = lambda: nx.softmax_cross_entropy(model.forward(E)[0], labels)
    return nx.finite_diff_grad_check(loss_fn, model.params, eps=1e-5, tolerance=tolerance,
                                     max_coords=coords_per_param, seed=seed)
