"""Walkthrough 2: train the gated model and read its gates.

Only the audio embeddings carry class information in this corpus; text is
pure noise.  A trained gate should therefore open wider for the speaker's own
audio streams than for anything else.  The reference stream (own audio of the
current turn) is never gated: its weight is fixed at 1.

Runs a reduced configuration (one seed, a few epochs); about a minute on one
core.

Run:  python walkthroughs/02_train_and_read_the_gates.py
"""

import time
from dataclasses import replace
from pathlib import Path

from gxlstm.gated import export_gate_report
from gxlstm.harness import evaluate, load_config, make_splits, train

root = Path(__file__).resolve().parents[1]
cfg = load_config(root / "configs" / "interpretability.cfg")
cfg = replace(cfg, epochs=4, synthetic=replace(cfg.synthetic, n_dialogues=120))
splits = make_splits(cfg)
print(f"train {splits.train.n_utterances} / val {splits.val.n_utterances} / test {splits.test.n_utterances} "
      f"utterances")

start = time.perf_counter()
checkpoint = train(cfg, seed=42, splits=splits)
print(f"trained in {time.perf_counter() - start:.0f}s; best epoch {checkpoint.epoch}")
for row in checkpoint.history:
    print(f"  epoch {row['epoch']}: loss {row['loss']:.3f}  validation W-F1 {row['val_weighted_f1']:.3f}")

# Per-class results on the held-out dialogues.
print()
print(evaluate(checkpoint, splits.test).table())

# Mean gate value per stream.  Tags read role/modality/frame: "0A1" is the
# speaker's own audio one turn back, "1T0" the interlocutor's latest text.
report = export_gate_report(checkpoint.model(), splits.test)
print("\nmean |gate| per stream:")
for ref, w in sorted(zip(report.refs, report.mean_abs_weight), key=lambda p: -p[1]):
    print(f"  {ref.label}  {ref.role:<12} {ref.modality:<5} frame {ref.frame}  {w:.3f}  {'#' * int(40 * w)}")
