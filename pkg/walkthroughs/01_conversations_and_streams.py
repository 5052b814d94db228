"""Walkthrough 1: synthetic conversations, the GXEB file, and the 12 streams.

A prediction target is one utterance.  The model does not see the utterance
alone: it sees up to three "frames" of context, each holding the speaker's
own utterance and the most recent utterance by the other party, in both the
audio and the text modality.  That makes 3 x 2 x 2 = 12 input streams.

Run:  python walkthroughs/01_conversations_and_streams.py
"""

import tempfile
from pathlib import Path

from gxlstm.corpus import (
    SyntheticConfig, build_context_window, generate_synthetic, load_corpus, split_dialogues, write_corpus,
)
from gxlstm.ded import estimate_p0

# 1. Generate a small corpus.  Each speaker's emotion follows a sticky Markov
#    chain: with probability 0.8 the next turn keeps the previous emotion.
config = SyntheticConfig(n_dialogues=30, embedding_dim=64, self_transition_prob=0.8, seed=7)
corpus = generate_synthetic(config)
print(f"{len(corpus.dialogues)} dialogues, {corpus.n_utterances} utterances, D={corpus.embedding_dim}")

dialogue = corpus.dialogues[0]
for u in dialogue.utterances:
    print(f"  turn {u.index:2d}  speaker {u.speaker_id[-1]}  {u.label}")

# 2. The stickiness is visible in the data: the fraction of same-speaker turn
#    pairs whose label changes approaches 1 - 0.8 as the corpus grows (30
#    dialogues give a noisy estimate).
print(f"\nestimated speaker-shift probability p0 = {estimate_p0(corpus):.3f}")

# 3. Round-trip through the binary corpus format.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "corpus.gxeb"
    write_corpus(corpus, path)
    back = load_corpus(path)
    print(f"GXEB file: {path.stat().st_size} bytes, reloaded {back.n_utterances} utterances")

# 4. The context window of the last utterance of the first dialogue.  Slot 0
#    (own audio, frame 0) is the reference stream; missing context is a
#    zero-filled padded stream.
t = len(dialogue) - 1
window = build_context_window(dialogue, t, frames=3)
print(f"\ncontext window for turn {t}:")
for ref in window.refs:
    source = "padded" if ref.padded else f"turn {ref.utterance_index}"
    marker = "  <- reference" if ref.is_reference else ""
    print(f"  slot {ref.slot:2d}  {ref.role:<12} {ref.modality:<5} frame {ref.frame}: {source}{marker}")

# 5. Splits are made per dialogue (8:1:1), so no conversation straddles them.
train, val, test = split_dialogues(corpus, (8, 1, 1), seed=42)
print(f"\nsplit: {len(train.dialogues)} / {len(val.dialogues)} / {len(test.dialogues)} dialogues")
