"""Walkthrough 3: rescoring a whole dialogue with the emotion decoder.

Per-utterance classifiers decide each turn in isolation.  The decoder instead
searches for the label sequence that is jointly most probable under

  * the classifier posteriors,
  * a speaker-shift model (a speaker keeps their emotion with prob. 1 - p0),
  * a ddCRP prior that favours emotions already common in the dialogue.

Here the "classifier" is simulated: noisy posteriors around the true labels.

Run:  python walkthroughs/03_dialogue_decoding.py
"""

import numpy as np

from gxlstm.corpus import EMOTIONS, LABEL_INDEX, SyntheticConfig, generate_synthetic
from gxlstm.ded import (
    BlockState, DecodeConfig, ShiftModel, brute_force_decode_full, ddcrp_prior, ded_decode, ded_decode_full,
    estimate_p0,
)
from gxlstm.numerics import softmax_np

# The ddCRP prior on its own: two "anger" turns and one "sadness" turn so far.
counts = [0.0] * 4
counts[LABEL_INDEX["anger"]], counts[LABEL_INDEX["sadness"]] = 2, 1
prior = ddcrp_prior(BlockState(tuple(counts), alpha=1.0))
print("prior after {anger: 2, sadness: 1}:", {e: round(float(v), 3) for e, v in zip(EMOTIONS, prior)})

corpus = generate_synthetic(SyntheticConfig(n_dialogues=300, self_transition_prob=0.8, seed=3))
p0 = estimate_p0(corpus)
print(f"estimated p0 = {p0:.3f}")

# Noisy posteriors: the true class gets a bonus of 1.5 on the logit scale.
rng = np.random.default_rng(0)
config = DecodeConfig(beam_width=16, p0=p0)
right_argmax = right_ded = total = 0
for dialogue in corpus.dialogues:
    gold = np.array([LABEL_INDEX[u.label] for u in dialogue.utterances])
    logits = 1.5 * np.eye(4)[gold] + rng.standard_normal((len(gold), 4))
    posteriors = softmax_np(logits, axis=1)
    decoded = ded_decode(posteriors, dialogue.speaker_ids, config)
    right_argmax += int((posteriors.argmax(1) == gold).sum())
    right_ded += int((np.array(decoded) == gold).sum())
    total += len(gold)
print(f"accuracy per-utterance argmax {right_argmax / total:.3f}  ->  decoded {right_ded / total:.3f}")

# The beam search against exhaustive enumeration on a short dialogue.
dialogue = corpus.dialogues[0]
K = min(len(dialogue), 6)
post = softmax_np(rng.standard_normal((K, 4)), axis=1)
speakers = dialogue.speaker_ids[:K]
labels, score = brute_force_decode_full(post, speakers, ShiftModel(p0))
print(f"\nexhaustive best over 4^{K} sequences: {[EMOTIONS[i] for i in labels]}  (log p = {score:.4f})")
for width in (1, 2, 4, 16):
    hyp = ded_decode_full(post, speakers, DecodeConfig(beam_width=width, p0=p0), ShiftModel(p0))
    print(f"  beam width {width:2d}: log p = {hyp.log_score:.4f}")
