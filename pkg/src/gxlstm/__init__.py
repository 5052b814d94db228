"""Gated xLSTM emotion recognition in conversation, on plain numpy.

Modules:
    numerics  reverse-mode autodiff on numpy, Adam, finite-difference checks
    corpus    dialogues, the GXEB embedding file, context windows, splits, synthetic data
    xlstm     mLSTM / sLSTM cells and the stacked block encoder
    gated     per-stream gated fusion classifier and gate reports
    ded       dialogical emotion decoding (beam search + exhaustive oracle)
    metrics   weighted accuracy / F1 from a confusion matrix
    harness   run config, training, evaluation, ablation, checkpoints
    cli       the ``gxlstm`` command
"""

from .corpus import EMOTIONS, Corpus, Dialogue, SyntheticConfig, Utterance, generate_synthetic, load_corpus
from .ded import DecodeConfig, ShiftModel, brute_force_decode, ded_decode, estimate_p0
from .gated import GatedXlstm, ModelConfig
from .harness import RunConfig, ablate, evaluate, load_checkpoint, run_protocol, save_checkpoint, train
from .metrics import MetricsReport

__version__ = "0.1.0"

__all__ = [
    "EMOTIONS", "Corpus", "Dialogue", "Utterance", "SyntheticConfig", "generate_synthetic", "load_corpus",
    "DecodeConfig", "ShiftModel", "ded_decode", "brute_force_decode", "estimate_p0",
    "GatedXlstm", "ModelConfig", "MetricsReport",
    "RunConfig", "train", "evaluate", "ablate", "run_protocol", "save_checkpoint", "load_checkpoint",
]
