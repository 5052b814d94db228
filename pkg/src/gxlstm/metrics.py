"""Classification metrics computed from a 4x4 confusion matrix."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from .corpus import EMOTIONS

TABLE_NAMES = {"anger": "Angry", "happiness": "Happy", "neutrality": "Neutral", "sadness": "Sad"}


def confusion_matrix(gold, pred, n_classes: int = 4) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(gold, int), np.asarray(pred, int)), 1)
    return cm


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows gold, columns predicted
    weighted_accuracy: float
    weighted_f1: float
    balanced_accuracy: float
    accuracy: float
    per_class_accuracy: np.ndarray  # recall per class
    per_class_f1: np.ndarray
    support: np.ndarray

    @classmethod
    def from_confusion(cls, cm) -> "MetricsReport":
        cm = np.asarray(cm, dtype=np.int64)
        support = cm.sum(axis=1)
        predicted = cm.sum(axis=0)
        tp = np.diag(cm).astype(float)
        N = support.sum()
        if N == 0:
            raise ValueError("no labelled examples to score")
        with np.errstate(divide="ignore", invalid="ignore"):
            recall = np.where(support > 0, tp / np.maximum(support, 1), 0.0)
            precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
            denom = precision + recall
            f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
        absent = [EMOTIONS[c] for c in range(len(support)) if support[c] == 0]
        if absent:
            warnings.warn(f"classes absent from the evaluation set (weight 0): {', '.join(absent)}")
        w = support / N
        present = support > 0
        return cls(
            confusion=cm,
            weighted_accuracy=float((w * recall).sum()),
            weighted_f1=float((w * f1).sum()),
            balanced_accuracy=float(recall[present].mean()),
            accuracy=float(tp.sum() / N),
            per_class_accuracy=recall,
            per_class_f1=f1,
            support=support,
        )

    @classmethod
    def from_predictions(cls, gold, pred) -> "MetricsReport":
        return cls.from_confusion(confusion_matrix(gold, pred))

    def flat(self) -> dict:
        out = {
            "weighted_accuracy": self.weighted_accuracy,
            "weighted_f1": self.weighted_f1,
            "balanced_accuracy": self.balanced_accuracy,
            "accuracy": self.accuracy,
        }
        for i, e in enumerate(EMOTIONS):
            out[f"acc_{e}"] = float(self.per_class_accuracy[i])
            out[f"f1_{e}"] = float(self.per_class_f1[i])
            out[f"n_{e}"] = int(self.support[i])
        return out

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.flat().items():
            w.writerow([k, repr(v)])
        return buf.getvalue()

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gold\\pred", *EMOTIONS])
        for e, row in zip(EMOTIONS, self.confusion):
            w.writerow([e, *map(int, row)])
        return buf.getvalue()

    def table(self) -> str:
        """Per-class accuracy / F1 in percent, one row per emotion."""
        lines = [f"{'Class':<8} {'Acc.(%)':>8} {'F1(%)':>8} {'n':>6}"]
        for i, e in enumerate(EMOTIONS):
            lines.append(
                f"{TABLE_NAMES[e]:<8} {100 * self.per_class_accuracy[i]:8.2f} "
                f"{100 * self.per_class_f1[i]:8.2f} {int(self.support[i]):6d}"
            )
        lines.append(f"W-Acc {100 * self.weighted_accuracy:.2f}  W-F1 {100 * self.weighted_f1:.2f}  "
                     f"(balanced acc {100 * self.balanced_accuracy:.2f})")
        return "\n".join(lines)


def read_confusion_csv(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    return np.array([[int(x) for x in r[1:]] for r in rows[1:]], dtype=np.int64)
