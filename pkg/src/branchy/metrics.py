"""Classification metrics."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError


def _check(predictions, gold):
    predictions = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if predictions.shape != gold.shape or predictions.ndim != 1:
        raise ConfigError(f"predictions ({predictions.shape}) and gold ({gold.shape}) differ in length")
    if gold.size == 0:
        raise ConfigError("cannot score an empty prediction list")
    return predictions, gold


def accuracy(predictions, gold):
    predictions, gold = _check(predictions, gold)
    return int(np.count_nonzero(predictions == gold)) / gold.size


def confusion_matrix(predictions, gold, n_classes):
    """``m[g, p]`` counts examples of gold class g predicted as p."""
    predictions, gold = _check(predictions, gold)
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (gold, predictions), 1)
    return m


def _ratio(num, den):
    return num / den if den else 0.0


def per_class_scores(predictions, gold, n_classes):
    m = confusion_matrix(predictions, gold, n_classes)
    scores = []
    for c in range(n_classes):
        tp = int(m[c, c])
        precision = _ratio(tp, int(m[:, c].sum()))
        recall = _ratio(tp, int(m[c, :].sum()))
        f1 = _ratio(2 * precision * recall, precision + recall)
        scores.append({"precision": precision, "recall": recall, "f1": f1, "support": int(m[c, :].sum())})
    return scores


def macro_f1(predictions, gold, n_classes):
    """Unweighted mean F1 over all classes; classes never seen score 0."""
    f1 = [s["f1"] for s in per_class_scores(predictions, gold, n_classes)]
    return math.fsum(f1) / len(f1)


def macro_f1_present(predictions, gold, n_classes):
    """Mean F1 over classes that occur in ``gold`` only."""
    scores = per_class_scores(predictions, gold, n_classes)
    present = [s["f1"] for s in scores if s["support"] > 0]
    return math.fsum(present) / len(present)
