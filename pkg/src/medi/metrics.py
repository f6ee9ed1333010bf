"""Classification metrics: pooled accuracy, unweighted F1, confusion matrices.

UF1 is the unweighted mean of per-class F1 scores; classes that never occur
in either truths or predictions (TP + FP + FN = 0) are excluded from the
mean rather than contributing an artificial zero, since held-out folds of
small datasets routinely lack classes entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class MetricsResult:
    accuracy: float
    uf1: float
    confusion: np.ndarray  # rows true, columns predicted
    per_class_f1: dict[str, float]
    class_names: list[str]

    def to_jsonable(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "uf1": self.uf1,
            "confusion": self.confusion.tolist(),
            "per_class_f1": self.per_class_f1,
            "class_names": list(self.class_names),
        }


def _to_indices(values, class_names: list[str]) -> np.ndarray:
    index = {name: i for i, name in enumerate(class_names)}
    out = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        if isinstance(v, str):
            if v not in index:
                raise DataError(f"label {v!r} not in class set {class_names}")
            out[i] = index[v]
        else:
            iv = int(v)
            if not (0 <= iv < len(class_names)):
                raise DataError(f"label index {iv} outside class set of {len(class_names)}")
            out[i] = iv
    return out


def confusion_matrix(predictions, truths, class_names: list[str]) -> np.ndarray:
    preds = _to_indices(predictions, class_names)
    trues = _to_indices(truths, class_names)
    k = len(class_names)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (trues, preds), 1)
    return conf


def compute_metrics(predictions, truths, class_names) -> MetricsResult:
    """Accuracy, unweighted F1, and the confusion matrix.

    predictions and truths may be label strings or class indices.
    """
    class_names = list(class_names)
    if len(predictions) != len(truths):
        raise DataError(f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths")
    if not truths:
        raise DataError("cannot compute metrics on empty input")
    conf = confusion_matrix(predictions, truths, class_names)
    return metrics_from_confusion(conf, class_names)


def metrics_from_confusion(conf: np.ndarray, class_names) -> MetricsResult:
    class_names = list(class_names)
    total = int(conf.sum())
    if total == 0:
        raise DataError("cannot compute metrics on empty confusion matrix")
    accuracy = float(np.trace(conf) / total)
    per_class: dict[str, float] = {}
    f1s = []
    for c, name in enumerate(class_names):
        tp = int(conf[c, c])
        fp = int(conf[:, c].sum()) - tp
        fn = int(conf[c, :].sum()) - tp
        if tp + fp + fn == 0:
            continue  # class absent from this evaluation entirely
        f1 = 2.0 * tp / (2.0 * tp + fp + fn)
        per_class[name] = f1
        f1s.append(f1)
    uf1 = float(np.mean(f1s)) if f1s else 0.0
    return MetricsResult(
        accuracy=accuracy, uf1=uf1, confusion=conf, per_class_f1=per_class, class_names=class_names
    )
