"""Confusion matrices, macro-averaged metrics and the cross-expertise harness."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

N_CLASSES = 5


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    n_samples: int
    averaging: str = "macro"

    def as_row(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "n_samples": self.n_samples}


def confusion_matrix(predictions, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true label, columns = predicted label."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"predictions ({len(pred)}) and labels ({len(true)}) differ in length")
    for name, arr in (("predictions", pred), ("labels", true)):
        if np.any((arr < 0) | (arr >= n_classes)):
            raise ValueError(f"{name} must lie in 0..{n_classes - 1}")
    return np.bincount(true * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def argmax_predictions(probabilities) -> np.ndarray:
    # np.argmax returns the first maximum: ties resolve to the lower class index
    return np.argmax(np.asarray(probabilities), axis=-1)


def classification_metrics(cm) -> MetricsReport:
    """Accuracy plus macro precision/recall/F1 over the classes present in the labels."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or total <= 0:
        raise ValueError("confusion matrix must be square and non-empty")
    diag = np.diag(cm)
    col = cm.sum(axis=0)
    row = cm.sum(axis=1)
    precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(diag), where=denom > 0)
    present = row > 0
    return MetricsReport(
        accuracy=float(diag.sum() / total),
        precision=float(precision[present].mean()),
        recall=float(recall[present].mean()),
        f1=float(f1[present].mean()),
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=f1,
        n_samples=int(total),
    )


class LayoutMismatchError(ValueError):
    def __init__(self, field_name: str, expected, got):
        super().__init__(f"layout mismatch in {field_name}: model has {expected!r}, test set has {got!r}")
        self.field = field_name


def check_layout(model_meta: Mapping, test_set) -> None:
    """Raise LayoutMismatchError when a model and a sample set disagree on windowing."""
    checks = [("horizon", model_meta.get("horizon"), test_set.horizon),
              ("stride", model_meta.get("stride"), test_set.stride),
              ("n_steps", model_meta.get("n_steps", test_set.X.shape[1]), test_set.X.shape[1]),
              ("n_features", model_meta.get("n_features", test_set.X.shape[2]), test_set.X.shape[2])]
    for name, expected, got in checks:
        if expected is not None and expected != got:
            raise LayoutMismatchError(name, expected, got)


@dataclass
class CrossEvaluation:
    accuracies: dict = field(default_factory=dict)  # (model, data) -> list of per-set accuracies

    def mean(self, model: str, data: str) -> float:
        return float(np.mean(self.accuracies[(model, data)]))

    def sd(self, model: str, data: str) -> float:
        vals = self.accuracies[(model, data)]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def table(self) -> str:
        models = sorted({m for m, _ in self.accuracies})
        datas = sorted({d for _, d in self.accuracies})
        width = max(len(d) for d in datas) + 16
        lines = ["model \\ data".ljust(14) + "".join(d.rjust(width) for d in datas)]
        for m in models:
            cells = []
            for d in datas:
                if (m, d) in self.accuracies:
                    cells.append(f"{100 * self.mean(m, d):.2f} +/- {100 * self.sd(m, d):.2f}".rjust(width))
                else:
                    cells.append("-".rjust(width))
            lines.append(m.ljust(14) + "".join(cells))
        return "\n".join(lines)


def cross_evaluate(models: Mapping[str, object], test_sets: Mapping[str, Sequence]) -> CrossEvaluation:
    """Score every model on every expertise's test sets.

    ``models`` maps a name to anything with ``predict(X)`` and a ``model_``
    carrying layout metadata; ``test_sets`` maps a name to a list of
    SampleSets.
    """
    out = CrossEvaluation()
    for mname, clf in models.items():
        meta = dict(getattr(getattr(clf, "model_", None), "metadata", {}) or {})
        model = getattr(clf, "model_", None)
        if model is not None:
            meta.setdefault("n_features", model.n_features)
        for dname, sets in test_sets.items():
            accs = []
            for s in sets:
                check_layout(meta, s)
                accs.append(float(np.mean(clf.predict(s.X) == s.y)))
            out.accuracies[(mname, dname)] = accs
    return out


def metrics_csv(rows: Sequence[tuple[str, str, MetricsReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "test_set", "accuracy", "precision", "recall", "f1", "n_samples", "averaging"])
    for model, test, rep in rows:
        w.writerow([model, test, f"{rep.accuracy:.6f}", f"{rep.precision:.6f}", f"{rep.recall:.6f}",
                    f"{rep.f1:.6f}", rep.n_samples, rep.averaging])
    return buf.getvalue()


def confusion_csv(name: str, cm) -> str:
    cm = np.asarray(cm)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"# {name}: rows=true, cols=predicted"])
    w.writerow(["true\\pred", *range(cm.shape[1])])
    for i, row in enumerate(cm):
        w.writerow([i, *row.tolist()])
    return buf.getvalue()


def format_report(name: str, cm, rep: MetricsReport) -> str:
    lines = [f"{name}: accuracy {100 * rep.accuracy:.2f}%  precision {100 * rep.precision:.2f}%  "
             f"recall {100 * rep.recall:.2f}%  F1 {100 * rep.f1:.2f}%  (macro, n={rep.n_samples})"]
    row = np.asarray(cm).sum(axis=1, keepdims=True)
    frac = np.divide(cm, row, out=np.zeros(np.shape(cm)), where=row > 0)
    lines.append("        " + "".join(f"{j:>8d}" for j in range(frac.shape[1])))
    for i, r in enumerate(frac):
        lines.append(f"{i:>8d}" + "".join(f"{v:8.3f}" for v in r))
    return "\n".join(lines)
