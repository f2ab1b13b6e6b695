"""Confusion-matrix metrics, Cohen's kappa, one-vs-rest ROC-AUC and AP."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MetricsError",
    "confusion_matrix",
    "ClassificationReport",
    "classification_report",
    "accuracy",
    "cohens_kappa",
    "RankingScores",
    "roc_auc_ovr",
    "average_precision_ovr",
    "evaluate_predictions",
    "CSV_COLUMNS",
    "rows_to_csv",
]

CSV_COLUMNS = ("model", "precision", "recall", "f1", "accuracy", "kappa")


class MetricsError(ValueError):
    pass


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """``cm[true, pred]`` counts."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise MetricsError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    for name, arr in (("label", labels), ("prediction", preds)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise MetricsError(f"{name} out of range for {n_classes} classes")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _ratio(num, den):
    # zero denominators score 0 so that macro averages stay defined
    return np.divide(num, den, out=np.zeros(np.shape(num), dtype=np.float64),
                     where=np.asarray(den) != 0)


@dataclass
class ClassificationReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    kappa: float
    average: str = "macro"
    auc: np.ndarray | None = None
    ap: np.ndarray | None = None
    class_names: list[str] = field(default_factory=list)

    def _avg(self, values: np.ndarray) -> float:
        if self.average == "weighted":
            total = self.support.sum()
            return float((values * self.support).sum() / total) if total else 0.0
        return float(values.mean())

    @property
    def macro_precision(self) -> float:
        return self._avg(self.precision)

    @property
    def macro_recall(self) -> float:
        return self._avg(self.recall)

    @property
    def macro_f1(self) -> float:
        return self._avg(self.f1)

    @property
    def macro_auc(self) -> float | None:
        return _nanmean(self.auc)

    @property
    def macro_ap(self) -> float | None:
        return _nanmean(self.ap)

    def summary_row(self, model: str) -> dict:
        return {"model": model, "precision": self.macro_precision, "recall": self.macro_recall,
                "f1": self.macro_f1, "accuracy": self.accuracy, "kappa": self.kappa}

    def to_dict(self) -> dict:
        names = self.class_names or [str(i) for i in range(len(self.precision))]
        per_class = []
        for i, name in enumerate(names):
            row = {"class": name, "precision": float(self.precision[i]),
                   "recall": float(self.recall[i]), "f1": float(self.f1[i]),
                   "support": int(self.support[i])}
            if self.auc is not None:
                row["auc"] = _none_if_nan(self.auc[i])
            if self.ap is not None:
                row["ap"] = _none_if_nan(self.ap[i])
            per_class.append(row)
        return {
            "average": self.average,
            "accuracy": self.accuracy,
            "precision": self.macro_precision,
            "recall": self.macro_recall,
            "f1": self.macro_f1,
            "kappa": self.kappa,
            "auc": self.macro_auc,
            "ap": self.macro_ap,
            "per_class": per_class,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _nanmean(a) -> float | None:
    if a is None:
        return None
    a = np.asarray(a, dtype=np.float64)
    ok = ~np.isnan(a)
    return float(a[ok].mean()) if ok.any() else None


def _none_if_nan(x) -> float | None:
    return None if math.isnan(x) else float(x)


def classification_report(cm, average: str = "macro",
                          class_names: list[str] | None = None) -> ClassificationReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise MetricsError(f"confusion matrix must be square and nonempty, got {cm.shape}")
    if (cm < 0).any():
        raise MetricsError("confusion matrix has negative counts")
    total = int(cm.sum())
    if total == 0:
        raise MetricsError("confusion matrix is empty")
    if average not in ("macro", "weighted"):
        raise MetricsError(f"average must be 'macro' or 'weighted', got {average!r}")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return ClassificationReport(
        precision=precision, recall=recall, f1=f1, support=cm.sum(axis=1),
        accuracy=float(np.trace(cm) / total), kappa=cohens_kappa(cm),
        average=average, class_names=list(class_names or []))


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise MetricsError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    if labels.size == 0:
        raise MetricsError("no samples")
    return float(np.count_nonzero(preds == labels) / labels.size)


def cohens_kappa(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise MetricsError("confusion matrix is empty")
    p_o = np.trace(cm) / total
    p_e = float((cm.sum(axis=1) * cm.sum(axis=0)).sum() / (total * total))
    if p_e == 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


# ---------------------------------------------------------------------------
# ranking metrics


@dataclass
class RankingScores:
    per_class: np.ndarray          # nan where undefined
    defined: np.ndarray            # bool mask

    @property
    def macro(self) -> float:
        return float(self.per_class[self.defined].mean())


def _ovr_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise MetricsError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    if not np.all(np.isfinite(scores)):
        raise MetricsError("scores must be finite")
    return scores, labels


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(x)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + 1 + e) / 2.0
    return ranks


def roc_auc_ovr(scores, labels) -> RankingScores:
    """One-vs-rest AUC as the Mann-Whitney statistic; ties count one half."""
    scores, labels = _ovr_inputs(scores, labels)
    C = scores.shape[1]
    out = np.full(C, np.nan)
    for c in range(C):
        pos = labels == c
        n_pos = int(pos.sum())
        n_neg = len(labels) - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = _midranks(scores[:, c])
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
        out[c] = u / (n_pos * n_neg)
    defined = ~np.isnan(out)
    if not defined.any():
        raise MetricsError("no class has both positive and negative samples")
    return RankingScores(out, defined)


def average_precision_ovr(scores, labels) -> RankingScores:
    """One-vs-rest AP = sum over cutoffs of (recall step) * precision.

    Samples are ranked by descending score; equal scores keep sample-index
    order, so every sample is its own cutoff.
    """
    scores, labels = _ovr_inputs(scores, labels)
    C = scores.shape[1]
    n = len(labels)
    out = np.full(C, np.nan)
    ranks = np.arange(1, n + 1)
    for c in range(C):
        pos = labels == c
        n_pos = int(pos.sum())
        if n_pos == 0 or n_pos == n:
            continue
        order = np.argsort(-scores[:, c], kind="stable")
        tp = np.cumsum(pos[order])
        recall = tp / n_pos
        precision = tp / ranks
        steps = np.diff(recall, prepend=0.0)
        out[c] = math.fsum((steps * precision).tolist())
    defined = ~np.isnan(out)
    if not defined.any():
        raise MetricsError("no class has both positive and negative samples")
    return RankingScores(out, defined)


def evaluate_predictions(scores, labels, n_classes: int, average: str = "macro",
                         class_names: list[str] | None = None) -> ClassificationReport:
    """Full report from per-class scores (logits or probabilities)."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    preds = np.argmax(scores, axis=1)
    report = classification_report(confusion_matrix(preds, labels, n_classes), average, class_names)
    try:
        report.auc = roc_auc_ovr(scores, labels).per_class
        report.ap = average_precision_ovr(scores, labels).per_class
    except MetricsError:
        report.auc = report.ap = None
    return report


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(CSV_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k])
                         for k in CSV_COLUMNS})
    return buf.getvalue()
