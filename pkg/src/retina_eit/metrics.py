"""Classification metrics derived from a 5x5 confusion matrix."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

N_CLASSES = 5


def confusion_matrix(truths, preds, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(truths, dtype=np.int64).reshape(-1)
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ContractError(f"{t.size} truths vs {p.size} predictions")
    for name, v in (("truth", t), ("prediction", p)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise ContractError(f"{name} label outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ContractError("accuracy of an empty confusion matrix")
    return float(np.trace(cm) / total)


def quadratic_weighted_kappa(truths, preds, n_classes: int = N_CLASSES) -> float:
    observed = confusion_matrix(truths, preds, n_classes).astype(np.float64)
    total = observed.sum()
    if total == 0:
        raise ContractError("kappa of empty label sequences")
    idx = np.arange(n_classes)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (n_classes - 1) ** 2
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / total
    denom = float(np.sum(weights * expected))
    if denom == 0.0:
        warnings.warn("kappa undefined for single-class marginals; reporting 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return 1.0 - float(np.sum(weights * observed)) / denom


def _ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    undefined = den == 0
    safe = np.where(undefined, 1, den)
    return np.where(undefined, 0.0, num / safe), undefined


@dataclass(frozen=True)
class PerClass:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    specificity: np.ndarray
    undefined: dict[str, np.ndarray]  # per metric, True where the ratio was 0/0


def per_class_metrics(cm) -> PerClass:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    precision, p_undef = _ratio(tp, tp + fp)
    recall, r_undef = _ratio(tp, tp + fn)
    f1, f_undef = _ratio(2 * precision * recall, precision + recall)
    specificity, s_undef = _ratio(tn, tn + fp)
    return PerClass(precision, recall, f1, specificity,
                    {"precision": p_undef, "recall": r_undef, "f1": f_undef, "specificity": s_undef})


@dataclass(frozen=True)
class Summary:
    accuracy: float
    macro_precision: float
    macro_recall: float  # also reported as sensitivity
    macro_f1: float
    macro_specificity: float
    balanced_accuracy: float
    kappa: float | None = None

    @property
    def sensitivity(self) -> float:
        return self.macro_recall


def macro_and_balanced(cm, kappa: float | None = None) -> Summary:
    pc = per_class_metrics(cm)
    macro_r = float(pc.recall.mean())
    macro_s = float(pc.specificity.mean())
    return Summary(accuracy(cm), float(pc.precision.mean()), macro_r, float(pc.f1.mean()), macro_s,
                   (macro_r + macro_s) / 2, kappa)


def evaluate_labels(truths, preds) -> tuple[np.ndarray, Summary, PerClass]:
    cm = confusion_matrix(truths, preds)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        kappa = quadratic_weighted_kappa(truths, preds)
    return cm, macro_and_balanced(cm, kappa), per_class_metrics(cm)


# -- reports -------------------------------------------------------------------

def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def summary_rows(summary: Summary) -> list[tuple[str, str]]:
    rows = [("Accuracy (%)", _pct(summary.accuracy)),
            ("Macro Precision (%)", _pct(summary.macro_precision)),
            ("Macro Recall (%)", _pct(summary.macro_recall)),
            ("Macro F1 (%)", _pct(summary.macro_f1)),
            ("Macro Specificity (%)", _pct(summary.macro_specificity)),
            ("Balanced Accuracy (%)", _pct(summary.balanced_accuracy)),
            ("Sensitivity (%)", _pct(summary.sensitivity))]
    if summary.kappa is not None:
        rows.append(("Quadratic Weighted Kappa", f"{summary.kappa:.4f}"))
    return rows


def per_class_rows(pc: PerClass) -> list[list[str]]:
    header = ["Class", "Precision (%)", "Recall (%)", "F1 (%)", "Specificity (%)"]
    rows = [header]
    for c in range(len(pc.precision)):
        cells = []
        for name in ("precision", "recall", "f1", "specificity"):
            v = _pct(getattr(pc, name)[c])
            cells.append(v + ("*" if pc.undefined[name][c] else ""))
        rows.append([str(c), *cells])
    return rows


def format_metrics(cm: np.ndarray, summary: Summary, pc: PerClass) -> str:
    out = []
    width = max(len(k) for k, _ in summary_rows(summary))
    out += [f"{k:<{width}}  {v:>8}" for k, v in summary_rows(summary)]
    out.append("")
    table = per_class_rows(pc)
    widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
    out += ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in table]
    if any(u.any() for u in pc.undefined.values()):
        out.append("* undefined ratio (0/0) reported as 0")
    out.append("")
    out.append("confusion matrix (rows = true, cols = predicted)")
    out += ["  ".join(f"{v:>4d}" for v in row) for row in np.asarray(cm)]
    return "\n".join(out)


def write_metrics_csv(summary: Summary, pc: PerClass, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerows(summary_rows(summary))
        w.writerow([])
        w.writerows(per_class_rows(pc))
