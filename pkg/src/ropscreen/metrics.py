"""Classification metrics, Cohen's kappa, rank-statistic AUC and the Clinical Score."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


def clinical_score(f1_macro: float, sens_target: float) -> float:
    """Mean of macro F1 and the target-pathology sensitivity."""
    return 0.5 * (float(f1_macro) + float(sens_target))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def cohen_kappa(cm: np.ndarray) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.sum()
    if n == 0:
        return float("nan")
    p_o = np.trace(cm) / n
    p_e = float(cm.sum(0) @ cm.sum(1)) / (n * n)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def auc_rank(labels, scores) -> float:
    """Mann-Whitney AUC with mid-ranks, so ties earn half credit."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _safe_div(a: float, b: float) -> float | None:
    return None if b == 0 else float(a / b)


@dataclass
class EvalReport:
    """Per-class and macro metrics. Undefined entries are ``None``."""

    n_samples: int
    class_names: list[str]
    sensitivity: list[float | None]
    specificity: list[float | None]
    precision: list[float | None]
    f1: list[float | None]
    auc: list[float | None]
    macro_sensitivity: float | None
    macro_specificity: float | None
    macro_precision: float | None
    macro_f1: float | None
    macro_auc: float | None
    kappa: float | None
    target_class: int
    clinical_score: float | None
    confusion: list[list[int]] = field(default_factory=list)
    auc_kind: str = "one-vs-rest macro"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _macro(values: list[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def compute_metrics(y_true, y_pred, scores=None, *, n_classes: int | None = None,
                    target_class: int = 2, class_names=None, round_to: int | None = 12) -> EvalReport:
    """Build an :class:`EvalReport`.

    ``scores`` is ``(n, K)`` class scores (or ``(n,)`` positive-class scores
    for a binary task); AUC is one-vs-rest per class. Classes absent from
    ``y_true`` get ``None`` metrics and are left out of the macro averages.
    Values are rounded to ``round_to`` decimals so reports serialize stably.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    k = n_classes or int(max(y_true.max(initial=0), y_pred.max(initial=0)) + 1)
    cm = confusion_matrix(y_true, y_pred, k)
    n = int(cm.sum())
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim == 1:
            if k != 2:
                raise ValueError("1-D scores are only valid for a binary task")
            scores = np.stack([1.0 - scores, scores], axis=1)

    sens, spec, prec, f1, auc = [], [], [], [], []
    absent = []
    for c in range(k):
        tp = cm[c, c]
        fn = cm[c].sum() - tp
        fp = cm[:, c].sum() - tp
        tn = n - tp - fn - fp
        if tp + fn == 0:
            absent.append(c)
            sens.append(None), spec.append(None), prec.append(None), f1.append(None), auc.append(None)
            continue
        s = _safe_div(tp, tp + fn)
        p = _safe_div(tp, tp + fp)
        sens.append(s)
        spec.append(_safe_div(tn, tn + fp))
        prec.append(0.0 if p is None else p)
        f1.append(_safe_div(2 * tp, 2 * tp + fp + fn))
        if scores is not None:
            a = auc_rank(y_true == c, scores[:, c])
            auc.append(None if np.isnan(a) else a)
        else:
            auc.append(None)
    if absent:
        warnings.warn(f"class(es) {absent} absent from labels; excluded from macro averages", RuntimeWarning,
                      stacklevel=2)
    kappa = cohen_kappa(cm)
    f1_macro = _macro(f1)
    target_sens = sens[target_class] if target_class < k else None
    cs = clinical_score(f1_macro, target_sens) if f1_macro is not None and target_sens is not None else None

    def r(v):
        if v is None or round_to is None:
            return v
        return round(float(v), round_to)

    names = list(class_names) if class_names is not None else [str(c) for c in range(k)]
    return EvalReport(
        n_samples=n, class_names=names,
        sensitivity=[r(v) for v in sens], specificity=[r(v) for v in spec], precision=[r(v) for v in prec],
        f1=[r(v) for v in f1], auc=[r(v) for v in auc],
        macro_sensitivity=r(_macro(sens)), macro_specificity=r(_macro(spec)), macro_precision=r(_macro(prec)),
        macro_f1=r(f1_macro), macro_auc=r(_macro(auc)), kappa=r(None if np.isnan(kappa) else kappa),
        target_class=target_class, clinical_score=r(cs), confusion=cm.tolist(),
    )


def binary_report(y_true, prob, threshold: float = 0.5, round_to: int | None = 12) -> EvalReport:
    """Report for the plus task: classes (negative, positive), target = positive."""
    prob = np.asarray(prob, dtype=np.float64)
    pred = (prob >= threshold).astype(np.int64)
    return compute_metrics(np.asarray(y_true).astype(np.int64), pred, prob, n_classes=2, target_class=1,
                           class_names=["no_plus", "plus"], round_to=round_to)
