"""AUC, log loss and per-task evaluation reports."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError

LOGLOSS_EPS = 1e-7


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank-sum statistic.

    Tied scores receive their average rank, so a tied positive/negative pair
    counts one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"shape mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes (pos={n_pos}, neg={n_neg})")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), LOGLOSS_EPS, 1 - LOGLOSS_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


@dataclass
class EvalReport:
    """AUCs in percent (``None`` when undefined or not applicable)."""

    auc_ctr: float | None
    auc_ctcvr: float | None
    logloss_ctr: float
    logloss_ctcvr: float | None
    n_zeros: int
    n_ctnocvr: int
    n_cvr: int
    multitask: bool = True
    errors: dict = field(default_factory=dict)

    def fields(self):
        rows = [("auc_ctr", _fmt_auc(self.auc_ctr))]
        if self.multitask:
            rows.append(("auc_ctcvr", _fmt_auc(self.auc_ctcvr)))
        rows.append(("logloss_ctr", f"{self.logloss_ctr:.6f}"))
        if self.multitask:
            rows.append(("logloss_ctcvr", f"{self.logloss_ctcvr:.6f}"))
        rows += [("n_zeros", str(self.n_zeros)), ("n_ctnocvr", str(self.n_ctnocvr)),
                 ("n_cvr", str(self.n_cvr))]
        rows += [(f"error_{k}", v) for k, v in sorted(self.errors.items())]
        return rows

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.fields())

    def header_row(self, sep="\t") -> str:
        return sep.join(k for k, _ in self.fields())

    def to_row(self, sep="\t") -> str:
        return sep.join(v for _, v in self.fields())


def _fmt_auc(value):
    return "undefined" if value is None else f"{value:.3f}"


def _safe_auc(scores, labels, name, errors):
    try:
        return 100.0 * auc(scores, labels)
    except UndefinedMetricError as exc:
        errors[name] = str(exc)
        return None


def report(preds, y_ctr, y_cvr) -> EvalReport:
    """Build a report from predictions and labels.

    CTCVR is scored over every impression against ``y_ctr * y_cvr``.
    """
    y_ctr = np.asarray(y_ctr)
    y_cvr = np.asarray(y_cvr)
    errors = {}
    y_ctcvr = y_ctr * y_cvr
    multitask = preds.p_ctcvr is not None
    auc_ctr = _safe_auc(preds.p_ctr, y_ctr, "auc_ctr", errors)
    auc_ctcvr = _safe_auc(preds.p_ctcvr, y_ctcvr, "auc_ctcvr", errors) if multitask else None
    return EvalReport(
        auc_ctr=auc_ctr,
        auc_ctcvr=auc_ctcvr,
        logloss_ctr=logloss(preds.p_ctr, y_ctr),
        logloss_ctcvr=logloss(preds.p_ctcvr, y_ctcvr) if multitask else None,
        n_zeros=int(np.sum(y_ctr == 0)),
        n_ctnocvr=int(np.sum((y_ctr == 1) & (y_cvr == 0))),
        n_cvr=int(np.sum(y_ctcvr == 1)),
        multitask=multitask,
        errors=errors,
    )


def evaluate(model, dataset, batch_size=8192) -> EvalReport:
    """Score ``dataset`` with ``model`` and report per-task AUC and log loss."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = model.predict(dataset.features, batch_size=batch_size)
    return report(preds, dataset.y_ctr, dataset.y_cvr)
