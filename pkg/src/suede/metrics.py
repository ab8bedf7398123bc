"""Attack-detection metrics: ROC, AUC, EER, TPR@FPR, APCER/BPCER/ACER, ACC.

Scores are fake-scores (higher means more likely an attack); labels are 1 for
attack and 0 for bonafide. A sample is classified as attack when
``score >= threshold``. Samples with equal scores move across the ROC
together, and the curve is linear between its vertices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

DEFAULT_FPR_TARGETS = (0.1, 0.01)


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if scores.shape != labels.shape:
        raise ContractError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise ContractError("labels must be 0 (bonafide) or 1 (attack)")
    return scores, labels


def _check_both(scores, labels):
    scores, labels = _check(scores, labels)
    n_att = int(labels.sum())
    if n_att == 0 or n_att == labels.size:
        raise ContractError("both bonafide and attack samples are required")
    return scores, labels


def _roc_counts(scores, labels):
    """Cumulative (fp, tp) counts at each distinct threshold, descending."""
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(1 - y)[ends]
    zero = np.zeros(1, dtype=np.int64)
    return np.r_[zero, fp], np.r_[zero, tp], np.r_[np.inf, s[ends]]


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds), starting at (0, 0) with threshold +inf."""
    scores, labels = _check_both(scores, labels)
    fp, tp, thr = _roc_counts(scores, labels)
    return fp / fp[-1], tp / tp[-1], thr


def auc(scores, labels) -> float:
    """Trapezoidal ROC area, computed in integer counts so it equals the
    Mann-Whitney statistic exactly."""
    scores, labels = _check_both(scores, labels)
    fp, tp, _ = _roc_counts(scores, labels)
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * int(fp[-1]) * int(tp[-1]))


def eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and the threshold of the ROC vertex where it is reached."""
    fpr, tpr, thr = roc_curve(scores, labels)
    gap = fpr + tpr - 1.0  # fpr - fnr; nondecreasing along the curve
    i = int(np.argmax(gap >= 0.0))
    if gap[i] == 0.0 or i == 0:
        return float(fpr[i]), float(thr[i])
    t = -gap[i - 1] / (gap[i] - gap[i - 1])
    return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1])), float(thr[i])


def tpr_at_fpr(scores, labels, fpr_target: float) -> float:
    """Best TPR on the interpolated ROC with FPR not above ``fpr_target``."""
    if not 0.0 < fpr_target < 1.0:
        raise ContractError(f"fpr_target must lie in (0, 1), got {fpr_target}")
    fpr, tpr, _ = roc_curve(scores, labels)
    j = int(np.searchsorted(fpr, fpr_target, side="right")) - 1
    if fpr[j] == fpr_target or j == fpr.size - 1:
        return float(tpr[j])
    t = (fpr_target - fpr[j]) / (fpr[j + 1] - fpr[j])
    return float(tpr[j] + t * (tpr[j + 1] - tpr[j]))


def acer(scores, labels, threshold: float = 0.5) -> tuple[float, float, float]:
    """(acer, apcer, bpcer); a class with no samples contributes a rate of 0."""
    scores, labels = _check(scores, labels)
    att = labels == 1
    pred = scores >= threshold
    apcer = float(np.mean(~pred[att])) if att.any() else 0.0
    bpcer = float(np.mean(pred[~att])) if (~att).any() else 0.0
    return (apcer + bpcer) / 2, apcer, bpcer


def acc(scores, labels, threshold: float = 0.5) -> float:
    scores, labels = _check(scores, labels)
    if scores.size == 0:
        raise ContractError("accuracy of an empty set")
    return float(np.mean((scores >= threshold) == (labels == 1)))


@dataclass
class MetricReport:
    acer: float
    apcer: float
    bpcer: float
    acc: float
    auc: float
    eer: float
    tpr_at_fpr: dict[float, float]
    threshold_used: float
    eer_threshold: float = float("nan")
    extra: dict[str, float] = field(default_factory=dict)

    def record(self) -> dict:
        """Flat record; the field names are part of the report file format."""
        out = {
            "acer": self.acer,
            "apcer": self.apcer,
            "bpcer": self.bpcer,
            "acc": self.acc,
            "auc": self.auc,
            "eer": self.eer,
        }
        for target, value in sorted(self.tpr_at_fpr.items(), reverse=True):
            out[f"tpr@fpr={target:g}"] = value
        out["threshold"] = self.threshold_used
        out["eer_threshold"] = self.eer_threshold
        out.update(self.extra)
        return out


def evaluate_scores(scores, labels, threshold: float = 0.5, fpr_targets=DEFAULT_FPR_TARGETS) -> MetricReport:
    scores, labels = _check_both(scores, labels)
    a, ap, bp = acer(scores, labels, threshold)
    e, e_thr = eer(scores, labels)
    return MetricReport(
        acer=a,
        apcer=ap,
        bpcer=bp,
        acc=acc(scores, labels, threshold),
        auc=auc(scores, labels),
        eer=e,
        tpr_at_fpr={t: tpr_at_fpr(scores, labels, t) for t in fpr_targets},
        threshold_used=threshold,
        eer_threshold=e_thr,
    )


def aggregate(reports: Sequence[MetricReport] | Sequence[dict]) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation of every numeric field."""
    if not reports:
        raise ContractError("aggregate needs at least one report")
    records = [r.record() if isinstance(r, MetricReport) else r for r in reports]
    keys = [k for k, v in records[0].items() if isinstance(v, (int, float))]
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in records], dtype=np.float64)
        out[k] = (float(vals.mean()), float(vals.std(ddof=0)))
    return out


def write_records(path, records: Iterable[dict], append: bool = True) -> None:
    """Line-delimited JSON, one flat record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def read_records(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def report_from_record(rec: dict) -> MetricReport:
    tprs = {float(k.split("=")[1]): v for k, v in rec.items() if k.startswith("tpr@fpr=")}
    known = {"acer", "apcer", "bpcer", "acc", "auc", "eer", "threshold", "eer_threshold"}
    return MetricReport(
        acer=rec["acer"],
        apcer=rec["apcer"],
        bpcer=rec["bpcer"],
        acc=rec["acc"],
        auc=rec["auc"],
        eer=rec["eer"],
        tpr_at_fpr=tprs,
        threshold_used=rec["threshold"],
        eer_threshold=rec.get("eer_threshold", float("nan")),
        extra={k: v for k, v in rec.items() if k not in known and not k.startswith("tpr@fpr=")},
    )

