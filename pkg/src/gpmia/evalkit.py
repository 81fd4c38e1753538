"""Attack-quality metrics over scored audit units.

Label 1 means member. Thresholding is ``score >= t`` throughout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from gpmia.errors import ConfigError, NoNegatives, NoPositives, SingleClass

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ScoredUnit:
    unit_id: str
    probability: float
    true_label: int

    def __post_init__(self):
        if not np.isfinite(self.probability):
            raise ConfigError(f"unit {self.unit_id!r}: probability is not finite")
        if self.true_label not in (0, 1):
            raise ConfigError(f"unit {self.unit_id!r}: label must be 0 or 1")


@dataclass
class EvalReport:
    auroc: float
    aupr: float
    tpr_at_fpr: list
    confusion: list
    threshold: float
    group_stats: dict
    units: list = field(default_factory=list)

    def to_dict(self):
        return {
            "format": "gpmia-report",
            "version": REPORT_FORMAT_VERSION,
            "auroc": self.auroc,
            "aupr": self.aupr,
            "tpr_at_fpr": [{"fpr": f, "tpr": t} for f, t in self.tpr_at_fpr],
            "threshold": self.threshold,
            "confusion": {
                "layout": "rows=true [non_member, member], cols=predicted [non_member, member]",
                "counts": self.confusion,
            },
            "group_stats": self.group_stats,
            "units": [{"unit_id": u.unit_id, "probability": u.probability, "label": u.true_label}
                      for u in self.units],
        }


def _arrays(scored):
    s = np.array([u.probability for u in scored], dtype=np.float64)
    y = np.array([u.true_label for u in scored], dtype=np.int64)
    return s, y


def _tie_groups(s, y):
    """Cumulative (tp, fp) at the end of each distinct-score group, descending."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    return tp[last], fp[last]


def auroc(scored: Sequence[ScoredUnit]) -> float:
    """Mann-Whitney AUC with half credit for ties."""
    s, y = _arrays(scored)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both members and non-members")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(ss):
        j = i
        while j + 1 < len(ss) and ss[j + 1] == ss[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scored: Sequence[ScoredUnit]) -> float:
    """Average precision: sum over thresholds of (recall step) x precision."""
    s, y = _arrays(scored)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("AUPR needs at least one member")
    tp, fp = _tie_groups(s, y)
    total = Fraction(0)
    prev = 0
    for t, f in zip(tp.tolist(), fp.tolist()):
        if t != prev:
            total += Fraction(t - prev) * Fraction(t, t + f)
            prev = t
    return float(total / n_pos)


def tpr_at_fpr(scored: Sequence[ScoredUnit], fpr_target: float) -> float:
    """Largest TPR over thresholds whose empirical FPR does not exceed the target."""
    if not 0.0 < fpr_target < 1.0:
        raise ConfigError("fpr_target must lie in (0, 1)")
    s, y = _arrays(scored)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_neg == 0:
        raise NoNegatives("TPR@FPR needs at least one non-member")
    if n_pos == 0:
        raise NoPositives("TPR@FPR needs at least one member")
    tp, fp = _tie_groups(s, y)
    ok = fp / n_neg <= fpr_target
    best = int(tp[ok].max()) if np.any(ok) else 0
    return best / n_pos


def confusion(scored: Sequence[ScoredUnit], threshold: float = 0.5) -> list[list[int]]:
    """``[[TN, FP], [FN, TP]]``: rows are true non-member / member."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError("threshold must lie in [0, 1]")
    s, y = _arrays(scored)
    pred = s >= threshold
    return [
        [int(np.sum(~pred & (y == 0))), int(np.sum(pred & (y == 0)))],
        [int(np.sum(~pred & (y == 1))), int(np.sum(pred & (y == 1)))],
    ]


def group_stats(scored: Sequence[ScoredUnit]) -> dict:
    s, y = _arrays(scored)
    out = {}
    for lab, name in ((1, "member"), (0, "non_member")):
        v = s[y == lab]
        out[name] = {"n": int(v.size),
                     "mean": float(v.mean()) if v.size else None,
                     "std": float(v.std()) if v.size else None}
    return out


def evaluate(scored: Sequence[ScoredUnit], fpr_targets=(0.01,), threshold: float = 0.5) -> EvalReport:
    scored = list(scored)
    if not scored:
        raise ConfigError("no scored units to evaluate")
    return EvalReport(
        auroc=auroc(scored),
        aupr=aupr(scored),
        tpr_at_fpr=[(float(f), tpr_at_fpr(scored, f)) for f in fpr_targets],
        confusion=confusion(scored, threshold),
        threshold=float(threshold),
        group_stats=group_stats(scored),
        units=scored,
    )


def write_report(report: EvalReport, path, extra: dict | None = None) -> None:
    doc = report.to_dict()
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
