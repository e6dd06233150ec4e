"""Open-set metrics, score-distribution histograms, and pseudo-label audits.

Headline metrics follow the open-intent-classification convention: accuracy
and macro-F1 over the N+1 labels (the N IND classes plus "OOD"), accuracy and
macro-F1 restricted to the IND side, and recall/F1 of the single OOD label.
All metrics are percentages; serialized values are rounded to 2 decimals.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import OOD_LABEL
from .errors import ConfigError


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    all_acc: float
    all_f1: float
    ind_acc: float
    ind_f1: float
    ood_recall: float
    ood_f1: float
    labels: list[str]
    per_class: dict[str, ClassMetrics]
    confusion: np.ndarray
    metadata: dict = field(default_factory=dict)

    HEADLINE = ("all_acc", "all_f1", "ind_acc", "ind_f1", "ood_recall", "ood_f1")

    def headline(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.HEADLINE}

    def to_dict(self) -> dict:
        out = {name: round(getattr(self, name), 2) for name in self.HEADLINE}
        out["labels"] = list(self.labels)
        out["per_class"] = {
            label: {"precision": round(m.precision, 2), "recall": round(m.recall, 2),
                    "f1": round(m.f1, 2), "support": m.support}
            for label, m in self.per_class.items()}
        out["confusion"] = [[int(v) for v in row] for row in self.confusion]
        out["metadata"] = dict(self.metadata)
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"
        if path is not None:
            tmp = f"{path}.tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, path)
        return text


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def evaluate(predictions: Mapping[str, str], gold: Mapping[str, str],
             ind_classes: Sequence[str], metadata: dict | None = None) -> EvalReport:
    """Score open-set predictions against gold labels keyed by example id.

    Both mappings must cover the same ids with labels from the IND inventory
    plus "OOD". Zero-support classes contribute F1 = 0 to the macro averages;
    the IND macro excludes the OOD label but OOD predictions on gold-IND
    examples still count as errors.
    """
    if set(predictions) != set(gold):
        only_p = sorted(set(predictions) - set(gold))[:3]
        only_g = sorted(set(gold) - set(predictions))[:3]
        raise ValueError(f"prediction/gold id sets differ (e.g. {only_p} vs {only_g})")
    if not gold:
        raise ValueError("cannot evaluate an empty id set")
    labels = list(ind_classes) + [OOD_LABEL]
    index = {label: i for i, label in enumerate(labels)}
    if len(index) != len(labels):
        raise ConfigError("IND class names must be unique and distinct from 'OOD'")
    n = len(labels)
    confusion = np.zeros((n, n), dtype=np.int64)
    for ex_id in gold:
        g, p = gold[ex_id], predictions[ex_id]
        if g not in index:
            raise ValueError(f"unknown gold label {g!r} for id {ex_id!r}")
        if p not in index:
            raise ValueError(f"unknown predicted label {p!r} for id {ex_id!r}")
        confusion[index[g], index[p]] += 1

    total = int(confusion.sum())
    correct = int(np.trace(confusion))
    per_class: dict[str, ClassMetrics] = {}
    f1s = []
    for i, label in enumerate(labels):
        tp = int(confusion[i, i])
        fp = int(confusion[:, i].sum()) - tp
        fn = int(confusion[i, :].sum()) - tp
        precision, recall, f1 = _prf(tp, fp, fn)
        per_class[label] = ClassMetrics(precision=100.0 * precision,
                                        recall=100.0 * recall, f1=100.0 * f1,
                                        support=tp + fn)
        f1s.append(f1)

    ood_i = index[OOD_LABEL]
    gold_ind_total = int(confusion[:ood_i, :].sum())
    gold_ind_correct = int(np.trace(confusion[:ood_i, :ood_i]))
    report = EvalReport(
        all_acc=100.0 * correct / total,
        all_f1=100.0 * float(np.mean(f1s)),
        ind_acc=100.0 * gold_ind_correct / gold_ind_total if gold_ind_total else 0.0,
        ind_f1=100.0 * float(np.mean(f1s[:ood_i])),
        ood_recall=per_class[OOD_LABEL].recall,
        ood_f1=per_class[OOD_LABEL].f1,
        labels=labels, per_class=per_class, confusion=confusion,
        metadata=dict(metadata or {}))
    return report


@dataclass
class HistogramExport:
    """Shared-bin score histograms for the IND and OOD populations."""

    edges: list[float]
    ind_counts: list[int]
    ood_counts: list[int]
    epoch: int | None = None

    def to_dict(self) -> dict:
        return {"edges": list(self.edges), "ind_counts": list(self.ind_counts),
                "ood_counts": list(self.ood_counts), "epoch": self.epoch}

    @classmethod
    def from_dict(cls, obj: dict) -> "HistogramExport":
        return cls(edges=obj["edges"], ind_counts=obj["ind_counts"],
                   ood_counts=obj["ood_counts"], epoch=obj.get("epoch"))

    def write_csv(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("bin_left,bin_right,ind_count,ood_count\n")
            for i in range(len(self.ind_counts)):
                fh.write(f"{self.edges[i]!r},{self.edges[i + 1]!r},"
                         f"{self.ind_counts[i]},{self.ood_counts[i]}\n")
        os.replace(tmp, path)


def score_histogram(scores_ind, scores_ood, n_bins: int,
                    epoch: int | None = None) -> HistogramExport:
    """Histogram both score populations over shared bins spanning the pooled range."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    ind = np.asarray(scores_ind, dtype=np.float64)
    ood = np.asarray(scores_ood, dtype=np.float64)
    if ind.size == 0 or ood.size == 0:
        raise ValueError("both score populations must be non-empty")
    lo = float(min(ind.min(), ood.min()))
    hi = float(max(ind.max(), ood.max()))
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_bins + 1)
    ind_counts, _ = np.histogram(ind, bins=edges)
    ood_counts, _ = np.histogram(ood, bins=edges)
    return HistogramExport(edges=[float(e) for e in edges],
                           ind_counts=[int(c) for c in ind_counts],
                           ood_counts=[int(c) for c in ood_counts], epoch=epoch)


@dataclass(frozen=True)
class PseudoLabelAudit:
    n_pseudo_ind: int
    n_pseudo_ood: int
    n_abstain: int
    correct_pseudo_ind: int
    correct_pseudo_ood: int


def pseudo_label_audit(partition, gold: Mapping[str, str],
                       ind_classes: Sequence[str]) -> PseudoLabelAudit:
    """Count pseudo labels that agree with gold.

    A pseudo-IND assignment is correct when the gold label equals the assigned
    class; a pseudo-OOD one when the gold label is outside the IND inventory.
    `partition` is any object with pseudo_ind / pseudo_ood / abstain fields.
    """
    ind = set(ind_classes)
    missing = [i for i in (*partition.pseudo_ind, *partition.pseudo_ood,
                           *partition.abstain) if i not in gold]
    if missing:
        raise ValueError(f"gold labels missing for {len(missing)} partition ids "
                         f"(e.g. {missing[:3]})")
    correct_ind = sum(1 for ex_id, cls in partition.pseudo_ind.items()
                      if gold[ex_id] == cls)
    correct_ood = sum(1 for ex_id in partition.pseudo_ood if gold[ex_id] not in ind)
    return PseudoLabelAudit(n_pseudo_ind=len(partition.pseudo_ind),
                            n_pseudo_ood=len(partition.pseudo_ood),
                            n_abstain=len(partition.abstain),
                            correct_pseudo_ind=correct_ind,
                            correct_pseudo_ood=correct_ood)


def separation_stat(scores_ind, scores_ood) -> float:
    """Mean IND score minus mean OOD score."""
    ind = np.asarray(scores_ind, dtype=np.float64)
    ood = np.asarray(scores_ood, dtype=np.float64)
    if ind.size == 0 or ood.size == 0:
        raise ValueError("both score populations must be non-empty")
    return float(ind.mean() - ood.mean())
