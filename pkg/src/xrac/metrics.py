"""Multi-label evaluation: F1, ranked precision, AUC, hierarchical F1.

Conventions, recorded with every report: per-code F1 is 0 when its
precision+recall denominator is 0; macro AUC averages only codes with at
least one positive and one negative (absent when no code qualifies);
score ties in top-n ranking break toward the lower code id; the
hierarchical variant closes predicted and gold sets over code ancestors
before pooling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CodeTable

__all__ = [
    "PredictionRun",
    "MetricsReport",
    "per_code_f1",
    "micro_macro_f1",
    "precision_at_n",
    "auc",
    "hierarchical_set_f1",
    "compute_report",
    "format_report_table",
]


@dataclass
class PredictionRun:
    """Scores in [0, 1] for every (document, code) pair plus the decision threshold."""

    doc_ids: list[str]
    scores: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.doc_ids):
            raise ValueError(f"scores must be (n_docs, n_codes), got {self.scores.shape}")
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ValueError("scores must lie in [0, 1]")

    @property
    def n_codes(self) -> int:
        return self.scores.shape[1]

    def predicted_sets(self) -> list[set[int]]:
        hits = self.scores >= self.threshold
        return [set(np.nonzero(row)[0].tolist()) for row in hits]


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def _confusion_counts(run: PredictionRun, gold: list[set[int]]):
    n_codes = run.n_codes
    tp = np.zeros(n_codes, dtype=np.int64)
    fp = np.zeros(n_codes, dtype=np.int64)
    fn = np.zeros(n_codes, dtype=np.int64)
    for pred, true in zip(run.predicted_sets(), gold):
        for c in pred & true:
            tp[c] += 1
        for c in pred - true:
            fp[c] += 1
        for c in true - pred:
            fn[c] += 1
    return tp, fp, fn


def per_code_f1(run: PredictionRun, gold: list[set[int]]) -> np.ndarray:
    """F1 per code at the run's threshold (0 when a code's denominator is 0)."""
    _check_gold(run, gold)
    tp, fp, fn = _confusion_counts(run, gold)
    return np.array([_f1(tp[c], fp[c], fn[c]) for c in range(run.n_codes)])


def micro_macro_f1(run: PredictionRun, gold: list[set[int]]) -> tuple[float, float]:
    """(macro_f1, micro_f1) at the run's threshold.

    Micro pools true/false positives over all (doc, code) pairs; macro is
    the unweighted mean of per-code F1 with the zero-denominator
    convention (a code never gold and never predicted contributes 0).
    """
    _check_gold(run, gold)
    tp, fp, fn = _confusion_counts(run, gold)
    micro = _f1(int(tp.sum()), int(fp.sum()), int(fn.sum()))
    macro = float(np.mean([_f1(tp[c], fp[c], fn[c]) for c in range(run.n_codes)]))
    return macro, micro


def precision_at_n(run: PredictionRun, gold: list[set[int]], n: int) -> float:
    """Mean over documents of |top-n scored codes ∩ gold| / n."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n > run.n_codes:
        raise ValueError(f"n={n} exceeds the number of codes {run.n_codes}")
    _check_gold(run, gold)
    total = 0.0
    for row, true in zip(run.scores, gold):
        top = sorted(range(run.n_codes), key=lambda c: (-row[c], c))[:n]
        total += len(set(top) & true) / n
    return total / len(gold)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _roc_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc(run: PredictionRun, gold: list[set[int]]) -> tuple[float | None, float]:
    """(macro_auc, micro_auc) by the rank statistic; ties count one half.

    Macro skips codes without both a positive and a negative and is None
    when no code qualifies. Micro pools every (doc, code) pair.
    """
    _check_gold(run, gold)
    labels = np.zeros_like(run.scores)
    for i, true in enumerate(gold):
        for c in true:
            labels[i, c] = 1.0
    micro = _roc_auc(run.scores.ravel(), labels.ravel())
    if micro is None:
        raise ValueError("micro AUC needs at least one positive and one negative pair")
    per_code = [_roc_auc(run.scores[:, c], labels[:, c]) for c in range(run.n_codes)]
    valid = [a for a in per_code if a is not None]
    macro = float(np.mean(valid)) if valid else None
    return macro, micro


def hierarchical_set_f1(run: PredictionRun, gold: list[set[int]], codes: CodeTable) -> float:
    """Pooled micro F1 after closing predicted and gold sets over ancestors."""
    _check_gold(run, gold)
    if len(codes) != run.n_codes:
        raise ValueError(f"code table size {len(codes)} does not match run {run.n_codes}")
    closure_cache = {c: {c, *codes.ancestors(c)} for c in range(len(codes))}

    def close(s: set[int]) -> set[int]:
        out: set[int] = set()
        for c in s:
            out |= closure_cache[c]
        return out

    tp = fp = fn = 0
    for pred, true in zip(run.predicted_sets(), gold):
        pc, tc = close(pred), close(true)
        tp += len(pc & tc)
        fp += len(pc - tc)
        fn += len(tc - pc)
    return _f1(tp, fp, fn)


def _check_gold(run: PredictionRun, gold: list[set[int]]) -> None:
    if len(gold) != len(run.doc_ids):
        raise ValueError(f"{len(gold)} gold sets for {len(run.doc_ids)} documents")
    for true in gold:
        for c in true:
            if not 0 <= c < run.n_codes:
                raise ValueError(f"gold code id {c} out of range [0, {run.n_codes})")


@dataclass
class MetricsReport:
    macro_auc: float | None
    micro_auc: float
    macro_f1: float
    micro_f1: float
    precision_at: dict[int, float]
    hier_set_f1: float
    threshold: float
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "auc": {"macro": self.macro_auc, "micro": self.micro_auc},
            "f1": {"macro": self.macro_f1, "micro": self.micro_f1},
            "precision_at": {str(k): v for k, v in sorted(self.precision_at.items())},
            "hier_set_f1": self.hier_set_f1,
            "threshold": self.threshold,
            "notes": self.notes,
        }


def compute_report(
    run: PredictionRun,
    gold: list[set[int]],
    codes: CodeTable,
    precision_ks: tuple[int, ...] = (5, 8, 15),
) -> MetricsReport:
    macro_f1, micro_f1 = micro_macro_f1(run, gold)
    macro_auc, micro_auc = auc(run, gold)
    notes = []
    if macro_auc is None:
        notes.append("macro AUC absent: no code has both a positive and a negative")
    usable_ks = [k for k in precision_ks if k <= run.n_codes]
    if len(usable_ks) < len(precision_ks):
        notes.append(f"precision@n limited to n <= {run.n_codes}")
    return MetricsReport(
        macro_auc=macro_auc,
        micro_auc=micro_auc,
        macro_f1=macro_f1,
        micro_f1=micro_f1,
        precision_at={k: precision_at_n(run, gold, k) for k in usable_ks},
        hier_set_f1=hierarchical_set_f1(run, gold, codes),
        threshold=run.threshold,
        notes=notes,
    )


def format_report_table(reports: dict[str, MetricsReport]) -> str:
    """Aligned text table, one row per model, mirroring the usual column layout."""
    ks = sorted({k for r in reports.values() for k in r.precision_at})
    headers = ["Model", "AUC(macro)", "AUC(micro)", "F1(macro)", "F1(micro)"]
    headers += [f"P@{k}" for k in ks] + ["HierF1"]
    rows = [headers]
    for name, rep in reports.items():
        row = [
            name,
            "-" if rep.macro_auc is None else f"{rep.macro_auc:.4f}",
            f"{rep.micro_auc:.4f}",
            f"{rep.macro_f1:.4f}",
            f"{rep.micro_f1:.4f}",
        ]
        row += [f"{rep.precision_at[k]:.4f}" if k in rep.precision_at else "-" for k in ks]
        row.append(f"{rep.hier_set_f1:.4f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def save_report(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
