"""Ranking metrics, trial aggregation, baseline comparison and table rendering."""

from __future__ import annotations

import math
import random
import statistics
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, fields
from typing import Any

from .catalog import EvaluationCase

Truth = Sequence[tuple[str, float]]

METRIC_NAMES = ("acc_at_1", "rr", "ndcg_at_k", "recall_at_k")


def _require_truth(truth: Truth) -> None:
    if not truth:
        raise ValueError("ground truth is empty")


def acc_at_1(pred: Sequence[str], truth: Truth) -> float:
    _require_truth(truth)
    return 1.0 if pred and pred[0] == truth[0][0] else 0.0


def reciprocal_rank(pred: Sequence[str], truth: Truth) -> float:
    _require_truth(truth)
    top = truth[0][0]
    try:
        return 1.0 / (list(pred).index(top) + 1)
    except ValueError:
        raise ValueError(f"top item {top!r} absent from prediction") from None


def _gain(rel: float, gain: str) -> float:
    if gain == "linear":
        return rel
    if gain == "exponential":
        return 2.0**rel - 1.0
    raise ValueError(f"unknown gain {gain!r}")


def ndcg_at_k(pred: Sequence[str], relevance: Mapping[str, float], k: int = 3,
              gain: str = "linear") -> float:
    """NDCG@k; ids missing from ``relevance`` count as zero."""
    if k < 1:
        raise ValueError("k must be >= 1")
    dcg = sum(
        _gain(relevance.get(mid, 0.0), gain) / math.log2(i + 2) for i, mid in enumerate(pred[:k])
    )
    ideal = sorted(relevance.values(), reverse=True)[:k]
    idcg = sum(_gain(rel, gain) / math.log2(i + 2) for i, rel in enumerate(ideal))
    if idcg <= 0:
        raise ValueError("relevance map has no positive entries")
    return dcg / idcg


def recall_at_k(pred: Sequence[str], truth: Truth, k: int = 3) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    _require_truth(truth)
    relevant = {mid for mid, _ in truth[:k]}
    return len(relevant.intersection(pred[:k])) / min(k, len(truth))


@dataclass(frozen=True)
class MetricVector:
    acc_at_1: float
    rr: float
    ndcg_at_k: float
    recall_at_k: float
    k: int = 3

    def values(self) -> tuple[float, float, float, float]:
        return (self.acc_at_1, self.rr, self.ndcg_at_k, self.recall_at_k)

    def to_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def evaluate(pred: Sequence[str], case: EvaluationCase, k: int = 3, gain: str = "linear") -> MetricVector:
    if set(pred) != set(case.candidates) or len(pred) != len(case.candidates):
        raise ValueError(f"case {case.case_id}: prediction is not a permutation of candidates")
    truth = case.ground_truth
    return MetricVector(
        acc_at_1=acc_at_1(pred, truth),
        rr=reciprocal_rank(pred, truth),
        ndcg_at_k=ndcg_at_k(pred, case.relevance, k, gain),
        recall_at_k=recall_at_k(pred, truth, k),
        k=k,
    )


def mean_vector(vectors: Sequence[MetricVector]) -> MetricVector:
    if not vectors:
        raise ValueError("no metric vectors to average")
    ks = {v.k for v in vectors}
    if len(ks) != 1:
        raise ValueError(f"mixed k values {sorted(ks)}")
    cols = list(zip(*(v.values() for v in vectors)))
    return MetricVector(*(math.fsum(c) / len(c) for c in cols), k=ks.pop())


@dataclass(frozen=True)
class TrialSummary:
    mean: MetricVector
    std: MetricVector
    n: int
    case_ids: tuple[str, ...] = ()


def aggregate_trials(trials: Sequence[MetricVector], case_ids: Iterable[str] = ()) -> TrialSummary:
    """Mean and sample standard deviation of per-trial metric vectors."""
    if not trials:
        raise ValueError("no trials to aggregate")
    mean = mean_vector(trials)
    if len(trials) > 1:
        cols = list(zip(*(t.values() for t in trials)))
        std = MetricVector(*(statistics.stdev(c) for c in cols), k=mean.k)
    else:
        std = MetricVector(0.0, 0.0, 0.0, 0.0, k=mean.k)
    return TrialSummary(mean=mean, std=std, n=len(trials), case_ids=tuple(case_ids))


@dataclass(frozen=True)
class ImprovementReport:
    """Per-metric percent change of a model over a baseline.

    Where the baseline value is zero the entry holds the absolute difference
    and its name appears in ``absolute``.
    """

    improvement: dict[str, float]
    absolute: tuple[str, ...] = ()
    baseline_id: str = ""
    model_id: str = ""
    tier: str = ""
    n_trials: int = 1
    failure_rate: float = 0.0

    def values(self) -> tuple[float, ...]:
        return tuple(self.improvement[name] for name in METRIC_NAMES)


def improvement_pct(model: MetricVector | TrialSummary, baseline: MetricVector | TrialSummary,
                    **meta: Any) -> ImprovementReport:
    if isinstance(model, TrialSummary) and isinstance(baseline, TrialSummary):
        if model.case_ids != baseline.case_ids:
            raise ValueError("model and baseline were evaluated on different case sets")
    m = model.mean if isinstance(model, TrialSummary) else model
    b = baseline.mean if isinstance(baseline, TrialSummary) else baseline
    out: dict[str, float] = {}
    absolute = []
    for name, mv, bv in zip(METRIC_NAMES, m.values(), b.values()):
        if bv == 0:
            out[name] = mv - bv
            absolute.append(name)
        else:
            out[name] = 100.0 * (mv - bv) / bv
    if isinstance(model, TrialSummary):
        meta.setdefault("n_trials", model.n)
    return ImprovementReport(improvement=out, absolute=tuple(absolute), **meta)


@dataclass(frozen=True)
class RankedPrediction:
    case_id: str
    ordering: tuple[str, ...]
    scores: dict[str, float]
    strategy: str
    reasoning: dict[str, str] | None = None
    provenance: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "strategy": self.strategy,
            "ordering": list(self.ordering),
            "scores": {mid: self.scores[mid] for mid in self.ordering if mid in self.scores},
            "reasoning": self.reasoning,
            "provenance": self.provenance,
        }


def random_rank(case: EvaluationCase, seed: int) -> RankedPrediction:
    ordering = list(case.candidates)
    random.Random(seed).shuffle(ordering)
    n = len(ordering)
    return RankedPrediction(
        case_id=case.case_id,
        ordering=tuple(ordering),
        scores={mid: float(n - i) for i, mid in enumerate(ordering)},
        strategy="random",
        provenance={"backend_id": "random", "model_id": "random", "trial_seed": seed, "retries_used": 0},
    )


# --- table rendering ------------------------------------------------------

COLUMN_TITLES = ("ACC@1", "RR", "NDCG@{k}", "RC@{k}")


@dataclass(frozen=True)
class TableRow:
    model: str
    tier: str
    values: tuple[float, ...] | None  # None marks a FAILED cell

    @classmethod
    def from_report(cls, report: ImprovementReport) -> TableRow:
        return cls(report.model_id, report.tier, report.values())


def _top_two(column: Sequence[float | None]) -> set[float]:
    ranked = sorted({round(v, 2) for v in column if v is not None}, reverse=True)
    return set(ranked[:2])


def render_table(rows: Sequence[TableRow], title: str = "", k: int = 3, bold: bool = True) -> str:
    """Aligned plain-text table; the best and second-best value per column are
    wrapped in ``**``."""
    headers = ["Model", "MD", *(t.format(k=k) for t in COLUMN_TITLES)]
    n_cols = len(COLUMN_TITLES)
    best = [
        _top_two([r.values[c] if r.values is not None else None for r in rows]) if bold else set()
        for c in range(n_cols)
    ]
    body = []
    for row in rows:
        cells = [row.model, row.tier]
        for c in range(n_cols):
            if row.values is None:
                cells.append("FAILED")
                continue
            text = f"{row.values[c]:.2f}"
            cells.append(f"**{text}**" if round(row.values[c], 2) in best[c] else text)
        body.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(headers)]

    def line(cells: Sequence[str]) -> str:
        left = [cells[0].ljust(widths[0]), cells[1].ljust(widths[1])]
        right = [cell.rjust(widths[i + 2]) for i, cell in enumerate(cells[2:])]
        return "  ".join(left + right).rstrip()

    rule = "-" * len(line(headers))
    out = [title] if title else []
    out += [rule, line(headers), rule, *(line(r) for r in body), rule]
    return "\n".join(out) + "\n"
