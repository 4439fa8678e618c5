"""Experiment driver and metric aggregation: function-selection F1, recall
tables, Likert means with 95% confidence intervals over seeds, judge
alignment, and machine- and human-readable reports.

Intervals use the normal approximation (z * sample sd / sqrt(n)) and are
computed over per-question means with seeds averaged first; pooled
per-(question, seed) aggregation is available as an option.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .corpus import FunctionName, GroundTruth, StudentQuestion
from .judge import DIMENSIONS, JudgeFn, Judgment, align
from .pipelines import PipelineKind, PipelineTrace
from .retrieval import RetrievalResult

logger = logging.getLogger(__name__)

_Z = {0.90: 1.645, 0.95: 1.96, 0.99: 2.576}


class BenchError(Exception):
    pass


@dataclass(frozen=True)
class RunSpec:
    """What to run and evaluate: pipelines, models, seeds, and the data."""

    pipelines: tuple[PipelineKind, ...]
    fc_model: str
    answer_model: str
    seeds: tuple[int, ...]
    questions: tuple[StudentQuestion, ...]
    labels: tuple[GroundTruth, ...]

    def __post_init__(self) -> None:
        if not self.seeds:
            raise BenchError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise BenchError("seeds must be distinct")

    def question_by_id(self) -> dict[str, StudentQuestion]:
        return {q.id: q for q in self.questions}

    def label_by_id(self) -> dict[str, GroundTruth]:
        return {l.question_id: l for l in self.labels}


DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class Cell:
    mean: float
    ci_halfwidth: float | None
    n: int


@dataclass
class MetricsTable:
    """Rows keyed by (model, experiment); one Cell per metric per row."""

    rows: dict[tuple[str, str], dict[str, Cell]] = field(default_factory=dict)

    def set(self, model: str, experiment: str, metric: str, cell: Cell) -> None:
        self.rows.setdefault((model, experiment), {})[metric] = cell

    def get(self, model: str, experiment: str, metric: str) -> Cell:
        return self.rows[(model, experiment)][metric]

    def metrics(self) -> list[str]:
        seen: list[str] = []
        for cells in self.rows.values():
            for metric in cells:
                if metric not in seen:
                    seen.append(metric)
        return seen


# ---------------------------------------------------------------------------
# Scalar metrics
# ---------------------------------------------------------------------------


def fc_f1(predicted: frozenset[FunctionName] | set[FunctionName], truth: frozenset[FunctionName] | set[FunctionName]) -> float:
    """Set F1 of selected functions against the expert label set.

    An empty prediction scores 0 by convention; an empty truth set is a
    caller error since labels are required to name at least one function.
    """
    if not truth:
        raise ValueError("truth set must be non-empty")
    if not predicted:
        return 0.0
    overlap = len(predicted & truth)
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted)
    recall = overlap / len(truth)
    return 2 * precision * recall / (precision + recall)


def likert_aggregate(
    scores: Sequence[float], confidence: float = 0.95
) -> tuple[float, float | None]:
    """Mean and normal-approximation CI halfwidth (z * sd / sqrt(n)).

    A single score yields the mean with an undefined halfwidth, flagged via a
    warning, so degenerate groups surface instead of pretending certainty.
    """
    if not scores:
        raise ValueError("scores must be non-empty")
    if confidence not in _Z:
        raise ValueError(f"unsupported confidence {confidence}; use one of {sorted(_Z)}")
    n = len(scores)
    mean = sum(scores) / n
    if n < 2:
        logger.warning("only one score; confidence interval undefined")
        return mean, None
    variance = sum((s - mean) ** 2 for s in scores) / (n - 1)
    halfwidth = _Z[confidence] * math.sqrt(variance) / math.sqrt(n)
    return mean, halfwidth


def _cell(values: Sequence[float], confidence: float = 0.95) -> Cell:
    mean, halfwidth = likert_aggregate(values, confidence) if len(values) > 1 else (values[0], None)
    return Cell(mean=mean, ci_halfwidth=halfwidth, n=len(values))


def _per_question_values(
    values: Mapping[str, Sequence[float]], pooling: str
) -> list[float]:
    """Collapse per-(question, seed) samples into the series the CI runs over."""
    if pooling == "question_means":
        return [sum(v) / len(v) for v in values.values()]
    if pooling == "pooled":
        return [x for v in values.values() for x in v]
    raise ValueError(f"unknown pooling {pooling!r}")


# ---------------------------------------------------------------------------
# Table builders
# ---------------------------------------------------------------------------


def evaluate_fc(
    runspec: RunSpec,
    traces: Iterable[PipelineTrace],
    labels: Iterable[GroundTruth] | None = None,
    *,
    pooling: str = "question_means",
) -> MetricsTable:
    """Macro F1 of function selection per (fc_model, pipeline)."""
    truth = {
        l.question_id: l.functions
        for l in (labels if labels is not None else runspec.labels)
        if l.functions
    }
    grouped: dict[tuple[str, str], dict[str, list[float]]] = {}
    for trace in traces:
        if trace.question_id not in truth:
            logger.warning("question %s has no function labels; excluded", trace.question_id)
            continue
        key = (trace.fc_model, trace.kind.value)
        grouped.setdefault(key, {}).setdefault(trace.question_id, []).append(
            fc_f1(trace.selected_functions, truth[trace.question_id])
        )
    table = MetricsTable()
    for (model, experiment), by_question in sorted(grouped.items()):
        table.set(model, experiment, "fc_f1", _cell(_per_question_values(by_question, pooling)))
    return table


def _question_recalls(
    results_by_question: Mapping[str, Sequence[RetrievalResult]],
    relevant_by_question: Mapping[str, frozenset[str]],
    k: int,
) -> dict[str, float]:
    out = {}
    for qid, results in results_by_question.items():
        relevant = relevant_by_question.get(qid)
        if not relevant:
            continue
        ranked_docs: list[str] = []
        for r in results:
            if r.chunk.doc_id not in ranked_docs:
                ranked_docs.append(r.chunk.doc_id)
        out[qid] = len(relevant & set(ranked_docs[:k])) / len(relevant)
    return out


def evaluate_retrieval(
    methods: Mapping[str, Callable[[StudentQuestion], Sequence[RetrievalResult]]],
    questions: Sequence[StudentQuestion],
    labels: Iterable[GroundTruth],
    *,
    ks: Sequence[int] = (1, 3, 5),
) -> MetricsTable:
    """Recall@k per retrieval method, mean and CI over questions."""
    relevant = {l.question_id: l.relevant_docs for l in labels if l.relevant_docs}
    table = MetricsTable()
    for name, method in methods.items():
        results_by_q = {q.id: method(q) for q in questions if q.id in relevant}
        if not results_by_q:
            raise BenchError(f"no labeled questions to evaluate method {name!r}")
        for k in ks:
            recalls = _question_recalls(results_by_q, relevant, k)
            table.set(name, "retrieval", f"recall@{k}", _cell(list(recalls.values())))
    return table


def evaluate_responses(
    runspec: RunSpec,
    traces: Iterable[PipelineTrace],
    judge: JudgeFn,
    *,
    pooling: str = "question_means",
) -> MetricsTable:
    """Likert means per (answer_model, pipeline), judged against TA answers."""
    questions = runspec.question_by_id()
    labels = runspec.label_by_id()
    grouped: dict[tuple[str, str], dict[str, dict[str, list[float]]]] = {}
    for trace in traces:
        label = labels.get(trace.question_id)
        question = questions.get(trace.question_id)
        if question is None or label is None or not label.ta_answer:
            logger.warning("question %s lacks a TA answer; excluded", trace.question_id)
            continue
        judgment = judge(question.text, trace.answer, label.ta_answer)
        key = (trace.answer_model, trace.kind.value)
        per_dim = grouped.setdefault(key, {dim: {} for dim in DIMENSIONS})
        for dim in DIMENSIONS:
            per_dim[dim].setdefault(trace.question_id, []).append(float(getattr(judgment, dim)))
    table = MetricsTable()
    for (model, experiment), per_dim in sorted(grouped.items()):
        for dim in DIMENSIONS:
            table.set(model, experiment, dim, _cell(_per_question_values(per_dim[dim], pooling)))
    return table


def evaluate_judge_alignment(
    judges: Mapping[str, JudgeFn],
    labeled: Sequence,
) -> MetricsTable:
    """Exact match and MAE per judge model against TA scores.

    ``labeled`` holds records with question / llm_answer / ta_answer / scores
    fields (the few-shot example shape).
    """
    if not labeled:
        raise BenchError("labeled set must be non-empty")
    table = MetricsTable()
    ta_scores = [ex.scores for ex in labeled]
    for name, judge in judges.items():
        judgments = [judge(ex.question, ex.llm_answer, ex.ta_answer) for ex in labeled]
        report = align(judgments, ta_scores)
        for dim in DIMENSIONS:
            table.set(name, "judge_alignment", f"{dim}_em", Cell(report.exact_match[dim], None, report.n))
            table.set(name, "judge_alignment", f"{dim}_mae", Cell(report.mae[dim], None, report.n))
    return table


def evaluate_judgments(
    judgments: Mapping[tuple[str, str], Sequence[Judgment]]
) -> MetricsTable:
    """Likert table straight from pre-computed judgments keyed by
    (model, experiment); used when traces were judged elsewhere."""
    table = MetricsTable()
    for (model, experiment), scores in sorted(judgments.items()):
        for dim in DIMENSIONS:
            table.set(model, experiment, dim, _cell([float(getattr(j, dim)) for j in scores]))
    return table


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def format_cell(cell: Cell) -> str:
    if cell.ci_halfwidth is None:
        return f"{cell.mean:.3f}"
    return f"{cell.mean:.3f} ± {cell.ci_halfwidth:.3f}"


def table_to_dict(table: MetricsTable) -> dict:
    return {
        "rows": [
            {
                "model": model,
                "experiment": experiment,
                "metrics": {
                    metric: {
                        "mean": cell.mean,
                        "ci_halfwidth": cell.ci_halfwidth,
                        "n": cell.n,
                    }
                    for metric, cell in sorted(cells.items())
                },
            }
            for (model, experiment), cells in sorted(table.rows.items())
        ]
    }


def table_from_dict(d: dict) -> MetricsTable:
    table = MetricsTable()
    for row in d["rows"]:
        for metric, cell in row["metrics"].items():
            table.set(
                row["model"],
                row["experiment"],
                metric,
                Cell(cell["mean"], cell["ci_halfwidth"], cell["n"]),
            )
    return table


def to_json(table: MetricsTable) -> str:
    return json.dumps(table_to_dict(table), sort_keys=True, indent=1) + "\n"


def to_csv(table: MetricsTable) -> str:
    metrics = table.metrics()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["model", "experiment"]
    for metric in metrics:
        header += [f"{metric}_mean", f"{metric}_halfwidth", f"{metric}_n"]
    writer.writerow(header)
    for (model, experiment), cells in sorted(table.rows.items()):
        row: list[str] = [model, experiment]
        for metric in metrics:
            cell = cells.get(metric)
            if cell is None:
                row += ["", "", ""]
            else:
                row += [
                    repr(cell.mean),
                    "" if cell.ci_halfwidth is None else repr(cell.ci_halfwidth),
                    str(cell.n),
                ]
        writer.writerow(row)
    return buf.getvalue()


def to_markdown(table: MetricsTable) -> str:
    metrics = table.metrics()
    lines = [
        "| Model | Experiment | " + " | ".join(metrics) + " |",
        "| --- | --- |" + " --- |" * len(metrics),
    ]
    for (model, experiment), cells in sorted(table.rows.items()):
        rendered = [
            format_cell(cells[m]) if m in cells else "" for m in metrics
        ]
        lines.append(f"| {model} | {experiment} | " + " | ".join(rendered) + " |")
    return "\n".join(lines) + "\n"


def report(table: MetricsTable, fmt: str, path: str | Path) -> Path:
    """Write one report file; markdown mirrors the mean ± halfwidth shape."""
    renderers = {"json": to_json, "csv": to_csv, "markdown": to_markdown}
    if fmt not in renderers:
        raise ValueError(f"unknown report format {fmt!r}; use one of {sorted(renderers)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(renderers[fmt](table), encoding="utf-8")
    return path


def write_reports(table: MetricsTable, run_dir: str | Path, stem: str = "report") -> list[Path]:
    run_dir = Path(run_dir)
    return [
        report(table, "json", run_dir / f"{stem}.json"),
        report(table, "csv", run_dir / f"{stem}.csv"),
        report(table, "markdown", run_dir / f"{stem}.md"),
    ]
