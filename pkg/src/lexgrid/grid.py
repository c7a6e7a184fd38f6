"""The 11-question indicator grid, gold-label scoring, and the
three-configuration ablation runner.

A grid holds one (ban, country) pair: each of the eleven canonical
questions is instantiated with that scope, run through the pipeline, and
recorded as a slot with its label, explanation, citations, and trace id.
Ablation pools slot-level predictions per ban across countries and emits
one metric row per (ban, configuration); a per-country breakdown is
available behind a flag.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .corpus import MetadataFilter
from .errors import LexgridError, MissingGold
from .metrics import MetricReport, compute_metrics
from .pipeline import (
    MODES,
    PipelineConfig,
    PipelineHandles,
    run_pipeline,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IndicatorQuestion:
    ordinal: int
    text: str
    category: str


# The canonical eleven, in fixed order, with their category tags.
INDICATOR_QUESTIONS: tuple[IndicatorQuestion, ...] = (
    IndicatorQuestion(1, "The ban is specified by a legal article", "scope_extent"),
    IndicatorQuestion(2, "The ban is nationwide in scope", "scope_extent"),
    IndicatorQuestion(3, "The ban is permanent in nature", "scope_extent"),
    IndicatorQuestion(4, "Details of banned activities is documented", "scope_extent"),
    IndicatorQuestion(5, "There are no exceptions to the rule", "exception_scarcity"),
    IndicatorQuestion(6, "Exemptions are restricted to a few specific cases", "exception_scarcity"),
    IndicatorQuestion(7, "A monetary fine is imposed", "penalties"),
    IndicatorQuestion(8, "A jail sentence is outlined", "penalties"),
    IndicatorQuestion(9, "A designated authority is tasked with enforcement", "control_mechanisms"),
    IndicatorQuestion(10, "A control process with a defined duration is established", "control_mechanisms"),
    IndicatorQuestion(11, "A location-specific control procedure is detailed", "control_mechanisms"),
)

MODE_DISPLAY_NAMES = {
    "full": "Full",
    "without_hallucination_control": "Without-Hall",
    "retrieval_only_baseline": "Baseline",
}

REPORT_COLUMNS = ("Ban", "Configuration", "Accuracy", "Precision", "Recall",
                  "Specificity", "F1-Score", "Balanced Acc.")


def instantiate_question(question: IndicatorQuestion, ban_topic: str, country: str) -> str:
    return f"{question.text} for the ban on {ban_topic} in {country}"


@dataclass(frozen=True)
class GridSlot:
    ordinal: int
    question: str
    label: int
    explanation: str
    cited_article_ids: tuple[str, ...]
    run_id: str
    degraded: bool

    def to_dict(self) -> dict:
        return {
            "ordinal": self.ordinal,
            "question": self.question,
            "label": self.label,
            "explanation": self.explanation,
            "cited_article_ids": list(self.cited_article_ids),
            "run_id": self.run_id,
            "degraded": self.degraded,
        }


@dataclass(frozen=True)
class IndicatorGrid:
    ban_topic: str
    country: str
    slots: tuple[GridSlot, ...]

    def __post_init__(self):
        if [s.ordinal for s in self.slots] != [q.ordinal for q in INDICATOR_QUESTIONS]:
            raise ValueError("grid must contain exactly the 11 slots in order")

    def labels(self) -> list[int]:
        return [s.label for s in self.slots]

    def to_dict(self) -> dict:
        return {
            "ban_topic": self.ban_topic,
            "country": self.country,
            "slots": [s.to_dict() for s in self.slots],
        }


def _run_slot(question: IndicatorQuestion, ban_topic: str, country: str,
              handles: PipelineHandles, config: PipelineConfig,
              trace_dir: str | Path | None) -> GridSlot:
    text = instantiate_question(question, ban_topic, country)
    scope = MetadataFilter.build(country=country, ban_topic=ban_topic)
    try:
        result = run_pipeline(text, scope, handles, config, trace_dir=trace_dir)
    except LexgridError as exc:
        # A dead slot is still a slot: conservative 0 with the error recorded.
        trace = getattr(exc, "trace", None)
        logger.warning("slot %d (%s/%s) failed: %s", question.ordinal, ban_topic, country, exc)
        return GridSlot(
            ordinal=question.ordinal, question=text, label=0,
            explanation=f"pipeline error: {exc}",
            cited_article_ids=(),
            run_id=trace.run_id if trace is not None else "",
            degraded=True,
        )
    return GridSlot(
        ordinal=question.ordinal, question=text,
        label=result.decision.label,
        explanation=result.decision.explanation,
        cited_article_ids=result.cited_article_ids,
        run_id=result.trace.run_id,
        degraded=result.degraded,
    )


def compute_grid(ban_topic: str, country: str, handles: PipelineHandles,
                 config: PipelineConfig, trace_dir: str | Path | None = None,
                 jobs: int = 1) -> IndicatorGrid:
    """Run all 11 questions for one (ban, country) pair. Slots are
    independent pipeline runs and may execute on a bounded worker pool."""
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            slots = list(pool.map(
                lambda q: _run_slot(q, ban_topic, country, handles, config, trace_dir),
                INDICATOR_QUESTIONS))
    else:
        slots = [_run_slot(q, ban_topic, country, handles, config, trace_dir)
                 for q in INDICATOR_QUESTIONS]
    return IndicatorGrid(ban_topic=ban_topic, country=country, slots=tuple(slots))


# -- gold labels ----------------------------------------------------------------

@dataclass
class GoldLabels:
    """Expert-provided ground truth keyed by (ban_topic, country, ordinal)."""

    labels: dict[tuple[str, str, int], int] = field(default_factory=dict)
    notes: dict[tuple[str, str, int], str] = field(default_factory=dict)

    def get(self, ban_topic: str, country: str, ordinal: int) -> int | None:
        return self.labels.get((ban_topic, country, ordinal))

    def missing_for(self, ban_topics: Sequence[str],
                    countries: Sequence[str]) -> list[tuple[str, str, int]]:
        return [
            (ban, country, q.ordinal)
            for ban in ban_topics
            for country in countries
            for q in INDICATOR_QUESTIONS
            if (ban, country, q.ordinal) not in self.labels
        ]

    @classmethod
    def load(cls, path: str | Path) -> "GoldLabels":
        gold = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                label = rec["label"]
                if label not in (0, 1):
                    raise ValueError(f"gold label must be 0/1: {rec}")
                key = (rec["ban_topic"], rec["country"], int(rec["ordinal"]))
                gold.labels[key] = int(label)
                gold.notes[key] = rec.get("note", "")
        return gold

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(self.labels):
                ban, country, ordinal = key
                fh.write(json.dumps({
                    "ban_topic": ban, "country": country, "ordinal": ordinal,
                    "label": self.labels[key], "note": self.notes.get(key, ""),
                }, ensure_ascii=False, sort_keys=True) + "\n")


# -- ablation -------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    ban_topic: str
    mode: str
    metrics: MetricReport
    slots: int
    country: str | None = None  # None = pooled across countries

    def to_dict(self) -> dict:
        return {
            "ban_topic": self.ban_topic,
            "configuration": MODE_DISPLAY_NAMES.get(self.mode, self.mode),
            "mode": self.mode,
            "country": self.country,
            "slots": self.slots,
            **self.metrics.to_dict(),
        }


@dataclass
class AblationReport:
    rows: list[AblationRow] = field(default_factory=list)
    grids: dict[tuple[str, str, str], IndicatorGrid] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rows": [r.to_dict() for r in self.rows],
            "grids": {
                f"{ban}/{country}/{mode}": grid.to_dict()
                for (ban, country, mode), grid in sorted(self.grids.items())
            },
        }


def run_ablation(ban_topics: Sequence[str], countries: Sequence[str],
                 handles: PipelineHandles, config: PipelineConfig,
                 gold: GoldLabels, modes: Sequence[str] = MODES,
                 trace_dir: str | Path | None = None, jobs: int = 1,
                 per_country: bool = False) -> AblationReport:
    """Grids for every (ban, country, mode), pooled into one metric row per
    (ban, mode) in mode-major order matching the published table layout."""
    missing = gold.missing_for(ban_topics, countries)
    if missing:
        raise MissingGold(missing)

    report = AblationReport()
    for ban in ban_topics:
        for mode in modes:
            mode_config = replace(config, mode=mode)
            pooled_pred: list[int] = []
            pooled_gold: list[int] = []
            for country in countries:
                grid = compute_grid(ban, country, handles, mode_config,
                                    trace_dir=trace_dir, jobs=jobs)
                report.grids[(ban, country, mode)] = grid
                pred = grid.labels()
                truth = [gold.get(ban, country, q.ordinal) for q in INDICATOR_QUESTIONS]
                pooled_pred.extend(pred)
                pooled_gold.extend(truth)
                if per_country:
                    report.rows.append(AblationRow(
                        ban_topic=ban, mode=mode, country=country,
                        metrics=compute_metrics(pred, truth), slots=len(pred)))
            report.rows.append(AblationRow(
                ban_topic=ban, mode=mode,
                metrics=compute_metrics(pooled_pred, pooled_gold),
                slots=len(pooled_pred)))
    return report


# -- rendering -------------------------------------------------------------------

ABSENT_CELL = "—"  # em dash: the undefined-ratio marker


def _cell(value: float | None) -> str:
    return ABSENT_CELL if value is None else f"{value:.3f}"


def _row_cells(row: AblationRow) -> list[str]:
    m = row.metrics
    ban = row.ban_topic if row.country is None else f"{row.ban_topic} ({row.country})"
    return [
        ban,
        MODE_DISPLAY_NAMES.get(row.mode, row.mode),
        _cell(m.accuracy), _cell(m.precision), _cell(m.recall),
        _cell(m.specificity), _cell(m.f1), _cell(m.balanced_accuracy),
    ]


def render_report(report: AblationReport) -> str:
    """Aligned text table in the fixed published column order."""
    if not report.rows:
        raise ValueError("cannot render an empty report")
    table = [list(REPORT_COLUMNS)] + [_row_cells(r) for r in report.rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(REPORT_COLUMNS))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_report_csv(report: AblationReport, path: str | Path) -> None:
    """CSV with the same columns and the same rendered values as the table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows:
            writer.writerow(_row_cells(row))


def render_grid(grid: IndicatorGrid) -> str:
    """11-row listing of one grid: ordinal, label, question, citations."""
    lines = [f"{grid.ban_topic} / {grid.country}"]
    for slot in grid.slots:
        cites = ", ".join(slot.cited_article_ids) if slot.cited_article_ids else ABSENT_CELL
        lines.append(f"{slot.ordinal:>2}  {slot.label}  {slot.question}  [{cites}]")
    return "\n".join(lines)
