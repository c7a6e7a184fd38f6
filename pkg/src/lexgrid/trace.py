"""Pipeline traces: the ordered, persisted record of every agent step.

A trace is the explainability artifact of one run: which agents fired in
what order, with which prompt template version, over which input (as a
digest), producing which output and explanation, and how the final label
came about. Traces are written as one JSON document per run, named by
run_id, and are the object of the audit command.

Fingerprinting strips the per-run noise (run_id, timestamps, elapsed
durations) so two runs of the same inputs can be compared byte-for-byte.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import MalformedTrace

TRACE_SCHEMA_VERSION = 1


@dataclass
class TraceStep:
    """One agent invocation: the unit of traceability."""

    index: int
    agent: str
    template_version: str
    input_digest: str
    output: dict
    explanation: str
    elapsed: float
    outcome: str
    flags: tuple[str, ...] = ()
    degraded: bool = False

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "agent": self.agent,
            "template_version": self.template_version,
            "input_digest": self.input_digest,
            "output": self.output,
            "explanation": self.explanation,
            "elapsed": self.elapsed,
            "outcome": self.outcome,
            "flags": list(self.flags),
            "degraded": self.degraded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceStep":
        try:
            return cls(
                index=int(d["index"]),
                agent=d["agent"],
                template_version=d.get("template_version", ""),
                input_digest=d["input_digest"],
                output=d["output"],
                explanation=d["explanation"],
                elapsed=float(d.get("elapsed", 0.0)),
                outcome=d["outcome"],
                flags=tuple(d.get("flags", ())),
                degraded=bool(d.get("degraded", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedTrace(f"bad trace step: {exc}") from exc


@dataclass
class PipelineTrace:
    mode: str
    question: str
    config_snapshot: dict = field(default_factory=dict)
    run_id: str = ""
    created_at: str = ""
    queries: list[str] = field(default_factory=list)
    steps: list[TraceStep] = field(default_factory=list)
    final_decision: dict | None = None
    loop_count: int = 0
    degraded: bool = False
    error: str | None = None

    def __post_init__(self):
        if not self.run_id:
            self.run_id = uuid.uuid4().hex
        if not self.created_at:
            self.created_at = datetime.now(timezone.utc).isoformat()
        if not self.queries:
            self.queries = [self.question]

    def add_step(self, step: TraceStep) -> None:
        self.steps.append(step)

    def to_dict(self) -> dict:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "run_id": self.run_id,
            "created_at": self.created_at,
            "mode": self.mode,
            "question": self.question,
            "queries": list(self.queries),
            "config_snapshot": self.config_snapshot,
            "steps": [s.to_dict() for s in self.steps],
            "final_decision": self.final_decision,
            "loop_count": self.loop_count,
            "degraded": self.degraded,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineTrace":
        if not isinstance(d, dict) or "steps" not in d or "mode" not in d:
            raise MalformedTrace("trace document missing required fields")
        try:
            return cls(
                mode=d["mode"],
                question=d["question"],
                config_snapshot=d.get("config_snapshot", {}),
                run_id=d["run_id"],
                created_at=d.get("created_at", ""),
                queries=list(d.get("queries", [])),
                steps=[TraceStep.from_dict(s) for s in d["steps"]],
                final_decision=d.get("final_decision"),
                loop_count=int(d.get("loop_count", 0)),
                degraded=bool(d.get("degraded", False)),
                error=d.get("error"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedTrace(f"bad trace document: {exc}") from exc


def save_trace(trace: PipelineTrace, directory: str | Path) -> Path:
    """Write the trace as <run_id>.json under `directory`; returns the path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{trace.run_id}.json"
    path.write_text(
        json.dumps(trace.to_dict(), ensure_ascii=False, sort_keys=True, indent=2),
        encoding="utf-8",
    )
    return path


def load_trace(path: str | Path) -> PipelineTrace:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedTrace(f"cannot read trace file {path}: {exc}") from exc
    return PipelineTrace.from_dict(doc)


def trace_fingerprint(trace: PipelineTrace) -> str:
    """Canonical serialization with run_id, created_at, and per-step elapsed
    removed; equal fingerprints mean byte-identical traces modulo run
    identity and timing."""
    doc = trace.to_dict()
    doc.pop("run_id", None)
    doc.pop("created_at", None)
    for step in doc["steps"]:
        step.pop("elapsed", None)
    return json.dumps(doc, ensure_ascii=False, sort_keys=True)
