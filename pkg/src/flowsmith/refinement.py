"""Iterative prompt refinement.

The loop evaluates a workflow on a fixed sample of examples, asks the LLM to
diagnose each failure as a structured feedback record, patches the targeted
component's system message, and repeats until the pass threshold is reached
or the iteration budget runs out. Iteration 0 is always the unpatched
baseline, so reports chart progress from the seed prompts.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import random
import time
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from typing import Callable, Literal, Optional

from pydantic import BaseModel, Field, ValidationError

from .evaluation import QaPair, evaluate, render_fraction
from .gateway import ChatMessage
from .model import WorkflowSpec, spec_digest
from .orchestrator import ExecutionTrace, ToolRegistry
from .prompts import render_prompt
from .structured import extract_yaml_block, request_structured

logger = logging.getLogger(__name__)


class FeedbackParseError(Exception):
    """Feedback reply could not be parsed after the repair retry."""


class FeedbackRecord(BaseModel):
    """Structured diagnosis of one failure: what to change, where, and why."""

    model_config = {"frozen": True, "extra": "forbid"}

    target_id: str
    issue: str
    root_cause: str = ""
    action: Literal["MODIFY", "REWRITE", "NONE"]
    guideline_change: str = ""

    def model_post_init(self, __context) -> None:
        if self.action != "NONE" and not self.guideline_change:
            raise ValueError(f"guideline_change required for action {self.action}")


class IprConfig(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}

    max_iterations: int = Field(default=5, ge=0)
    sample_size: int = Field(default=10, ge=1)
    pass_threshold: float = Field(default=1.0, gt=0.0, le=1.0)
    seed: int = 0
    judge_mode: Literal["exact", "llm"] = "llm"

    def exact_threshold(self) -> Fraction:
        # via Decimal so 0.8 means 4/5, not the nearest binary float
        return Fraction(Decimal(str(self.pass_threshold)))


@dataclass
class IterationRecord:
    index: int
    sample_pass_rate: Fraction
    feedback: list[FeedbackRecord]
    spec_hash: str
    failures: list[str]


@dataclass
class IprReport:
    iterations: list[IterationRecord]
    final_full_pass_rate: Optional[Fraction]
    seed: int
    sample_ids: list[str]


@dataclass
class IprResult:
    spec: WorkflowSpec
    report: IprReport
    snapshots: list[WorkflowSpec] = field(default_factory=list)


def sample_examples(dataset: list[QaPair], n: int, seed: int) -> list[QaPair]:
    """Uniform sample without replacement, deterministic across platforms.

    Algorithm (fixed): partial Fisher-Yates shuffle over the dataset order,
    driven by ``random.Random(seed).randrange``; the first ``n`` slots are the
    sample. The underlying Mersenne Twister sequence is reproducible for a
    given seed on every supported platform.
    """
    if n > len(dataset):
        raise ValueError(f"sample size {n} exceeds dataset size {len(dataset)}")
    rng = random.Random(seed)
    pool = list(dataset)
    for i in range(n):
        j = rng.randrange(i, len(pool))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:n]


def _roster_text(spec: WorkflowSpec) -> str:
    lines = []
    for sup in spec.supervisors:
        lines.append(f"- {sup.id} (supervisor): {sup.system_message}")
    for agent in spec.agents:
        lines.append(f"- {agent.id} (agent): {agent.system_message}")
    return "\n".join(lines)


def _parse_feedback(spec: WorkflowSpec):
    known = spec.supervisor_ids() | spec.agent_ids()

    def parser(text: str) -> list[FeedbackRecord]:
        doc = extract_yaml_block(text, "records")
        raw_records = doc["records"]
        if not isinstance(raw_records, list) or not raw_records:
            raise FeedbackParseError("records must be a non-empty list")
        records = []
        for i, raw in enumerate(raw_records):
            try:
                record = FeedbackRecord.model_validate(raw)
            except (ValidationError, ValueError) as exc:
                raise FeedbackParseError(f"record {i} is malformed: {exc}") from exc
            if record.target_id not in known:
                logger.warning(
                    "dropping feedback record for unknown component %r", record.target_id
                )
                continue
            records.append(record)
        return records

    return parser


def generate_feedback(
    trace: Optional[ExecutionTrace],
    example: QaPair,
    candidate: str,
    spec: WorkflowSpec,
    gateway,
    repair_retries: int = 1,
) -> list[FeedbackRecord]:
    """Diagnose one failed example into structured feedback records.

    One gateway call (plus one repair retry on parse failure). Records naming
    components that do not exist are dropped with a warning rather than
    failing the iteration.
    """
    prompt = render_prompt(
        "feedback",
        question=example.question,
        expected=example.answer,
        candidate=candidate,
        trace=trace.digest_text() if trace is not None else "unavailable",
        roster=_roster_text(spec),
    )
    messages = [ChatMessage(role="user", content=prompt)]
    records, _ = request_structured(
        gateway, messages, _parse_feedback(spec), repair_retries=repair_retries
    )
    return records


def apply_feedback(spec: WorkflowSpec, record: FeedbackRecord) -> WorkflowSpec:
    """Patch the targeted component's system message; everything else is kept.

    MODIFY appends the guideline as a new trailing sentence block (idempotent:
    a guideline already present verbatim is not appended again), REWRITE
    replaces the message, NONE is the identity.
    """
    if record.action == "NONE":
        return spec

    def patch(message: str) -> str:
        if record.action == "REWRITE":
            return record.guideline_change
        if record.guideline_change in message:
            return message
        if not message:
            return record.guideline_change
        return f"{message}\n\n{record.guideline_change}"

    supervisors = [
        s.model_copy(update={"system_message": patch(s.system_message)})
        if s.id == record.target_id
        else s
        for s in spec.supervisors
    ]
    agents = [
        a.model_copy(update={"system_message": patch(a.system_message)})
        if a.id == record.target_id
        else a
        for a in spec.agents
    ]
    return spec.model_copy(update={"supervisors": supervisors, "agents": agents})


def run_ipr(
    spec: WorkflowSpec,
    examples: list[QaPair],
    dataset: Optional[list[QaPair]],
    gateway,
    judge,
    config: IprConfig,
    *,
    registry: Optional[ToolRegistry] = None,
    clock: Callable[[], float] = time.perf_counter,
    workers: int = 4,
) -> IprResult:
    """Refine the workflow against the sampled examples.

    Each cycle: evaluate (recording an iteration with the exact sample pass
    rate, the spec hash, and the failing ids), stop if the threshold is met or
    the budget is spent, otherwise generate feedback for every failure, apply
    all records as one batch, and snapshot the patched spec for the next
    cycle. When ``dataset`` is given, the refined spec is evaluated on it once
    after the loop for the final full pass rate.
    """
    threshold = config.exact_threshold()
    current = spec
    iterations: list[IterationRecord] = []
    snapshots: list[WorkflowSpec] = []
    for index in range(config.max_iterations + 1):
        report = evaluate(
            current,
            examples,
            gateway,
            judge,
            registry=registry,
            clock=clock,
            workers=workers,
            keep_traces=True,
        )
        failures = [v.example_id for v in report.verdicts if not v.passed]
        record = IterationRecord(
            index=index,
            sample_pass_rate=report.pass_rate,
            feedback=[],
            spec_hash=spec_digest(current),
            failures=failures,
        )
        iterations.append(record)
        snapshots.append(current)
        if report.pass_rate >= threshold or index == config.max_iterations:
            break
        verdicts_by_id = {v.example_id: v for v in report.verdicts}
        feedback: list[FeedbackRecord] = []
        for example in examples:
            verdict = verdicts_by_id[example.id]
            if verdict.passed:
                continue
            trace = (report.traces or {}).get(example.id)
            feedback.extend(
                generate_feedback(trace, example, verdict.candidate, current, gateway)
            )
        record.feedback = feedback
        for fb in feedback:
            current = apply_feedback(current, fb)

    final_full: Optional[Fraction] = None
    if dataset is not None:
        full_report = evaluate(
            current, dataset, gateway, judge, registry=registry, clock=clock, workers=workers
        )
        final_full = full_report.pass_rate
    return IprResult(
        spec=current,
        report=IprReport(
            iterations=iterations,
            final_full_pass_rate=final_full,
            seed=config.seed,
            sample_ids=[e.id for e in examples],
        ),
        snapshots=snapshots,
    )


def ipr_report_to_json(report: IprReport) -> str:
    """Schema: seed, sample_ids, final full rate, per-iteration records."""
    doc = {
        "seed": report.seed,
        "sample_ids": report.sample_ids,
        "final_full_pass_rate": (
            str(report.final_full_pass_rate)
            if report.final_full_pass_rate is not None
            else None
        ),
        "final_full_pass_rate_display": (
            render_fraction(report.final_full_pass_rate)
            if report.final_full_pass_rate is not None
            else None
        ),
        "iterations": [
            {
                "index": it.index,
                "sample_pass_rate": str(it.sample_pass_rate),
                "sample_pass_rate_display": render_fraction(it.sample_pass_rate),
                "spec_hash": it.spec_hash,
                "failures": it.failures,
                "feedback": [fb.model_dump() for fb in it.feedback],
            }
            for it in report.iterations
        ],
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def ipr_report_to_csv(report: IprReport, run_index: int = 0) -> str:
    """Rows run,iteration,sample_pass_rate,full_pass_rate (full on last row)."""
    return _csv_text(ipr_report_rows(report, run_index), header=True)


def ipr_report_rows(report: IprReport, run_index: int = 0) -> list[list[str]]:
    rows = []
    last = len(report.iterations) - 1
    for i, it in enumerate(report.iterations):
        full = ""
        if i == last and report.final_full_pass_rate is not None:
            full = render_fraction(report.final_full_pass_rate)
        rows.append([str(run_index), str(it.index), render_fraction(it.sample_pass_rate), full])
    return rows


def _csv_text(rows: list[list[str]], header: bool) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    if header:
        writer.writerow(["run", "iteration", "sample_pass_rate", "full_pass_rate"])
    writer.writerows(rows)
    return buffer.getvalue()


def merged_csv(reports: list[IprReport]) -> str:
    rows = []
    for run_index, report in enumerate(reports):
        rows.extend(ipr_report_rows(report, run_index))
    return _csv_text(rows, header=True)
