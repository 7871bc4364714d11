"""QA evaluation harness.

Loads JSON Lines datasets, runs a workflow over each question, judges the
answers (normalized string match or an LLM judge), and aggregates pass rates.
Pass rates are exact rationals internally and are rendered to four decimal
places (half-up) only at the output boundary.
"""

from __future__ import annotations

import csv
import io
import json
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Callable, Literal, Optional

from pydantic import BaseModel, ValidationError

from .gateway import ChatMessage, ChatResponse, GatewayError
from .model import WorkflowSpec
from .orchestrator import ExecutionTrace, OrchestratorError, ToolRegistry, execute
from .prompts import render_prompt
from .structured import request_structured

DEFAULT_WORKERS = 4

VERDICT_RE = re.compile(r"^\s*VERDICT:\s*(PASS|FAIL)\s*$", re.MULTILINE)


class DatasetError(Exception):
    """Dataset file is malformed; message carries the offending line."""


class EmptyEvaluationError(Exception):
    """An evaluation was requested over zero examples."""


class JudgeParseError(Exception):
    """LLM judge reply contained no verdict line after the repair retry."""


class QaPair(BaseModel):
    """One benchmark example: a question and its expected answer."""

    model_config = {"frozen": True, "extra": "forbid"}

    id: str
    question: str
    answer: str

    def model_post_init(self, __context) -> None:
        if not self.id or not self.question or not self.answer:
            raise ValueError("id, question, and answer must be non-empty")


class Verdict(BaseModel):
    """Judged outcome for one example.

    ``rationale`` is set for LLM-judged verdicts and for execution errors
    (where it carries the error text); plain string-match verdicts leave it
    unset.
    """

    model_config = {"frozen": True, "extra": "forbid"}

    example_id: str = ""
    passed: bool
    judge_mode: Literal["exact", "llm"]
    candidate: str
    rationale: Optional[str] = None


@dataclass
class ExampleStats:
    example_id: str
    wall_ms: int
    prompt_tokens: int
    completion_tokens: int


@dataclass
class EvaluationReport:
    verdicts: list[Verdict]
    pass_rate: Fraction
    total: int
    wall_time: float
    prompt_tokens: int
    completion_tokens: int
    example_stats: list[ExampleStats]
    # execution traces by example id, kept only on request (feedback needs them)
    traces: Optional[dict[str, "ExecutionTrace"]] = None

    @property
    def pass_rate_display(self) -> str:
        return render_fraction(self.pass_rate)


def render_fraction(value: Fraction) -> str:
    """Four-decimal rendering, rounding half up: 71/158 -> '0.4494'."""
    quotient = Decimal(value.numerator) / Decimal(value.denominator)
    return str(quotient.quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP))


def load_dataset(path: str) -> list[QaPair]:
    """Parse a JSON Lines dataset of ``{id, question, answer}`` objects.

    Order is preserved. Errors name the offending 1-based line: JSON syntax,
    missing/empty fields, unknown fields, duplicate ids.
    """
    pairs: list[QaPair] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON: {exc}") from exc
            try:
                pair = QaPair.model_validate(raw)
            except (ValidationError, ValueError) as exc:
                detail = exc.errors()[0] if isinstance(exc, ValidationError) else None
                field = "/".join(str(p) for p in detail["loc"]) if detail else "record"
                message = detail["msg"] if detail else str(exc)
                raise DatasetError(f"line {lineno}: field {field}: {message}") from exc
            if pair.id in seen:
                raise DatasetError(f"line {lineno}: duplicate id {pair.id!r}")
            seen.add(pair.id)
            pairs.append(pair)
    return pairs


_TERMINAL_PUNCT = ".!?"


def normalize_answer(text: str) -> str:
    """Case-fold, trim, collapse whitespace, strip terminal ./!/?

    ``casefold`` rather than ``lower`` so caseless comparison survives
    characters whose case round-trip is lossy (Greek sigma, micro sign, ...).
    """
    out = re.sub(r"\s+", " ", text.casefold().strip())
    return out.rstrip(_TERMINAL_PUNCT).strip()


def judge_exact(
    candidate: str, expected: str, mode: Literal["equal", "substring"] = "equal"
) -> Verdict:
    """Normalized string comparison; no gateway involved."""
    got = normalize_answer(candidate)
    want = normalize_answer(expected)
    passed = got == want if mode == "equal" else want in got
    return Verdict(passed=passed, judge_mode="exact", candidate=candidate)


def _parse_verdict_line(text: str) -> bool:
    match = VERDICT_RE.search(text)
    if match is None:
        raise JudgeParseError("reply contains no 'VERDICT: PASS' or 'VERDICT: FAIL' line")
    return match.group(1) == "PASS"


def judge_llm(candidate: str, expected: str, gateway) -> Verdict:
    """Ask the gateway whether the candidate conveys the expected answer.

    The reply must contain a line ``VERDICT: PASS`` or ``VERDICT: FAIL``; one
    repair retry is made otherwise. The full judge reply is kept as the
    verdict rationale.
    """
    prompt = render_prompt("judge", expected=expected, candidate=candidate)
    messages = [ChatMessage(role="user", content=prompt)]
    passed, responses = request_structured(
        gateway, messages, _parse_verdict_line, repair_retries=1
    )
    return Verdict(
        passed=passed,
        judge_mode="llm",
        candidate=candidate,
        rationale=responses[-1].content,
    )


class ExactJudge:
    """String-match judge; ``mode`` is ``equal`` or ``substring``."""

    def __init__(self, mode: Literal["equal", "substring"] = "substring"):
        self.mode = mode

    def judge(self, candidate: str, expected: str) -> Verdict:
        return judge_exact(candidate, expected, self.mode)


class LlmJudge:
    def __init__(self, gateway):
        self.gateway = gateway

    def judge(self, candidate: str, expected: str) -> Verdict:
        return judge_llm(candidate, expected, self.gateway)


def build_judge(name: str, gateway=None):
    """Map a CLI/judge-mode name to a judge instance."""
    if name == "exact":
        return ExactJudge("equal")
    if name == "substring":
        return ExactJudge("substring")
    if name == "llm":
        if gateway is None:
            raise ValueError("llm judge requires a gateway")
        return LlmJudge(gateway)
    raise ValueError(f"unknown judge mode {name!r}")


class _CountingGateway:
    """Pass-through wrapper accumulating token usage across all calls."""

    def __init__(self, inner):
        self.inner = inner
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self._lock = threading.Lock()

    @property
    def is_scripted(self) -> bool:
        return getattr(self.inner, "is_scripted", False)

    def complete(self, messages: list[ChatMessage]) -> ChatResponse:
        response = self.inner.complete(messages)
        with self._lock:
            self.prompt_tokens += response.prompt_tokens
            self.completion_tokens += response.completion_tokens
        return response


def evaluate(
    spec: WorkflowSpec,
    examples: list[QaPair],
    gateway,
    judge,
    *,
    max_steps: int = 32,
    registry: Optional[ToolRegistry] = None,
    clock: Callable[[], float] = time.perf_counter,
    workers: int = DEFAULT_WORKERS,
    keep_traces: bool = False,
) -> EvaluationReport:
    """Run the workflow on every example and judge the answers.

    Verdict order always equals input order. Per-example execution errors are
    recorded as failed verdicts (rationale ``execution error: ...``) and the
    sweep continues. Examples run concurrently on a bounded worker pool for
    live gateways; scripted gateways are driven sequentially so transcript
    consumption is a single total order and replay stays deterministic.
    """
    if not examples:
        raise EmptyEvaluationError("empty evaluation set")
    counting = _CountingGateway(gateway)
    judge = _rebind_judge(judge, counting)
    start = clock()

    def run_one(example: QaPair) -> tuple[Verdict, ExampleStats, Optional[ExecutionTrace]]:
        t0 = clock()
        try:
            result = execute(
                spec,
                example.question,
                counting,
                max_steps=max_steps,
                registry=registry,
                clock=clock,
            )
        except (OrchestratorError, GatewayError) as exc:
            verdict = Verdict(
                example_id=example.id,
                passed=False,
                judge_mode=_judge_mode(judge),
                candidate="",
                rationale=f"execution error: {exc}",
            )
            stats = ExampleStats(example.id, int((clock() - t0) * 1000), 0, 0)
            return verdict, stats, getattr(exc, "trace", None)
        verdict = judge.judge(result.final_answer, example.answer)
        verdict = verdict.model_copy(update={"example_id": example.id})
        stats = ExampleStats(
            example.id,
            int((clock() - t0) * 1000),
            result.prompt_tokens,
            result.completion_tokens,
        )
        return verdict, stats, result.trace

    sequential = workers <= 1 or counting.is_scripted
    if sequential:
        outcomes = [run_one(example) for example in examples]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, examples))

    verdicts = [v for v, _, _ in outcomes]
    stats = [s for _, s, _ in outcomes]
    traces = None
    if keep_traces:
        traces = {
            v.example_id: t for v, _, t in outcomes if t is not None
        }
    passes = sum(1 for v in verdicts if v.passed)
    return EvaluationReport(
        verdicts=verdicts,
        pass_rate=Fraction(passes, len(examples)),
        total=len(examples),
        wall_time=clock() - start,
        prompt_tokens=counting.prompt_tokens,
        completion_tokens=counting.completion_tokens,
        example_stats=stats,
        traces=traces,
    )


def _rebind_judge(judge, counting_gateway):
    if isinstance(judge, LlmJudge):
        return LlmJudge(counting_gateway)
    return judge


def _judge_mode(judge) -> Literal["exact", "llm"]:
    return "llm" if isinstance(judge, LlmJudge) else "exact"


def report_to_json(report: EvaluationReport) -> str:
    """Stable JSON rendering; pass_rate is exact ('71/158') plus display form."""
    doc = {
        "pass_rate": str(report.pass_rate),
        "pass_rate_display": report.pass_rate_display,
        "total": report.total,
        "wall_time_ms": int(report.wall_time * 1000),
        "prompt_tokens": report.prompt_tokens,
        "completion_tokens": report.completion_tokens,
        "verdicts": [
            {
                "example_id": v.example_id,
                "passed": v.passed,
                "judge_mode": v.judge_mode,
                "candidate": v.candidate,
                "rationale": v.rationale,
            }
            for v in report.verdicts
        ],
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def report_to_csv(report: EvaluationReport) -> str:
    """Per-example rows: example_id, passed, judge_mode, wall_ms, tokens."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(
        ["example_id", "passed", "judge_mode", "wall_ms", "prompt_tokens", "completion_tokens"]
    )
    stats_by_id = {s.example_id: s for s in report.example_stats}
    for verdict in report.verdicts:
        stats = stats_by_id[verdict.example_id]
        writer.writerow(
            [
                verdict.example_id,
                str(verdict.passed).lower(),
                verdict.judge_mode,
                stats.wall_ms,
                stats.prompt_tokens,
                stats.completion_tokens,
            ]
        )
    return buffer.getvalue()
