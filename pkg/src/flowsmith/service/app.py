"""FastAPI service wrapping the workflow engine.

Each endpoint is a stateless wrapper over the library. Requests may carry a
``transcript_yaml`` recording, which swaps the live endpoint for the scripted
backend (and a fixed clock), so the whole API is exercisable offline. Serve
with ``uvicorn flowsmith.service:app``.
"""

from __future__ import annotations

import time
from typing import Optional

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..evaluation import (
    DatasetError,
    EmptyEvaluationError,
    JudgeParseError,
    build_judge,
    evaluate,
)
from ..gateway import (
    GatewayError,
    HttpGateway,
    LlmProfile,
    ScriptedGateway,
    TranscriptFormatError,
    load_transcript,
)
from ..model import (
    WorkflowParseError,
    parse_workflow,
    serialize_workflow,
    validate_workflow,
)
from ..orchestrator import InvalidWorkflowError, OrchestratorError, execute
from ..refinement import FeedbackParseError, IprConfig, IprReport, run_ipr
from ..synthesis import StageError, SynthesisConfig, synthesize
from ..evaluation import render_fraction
from . import schemas

INPUT_ERRORS = (
    WorkflowParseError,
    DatasetError,
    TranscriptFormatError,
    InvalidWorkflowError,
    EmptyEvaluationError,
    ValueError,
)

PIPELINE_ERRORS = (
    StageError,
    OrchestratorError,
    GatewayError,
    JudgeParseError,
    FeedbackParseError,
)


def _http_error(exc: Exception) -> HTTPException:
    if isinstance(exc, INPUT_ERRORS):
        return HTTPException(status_code=400, detail=str(exc))
    if isinstance(exc, PIPELINE_ERRORS):
        return HTTPException(status_code=500, detail=str(exc))
    raise exc


def _gateway_and_clock(
    transcript_yaml: Optional[str],
    profile: Optional[LlmProfile],
    spec_profile: Optional[LlmProfile] = None,
):
    effective = profile or spec_profile
    if transcript_yaml is not None:
        transcript = load_transcript(transcript_yaml)
        max_retries = effective.max_retries if effective is not None else 3
        return ScriptedGateway(transcript, max_retries=max_retries), (lambda: 0.0)
    if effective is None:
        raise ValueError("no LLM profile configured (request profile, spec profile, or transcript)")
    if effective.provider == "scripted":
        raise ValueError("scripted profile requires transcript_yaml")
    return HttpGateway(effective), time.perf_counter


def _iterations_models(report: IprReport) -> list[schemas.IterationModel]:
    return [
        schemas.IterationModel(
            index=it.index,
            sample_pass_rate=str(it.sample_pass_rate),
            sample_pass_rate_display=render_fraction(it.sample_pass_rate),
            spec_hash=it.spec_hash,
            failures=it.failures,
        )
        for it in report.iterations
    ]


def create_app() -> FastAPI:
    app = FastAPI(title="flowsmith", version=__version__)

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/workflows/validate", response_model=schemas.ValidateResponse)
    def validate(request: schemas.ValidateRequest) -> schemas.ValidateResponse:
        try:
            spec = parse_workflow(request.spec_yaml)
        except WorkflowParseError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        report = validate_workflow(spec)
        return schemas.ValidateResponse(
            ok=report.ok,
            issues=[
                schemas.IssueModel(code=i.code.value, path=i.path, message=i.message)
                for i in report.issues
            ],
        )

    @app.post("/workflows/run", response_model=schemas.RunResponse)
    def run(request: schemas.RunRequest) -> schemas.RunResponse:
        try:
            spec = parse_workflow(request.spec_yaml)
            gateway, clock = _gateway_and_clock(
                request.transcript_yaml, request.profile, spec.llm_profile
            )
            result = execute(
                spec,
                request.query,
                gateway,
                max_steps=request.max_steps,
                metadata=request.metadata,
                clock=clock,
            )
        except Exception as exc:
            raise _http_error(exc)
        steps = [
            schemas.TraceStepModel(
                index=i,
                actor=s.actor,
                step_kind=s.step_kind,
                envelope_id=s.envelope_id,
                detail=s.detail,
            )
            for i, s in enumerate(result.trace.steps)
        ]
        return schemas.RunResponse(
            final_answer=result.final_answer,
            steps=steps,
            prompt_tokens=result.prompt_tokens,
            completion_tokens=result.completion_tokens,
        )

    @app.post("/evaluate", response_model=schemas.EvaluateResponse)
    def evaluate_endpoint(request: schemas.EvaluateRequest) -> schemas.EvaluateResponse:
        try:
            spec = parse_workflow(request.spec_yaml)
            gateway, clock = _gateway_and_clock(
                request.transcript_yaml, request.profile, spec.llm_profile
            )
            judge = build_judge(request.judge, gateway)
            report = evaluate(
                spec,
                request.examples,
                gateway,
                judge,
                max_steps=request.max_steps,
                clock=clock,
                workers=request.workers,
            )
        except Exception as exc:
            raise _http_error(exc)
        return schemas.EvaluateResponse(
            pass_rate=str(report.pass_rate),
            pass_rate_display=report.pass_rate_display,
            total=report.total,
            prompt_tokens=report.prompt_tokens,
            completion_tokens=report.completion_tokens,
            verdicts=[
                schemas.VerdictModel(
                    example_id=v.example_id,
                    passed=v.passed,
                    judge_mode=v.judge_mode,
                    candidate=v.candidate,
                    rationale=v.rationale,
                )
                for v in report.verdicts
            ],
        )

    @app.post("/refine", response_model=schemas.RefineResponse)
    def refine(request: schemas.RefineRequest) -> schemas.RefineResponse:
        try:
            spec = parse_workflow(request.spec_yaml)
            gateway, clock = _gateway_and_clock(
                request.transcript_yaml, request.profile, spec.llm_profile
            )
            judge = build_judge(request.judge, gateway)
            config = IprConfig(
                max_iterations=request.iterations,
                sample_size=len(request.examples),
                pass_threshold=request.threshold,
                seed=request.seed,
                judge_mode="llm" if request.judge == "llm" else "exact",
            )
            result = run_ipr(
                spec,
                request.examples,
                request.dataset,
                gateway,
                judge,
                config,
                clock=clock,
                workers=request.workers,
            )
        except Exception as exc:
            raise _http_error(exc)
        report = result.report
        return schemas.RefineResponse(
            spec_yaml=serialize_workflow(result.spec),
            iterations=_iterations_models(report),
            final_full_pass_rate=(
                str(report.final_full_pass_rate)
                if report.final_full_pass_rate is not None
                else None
            ),
            seed=report.seed,
            sample_ids=report.sample_ids,
        )

    @app.post("/synthesize", response_model=schemas.SynthesizeResponse)
    def synthesize_endpoint(request: schemas.SynthesizeRequest) -> schemas.SynthesizeResponse:
        import tempfile

        try:
            gateway, clock = _gateway_and_clock(request.transcript_yaml, request.profile)
            judge = build_judge(request.judge, gateway)
            with tempfile.TemporaryDirectory() as tmp:
                config = SynthesisConfig(
                    repair_retries=1,
                    stage_profiles=(
                        {"default": request.profile} if request.profile is not None else {}
                    ),
                    output_dir=tmp,
                    ipr=IprConfig(
                        max_iterations=request.iterations,
                        sample_size=max(len(request.examples), 1),
                        pass_threshold=request.threshold,
                        seed=request.seed,
                        judge_mode="llm" if request.judge == "llm" else "exact",
                    ),
                )
                result = synthesize(
                    request.task,
                    request.examples,
                    request.dataset,
                    config,
                    gateway,
                    judge=judge,
                    name=request.name,
                    clock=clock,
                    workers=request.workers,
                )
        except Exception as exc:
            raise _http_error(exc)
        report = result.report
        return schemas.SynthesizeResponse(
            spec_yaml=serialize_workflow(result.spec),
            iterations=_iterations_models(report),
            final_full_pass_rate=(
                str(report.final_full_pass_rate)
                if report.final_full_pass_rate is not None
                else None
            ),
            seed=report.seed,
            sample_ids=report.sample_ids,
        )

    return app


app = create_app()
