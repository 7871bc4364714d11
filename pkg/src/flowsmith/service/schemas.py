"""Request/response models for the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

from ..evaluation import QaPair
from ..gateway import LlmProfile


class HealthResponse(BaseModel):
    status: str
    version: str


class ValidateRequest(BaseModel):
    spec_yaml: str


class IssueModel(BaseModel):
    code: str
    path: str
    message: str


class ValidateResponse(BaseModel):
    ok: bool
    issues: list[IssueModel]


class RunRequest(BaseModel):
    spec_yaml: str
    query: str
    transcript_yaml: Optional[str] = None
    profile: Optional[LlmProfile] = None
    max_steps: int = Field(default=32, ge=1)
    metadata: dict[str, str] = Field(default_factory=dict)


class TraceStepModel(BaseModel):
    index: int
    actor: str
    step_kind: str
    envelope_id: str
    detail: str


class RunResponse(BaseModel):
    final_answer: str
    steps: list[TraceStepModel]
    prompt_tokens: int
    completion_tokens: int


JudgeMode = Literal["exact", "substring", "llm"]


class EvaluateRequest(BaseModel):
    spec_yaml: str
    examples: list[QaPair]
    judge: JudgeMode = "llm"
    transcript_yaml: Optional[str] = None
    profile: Optional[LlmProfile] = None
    max_steps: int = Field(default=32, ge=1)
    workers: int = Field(default=4, ge=1)


class VerdictModel(BaseModel):
    example_id: str
    passed: bool
    judge_mode: str
    candidate: str
    rationale: Optional[str] = None


class EvaluateResponse(BaseModel):
    pass_rate: str
    pass_rate_display: str
    total: int
    prompt_tokens: int
    completion_tokens: int
    verdicts: list[VerdictModel]


class RefineRequest(BaseModel):
    spec_yaml: str
    examples: list[QaPair]
    dataset: Optional[list[QaPair]] = None
    iterations: int = Field(default=5, ge=0)
    threshold: float = Field(default=1.0, gt=0.0, le=1.0)
    seed: int = 0
    judge: JudgeMode = "llm"
    transcript_yaml: Optional[str] = None
    profile: Optional[LlmProfile] = None
    workers: int = Field(default=4, ge=1)


class IterationModel(BaseModel):
    index: int
    sample_pass_rate: str
    sample_pass_rate_display: str
    spec_hash: str
    failures: list[str]


class RefineResponse(BaseModel):
    spec_yaml: str
    iterations: list[IterationModel]
    final_full_pass_rate: Optional[str] = None
    seed: int
    sample_ids: list[str]


class SynthesizeRequest(BaseModel):
    task: str
    examples: list[QaPair]
    dataset: Optional[list[QaPair]] = None
    name: str = "synthesized_workflow"
    iterations: int = Field(default=5, ge=0)
    threshold: float = Field(default=1.0, gt=0.0, le=1.0)
    seed: int = 0
    judge: JudgeMode = "llm"
    transcript_yaml: Optional[str] = None
    profile: Optional[LlmProfile] = None
    workers: int = Field(default=4, ge=1)


class SynthesizeResponse(BaseModel):
    spec_yaml: str
    iterations: list[IterationModel]
    final_full_pass_rate: Optional[str] = None
    seed: int
    sample_ids: list[str]
