"""Workflow synthesis pipeline.

Turns a problem statement plus example problem-solution pairs into a
validated workflow document, in four stages: decompose the problem into
tasks, design the multi-agent blueprint, build the concrete workflow (one
prompt-engineering call per component produces its seed system message), and
statically validate. The assembled workflow is then evaluated and handed to
the refinement loop; every stage consumes only its declared inputs so stages
can be run and tested in isolation.

The emitted artifact is a declarative workflow document executed directly by
the runtime in this package, together with report files; no program code is
generated.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError

from . import __version__
from .evaluation import ExactJudge, LlmJudge, QaPair
from .gateway import ChatMessage, LlmProfile
from .model import (
    AgentSpec,
    FieldSpec,
    SupervisorSpec,
    ToolSpec,
    WorkflowSpec,
    serialize_workflow,
    validate_workflow,
)
from .orchestrator import ToolRegistry
from .prompts import load_capabilities_text, render_prompt
from .refinement import IprConfig, IprReport, IprResult, ipr_report_to_csv, ipr_report_to_json, run_ipr
from .structured import StructuredOutputError, extract_yaml_block, request_structured


class StageError(Exception):
    """A synthesis stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class BlueprintError(StageError):
    """Blueprint violates reference-closure or tree invariants."""

    def __init__(self, message: str):
        super().__init__("design", message)


class BuildValidationError(StageError):
    """Assembled workflow failed static validation."""

    def __init__(self, report):
        super().__init__("build", report.render())
        self.report = report


class TaskItem(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}

    id: str
    description: str
    requirements: list[str] = Field(default_factory=list)


class TaskPlan(BaseModel):
    """Structured breakdown of the user's problem into tasks."""

    model_config = {"frozen": True, "extra": "forbid"}

    tasks: list[TaskItem]

    def model_post_init(self, __context) -> None:
        if not self.tasks:
            raise ValueError("plan must contain at least one task")
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")


class BlueprintSupervisor(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}

    id: str
    purpose: str = ""
    children: list[str] = Field(default_factory=list)


class BlueprintAgent(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}

    id: str
    purpose: str = ""
    inputs: list[FieldSpec] = Field(default_factory=list)
    outputs: list[FieldSpec] = Field(default_factory=list)
    tool_needs: list[str] = Field(default_factory=list)


class BlueprintTool(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}

    id: str
    purpose: str = ""


class WorkflowBlueprint(BaseModel):
    """Abstract architecture: who exists, who supervises whom, which tools."""

    model_config = {"frozen": True, "extra": "forbid"}

    supervisors: list[BlueprintSupervisor]
    agents: list[BlueprintAgent] = Field(default_factory=list)
    tools: list[BlueprintTool] = Field(default_factory=list)

    def root_id(self) -> str:
        children = {c for s in self.supervisors for c in s.children}
        roots = [s.id for s in self.supervisors if s.id not in children]
        if len(roots) != 1:
            raise BlueprintError(f"expected exactly one root supervisor, found {roots}")
        return roots[0]


class CapabilitiesDoc(BaseModel):
    """Framework summary fed to synthesis stages for in-context grounding."""

    model_config = {"frozen": True, "extra": "forbid"}

    text: str
    version: str

    def model_post_init(self, __context) -> None:
        if not self.text:
            raise ValueError("capabilities text must be non-empty")


def default_capabilities() -> CapabilitiesDoc:
    return CapabilitiesDoc(text=load_capabilities_text(), version=__version__)


class SynthesisConfig(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}

    repair_retries: int = Field(default=1, ge=0, le=2)
    stage_profiles: dict[str, LlmProfile] = Field(default_factory=dict)
    output_dir: str = "."
    ipr: IprConfig = Field(default_factory=IprConfig)


def validate_blueprint(blueprint: WorkflowBlueprint, known_handlers: list[str]) -> None:
    """Reference closure, tree shape, and handler availability, pre-build."""
    ids = [s.id for s in blueprint.supervisors] + [a.id for a in blueprint.agents] + [
        t.id for t in blueprint.tools
    ]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise BlueprintError(f"duplicate component ids: {dupes}")
    node_ids = {s.id for s in blueprint.supervisors} | {a.id for a in blueprint.agents}
    parents: dict[str, int] = {}
    for sup in blueprint.supervisors:
        if not sup.children:
            raise BlueprintError(f"supervisor {sup.id!r} has no children")
        for child in sup.children:
            if child not in node_ids:
                raise BlueprintError(f"child {child!r} of {sup.id!r} is not declared")
            parents[child] = parents.get(child, 0) + 1
    shared = sorted(c for c, n in parents.items() if n > 1)
    if shared:
        raise BlueprintError(f"nodes with multiple parents: {shared}")
    root = blueprint.root_id()
    reachable = {root}
    stack = [root]
    sup_by_id = {s.id: s for s in blueprint.supervisors}
    while stack:
        node = stack.pop()
        for child in sup_by_id[node].children if node in sup_by_id else []:
            if child not in reachable:
                reachable.add(child)
                stack.append(child)
    unreachable = sorted(node_ids - reachable)
    if unreachable:
        raise BlueprintError(f"nodes unreachable from root {root!r}: {unreachable}")
    declared_tools = {t.id for t in blueprint.tools}
    for agent in blueprint.agents:
        for need in agent.tool_needs:
            if need not in declared_tools:
                raise BlueprintError(
                    f"agent {agent.id!r} needs tool {need!r} which the blueprint does not declare"
                )
    for tool in blueprint.tools:
        if tool.id not in known_handlers:
            raise BlueprintError(f"unknown tool handler {tool.id!r}")


def _examples_text(examples: list[QaPair], cap: int = 10) -> str:
    shown = examples[:cap]
    return "\n\n".join(f"Q: {e.question}\nA: {e.answer}" for e in shown)


def decompose(
    user_prompt: str,
    examples: list[QaPair],
    doc: CapabilitiesDoc,
    gateway,
    repair_retries: int = 1,
) -> TaskPlan:
    """Stage 1: unravel the problem statement into a structured task list."""
    if not user_prompt:
        raise ValueError("user_prompt must be non-empty")
    if not examples:
        raise ValueError("at least one example is required")
    prompt = render_prompt(
        "decompose",
        capabilities=doc.text,
        user_prompt=user_prompt,
        examples=_examples_text(examples),
    )

    def parser(text: str) -> TaskPlan:
        return TaskPlan.model_validate(extract_yaml_block(text, "tasks"))

    try:
        plan, _ = request_structured(
            gateway, [ChatMessage(role="user", content=prompt)], parser, repair_retries
        )
    except (StructuredOutputError, ValidationError, ValueError) as exc:
        raise StageError("decompose", f"could not parse task plan: {exc}") from exc
    return plan


def design(
    plan: TaskPlan,
    doc: CapabilitiesDoc,
    gateway,
    registry: Optional[ToolRegistry] = None,
    repair_retries: int = 1,
) -> WorkflowBlueprint:
    """Stage 2: lay out supervisors, agents (with I/O fields), and tools."""
    registry = registry or ToolRegistry.builtin()
    plan_text = yaml.safe_dump(plan.model_dump(mode="json"), sort_keys=False, allow_unicode=True)
    prompt = render_prompt("design", capabilities=doc.text, plan=plan_text)

    def parser(text: str) -> WorkflowBlueprint:
        blueprint = WorkflowBlueprint.model_validate(extract_yaml_block(text, "supervisors"))
        validate_blueprint(blueprint, registry.ids())
        return blueprint

    try:
        blueprint, _ = request_structured(
            gateway, [ChatMessage(role="user", content=prompt)], parser, repair_retries
        )
    except BlueprintError:
        raise
    except (StructuredOutputError, ValidationError, ValueError) as exc:
        raise StageError("design", f"could not parse blueprint: {exc}") from exc
    return blueprint


_FENCE_ONLY_RE = re.compile(r"\A```[\w-]*\n(.*?)```\Z", re.DOTALL)


def _seed_parser(text: str) -> str:
    """Seed system message = the whole reply; unwrap a lone code fence."""
    out = text.strip()
    match = _FENCE_ONLY_RE.match(out)
    if match:
        out = match.group(1).strip()
    if not out:
        raise ValueError("empty system message")
    return out


def build(
    blueprint: WorkflowBlueprint,
    doc: CapabilitiesDoc,
    gateway,
    *,
    name: str = "synthesized_workflow",
    description: str = "",
    llm_profile: Optional[LlmProfile] = None,
    registry: Optional[ToolRegistry] = None,
    repair_retries: int = 1,
) -> WorkflowSpec:
    """Stage 3: one prompt-engineering call per component seeds its system message.

    Tool declarations are materialized from the runtime registry (parameters
    and handler wiring), keeping the document executable as-is. The assembled
    workflow must pass static validation or :class:`BuildValidationError` is
    raised carrying the report.
    """
    registry = registry or ToolRegistry.builtin()
    blueprint_text = yaml.safe_dump(blueprint.model_dump(mode="json"), sort_keys=False, allow_unicode=True)

    def seed(template: str, **values: str) -> str:
        prompt = render_prompt(template, blueprint=blueprint_text, **values)
        try:
            text, _ = request_structured(
                gateway, [ChatMessage(role="user", content=prompt)], _seed_parser, repair_retries
            )
        except (StructuredOutputError, ValueError) as exc:
            raise StageError("build", f"could not obtain system message: {exc}") from exc
        return text

    try:
        supervisors = [
            SupervisorSpec(
                id=sup.id,
                system_message=seed(
                    "build_supervisor",
                    component_id=sup.id,
                    purpose=sup.purpose,
                    children=", ".join(sup.children),
                ),
                children=list(sup.children),
            )
            for sup in blueprint.supervisors
        ]
        agents = [
            AgentSpec(
                id=agent.id,
                role=agent.purpose,
                system_message=seed(
                    "build_agent",
                    component_id=agent.id,
                    purpose=agent.purpose,
                    inputs=", ".join(f.name for f in agent.inputs) or "none",
                    outputs=", ".join(f.name for f in agent.outputs) or "none",
                    tools=", ".join(agent.tool_needs) or "none",
                ),
                inputs=list(agent.inputs),
                outputs=list(agent.outputs),
                tool_ids=list(agent.tool_needs),
            )
            for agent in blueprint.agents
        ]
        tools = []
        for tool in blueprint.tools:
            registered = registry.get(tool.id).spec
            tools.append(
                ToolSpec(
                    id=tool.id,
                    description=tool.purpose or registered.description,
                    parameters=list(registered.parameters),
                    handler=registered.handler,
                )
            )
        spec = WorkflowSpec(
            name=name,
            description=description,
            llm_profile=llm_profile or LlmProfile(provider="scripted"),
            root_supervisor=blueprint.root_id(),
            supervisors=supervisors,
            agents=agents,
            tools=tools,
        )
    except StageError:
        raise
    except (ValidationError, ValueError) as exc:
        raise StageError("build", f"could not assemble workflow: {exc}") from exc
    report = validate_workflow(spec)
    if not report.ok:
        raise BuildValidationError(report)
    return spec


@dataclass
class SynthesisResult:
    plan: TaskPlan
    blueprint: WorkflowBlueprint
    spec: WorkflowSpec
    report: IprReport
    snapshots: list[WorkflowSpec]


def _workflow_profile(config: SynthesisConfig, gateway) -> LlmProfile:
    profile = config.stage_profiles.get("workflow") or config.stage_profiles.get("default")
    if profile is not None:
        return profile
    if getattr(gateway, "is_scripted", False):
        return LlmProfile(provider="scripted")
    raise StageError("build", "no llm profile configured for the synthesized workflow")


def synthesize(
    user_prompt: str,
    examples: list[QaPair],
    dataset: Optional[list[QaPair]],
    config: SynthesisConfig,
    gateway,
    *,
    judge=None,
    doc: Optional[CapabilitiesDoc] = None,
    registry: Optional[ToolRegistry] = None,
    name: str = "synthesized_workflow",
    clock: Callable[[], float] = time.perf_counter,
    workers: int = 4,
) -> SynthesisResult:
    """Full pipeline: decompose, design, build, validate, evaluate, refine.

    Artifacts land in ``config.output_dir``: ``final.workflow.yaml``,
    per-iteration ``iteration_<k>.workflow.yaml`` snapshots,
    ``ipr_report.json``, and ``report.csv``. On a stage error the partial
    artifacts produced so far are preserved there before the error (tagged
    with its stage) propagates. Refinement is skipped when the baseline
    evaluation already meets the pass threshold, leaving a single iteration
    record.
    """
    doc = doc or default_capabilities()
    registry = registry or ToolRegistry.builtin()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    plan = None
    blueprint = None
    try:
        plan = decompose(user_prompt, examples, doc, gateway, config.repair_retries)
        blueprint = design(plan, doc, gateway, registry, config.repair_retries)
        spec = build(
            blueprint,
            doc,
            gateway,
            name=name,
            description=user_prompt.strip().splitlines()[0][:200],
            llm_profile=_workflow_profile(config, gateway),
            registry=registry,
            repair_retries=config.repair_retries,
        )
    except StageError:
        _write_partials(out, plan, blueprint)
        raise

    if judge is None:
        judge = (
            LlmJudge(gateway) if config.ipr.judge_mode == "llm" else ExactJudge("substring")
        )
    result = run_ipr(
        spec,
        examples,
        dataset,
        gateway,
        judge,
        config.ipr,
        registry=registry,
        clock=clock,
        workers=workers,
    )
    emit_artifacts(out, result)
    return SynthesisResult(
        plan=plan,
        blueprint=blueprint,
        spec=result.spec,
        report=result.report,
        snapshots=result.snapshots,
    )


def _write_partials(out: Path, plan: Optional[TaskPlan], blueprint: Optional[WorkflowBlueprint]):
    if plan is not None:
        (out / "task_plan.yaml").write_text(
            yaml.safe_dump(plan.model_dump(mode="json"), sort_keys=False, allow_unicode=True),
            encoding="utf-8",
        )
    if blueprint is not None:
        (out / "blueprint.yaml").write_text(
            yaml.safe_dump(blueprint.model_dump(mode="json"), sort_keys=False, allow_unicode=True),
            encoding="utf-8",
        )


def emit_artifacts(output_dir: Path, result: IprResult, run_index: int = 0) -> None:
    """Write the refined spec, snapshots, and report files for one run."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "final.workflow.yaml").write_text(
        serialize_workflow(result.spec), encoding="utf-8"
    )
    for k, snapshot in enumerate(result.snapshots):
        (output_dir / f"iteration_{k}.workflow.yaml").write_text(
            serialize_workflow(snapshot), encoding="utf-8"
        )
    (output_dir / "ipr_report.json").write_text(
        ipr_report_to_json(result.report), encoding="utf-8"
    )
    (output_dir / "report.csv").write_text(
        ipr_report_to_csv(result.report, run_index), encoding="utf-8"
    )
