"""Workflow specification model and its YAML wire format.

A workflow document declares one tree of supervisors over worker agents plus
the tools agents may need and the LLM profile the runtime should use. Parsing
is strict (unknown keys are errors), serialization is canonical (schema key
order, declaration list order, byte-identical across calls) so documents can
be diffed and hashed, and :func:`validate_workflow` reports every violated
structural invariant as data rather than raising.
"""

from __future__ import annotations

import hashlib
import re
from enum import Enum
from typing import Optional

import yaml
from pydantic import BaseModel, Field, ValidationError

from .gateway import LlmProfile

FIELD_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")

WORKFLOW_FILE_SUFFIX = ".workflow.yaml"


class WorkflowParseError(Exception):
    """Base class for document-level parse failures."""


class WorkflowSyntaxError(WorkflowParseError):
    """Input is not syntactically valid YAML; carries the error position."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        pos = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{pos}")
        self.line = line
        self.column = column


class SchemaError(WorkflowParseError):
    """Document shape does not match the workflow schema; carries a path."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class DuplicateIdError(WorkflowParseError):
    """Two components in the document share an identifier."""

    def __init__(self, identifier: str, path: str):
        super().__init__(f"{path}: duplicate identifier {identifier!r}")
        self.identifier = identifier
        self.path = path


class FieldKind(str, Enum):
    TEXT = "text"
    NUMBER = "number"
    BOOLEAN = "boolean"
    LIST = "list"


class FieldSpec(BaseModel):
    """Named, typed input/output or tool parameter."""

    model_config = {"frozen": True, "extra": "forbid"}

    name: str
    description: str = ""
    kind: FieldKind = FieldKind.TEXT


class ToolSpec(BaseModel):
    """Tool declaration; ``handler`` names an entry in the runtime registry."""

    model_config = {"frozen": True, "extra": "forbid"}

    id: str
    description: str = ""
    parameters: list[FieldSpec] = Field(default_factory=list)
    handler: str

    def model_post_init(self, __context) -> None:
        if not self.handler:
            raise ValueError("tool handler must be non-empty")


class AgentSpec(BaseModel):
    """Leaf worker: one focused LLM call driven by its system message."""

    model_config = {"frozen": True, "extra": "forbid"}

    id: str
    role: str = ""
    system_message: str = ""
    inputs: list[FieldSpec] = Field(default_factory=list)
    outputs: list[FieldSpec]
    tool_ids: list[str] = Field(default_factory=list)

    def model_post_init(self, __context) -> None:
        if not self.outputs:
            raise ValueError("agent outputs must be non-empty")


class SupervisorSpec(BaseModel):
    """Delegating node; children reference supervisors or agents by id.

    ``children`` may be empty at construction time so that static validation
    can report EMPTY_CHILDREN as an issue rather than an exception.
    """

    model_config = {"frozen": True, "extra": "forbid"}

    id: str
    system_message: str
    children: list[str] = Field(default_factory=list)

    def model_post_init(self, __context) -> None:
        if not self.system_message:
            raise ValueError("supervisor system_message must be non-empty")


class WorkflowSpec(BaseModel):
    """Complete declarative workflow description.

    Structural invariants (unique ids, resolvable references, tree-shaped
    supervision) are intentionally not enforced at construction time; they are
    checked by :func:`validate_workflow` so that malformed specs can be
    represented, inspected, and reported on.
    """

    model_config = {"frozen": True, "extra": "forbid"}

    name: str
    description: str = ""
    llm_profile: LlmProfile = Field(default_factory=lambda: LlmProfile(provider="scripted"))
    root_supervisor: str
    supervisors: list[SupervisorSpec] = Field(default_factory=list)
    agents: list[AgentSpec] = Field(default_factory=list)
    tools: list[ToolSpec] = Field(default_factory=list)

    def supervisor_ids(self) -> set[str]:
        return {s.id for s in self.supervisors}

    def agent_ids(self) -> set[str]:
        return {a.id for a in self.agents}

    def tool_ids(self) -> set[str]:
        return {t.id for t in self.tools}

    def find_supervisor(self, identifier: str) -> Optional[SupervisorSpec]:
        for s in self.supervisors:
            if s.id == identifier:
                return s
        return None

    def find_agent(self, identifier: str) -> Optional[AgentSpec]:
        for a in self.agents:
            if a.id == identifier:
                return a
        return None

    def find_tool(self, identifier: str) -> Optional[ToolSpec]:
        for t in self.tools:
            if t.id == identifier:
                return t
        return None


class IssueCode(str, Enum):
    DUPLICATE_ID = "DUPLICATE_ID"
    DANGLING_REF = "DANGLING_REF"
    NOT_A_TREE = "NOT_A_TREE"
    EMPTY_CHILDREN = "EMPTY_CHILDREN"
    BAD_ROOT = "BAD_ROOT"
    BAD_FIELD_NAME = "BAD_FIELD_NAME"


class ValidationIssue(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}

    code: IssueCode
    path: str
    message: str


class ValidationReport(BaseModel):
    """Outcome of static validation; ``ok`` holds iff there are no issues."""

    model_config = {"frozen": True, "extra": "forbid"}

    ok: bool
    issues: list[ValidationIssue] = Field(default_factory=list)

    @classmethod
    def from_issues(cls, issues: list[ValidationIssue]) -> "ValidationReport":
        return cls(ok=not issues, issues=issues)

    def render(self) -> str:
        if self.ok:
            return "workflow is valid"
        lines = [f"workflow has {len(self.issues)} issue(s):"]
        lines += [f"  [{i.code.value}] {i.path}: {i.message}" for i in self.issues]
        return "\n".join(lines)


def _loc_to_path(loc: tuple) -> str:
    return "/" + "/".join(str(part) for part in loc)


def parse_workflow(text: str) -> WorkflowSpec:
    """Parse a workflow YAML document.

    Rejects syntactically invalid YAML (with position), documents that do not
    match the schema (with a path; unknown keys are errors at any level), and
    duplicate component identifiers. Deeper structural invariants are left to
    :func:`validate_workflow`.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise WorkflowSyntaxError(str(exc), mark.line + 1, mark.column + 1) from exc
        raise WorkflowSyntaxError(str(exc)) from exc
    if not isinstance(doc, dict):
        raise SchemaError("document must be a mapping", "/")
    try:
        spec = WorkflowSpec.model_validate(doc)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise SchemaError(first["msg"], _loc_to_path(first["loc"])) from exc
    _reject_duplicate_ids(spec)
    return spec


def parse_workflow_file(path: str) -> WorkflowSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_workflow(fh.read())


def _reject_duplicate_ids(spec: WorkflowSpec) -> None:
    seen: dict[str, str] = {}
    for section, items in (
        ("supervisors", spec.supervisors),
        ("agents", spec.agents),
        ("tools", spec.tools),
    ):
        for i, item in enumerate(items):
            path = f"/{section}/{i}"
            if item.id in seen:
                raise DuplicateIdError(item.id, path)
            seen[item.id] = path


class _CanonicalDumper(yaml.SafeDumper):
    pass


def _str_representer(dumper: yaml.SafeDumper, value: str):
    style = "|" if "\n" in value else None
    return dumper.represent_scalar("tag:yaml.org,2002:str", value, style=style)


_CanonicalDumper.add_representer(str, _str_representer)


def _profile_to_dict(profile: LlmProfile) -> dict:
    return {
        "provider": profile.provider,
        "model_id": profile.model_id,
        "temperature": profile.temperature,
        "top_p": profile.top_p,
        "base_url": profile.base_url,
        "max_retries": profile.max_retries,
        "timeout": profile.timeout,
    }


def _field_to_dict(field: FieldSpec) -> dict:
    return {"name": field.name, "description": field.description, "kind": field.kind.value}


def _spec_to_doc(spec: WorkflowSpec) -> dict:
    return {
        "name": spec.name,
        "description": spec.description,
        "llm_profile": _profile_to_dict(spec.llm_profile),
        "root_supervisor": spec.root_supervisor,
        "supervisors": [
            {"id": s.id, "system_message": s.system_message, "children": list(s.children)}
            for s in spec.supervisors
        ],
        "agents": [
            {
                "id": a.id,
                "role": a.role,
                "system_message": a.system_message,
                "inputs": [_field_to_dict(f) for f in a.inputs],
                "outputs": [_field_to_dict(f) for f in a.outputs],
                "tool_ids": list(a.tool_ids),
            }
            for a in spec.agents
        ],
        "tools": [
            {
                "id": t.id,
                "description": t.description,
                "parameters": [_field_to_dict(f) for f in t.parameters],
                "handler": t.handler,
            }
            for t in spec.tools
        ],
    }


def serialize_workflow(spec: WorkflowSpec) -> str:
    """Render the canonical YAML form of a workflow.

    Keys appear in schema order, lists in declaration order, empty lists
    explicitly (``tools: []``), and multi-line strings as literal blocks.
    Output is a pure function of the spec, byte-identical across calls.
    """
    return yaml.dump(
        _spec_to_doc(spec),
        Dumper=_CanonicalDumper,
        sort_keys=False,
        allow_unicode=True,
        default_flow_style=False,
        width=4096,
    )


def spec_digest(spec: WorkflowSpec) -> str:
    """SHA-256 of the canonical serialization; stable snapshot identity."""
    return hashlib.sha256(serialize_workflow(spec).encode("utf-8")).hexdigest()


def validate_workflow(spec: WorkflowSpec) -> ValidationReport:
    """Check every structural invariant; violations come back as issue data.

    Codes: DUPLICATE_ID (shared identifiers), DANGLING_REF (child or tool
    references that resolve to nothing), NOT_A_TREE (shared children, cycles,
    or nodes unreachable from the root), EMPTY_CHILDREN, BAD_ROOT (missing or
    non-supervisor root), BAD_FIELD_NAME (field names outside
    ``[a-z][a-z0-9_]*``).
    """
    issues: list[ValidationIssue] = []

    seen: set[str] = set()
    for section, items in (
        ("supervisors", spec.supervisors),
        ("agents", spec.agents),
        ("tools", spec.tools),
    ):
        for i, item in enumerate(items):
            if item.id in seen:
                issues.append(
                    ValidationIssue(
                        code=IssueCode.DUPLICATE_ID,
                        path=f"/{section}/{i}",
                        message=f"identifier {item.id!r} is already declared",
                    )
                )
            seen.add(item.id)

    supervisor_ids = spec.supervisor_ids()
    agent_ids = spec.agent_ids()
    tool_ids = spec.tool_ids()
    node_ids = supervisor_ids | agent_ids

    if not spec.root_supervisor:
        issues.append(
            ValidationIssue(
                code=IssueCode.BAD_ROOT,
                path="/root_supervisor",
                message="root_supervisor is empty",
            )
        )
    elif spec.root_supervisor not in supervisor_ids:
        issues.append(
            ValidationIssue(
                code=IssueCode.BAD_ROOT,
                path="/root_supervisor",
                message=f"root_supervisor {spec.root_supervisor!r} is not a declared supervisor",
            )
        )

    for i, sup in enumerate(spec.supervisors):
        if not sup.children:
            issues.append(
                ValidationIssue(
                    code=IssueCode.EMPTY_CHILDREN,
                    path=f"/supervisors/{i}/children",
                    message=f"supervisor {sup.id!r} has no children",
                )
            )
        for j, child in enumerate(sup.children):
            if child not in node_ids:
                issues.append(
                    ValidationIssue(
                        code=IssueCode.DANGLING_REF,
                        path=f"/supervisors/{i}/children/{j}",
                        message=f"child {child!r} is not a declared supervisor or agent",
                    )
                )

    for i, agent in enumerate(spec.agents):
        for j, tool_id in enumerate(agent.tool_ids):
            if tool_id not in tool_ids:
                issues.append(
                    ValidationIssue(
                        code=IssueCode.DANGLING_REF,
                        path=f"/agents/{i}/tool_ids/{j}",
                        message=f"tool {tool_id!r} is not declared",
                    )
                )
        names = [f.name for f in agent.inputs] + [f.name for f in agent.outputs]
        dupes = {n for n in names if names.count(n) > 1}
        for dup in sorted(dupes):
            issues.append(
                ValidationIssue(
                    code=IssueCode.BAD_FIELD_NAME,
                    path=f"/agents/{i}",
                    message=f"field name {dup!r} is declared more than once",
                )
            )

    issues.extend(_check_field_names(spec))
    issues.extend(_check_tree(spec, supervisor_ids, node_ids))
    return ValidationReport.from_issues(issues)


def _check_field_names(spec: WorkflowSpec) -> list[ValidationIssue]:
    issues = []
    for i, agent in enumerate(spec.agents):
        for section, fields in (("inputs", agent.inputs), ("outputs", agent.outputs)):
            for j, field in enumerate(fields):
                if not FIELD_NAME_RE.match(field.name):
                    issues.append(
                        ValidationIssue(
                            code=IssueCode.BAD_FIELD_NAME,
                            path=f"/agents/{i}/{section}/{j}/name",
                            message=f"field name {field.name!r} must match [a-z][a-z0-9_]*",
                        )
                    )
    for i, tool in enumerate(spec.tools):
        for j, field in enumerate(tool.parameters):
            if not FIELD_NAME_RE.match(field.name):
                issues.append(
                    ValidationIssue(
                        code=IssueCode.BAD_FIELD_NAME,
                        path=f"/tools/{i}/parameters/{j}/name",
                        message=f"field name {field.name!r} must match [a-z][a-z0-9_]*",
                    )
                )
    return issues


def _check_tree(
    spec: WorkflowSpec, supervisor_ids: set[str], node_ids: set[str]
) -> list[ValidationIssue]:
    """Parent-count scan plus root reachability over declared references."""
    issues = []
    parents: dict[str, list[str]] = {}
    for sup in spec.supervisors:
        for child in sup.children:
            if child in node_ids:
                parents.setdefault(child, []).append(sup.id)

    for child in sorted(parents):
        if len(parents[child]) > 1:
            issues.append(
                ValidationIssue(
                    code=IssueCode.NOT_A_TREE,
                    path="/supervisors",
                    message=f"node {child!r} has multiple parents: {sorted(parents[child])}",
                )
            )

    root = spec.root_supervisor
    if root in supervisor_ids:
        if root in parents:
            issues.append(
                ValidationIssue(
                    code=IssueCode.NOT_A_TREE,
                    path="/root_supervisor",
                    message=f"root {root!r} appears as a child",
                )
            )
        # Any cycle either puts the root in a child position, gives some node
        # two parents, or leaves the cycle unreachable -- all flagged above or
        # below, so the walk only needs to terminate, not re-detect it.
        reachable: set[str] = set()
        stack = [root]
        while stack:
            node = stack.pop()
            if node in reachable:
                continue
            reachable.add(node)
            sup = spec.find_supervisor(node)
            if sup is not None:
                stack.extend(child for child in sup.children if child in node_ids)
        for node in sorted(node_ids - reachable):
            issues.append(
                ValidationIssue(
                    code=IssueCode.NOT_A_TREE,
                    path="/supervisors",
                    message=f"node {node!r} is not reachable from the root",
                )
            )
    return issues
