"""Workflow execution engine.

Runs a validated workflow against one query: the root supervisor receives the
query as an envelope, each supervisor turn asks the LLM for exactly one
directive (delegate / tool_call / final), delegation routes child envelopes
depth-first with metadata carried forward on every hop, worker agents answer
with a single completion, and every gateway call, delegation, tool invocation,
and memory access lands in an ordered execution trace.

Delegation is turn-based: one child is active at a time, so a run with a
scripted gateway is fully deterministic. The step budget bounds the total
trace length (and therefore the number of LLM calls) for any backend
behavior.
"""

from __future__ import annotations

import ast
import json
import operator
import time
from dataclasses import dataclass
from typing import Any, Callable, Literal, Optional

from pydantic import BaseModel, ValidationError, model_validator

from .gateway import ChatMessage, GatewayError
from .model import (
    AgentSpec,
    FieldKind,
    FieldSpec,
    SupervisorSpec,
    ToolSpec,
    ValidationReport,
    WorkflowSpec,
    validate_workflow,
)
from .prompts import load_prompt
from .structured import (
    REPAIR_TEMPLATE,
    MultipleBlocksError,
    NoBlockFoundError,
    extract_yaml_block,
)

DEFAULT_MAX_STEPS = 32


class OrchestratorError(Exception):
    """Base class for run failures; ``trace`` is attached when available."""

    trace: Optional["ExecutionTrace"] = None


class InvalidWorkflowError(OrchestratorError):
    """The workflow failed static validation before execution."""

    def __init__(self, report: ValidationReport):
        super().__init__(report.render())
        self.report = report


class StepBudgetExceededError(OrchestratorError):
    def __init__(self, max_steps: int, trace: "ExecutionTrace"):
        super().__init__(f"step budget of {max_steps} exhausted")
        self.max_steps = max_steps
        self.trace = trace


class DirectiveParseError(OrchestratorError):
    """Supervisor reply did not yield a valid directive."""


class NoDirectiveError(DirectiveParseError):
    """No fenced directive block found in the reply."""


class InvalidDirectiveError(DirectiveParseError):
    """A directive block was found but violates the directive schema."""


class UnknownTargetError(OrchestratorError):
    """Directive names a target the acting supervisor cannot reach."""


class ToolError(OrchestratorError):
    pass


class UnknownToolError(ToolError):
    pass


class ToolArgumentError(ToolError):
    """Arguments do not conform to the tool's declared parameters."""


class MemoryAccessDeniedError(OrchestratorError):
    pass


class MissingKeyError(OrchestratorError):
    pass


# ---------------------------------------------------------------------------
# Envelopes and tracing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Envelope:
    """Routed message; child envelopes inherit all parent metadata."""

    id: str
    parent_id: Optional[str]
    sender: str
    recipient: str
    content: str
    metadata: dict[str, str]
    created_at: float


StepKind = Literal["llm_call", "delegate", "tool_call", "memory_read", "memory_write", "final"]


@dataclass(frozen=True)
class TraceStep:
    actor: str
    step_kind: StepKind
    envelope_id: str
    detail: str


class ExecutionTrace:
    """Ordered record of everything one run did, plus its envelopes."""

    def __init__(self, max_steps: int = DEFAULT_MAX_STEPS):
        self.max_steps = max_steps
        self.steps: list[TraceStep] = []
        self.envelopes: dict[str, Envelope] = {}

    @property
    def step_count(self) -> int:
        return len(self.steps)

    def add_step(self, actor: str, step_kind: StepKind, envelope_id: str, detail: str) -> None:
        """Append one step; raises once the budget would be exceeded."""
        if len(self.steps) >= self.max_steps:
            raise StepBudgetExceededError(self.max_steps, self)
        self.steps.append(TraceStep(actor, step_kind, envelope_id, detail))

    def register(self, envelope: Envelope) -> None:
        self.envelopes[envelope.id] = envelope

    def llm_call_count(self) -> int:
        return sum(1 for s in self.steps if s.step_kind == "llm_call")

    def to_jsonl(self) -> str:
        """One JSON object per step: index, actor, step_kind, envelope_id, detail."""
        lines = []
        for i, step in enumerate(self.steps):
            lines.append(
                json.dumps(
                    {
                        "index": i,
                        "actor": step.actor,
                        "step_kind": step.step_kind,
                        "envelope_id": step.envelope_id,
                        "detail": step.detail,
                    },
                    ensure_ascii=False,
                )
            )
        return "\n".join(lines) + ("\n" if lines else "")

    def digest_text(self, limit: int = 4000) -> str:
        """Compact rendering of the trace for feedback prompts."""
        lines = [
            f"{i}. {s.actor} {s.step_kind}: {s.detail}" for i, s in enumerate(self.steps)
        ]
        text = "\n".join(lines)
        return text[:limit]


@dataclass
class RunResult:
    final_answer: str
    trace: ExecutionTrace
    prompt_tokens: int
    completion_tokens: int
    wall_time: float


# ---------------------------------------------------------------------------
# Role-gated shared memory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryEntry:
    value: str
    writer: str
    readable_by: frozenset[str]


@dataclass(frozen=True)
class AccessRecord:
    actor: str
    key: str
    mode: Literal["read", "write"]
    allowed: bool


class MemoryStore:
    """Shared key-value state with role-based access control.

    Reads succeed iff the actor is the entry's writer or is listed in its
    ``readable_by`` set. Writes create entries owned by the actor; an existing
    entry may only be overwritten by its writer. Every attempt is appended to
    ``access_log``; denied attempts never mutate the entries.
    """

    def __init__(self, on_access: Optional[Callable[[AccessRecord], None]] = None):
        self.entries: dict[str, MemoryEntry] = {}
        self.access_log: list[AccessRecord] = []
        self._on_access = on_access

    def _log(self, actor: str, key: str, mode: Literal["read", "write"], allowed: bool) -> None:
        record = AccessRecord(actor, key, mode, allowed)
        self.access_log.append(record)
        if self._on_access is not None:
            self._on_access(record)

    def read(self, actor: str, key: str) -> str:
        entry = self.entries.get(key)
        if entry is None:
            self._log(actor, key, "read", False)
            raise MissingKeyError(f"memory key {key!r} does not exist")
        if actor != entry.writer and actor not in entry.readable_by:
            self._log(actor, key, "read", False)
            raise MemoryAccessDeniedError(f"{actor!r} may not read {key!r}")
        self._log(actor, key, "read", True)
        return entry.value

    def write(self, actor: str, key: str, value: str, readable_by: set[str]) -> None:
        existing = self.entries.get(key)
        if existing is not None and existing.writer != actor:
            self._log(actor, key, "write", False)
            raise MemoryAccessDeniedError(f"{actor!r} may not overwrite {key!r}")
        self._log(actor, key, "write", True)
        self.entries[key] = MemoryEntry(value, actor, frozenset(readable_by))

    def entries_digest(self) -> str:
        """Deterministic fingerprint of entry state (excludes the log)."""
        import hashlib

        payload = json.dumps(
            {
                k: [e.value, e.writer, sorted(e.readable_by)]
                for k, e in sorted(self.entries.items())
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def memory_read(store: MemoryStore, actor: str, key: str) -> str:
    return store.read(actor, key)


def memory_write(
    store: MemoryStore, actor: str, key: str, value: str, readable_by: set[str]
) -> None:
    store.write(actor, key, value, readable_by)


# ---------------------------------------------------------------------------
# Directives
# ---------------------------------------------------------------------------


class Directive(BaseModel):
    """One supervisor decision extracted from an LLM reply."""

    model_config = {"frozen": True, "extra": "forbid"}

    kind: Literal["delegate", "tool_call", "final"]
    target: Optional[str] = None
    task: Optional[str] = None
    arguments: Optional[dict[str, Any]] = None
    answer: Optional[str] = None

    @model_validator(mode="after")
    def _check_kind_fields(self) -> "Directive":
        if self.kind == "delegate" and not (self.target and self.task):
            raise ValueError("delegate directive requires target and task")
        if self.kind == "tool_call" and not (self.target and self.arguments is not None):
            raise ValueError("tool_call directive requires target and arguments")
        if self.kind == "final" and self.answer is None:
            raise ValueError("final directive requires answer")
        return self


def parse_directive(text: str) -> Directive:
    """Extract the single fenced directive block from an LLM reply.

    Tolerates surrounding prose and unrelated code blocks; rejects replies
    with zero or multiple directive blocks, and blocks whose fields violate
    the per-kind requirements.
    """
    try:
        doc = extract_yaml_block(text, "kind")
    except NoBlockFoundError as exc:
        raise NoDirectiveError(str(exc)) from exc
    except MultipleBlocksError as exc:
        raise DirectiveParseError(str(exc)) from exc
    try:
        return Directive.model_validate(doc)
    except ValidationError as exc:
        raise InvalidDirectiveError(f"invalid directive: {exc.errors()[0]['msg']}") from exc


# ---------------------------------------------------------------------------
# Tools
# ---------------------------------------------------------------------------


@dataclass
class ToolContext:
    """Runtime facilities handed to tool handlers."""

    actor: str = ""
    memory: Optional[MemoryStore] = None


ToolHandler = Callable[[dict, ToolContext], str]


@dataclass(frozen=True)
class RegisteredTool:
    spec: ToolSpec
    handler: ToolHandler


_KIND_TYPES: dict[FieldKind, tuple] = {
    FieldKind.TEXT: (str,),
    FieldKind.NUMBER: (int, float),
    FieldKind.BOOLEAN: (bool,),
    FieldKind.LIST: (list,),
}


class ToolRegistry:
    """In-process tool handlers, keyed by symbolic handler name."""

    def __init__(self):
        self._tools: dict[str, RegisteredTool] = {}

    def register(self, spec: ToolSpec, handler: ToolHandler) -> None:
        self._tools[spec.id] = RegisteredTool(spec, handler)

    def get(self, tool_id: str) -> RegisteredTool:
        if tool_id not in self._tools:
            raise UnknownToolError(f"tool {tool_id!r} is not registered")
        return self._tools[tool_id]

    def ids(self) -> list[str]:
        return sorted(self._tools)

    def describe(self) -> str:
        lines = []
        for tool_id in self.ids():
            tool = self._tools[tool_id]
            params = ", ".join(f"{p.name}: {p.kind.value}" for p in tool.spec.parameters)
            lines.append(f"- {tool_id}({params}): {tool.spec.description}")
        return "\n".join(lines)

    @classmethod
    def builtin(cls) -> "ToolRegistry":
        registry = cls()
        registry.register(
            ToolSpec(
                id="echo",
                description="Return the given text unchanged.",
                parameters=[
                    FieldSpec(name="text", description="text to return", kind=FieldKind.TEXT)
                ],
                handler="echo",
            ),
            _echo_handler,
        )
        registry.register(
            ToolSpec(
                id="calculator",
                description="Evaluate an arithmetic expression (+ - * / // % ** and parentheses).",
                parameters=[
                    FieldSpec(
                        name="expr",
                        description="arithmetic expression",
                        kind=FieldKind.TEXT,
                    )
                ],
                handler="calculator",
            ),
            _calculator_handler,
        )
        return registry


def _echo_handler(arguments: dict, context: ToolContext) -> str:
    return arguments["text"]


_BIN_OPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.FloorDiv: operator.floordiv,
    ast.Mod: operator.mod,
    ast.Pow: operator.pow,
}

_UNARY_OPS = {ast.UAdd: operator.pos, ast.USub: operator.neg}


def _eval_arithmetic(node: ast.AST):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return node.value
    if isinstance(node, ast.BinOp) and type(node.op) in _BIN_OPS:
        return _BIN_OPS[type(node.op)](_eval_arithmetic(node.left), _eval_arithmetic(node.right))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY_OPS:
        return _UNARY_OPS[type(node.op)](_eval_arithmetic(node.operand))
    raise ToolArgumentError(f"unsupported expression element: {ast.dump(node)[:60]}")


def _calculator_handler(arguments: dict, context: ToolContext) -> str:
    expr = arguments["expr"]
    try:
        tree = ast.parse(expr, mode="eval")
        value = _eval_arithmetic(tree.body)
    except ToolArgumentError:
        raise
    except (SyntaxError, ZeroDivisionError, ValueError) as exc:
        raise ToolArgumentError(f"cannot evaluate {expr!r}: {exc}") from exc
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    return str(value)


def invoke_tool(
    registry: ToolRegistry,
    tool_id: str,
    arguments: dict,
    context: Optional[ToolContext] = None,
) -> str:
    """Run a registered handler after checking arguments against its schema."""
    tool = registry.get(tool_id)
    declared = {p.name: p.kind for p in tool.spec.parameters}
    missing = sorted(set(declared) - set(arguments))
    extra = sorted(set(arguments) - set(declared))
    if missing or extra:
        raise ToolArgumentError(
            f"tool {tool_id!r}: missing arguments {missing}, unexpected arguments {extra}"
        )
    for name, kind in declared.items():
        value = arguments[name]
        expected = _KIND_TYPES[kind]
        if isinstance(value, bool) and kind is FieldKind.NUMBER:
            raise ToolArgumentError(f"tool {tool_id!r}: argument {name!r} must be a number")
        if not isinstance(value, expected):
            raise ToolArgumentError(
                f"tool {tool_id!r}: argument {name!r} must be of kind {kind.value}"
            )
    return tool.handler(arguments, context or ToolContext())


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _roster_text(spec: WorkflowSpec, supervisor: SupervisorSpec) -> str:
    lines = ["Your children (delegate only to these):"]
    for child_id in supervisor.children:
        agent = spec.find_agent(child_id)
        if agent is not None:
            role = f": {agent.role}" if agent.role else ""
            lines.append(f"- {child_id} (agent){role}")
        else:
            lines.append(f"- {child_id} (supervisor)")
    declared_tools = [t for t in spec.tools]
    if declared_tools:
        lines.append("Available tools (invoke with a tool_call directive):")
        for tool in declared_tools:
            params = ", ".join(f"{p.name}: {p.kind.value}" for p in tool.parameters)
            lines.append(f"- {tool.id}({params}): {tool.description}")
    return "\n".join(lines)


def _agent_system_message(agent: AgentSpec) -> str:
    parts = [agent.system_message]
    if agent.outputs:
        fields = "; ".join(f"{f.name} ({f.kind.value}): {f.description}" for f in agent.outputs)
        parts.append(f"Produce these outputs: {fields}")
    return "\n\n".join(p for p in parts if p)


class _Run:
    """Mutable state for one execution: trace, envelopes, memory, tokens."""

    def __init__(
        self,
        spec: WorkflowSpec,
        gateway,
        registry: ToolRegistry,
        max_steps: int,
        clock: Callable[[], float],
    ):
        self.spec = spec
        self.gateway = gateway
        self.registry = registry
        self.clock = clock
        self.t0 = clock()
        self.trace = ExecutionTrace(max_steps=max_steps)
        self.memory = MemoryStore(on_access=self._record_memory_access)
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self._envelope_count = 0
        self._current_envelope_id = ""
        self._directive_instructions = load_prompt("directive_format")

    def _record_memory_access(self, record: AccessRecord) -> None:
        self.trace.add_step(
            record.actor,
            "memory_read" if record.mode == "read" else "memory_write",
            self._current_envelope_id,
            f"{record.key} ({'allowed' if record.allowed else 'denied'})",
        )

    def new_envelope(
        self,
        sender: str,
        recipient: str,
        content: str,
        parent: Optional[Envelope],
        extra_metadata: Optional[dict[str, str]] = None,
    ) -> Envelope:
        self._envelope_count += 1
        metadata: dict[str, str] = dict(parent.metadata) if parent else {}
        if extra_metadata:
            metadata.update(extra_metadata)
        envelope = Envelope(
            id=f"env-{self._envelope_count:04d}",
            parent_id=parent.id if parent else None,
            sender=sender,
            recipient=recipient,
            content=content,
            metadata=metadata,
            created_at=self.clock() - self.t0,
        )
        self.trace.register(envelope)
        return envelope

    def llm_call(self, actor: str, conversation: list[ChatMessage], envelope: Envelope):
        self.trace.add_step(actor, "llm_call", envelope.id, f"{len(conversation)} messages")
        response = self.gateway.complete(conversation)
        self.prompt_tokens += response.prompt_tokens
        self.completion_tokens += response.completion_tokens
        return response

    def next_directive(
        self, actor: str, conversation: list[ChatMessage], envelope: Envelope
    ) -> Directive:
        """One directive from the LLM, with a single repair retry on parse failure."""
        for attempt in range(2):
            response = self.llm_call(actor, conversation, envelope)
            conversation.append(ChatMessage(role="assistant", content=response.content))
            try:
                return parse_directive(response.content)
            except DirectiveParseError as exc:
                if attempt == 1:
                    raise
                conversation.append(
                    ChatMessage(role="user", content=REPAIR_TEMPLATE.format(error=exc))
                )
        raise AssertionError("unreachable")

    def agent_turn(self, agent: AgentSpec, envelope: Envelope) -> str:
        self._current_envelope_id = envelope.id
        conversation = [
            ChatMessage(role="system", content=_agent_system_message(agent)),
            ChatMessage(role="user", content=envelope.content),
        ]
        response = self.llm_call(agent.id, conversation, envelope)
        return response.content

    def supervisor_turns(
        self, supervisor: SupervisorSpec, envelope: Envelope, depth: int
    ) -> str:
        is_root = supervisor.id == self.spec.root_supervisor
        system = "\n\n".join(
            [
                supervisor.system_message,
                _roster_text(self.spec, supervisor),
                self._directive_instructions,
            ]
        )
        conversation = [
            ChatMessage(role="system", content=system),
            ChatMessage(role="user", content=envelope.content),
        ]
        while True:
            self._current_envelope_id = envelope.id
            directive = self.next_directive(supervisor.id, conversation, envelope)
            if directive.kind == "final":
                if is_root:
                    self.trace.add_step(supervisor.id, "final", envelope.id, directive.answer)
                return directive.answer
            if directive.kind == "delegate":
                if directive.target not in supervisor.children:
                    raise UnknownTargetError(
                        f"{supervisor.id!r} has no child {directive.target!r}"
                    )
                # route_<n> keys are new at every level, so child metadata is
                # always a strict superset of the parent's
                child_envelope = self.new_envelope(
                    sender=supervisor.id,
                    recipient=directive.target,
                    content=directive.task,
                    parent=envelope,
                    extra_metadata={f"route_{depth + 1}": supervisor.id},
                )
                self.trace.add_step(
                    supervisor.id, "delegate", child_envelope.id, f"-> {directive.target}"
                )
                child_agent = self.spec.find_agent(directive.target)
                if child_agent is not None:
                    result = self.agent_turn(child_agent, child_envelope)
                else:
                    child_supervisor = self.spec.find_supervisor(directive.target)
                    result = self.supervisor_turns(child_supervisor, child_envelope, depth + 1)
                reply = self.new_envelope(
                    sender=directive.target,
                    recipient=supervisor.id,
                    content=result,
                    parent=child_envelope,
                )
                self._current_envelope_id = envelope.id
                conversation.append(
                    ChatMessage(role="user", content=f"[{reply.sender}] result:\n{result}")
                )
                continue
            # tool_call
            tool_spec = self.spec.find_tool(directive.target)
            if tool_spec is None:
                raise UnknownTargetError(
                    f"tool {directive.target!r} is not declared in the workflow"
                )
            output = invoke_tool(
                self.registry,
                tool_spec.handler,
                directive.arguments,
                ToolContext(actor=supervisor.id, memory=self.memory),
            )
            self.trace.add_step(
                supervisor.id, "tool_call", envelope.id, f"{tool_spec.id} -> {output[:80]}"
            )
            conversation.append(ChatMessage(role="tool", content=output))


def execute(
    spec: WorkflowSpec,
    query: str,
    gateway,
    *,
    max_steps: int = DEFAULT_MAX_STEPS,
    registry: Optional[ToolRegistry] = None,
    metadata: Optional[dict[str, str]] = None,
    clock: Callable[[], float] = time.perf_counter,
) -> RunResult:
    """Run a workflow against a query and return the traced result.

    Raises :class:`InvalidWorkflowError` before any gateway call when the spec
    fails validation. All run-time failures (budget, directive parse after one
    repair, unknown targets, gateway errors) propagate with the partial trace
    attached as ``exc.trace``.
    """
    report = validate_workflow(spec)
    if not report.ok:
        raise InvalidWorkflowError(report)
    if not query:
        raise ValueError("query must be non-empty")
    run = _Run(spec, gateway, registry or ToolRegistry.builtin(), max_steps, clock)
    root = spec.find_supervisor(spec.root_supervisor)
    initial = run.new_envelope(
        sender="user",
        recipient=root.id,
        content=query,
        parent=None,
        extra_metadata=dict(metadata or {}),
    )
    try:
        answer = run.supervisor_turns(root, initial, depth=0)
    except (OrchestratorError, GatewayError) as exc:
        if getattr(exc, "trace", None) is None:
            exc.trace = run.trace
        raise
    return RunResult(
        final_answer=answer,
        trace=run.trace,
        prompt_tokens=run.prompt_tokens,
        completion_tokens=run.completion_tokens,
        wall_time=run.clock() - run.t0,
    )
