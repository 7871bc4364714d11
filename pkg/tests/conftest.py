"""Shared fixtures and builders for the test suite."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest
import yaml

from flowsmith.gateway import ScriptedGateway, Transcript, TranscriptEntry
from flowsmith.model import (
    AgentSpec,
    FieldKind,
    FieldSpec,
    SupervisorSpec,
    WorkflowSpec,
    parse_workflow_file,
)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


# ---------------------------------------------------------------------------
# scripted-gateway builders
# ---------------------------------------------------------------------------


def entry(response=None, error=None, contains=None) -> TranscriptEntry:
    if contains is not None:
        return TranscriptEntry(matcher="contains", text=contains, response=response, error=error)
    return TranscriptEntry(matcher="any", response=response, error=error)


def scripted(*responses: str, max_retries: int = 3) -> ScriptedGateway:
    """Gateway replaying the given responses in order."""
    return ScriptedGateway(
        Transcript([entry(response=r) for r in responses]), max_retries=max_retries
    )


def scripted_entries(entries: list[TranscriptEntry], max_retries: int = 3) -> ScriptedGateway:
    return ScriptedGateway(Transcript(list(entries)), max_retries=max_retries)


def write_transcript(path: Path, entries: list[TranscriptEntry]) -> str:
    doc = {"entries": [e.model_dump(exclude_none=True) for e in entries]}
    path.write_text(
        yaml.safe_dump(doc, sort_keys=False, allow_unicode=True, width=4096), encoding="utf-8"
    )
    return str(path)


def final_block(answer: str) -> str:
    indented = "\n".join("  " + line for line in answer.splitlines())
    return f"```directive\nkind: final\nanswer: |-\n{indented}\n```"


def delegate_block(target: str, task: str) -> str:
    return f"```directive\nkind: delegate\ntarget: {target}\ntask: {task}\n```"


def tool_block(target: str, arguments: dict) -> str:
    args = yaml.safe_dump({"arguments": arguments}, sort_keys=False).rstrip()
    return f"```directive\nkind: tool_call\ntarget: {target}\n{args}\n```"


def verdict_response(passed: bool, note: str = "Judged.") -> str:
    return f"{note}\nVERDICT: {'PASS' if passed else 'FAIL'}"


def feedback_block(target_id: str, guideline: str, issue: str = "The answer missed the mark.") -> str:
    doc = {
        "records": [
            {
                "target_id": target_id,
                "issue": issue,
                "root_cause": "The system message lacks a guideline covering this case.",
                "action": "MODIFY",
                "guideline_change": guideline,
            }
        ]
    }
    return "```\n" + yaml.safe_dump(doc, sort_keys=False, width=4096) + "```"


def trajectory_entries(examples, schedule, target_id: str) -> list[TranscriptEntry]:
    """Scripted entries for a refinement run over ``examples``.

    ``schedule[k]`` is the set of example ids that fail at iteration k. Each
    iteration contributes one run + one judge entry per example (in example
    order) and, unless it is the last scheduled iteration, one feedback entry
    per failure carrying an iteration-specific guideline.
    """
    entries: list[TranscriptEntry] = []
    for k, failing in enumerate(schedule):
        for example in examples:
            ok = example.id not in failing
            answer = example.answer if ok else f"wrong answer for {example.id} at iteration {k}"
            entries.append(entry(response=final_block(answer)))
            entries.append(entry(response=verdict_response(ok), contains="VERDICT"))
        if k < len(schedule) - 1:
            for example in examples:
                if example.id in failing:
                    entries.append(
                        entry(
                            response=feedback_block(
                                target_id,
                                f"Handle inputs like {example.id} correctly (iteration {k} fix).",
                            )
                        )
                    )
    return entries


# ---------------------------------------------------------------------------
# spec builders
# ---------------------------------------------------------------------------


def text_field(name: str) -> FieldSpec:
    return FieldSpec(name=name, description="", kind=FieldKind.TEXT)


def single_agent_spec(
    supervisor_id: str = "root", agent_id: str = "worker", tools=()
) -> WorkflowSpec:
    return WorkflowSpec(
        name="test_workflow",
        description="",
        root_supervisor=supervisor_id,
        supervisors=[
            SupervisorSpec(
                id=supervisor_id,
                system_message="Coordinate the worker and report its answer.",
                children=[agent_id],
            )
        ],
        agents=[
            AgentSpec(
                id=agent_id,
                role="Answers tasks.",
                system_message="Answer the task you are given.",
                outputs=[text_field("answer")],
            )
        ],
        tools=list(tools),
    )


def load_fixture_spec(stem: str) -> WorkflowSpec:
    return parse_workflow_file(str(FIXTURES / "specs" / "valid" / f"{stem}.workflow.yaml"))


def load_spec_lenient(path: Path) -> WorkflowSpec:
    """Shape-validate only; used for the malformed corpus (parse would also
    reject duplicate ids before validation gets to report them)."""
    return WorkflowSpec.model_validate(yaml.safe_load(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# randomized delegation trees with matching walkthrough transcripts
# ---------------------------------------------------------------------------


def random_tree_spec(rng, max_children: int = 3, max_depth: int = 2) -> WorkflowSpec:
    """Random supervision tree: every supervisor gets 1..max_children children,
    each child being a sub-supervisor (while depth remains) or an agent."""
    supervisors: list[SupervisorSpec] = []
    agents: list[AgentSpec] = []
    counter = {"s": 0, "a": 0}

    def new_agent() -> str:
        counter["a"] += 1
        agent_id = f"agent_{counter['a']}"
        agents.append(
            AgentSpec(
                id=agent_id,
                role="worker",
                system_message=f"You are {agent_id}; answer the task.",
                outputs=[text_field("answer")],
            )
        )
        return agent_id

    def new_supervisor(depth: int) -> str:
        counter["s"] += 1
        sup_id = f"sup_{counter['s']}"
        children = []
        for _ in range(rng.randint(1, max_children)):
            if depth < max_depth and rng.random() < 0.4:
                children.append(new_supervisor(depth + 1))
            else:
                children.append(new_agent())
        supervisors.append(
            SupervisorSpec(
                id=sup_id,
                system_message=f"You are {sup_id}; split the task among your children.",
                children=children,
            )
        )
        return sup_id

    root = new_supervisor(0)
    return WorkflowSpec(
        name="random_tree",
        description="",
        root_supervisor=root,
        supervisors=supervisors,
        agents=agents,
        tools=[],
    )


def walkthrough_entries(spec: WorkflowSpec, sup_id: str | None = None) -> list[TranscriptEntry]:
    """Scripted responses driving a full depth-first walk of the tree: each
    supervisor delegates to every child in order, then finalizes."""
    sup = spec.find_supervisor(sup_id or spec.root_supervisor)
    entries: list[TranscriptEntry] = []
    for child in sup.children:
        entries.append(entry(response=delegate_block(child, f"task for {child}")))
        if spec.find_agent(child) is not None:
            entries.append(entry(response=f"answer from {child}"))
        else:
            entries.extend(walkthrough_entries(spec, child))
    entries.append(entry(response=final_block(f"done by {sup.id}")))
    return entries


# ---------------------------------------------------------------------------
# local OpenAI-compatible stub endpoint
# ---------------------------------------------------------------------------


class StubEndpoint:
    """Threaded HTTP server scripting /chat/completions responses.

    ``script`` is a list of (status, payload) pairs consumed per request; when
    it runs out, a 200 with a default completion is served. Every request body
    and header set is recorded.
    """

    def __init__(self):
        self.script: list[tuple[int, dict]] = []
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        self.paths: list[str] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                outer.requests.append(body)
                outer.headers.append({k: v for k, v in self.headers.items()})
                outer.paths.append(self.path)
                if outer.script:
                    status, payload = outer.script.pop(0)
                else:
                    status, payload = 200, outer.default_payload()
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @staticmethod
    def default_payload(content: str = "ok") -> dict:
        return {
            "choices": [{"message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": 7, "completion_tokens": 3},
        }

    @staticmethod
    def completion(content: str, usage: bool = True) -> tuple[int, dict]:
        payload = {"choices": [{"message": {"role": "assistant", "content": content}}]}
        if usage:
            payload["usage"] = {"prompt_tokens": 7, "completion_tokens": 3}
        return 200, payload

    @property
    def base_url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}/v1"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_endpoint():
    endpoint = StubEndpoint()
    yield endpoint
    endpoint.close()
