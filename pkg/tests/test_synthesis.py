"""Synthesis pipeline tests: decompose, design, build, end-to-end replay."""

from __future__ import annotations

import hashlib
import json

import pytest
import yaml

from flowsmith.evaluation import LlmJudge, QaPair, load_dataset
from flowsmith.gateway import ScriptedGateway, load_transcript_file
from flowsmith.model import validate_workflow
from flowsmith.refinement import IprConfig
from flowsmith.synthesis import (
    BlueprintError,
    BuildValidationError,
    CapabilitiesDoc,
    StageError,
    SynthesisConfig,
    TaskPlan,
    WorkflowBlueprint,
    build,
    decompose,
    default_capabilities,
    design,
    synthesize,
    validate_blueprint,
)

from conftest import scripted

EXAMPLES = [
    QaPair(id="e1", question="What has keys but no locks?", answer="A piano."),
    QaPair(id="e2", question="What is 2 plus 2?", answer="4"),
]


def plan_response(task_ids=("analyze", "answer", "review")):
    tasks = [
        {"id": tid, "description": f"{tid} the question", "requirements": ["be careful"]}
        for tid in task_ids
    ]
    return "```\n" + yaml.safe_dump({"tasks": tasks}, sort_keys=False) + "```"


def blueprint_doc(agent_children=("analysis", "answering", "review"), tools=(), extra_agent=None):
    agents = [
        {
            "id": aid,
            "purpose": f"{aid} work",
            "inputs": [{"name": "question", "description": "", "kind": "text"}],
            "outputs": [{"name": "result", "description": "", "kind": "text"}],
            "tool_needs": list(tools),
        }
        for aid in agent_children
    ]
    if extra_agent:
        agents.append(extra_agent)
    return {
        "supervisors": [
            {"id": "lead", "purpose": "coordinate", "children": list(agent_children)}
        ],
        "agents": agents,
        "tools": [{"id": t, "purpose": f"use {t}"} for t in tools],
    }


def blueprint_response(**kwargs):
    return "```\n" + yaml.safe_dump(blueprint_doc(**kwargs), sort_keys=False) + "```"


class TestCapabilities:
    def test_default_doc_is_version_stamped(self):
        doc = default_capabilities()
        assert doc.text
        assert doc.version
        assert "delegate" in doc.text  # the directive contract is described

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            CapabilitiesDoc(text="", version="1")


class TestDecompose:
    def test_single_task_plan(self):
        gateway = scripted(plan_response(("solve",)))
        plan = decompose("Answer riddles.", EXAMPLES, default_capabilities(), gateway)
        assert len(plan.tasks) == 1
        assert plan.tasks[0].id == "solve"

    def test_garbage_then_valid_takes_two_calls(self):
        gateway = scripted("thinking...", plan_response())
        plan = decompose("Answer riddles.", EXAMPLES, default_capabilities(), gateway)
        assert len(plan.tasks) == 3
        assert gateway.transcript.cursor == 2

    def test_analysis_answer_review_roster(self, fixtures):
        transcript = load_transcript_file(str(fixtures / "synthesis" / "synthesis.transcript.yaml"))
        gateway = ScriptedGateway(transcript)
        examples = load_dataset(str(fixtures / "synthesis" / "examples.jsonl"))
        task = (fixtures / "synthesis" / "task.txt").read_text(encoding="utf-8")
        plan = decompose(task, examples, default_capabilities(), gateway)
        ids = [t.id for t in plan.tasks]
        assert ids == ["analyze_question", "generate_answer", "review_answer"]

    def test_stage_error_after_retries(self):
        gateway = scripted("nope", "still nope")
        with pytest.raises(StageError) as err:
            decompose("Answer riddles.", EXAMPLES, default_capabilities(), gateway)
        assert err.value.stage == "decompose"

    def test_requires_examples(self):
        with pytest.raises(ValueError):
            decompose("x", [], default_capabilities(), scripted())

    def test_duplicate_task_ids_rejected(self):
        gateway = scripted(plan_response(("a", "a")), plan_response(("a", "b")))
        plan = decompose("x", EXAMPLES, default_capabilities(), gateway)
        assert [t.id for t in plan.tasks] == ["a", "b"]  # repaired on second call


class TestDesign:
    def plan(self):
        return TaskPlan.model_validate(
            {"tasks": [{"id": "solve", "description": "solve", "requirements": []}]}
        )

    def test_valid_blueprint(self):
        gateway = scripted(blueprint_response())
        blueprint = design(self.plan(), default_capabilities(), gateway)
        assert len(blueprint.supervisors) == 1
        assert len(blueprint.agents) == 3
        assert blueprint.root_id() == "lead"

    def test_dangling_child_is_invariant_error(self):
        doc = blueprint_doc()
        doc["supervisors"][0]["children"].append("ghost")
        gateway = scripted("```\n" + yaml.safe_dump(doc) + "```")
        with pytest.raises(BlueprintError) as err:
            design(self.plan(), default_capabilities(), gateway, repair_retries=0)
        assert "ghost" in str(err.value)

    def test_unknown_handler_named_in_error(self):
        gateway = scripted(blueprint_response(tools=("teleporter",)))
        with pytest.raises(BlueprintError) as err:
            design(self.plan(), default_capabilities(), gateway, repair_retries=0)
        assert "teleporter" in str(err.value)

    def test_known_handler_accepted(self):
        gateway = scripted(blueprint_response(tools=("calculator",)))
        blueprint = design(self.plan(), default_capabilities(), gateway)
        assert blueprint.tools[0].id == "calculator"

    def test_validate_blueprint_shared_child(self):
        doc = blueprint_doc()
        doc["supervisors"].append({"id": "second", "purpose": "", "children": ["analysis"]})
        doc["supervisors"][0]["children"] = ["second", "analysis", "answering", "review"]
        blueprint = WorkflowBlueprint.model_validate(doc)
        with pytest.raises(BlueprintError) as err:
            validate_blueprint(blueprint, ["echo", "calculator"])
        assert "multiple parents" in str(err.value)


class TestBuild:
    def blueprint(self, **kwargs):
        return WorkflowBlueprint.model_validate(blueprint_doc(**kwargs))

    def test_build_produces_valid_spec(self):
        gateway = scripted("Lead message.", "Analysis message.", "Answering message.", "Review message.")
        spec = build(self.blueprint(), default_capabilities(), gateway)
        assert validate_workflow(spec).ok
        assert spec.root_supervisor == "lead"
        assert spec.find_agent("analysis").system_message == "Analysis message."

    def test_seed_installed_verbatim(self, fixtures):
        fx = json.loads((fixtures / "replay" / "expected_refined_message.json").read_text())
        gateway = scripted(fx["initial"], "Analysis message.", "Answering message.", "Review message.")
        spec = build(self.blueprint(), default_capabilities(), gateway)
        assert spec.find_supervisor("lead").system_message == fx["initial"]

    def test_fence_wrapped_seed_unwrapped(self):
        gateway = scripted("```\nFenced message.\n```", "a", "b", "c")
        spec = build(self.blueprint(), default_capabilities(), gateway)
        assert spec.find_supervisor("lead").system_message == "Fenced message."

    def test_build_determinism(self):
        def run():
            gateway = scripted("Lead.", "A.", "B.", "C.")
            spec = build(self.blueprint(), default_capabilities(), gateway)
            from flowsmith.model import serialize_workflow

            return hashlib.sha256(serialize_workflow(spec).encode()).hexdigest()

        assert run() == run()

    def test_tools_materialized_from_registry(self):
        gateway = scripted("Lead.", "A.", "B.", "C.")
        spec = build(self.blueprint(tools=("calculator",)), default_capabilities(), gateway)
        tool = spec.find_tool("calculator")
        assert tool.handler == "calculator"
        assert [p.name for p in tool.parameters] == ["expr"]
        assert spec.find_agent("analysis").tool_ids == ["calculator"]

    def test_bad_field_name_fails_post_build_validation(self):
        extra = {
            "id": "odd",
            "purpose": "",
            "inputs": [],
            "outputs": [{"name": "BadName", "description": "", "kind": "text"}],
            "tool_needs": [],
        }
        blueprint = self.blueprint(extra_agent=extra)
        blueprint = blueprint.model_copy(
            update={
                "supervisors": [
                    blueprint.supervisors[0].model_copy(
                        update={"children": ["analysis", "answering", "review", "odd"]}
                    )
                ]
            }
        )
        gateway = scripted("Lead.", "A.", "B.", "C.", "Odd.")
        with pytest.raises(BuildValidationError) as err:
            build(blueprint, default_capabilities(), gateway)
        assert any(i.code.value == "BAD_FIELD_NAME" for i in err.value.report.issues)


class TestSynthesize:
    def fixture_inputs(self, fixtures):
        task = (fixtures / "synthesis" / "task.txt").read_text(encoding="utf-8")
        examples = load_dataset(str(fixtures / "synthesis" / "examples.jsonl"))
        return task, examples

    def gateway(self, fixtures):
        transcript = load_transcript_file(str(fixtures / "synthesis" / "synthesis.transcript.yaml"))
        return ScriptedGateway(transcript)

    def config(self, tmp_path, **ipr_kwargs):
        defaults = dict(max_iterations=5, sample_size=2, pass_threshold=1.0, seed=0, judge_mode="llm")
        defaults.update(ipr_kwargs)
        return SynthesisConfig(
            repair_retries=1,
            stage_profiles={},
            output_dir=str(tmp_path / "out"),
            ipr=IprConfig(**defaults),
        )

    def test_full_pipeline_emits_artifacts(self, fixtures, tmp_path):
        task, examples = self.fixture_inputs(fixtures)
        gateway = self.gateway(fixtures)
        result = synthesize(
            task, examples, None, self.config(tmp_path), gateway,
            judge=LlmJudge(gateway), clock=lambda: 0.0,
        )
        out = tmp_path / "out"
        assert (out / "final.workflow.yaml").exists()
        assert (out / "ipr_report.json").exists()
        assert (out / "report.csv").exists()
        assert (out / "iteration_0.workflow.yaml").exists()
        assert validate_workflow(result.spec).ok
        # threshold met at the baseline: a single iteration record, no feedback
        assert len(result.report.iterations) == 1
        assert result.report.iterations[0].sample_pass_rate == 1
        report_doc = json.loads((out / "ipr_report.json").read_text())
        assert report_doc["iterations"][0]["index"] == 0

    def test_emitted_spec_profile_is_scripted_for_replay(self, fixtures, tmp_path):
        task, examples = self.fixture_inputs(fixtures)
        gateway = self.gateway(fixtures)
        result = synthesize(
            task, examples, None, self.config(tmp_path), gateway,
            judge=LlmJudge(gateway), clock=lambda: 0.0,
        )
        assert result.spec.llm_profile.provider == "scripted"

    def test_stage_error_preserves_partials(self, fixtures, tmp_path):
        task, examples = self.fixture_inputs(fixtures)
        # decompose succeeds, design replies garbage twice -> stage error
        entries = load_transcript_file(str(fixtures / "synthesis" / "synthesis.transcript.yaml"))
        from flowsmith.gateway import Transcript, TranscriptEntry

        first = entries.entries[0]
        gateway = ScriptedGateway(
            Transcript(
                [
                    first,
                    TranscriptEntry(matcher="any", response="not a blueprint"),
                    TranscriptEntry(matcher="any", response="still not"),
                ]
            )
        )
        with pytest.raises(StageError) as err:
            synthesize(
                task, examples, None, self.config(tmp_path), gateway,
                judge=LlmJudge(gateway), clock=lambda: 0.0,
            )
        assert err.value.stage == "design"
        out = tmp_path / "out"
        assert (out / "task_plan.yaml").exists()
        assert not (out / "final.workflow.yaml").exists()

    def test_rerun_is_byte_identical(self, fixtures, tmp_path):
        task, examples = self.fixture_inputs(fixtures)

        def run(tag):
            gateway = self.gateway(fixtures)
            out_dir = tmp_path / tag
            config = SynthesisConfig(
                repair_retries=1, stage_profiles={}, output_dir=str(out_dir),
                ipr=IprConfig(max_iterations=5, sample_size=2, pass_threshold=1.0, seed=0, judge_mode="llm"),
            )
            synthesize(task, examples, None, config, gateway, judge=LlmJudge(gateway), clock=lambda: 0.0)
            return {
                p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                for p in sorted(out_dir.iterdir())
            }

        assert run("first") == run("second")
