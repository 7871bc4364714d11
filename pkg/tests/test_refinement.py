"""Refinement loop tests: sampling, feedback records, patching, iteration."""

from __future__ import annotations

import json
import logging
from fractions import Fraction

import pytest

from flowsmith.evaluation import LlmJudge, QaPair, load_dataset
from flowsmith.gateway import ScriptedGateway, load_transcript_file
from flowsmith.model import parse_workflow_file, serialize_workflow, spec_digest
from flowsmith.refinement import (
    FeedbackRecord,
    IprConfig,
    apply_feedback,
    generate_feedback,
    ipr_report_to_csv,
    ipr_report_to_json,
    run_ipr,
    sample_examples,
)

from conftest import (
    FIXTURES,
    feedback_block,
    scripted,
    single_agent_spec,
    trajectory_entries,
    scripted_entries,
)


@pytest.fixture(scope="module")
def dataset_158():
    return load_dataset(str(FIXTURES / "datasets" / "riddles_158.jsonl"))


class TestSampleExamples:
    def test_full_sample_is_permutation(self, dataset_158):
        sample = sample_examples(dataset_158, len(dataset_158), seed=7)
        assert sorted(p.id for p in sample) == sorted(p.id for p in dataset_158)

    def test_same_seed_same_ids(self, dataset_158):
        first = [p.id for p in sample_examples(dataset_158, 10, seed=5)]
        second = [p.id for p in sample_examples(dataset_158, 10, seed=5)]
        assert first == second

    def test_different_seeds_differ(self, dataset_158):
        a = [p.id for p in sample_examples(dataset_158, 10, seed=1)]
        b = [p.id for p in sample_examples(dataset_158, 10, seed=2)]
        assert a != b

    def test_golden_sample_seed_42(self, dataset_158):
        golden = json.loads(
            (FIXTURES / "datasets" / "golden_sample_seed42.json").read_text(encoding="utf-8")
        )
        sample = sample_examples(dataset_158, golden["n"], golden["seed"])
        assert [p.id for p in sample] == golden["ids"]

    def test_oversized_sample_rejected(self, dataset_158):
        with pytest.raises(ValueError):
            sample_examples(dataset_158, 159, seed=0)

    def test_dataset_not_mutated(self, dataset_158):
        before = [p.id for p in dataset_158]
        sample_examples(dataset_158, 10, seed=3)
        assert [p.id for p in dataset_158] == before


class TestFeedbackRecord:
    def test_guideline_required_for_modify(self):
        with pytest.raises(ValueError):
            FeedbackRecord(target_id="x", issue="i", action="MODIFY", guideline_change="")

    def test_none_needs_no_guideline(self):
        record = FeedbackRecord(target_id="x", issue="i", action="NONE")
        assert record.guideline_change == ""


class TestApplyFeedback:
    def test_modify_appends_guideline_block(self, fixtures):
        fx = json.loads((fixtures / "replay" / "expected_refined_message.json").read_text())
        spec = parse_workflow_file(str(fixtures / "specs" / "valid" / "riddle.workflow.yaml"))
        record = FeedbackRecord(
            target_id="riddle_supervisor",
            issue="Trick question answered literally.",
            root_cause="No guideline about punchline answers.",
            action="MODIFY",
            guideline_change=fx["guideline"],
        )
        patched = apply_feedback(spec, record)
        assert patched.supervisors[0].system_message == fx["refined"]

    def test_modify_idempotent(self, fixtures):
        fx = json.loads((fixtures / "replay" / "expected_refined_message.json").read_text())
        spec = parse_workflow_file(str(fixtures / "specs" / "valid" / "riddle.workflow.yaml"))
        record = FeedbackRecord(
            target_id="riddle_supervisor", issue="i", action="MODIFY",
            guideline_change=fx["guideline"],
        )
        once = apply_feedback(spec, record)
        twice = apply_feedback(once, record)
        assert twice == once

    def test_none_is_identity(self):
        spec = single_agent_spec()
        record = FeedbackRecord(target_id="root", issue="i", action="NONE")
        assert apply_feedback(spec, record) == spec

    def test_rewrite_replaces_message(self):
        spec = single_agent_spec()
        record = FeedbackRecord(
            target_id="worker", issue="i", action="REWRITE", guideline_change="New message."
        )
        patched = apply_feedback(spec, record)
        assert patched.find_agent("worker").system_message == "New message."

    def test_patch_locality(self):
        spec = single_agent_spec()
        record = FeedbackRecord(
            target_id="root", issue="i", action="MODIFY", guideline_change="Extra guideline."
        )
        patched = apply_feedback(spec, record)
        # undoing the one targeted field restores byte-identical serialization
        restored = patched.model_copy(
            update={
                "supervisors": [
                    s.model_copy(update={"system_message": spec.supervisors[0].system_message})
                    for s in patched.supervisors
                ]
            }
        )
        assert serialize_workflow(restored) == serialize_workflow(spec)


class TestGenerateFeedback:
    def example(self):
        return QaPair(id="e1", question="Why?", answer="Because.")

    def test_scripted_records(self):
        spec = single_agent_spec()
        gateway = scripted(feedback_block("root", "Always check the premise."))
        records = generate_feedback(None, self.example(), "bad answer", spec, gateway)
        assert len(records) == 1
        assert records[0].action == "MODIFY"
        assert records[0].target_id == "root"

    def test_unknown_target_dropped_with_warning(self, caplog):
        spec = single_agent_spec()
        gateway = scripted(feedback_block("phantom", "Do better."))
        with caplog.at_level(logging.WARNING):
            records = generate_feedback(None, self.example(), "bad", spec, gateway)
        assert records == []
        assert any("phantom" in message for message in caplog.messages)

    def test_garbage_then_valid_takes_two_calls(self):
        spec = single_agent_spec()
        gateway = scripted("no block here", feedback_block("root", "Be careful."))
        records = generate_feedback(None, self.example(), "bad", spec, gateway)
        assert len(records) == 1
        assert gateway.transcript.cursor == 2

    def test_parse_error_after_retry(self):
        spec = single_agent_spec()
        gateway = scripted("nope", "records: {}")
        with pytest.raises(Exception):
            generate_feedback(None, self.example(), "bad", spec, gateway)


def make_examples(n):
    return [QaPair(id=f"ex{i:02d}", question=f"question {i}?", answer=f"answer {i}") for i in range(n)]


def config(**kwargs):
    defaults = dict(max_iterations=5, sample_size=10, pass_threshold=1.0, seed=0, judge_mode="llm")
    defaults.update(kwargs)
    return IprConfig(**defaults)


class TestRunIpr:
    def test_all_pass_at_baseline(self):
        examples = make_examples(2)
        entries = trajectory_entries(examples, [set()], "root")
        gateway = scripted_entries(entries)
        result = run_ipr(
            single_agent_spec(), examples, None, gateway, LlmJudge(gateway),
            config(sample_size=2),
        )
        assert len(result.report.iterations) == 1
        assert result.report.iterations[0].sample_pass_rate == 1
        assert result.report.iterations[0].feedback == []
        assert result.spec == single_agent_spec()

    def test_two_iteration_recovery(self):
        examples = make_examples(2)
        schedule = [{"ex01"}, set()]
        gateway = scripted_entries(trajectory_entries(examples, schedule, "root"))
        result = run_ipr(
            single_agent_spec(), examples, None, gateway, LlmJudge(gateway),
            config(sample_size=2),
        )
        rates = [it.sample_pass_rate for it in result.report.iterations]
        assert rates == [Fraction(1, 2), Fraction(1)]
        assert result.report.iterations[0].failures == ["ex01"]
        assert len(result.report.iterations[0].feedback) == 1
        assert result.report.iterations[1].feedback == []
        assert gateway.transcript.cursor == len(gateway.transcript.entries)

    def test_snapshot_integrity(self):
        examples = make_examples(2)
        schedule = [{"ex00"}, {"ex00"}, set()]
        gateway = scripted_entries(trajectory_entries(examples, schedule, "root"))
        result = run_ipr(
            single_agent_spec(), examples, None, gateway, LlmJudge(gateway),
            config(sample_size=2),
        )
        assert len(result.snapshots) == 3
        for record, snapshot in zip(result.report.iterations, result.snapshots):
            assert record.spec_hash == spec_digest(snapshot)
        # consecutive snapshots differ because each iteration applied feedback
        assert len({r.spec_hash for r in result.report.iterations}) == 3

    def test_max_iterations_exhaustion(self):
        examples = make_examples(1)
        schedule = [{"ex00"}, {"ex00"}, {"ex00"}]
        gateway = scripted_entries(trajectory_entries(examples, schedule, "root"))
        result = run_ipr(
            single_agent_spec(), examples, None, gateway, LlmJudge(gateway),
            config(max_iterations=2, sample_size=1),
        )
        assert len(result.report.iterations) == 3  # baseline + 2 refinements
        assert all(it.sample_pass_rate == 0 for it in result.report.iterations)

    def test_final_full_pass_rate(self):
        examples = make_examples(1)
        dataset = make_examples(3)
        entries = trajectory_entries(examples, [set()], "root")
        entries += trajectory_entries(dataset, [set()], "root")
        gateway = scripted_entries(entries)
        result = run_ipr(
            single_agent_spec(), examples, dataset, gateway, LlmJudge(gateway),
            config(sample_size=1),
        )
        assert result.report.final_full_pass_rate == 1

    def test_appendix_replay_via_api(self, fixtures):
        fx = json.loads((fixtures / "replay" / "expected_refined_message.json").read_text())
        spec = parse_workflow_file(str(fixtures / "specs" / "valid" / "riddle.workflow.yaml"))
        examples = load_dataset(str(fixtures / "replay" / "watch.jsonl"))
        transcript = load_transcript_file(str(fixtures / "replay" / "appendix_b.transcript.yaml"))
        gateway = ScriptedGateway(transcript)
        result = run_ipr(
            spec, examples, None, gateway, LlmJudge(gateway), config(sample_size=1)
        )
        rates = [it.sample_pass_rate for it in result.report.iterations]
        assert rates == [Fraction(0), Fraction(1)]
        assert result.spec.supervisors[0].system_message == fx["refined"]

    def test_reproducibility(self):
        examples = make_examples(2)
        schedule = [{"ex01"}, set()]

        def run_once():
            gateway = scripted_entries(trajectory_entries(examples, schedule, "root"))
            result = run_ipr(
                single_agent_spec(), examples, None, gateway, LlmJudge(gateway),
                config(sample_size=2),
            )
            return ipr_report_to_json(result.report)

        assert run_once() == run_once()

    def test_exact_threshold_of_decimal_float(self):
        # 0.8 must mean exactly 4/5: a 4/5 pass rate stops the loop
        examples = make_examples(5)
        gateway = scripted_entries(trajectory_entries(examples, [{"ex00"}], "root"))
        result = run_ipr(
            single_agent_spec(), examples, None, gateway, LlmJudge(gateway),
            config(sample_size=5, pass_threshold=0.8),
        )
        assert len(result.report.iterations) == 1
        assert result.report.iterations[0].sample_pass_rate == Fraction(4, 5)


class TestReportRenderers:
    def make_report(self):
        examples = make_examples(2)
        gateway = scripted_entries(trajectory_entries(examples, [{"ex00"}, set()], "root"))
        return run_ipr(
            single_agent_spec(), examples, None, gateway, LlmJudge(gateway),
            config(sample_size=2, seed=11),
        ).report

    def test_json_schema(self):
        report = self.make_report()
        doc = json.loads(ipr_report_to_json(report))
        assert doc["seed"] == 11
        assert doc["sample_ids"] == ["ex00", "ex01"]
        assert [it["sample_pass_rate"] for it in doc["iterations"]] == ["1/2", "1"]
        assert doc["iterations"][0]["feedback"][0]["action"] == "MODIFY"

    def test_csv_rows(self):
        report = self.make_report()
        lines = ipr_report_to_csv(report, run_index=3).strip().splitlines()
        assert lines[0] == "run,iteration,sample_pass_rate,full_pass_rate"
        assert lines[1] == "3,0,0.5000,"
        assert lines[2] == "3,1,1.0000,"
