"""Command-line entry point.

Thin client over the library: each command parses inputs, resolves the
gateway (``--transcript`` swaps any live endpoint for a scripted replay, and
also pins the run clock so emitted files are byte-stable), calls the library,
and writes the library's artifacts. Exit codes are a stable contract:
0 success, 1 input/config error, 2 pipeline/execution error.

Secrets only come from the environment (``LLM_API_KEY``, ``LLM_BASE_URL``),
never from flags.
"""

from __future__ import annotations

import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import NoReturn, Optional

import click
import yaml

from . import __version__
from .evaluation import (
    DatasetError,
    EmptyEvaluationError,
    JudgeParseError,
    build_judge,
    evaluate,
    load_dataset,
    report_to_csv,
    report_to_json,
)
from .gateway import (
    GatewayError,
    HttpGateway,
    LlmProfile,
    ScriptedGateway,
    TranscriptFormatError,
    load_transcript_file,
)
from .model import WorkflowParseError, parse_workflow_file, validate_workflow
from .orchestrator import InvalidWorkflowError, OrchestratorError, execute
from .refinement import (
    FeedbackParseError,
    IprConfig,
    merged_csv,
    run_ipr,
    sample_examples,
)
from .synthesis import StageError, SynthesisConfig, emit_artifacts, synthesize
from .synthesis import CapabilitiesDoc, default_capabilities

INPUT_ERRORS = (
    WorkflowParseError,
    DatasetError,
    TranscriptFormatError,
    InvalidWorkflowError,
    EmptyEvaluationError,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
    ValueError,
    yaml.YAMLError,
)

PIPELINE_ERRORS = (
    StageError,
    OrchestratorError,
    GatewayError,
    JudgeParseError,
    FeedbackParseError,
)


@dataclass
class CliConfig:
    """Shared command configuration resolved from flags."""

    profile_path: Optional[str]
    output_dir: Path
    seed: int
    runs: int
    judge_mode: str
    verbosity: int

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        self.output_dir.mkdir(parents=True, exist_ok=True)


def _fail(exc: Exception) -> NoReturn:
    if isinstance(exc, INPUT_ERRORS):
        code = 1
    elif isinstance(exc, PIPELINE_ERRORS):
        code = 2
    else:
        raise exc
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load_profile(path: str) -> LlmProfile:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh.read())
    if not isinstance(data, dict):
        raise ValueError(f"profile file {path} must be a YAML mapping")
    return LlmProfile.model_validate(data)


def _resolve_gateway(profile_path, transcript_path, spec=None):
    """Gateway plus the clock to run with.

    Precedence: a transcript forces the scripted backend; otherwise an
    explicit profile file; otherwise the profile embedded in the workflow.
    Replay pins the clock to zero so wall-time fields in emitted files are
    reproducible.
    """
    profile = None
    if profile_path:
        profile = _load_profile(profile_path)
    elif spec is not None:
        profile = spec.llm_profile
    if transcript_path:
        transcript = load_transcript_file(transcript_path)
        max_retries = profile.max_retries if profile is not None else 3
        return ScriptedGateway(transcript, max_retries=max_retries), (lambda: 0.0)
    if profile is None:
        raise ValueError("no LLM profile configured (use --profile or --transcript)")
    if profile.provider == "scripted":
        raise ValueError("scripted profile requires --transcript")
    return HttpGateway(profile), time.perf_counter


@click.group()
@click.version_option(version=__version__, prog_name="flowsmith")
def cli() -> None:
    """Synthesize, execute, evaluate, and refine multi-agent workflows."""


@cli.command("run")
@click.argument("workflow_file", type=click.Path(dir_okay=False))
@click.argument("query")
@click.option("--transcript", type=click.Path(dir_okay=False), default=None)
@click.option("--profile", "profile_path", type=click.Path(), default=None)
@click.option("--max-steps", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default=None)
@click.option("-v", "--verbose", count=True)
def cmd_run(workflow_file, query, transcript, profile_path, max_steps, trace_path, verbose):
    """Execute a workflow against one query; print the final answer."""
    _setup_logging(verbose)
    try:
        spec = parse_workflow_file(workflow_file)
        report = validate_workflow(spec)
        if not report.ok:
            click.echo(report.render(), err=True)
            sys.exit(1)
        gateway, clock = _resolve_gateway(profile_path, transcript, spec)
    except Exception as exc:
        _fail(exc)
    try:
        result = execute(spec, query, gateway, max_steps=max_steps, clock=clock)
    except Exception as exc:
        trace = getattr(exc, "trace", None)
        if trace_path and trace is not None:
            Path(trace_path).write_text(trace.to_jsonl(), encoding="utf-8")
        _fail(exc)
    if trace_path:
        Path(trace_path).write_text(result.trace.to_jsonl(), encoding="utf-8")
    click.echo(result.final_answer)


@cli.command("evaluate")
@click.argument("workflow_file", type=click.Path(dir_okay=False))
@click.argument("dataset_file", type=click.Path(dir_okay=False))
@click.option("--transcript", type=click.Path(dir_okay=False), default=None)
@click.option("--profile", "profile_path", type=click.Path(), default=None)
@click.option(
    "--judge",
    "judge_mode",
    type=click.Choice(["exact", "substring", "llm"]),
    default="llm",
    show_default=True,
)
@click.option("--output", "-o", "output_dir", type=click.Path(file_okay=False), default=".")
@click.option("--workers", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--max-steps", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("-v", "--verbose", count=True)
def cmd_evaluate(
    workflow_file, dataset_file, transcript, profile_path, judge_mode, output_dir, workers, max_steps, verbose
):
    """Run a workflow over a QA dataset and report the pass rate."""
    _setup_logging(verbose)
    try:
        spec = parse_workflow_file(workflow_file)
        vreport = validate_workflow(spec)
        if not vreport.ok:
            click.echo(vreport.render(), err=True)
            sys.exit(1)
        dataset = load_dataset(dataset_file)
        gateway, clock = _resolve_gateway(profile_path, transcript, spec)
        judge = build_judge(judge_mode, gateway)
    except Exception as exc:
        _fail(exc)
    try:
        report = evaluate(
            spec, dataset, gateway, judge, max_steps=max_steps, clock=clock, workers=workers
        )
    except Exception as exc:
        _fail(exc)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report_to_json(report), encoding="utf-8")
    (out / "report.csv").write_text(report_to_csv(report), encoding="utf-8")
    click.echo(f"pass_rate={report.pass_rate_display}")


@cli.command("ipr")
@click.argument("workflow_file", type=click.Path(dir_okay=False))
@click.argument("dataset_file", type=click.Path(dir_okay=False))
@click.option("--transcript", type=click.Path(dir_okay=False), default=None)
@click.option("--profile", "profile_path", type=click.Path(), default=None)
@click.option("--iterations", type=click.IntRange(min=0), default=5, show_default=True)
@click.option("--sample", "sample_size", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threshold", type=click.FloatRange(min=0, min_open=True, max=1), default=1.0, show_default=True)
@click.option(
    "--judge",
    "judge_mode",
    type=click.Choice(["exact", "substring", "llm"]),
    default="llm",
    show_default=True,
)
@click.option("--full/--no-full", "full_eval", default=False, help="Also evaluate the refined workflow on the full dataset.")
@click.option("--output", "-o", "output_dir", type=click.Path(file_okay=False), default=".")
@click.option("--workers", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--max-steps", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("-v", "--verbose", count=True)
def cmd_ipr(
    workflow_file,
    dataset_file,
    transcript,
    profile_path,
    iterations,
    sample_size,
    seed,
    threshold,
    judge_mode,
    full_eval,
    output_dir,
    workers,
    max_steps,
    verbose,
):
    """Iteratively refine a workflow's system messages against sampled examples."""
    _setup_logging(verbose)
    try:
        spec = parse_workflow_file(workflow_file)
        vreport = validate_workflow(spec)
        if not vreport.ok:
            click.echo(vreport.render(), err=True)
            sys.exit(1)
        dataset = load_dataset(dataset_file)
        examples = sample_examples(dataset, sample_size, seed)
        gateway, clock = _resolve_gateway(profile_path, transcript, spec)
        judge = build_judge(judge_mode, gateway)
        config = IprConfig(
            max_iterations=iterations,
            sample_size=sample_size,
            pass_threshold=threshold,
            seed=seed,
            judge_mode="llm" if judge_mode == "llm" else "exact",
        )
    except Exception as exc:
        _fail(exc)
    try:
        result = run_ipr(
            spec,
            examples,
            dataset if full_eval else None,
            gateway,
            judge,
            config,
            clock=clock,
            workers=workers,
        )
    except Exception as exc:
        _fail(exc)
    emit_artifacts(Path(output_dir), result)
    for record in result.report.iterations:
        click.echo(
            f"iteration {record.index}: sample_pass_rate="
            f"{_render(record.sample_pass_rate)}"
        )
    if result.report.final_full_pass_rate is not None:
        click.echo(f"full_pass_rate={_render(result.report.final_full_pass_rate)}")


def _render(fraction):
    from .evaluation import render_fraction

    return render_fraction(fraction)


@cli.command("synthesize")
@click.argument("task_file", type=click.Path(dir_okay=False))
@click.argument("examples_file", type=click.Path(dir_okay=False))
@click.option("--transcript", type=click.Path(dir_okay=False), default=None)
@click.option("--profile", "profile_path", type=click.Path(), default=None)
@click.option("--runs", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--iterations", type=click.IntRange(min=0), default=5, show_default=True)
@click.option("--sample", "sample_size", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--threshold", type=click.FloatRange(min=0, min_open=True, max=1), default=1.0, show_default=True)
@click.option(
    "--judge",
    "judge_mode",
    type=click.Choice(["exact", "substring", "llm"]),
    default="llm",
    show_default=True,
)
@click.option("--full/--no-full", "full_eval", default=False)
@click.option("--capabilities", "capabilities_path", type=click.Path(dir_okay=False), default=None)
@click.option("--name", default="synthesized_workflow", show_default=True)
@click.option("--output", "-o", "output_dir", type=click.Path(file_okay=False), default="synthesis_out")
@click.option("--workers", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("-v", "--verbose", count=True)
def cmd_synthesize(
    task_file,
    examples_file,
    transcript,
    profile_path,
    runs,
    seed,
    iterations,
    sample_size,
    threshold,
    judge_mode,
    full_eval,
    capabilities_path,
    name,
    output_dir,
    workers,
    verbose,
):
    """Synthesize a refined workflow from a task description plus examples.

    Runs the full pipeline ``--runs`` times with seeds seed, seed+1, ...;
    each run samples its own examples and writes to ``run_<k>/`` under the
    output directory. A merged report.csv aggregates all runs.
    """
    _setup_logging(verbose)
    try:
        cli_config = CliConfig(
            profile_path=profile_path,
            output_dir=Path(output_dir),
            seed=seed,
            runs=runs,
            judge_mode=judge_mode,
            verbosity=verbose,
        )
        user_prompt = Path(task_file).read_text(encoding="utf-8")
        if not user_prompt.strip():
            raise ValueError(f"task file {task_file} is empty")
        dataset = load_dataset(examples_file)
        gateway, clock = _resolve_gateway(profile_path, transcript)
        doc = None
        if capabilities_path:
            doc = CapabilitiesDoc(
                text=Path(capabilities_path).read_text(encoding="utf-8"), version=__version__
            )
        else:
            doc = default_capabilities()
        stage_profiles = {}
        if profile_path:
            stage_profiles["default"] = _load_profile(profile_path)
    except Exception as exc:
        _fail(exc)

    reports = []
    try:
        for run_index in range(cli_config.runs):
            run_seed = cli_config.seed + run_index
            examples = sample_examples(dataset, min(sample_size, len(dataset)), run_seed)
            config = SynthesisConfig(
                repair_retries=1,
                stage_profiles=stage_profiles,
                output_dir=str(cli_config.output_dir / f"run_{run_index}"),
                ipr=IprConfig(
                    max_iterations=iterations,
                    sample_size=len(examples),
                    pass_threshold=threshold,
                    seed=run_seed,
                    judge_mode="llm" if judge_mode == "llm" else "exact",
                ),
            )
            judge = build_judge(judge_mode, gateway)
            result = synthesize(
                user_prompt,
                examples,
                dataset if full_eval else None,
                config,
                gateway,
                judge=judge,
                doc=doc,
                name=name,
                clock=clock,
                workers=workers,
            )
            reports.append(result.report)
            click.echo(f"run {run_index}: final spec at run_{run_index}/final.workflow.yaml")
    except Exception as exc:
        _fail(exc)
    (cli_config.output_dir / "report.csv").write_text(merged_csv(reports), encoding="utf-8")


@cli.command("replay", context_settings={"ignore_unknown_options": True})
@click.option("--transcript", required=True, type=click.Path(dir_okay=False))
@click.argument("command", type=click.Choice(["run", "evaluate", "ipr", "synthesize"]))
@click.argument("args", nargs=-1, type=click.UNPROCESSED)
def cmd_replay(transcript, command, args):
    """Run any command against a transcript file instead of a live endpoint."""
    argv = [command, "--transcript", transcript, *args]
    try:
        cli.main(args=argv, prog_name="flowsmith", standalone_mode=False)
    except SystemExit as exc:
        sys.exit(exc.code)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)


def main() -> None:
    # ClickException (usage/config mistakes) maps to the input-error exit code.
    try:
        cli.main(standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)


if __name__ == "__main__":
    main()
