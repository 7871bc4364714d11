"""flowsmith: synthesize, execute, and refine multi-agent reasoning workflows."""

__version__ = "0.1.0"

from .gateway import (  # noqa: E402
    ChatMessage,
    ChatResponse,
    HttpGateway,
    LlmProfile,
    ScriptedGateway,
    Transcript,
    build_gateway,
    load_transcript,
)
from .model import (  # noqa: E402
    AgentSpec,
    FieldSpec,
    SupervisorSpec,
    ToolSpec,
    ValidationReport,
    WorkflowSpec,
    parse_workflow,
    serialize_workflow,
    spec_digest,
    validate_workflow,
)
from .orchestrator import (  # noqa: E402
    Directive,
    Envelope,
    ExecutionTrace,
    MemoryStore,
    RunResult,
    ToolRegistry,
    execute,
    parse_directive,
)
from .evaluation import (  # noqa: E402
    EvaluationReport,
    QaPair,
    Verdict,
    evaluate,
    judge_exact,
    judge_llm,
    load_dataset,
)
from .refinement import (  # noqa: E402
    FeedbackRecord,
    IprConfig,
    IprReport,
    IterationRecord,
    apply_feedback,
    generate_feedback,
    run_ipr,
    sample_examples,
)
from .synthesis import (  # noqa: E402
    CapabilitiesDoc,
    SynthesisConfig,
    TaskPlan,
    WorkflowBlueprint,
    build,
    decompose,
    design,
    synthesize,
)

__all__ = [
    "__version__",
    "ChatMessage",
    "ChatResponse",
    "HttpGateway",
    "LlmProfile",
    "ScriptedGateway",
    "Transcript",
    "build_gateway",
    "load_transcript",
    "AgentSpec",
    "FieldSpec",
    "SupervisorSpec",
    "ToolSpec",
    "ValidationReport",
    "WorkflowSpec",
    "parse_workflow",
    "serialize_workflow",
    "spec_digest",
    "validate_workflow",
    "Directive",
    "Envelope",
    "ExecutionTrace",
    "MemoryStore",
    "RunResult",
    "ToolRegistry",
    "execute",
    "parse_directive",
    "EvaluationReport",
    "QaPair",
    "Verdict",
    "evaluate",
    "judge_exact",
    "judge_llm",
    "load_dataset",
    "FeedbackRecord",
    "IprConfig",
    "IprReport",
    "IterationRecord",
    "apply_feedback",
    "generate_feedback",
    "run_ipr",
    "sample_examples",
    "CapabilitiesDoc",
    "SynthesisConfig",
    "TaskPlan",
    "WorkflowBlueprint",
    "build",
    "decompose",
    "design",
    "synthesize",
]
