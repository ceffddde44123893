"""Layered multi-agent pipeline: heterogeneous sampling, inter-agent attention,
aggregation, summarization, and residual synthesis with adaptive early stopping.
"""

from .accounting import (
    CacheModel,
    CostReport,
    CostRow,
    TokenizerError,
    TokenizerSpec,
    count_tokens,
    effective_prompt_tokens,
    effective_tokens,
    prompt_text,
    register_tokenizer,
    resolve_tokenizer,
    summarize_costs,
)
from .backends import (
    Backend,
    BackendError,
    BackendKind,
    ChatRequest,
    ChatResult,
    EmptyCompletionError,
    HttpBackend,
    LengthModel,
    MalformedResponseError,
    MockBackend,
    RecordingBackend,
    RemoteStatusError,
    ReplayBackend,
    ReplayMissError,
    RetryPolicy,
    TransportError,
    complete,
    mock_complete,
    request_key,
    shaped_mock_complete,
)
from .calls import CallPlan, Dispatcher, StageError, UnknownBackendError
from .config import ConfigError, RunSetup, default_roster, default_setup, load_config
from .datasets import DatasetEntry, DatasetError, EntryResult, load_dataset, run_dataset, run_dataset_async
from .judge import (
    AnswerEntry,
    AnswerPair,
    JudgeError,
    JudgeRun,
    JudgeVerdict,
    judge_pairs,
    judge_pairs_async,
    load_answers,
    pair_answers,
    parse_verdict,
)
from .model import (
    SCHEMA_VERSION,
    AgentResponse,
    AgentSpec,
    AttentionInstruction,
    AttentionKind,
    AttentionMode,
    CallRecord,
    GenParams,
    HistoryStack,
    HistoryStackError,
    LayerKind,
    LayerOutput,
    LayerTranscript,
    ModelError,
    Phase,
    PipelineConfig,
    QueryContext,
    ResidualRecord,
    Role,
    RosterError,
    RunTranscript,
    Stage,
    TerminationSignal,
    TranscriptError,
    UsageRecord,
    canonical_json,
    validate_roster,
)
from .pipeline import PipelineRunError, run, run_async
from .report import Report, build_report, load_transcripts, write_report
from .templates import (
    STOP_SENTINEL,
    MalformedSuggestionError,
    RenderedPrompt,
    SuggestionMap,
    TemplateError,
    detect_stop_sentinel,
    parse_singlepass,
    render_aggregation,
    render_cross_pairwise,
    render_cross_singlepass,
    render_judge,
    render_residual,
    render_sampling,
    render_self_attention,
    render_summarization,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
