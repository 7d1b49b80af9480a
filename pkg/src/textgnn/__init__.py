"""Multi-layer text refinement over graphs, with chat-completion backends as
the aggregation step, plus the zero-shot evaluation and judging protocols
built on top of it."""

from .cache import CacheEntry, CacheIntegrityError, RepresentationCache
from .config import BackendSpec, EncoderConfig, RunConfig, TaskSpec, load_run_config
from .encoder import (
    EncodePlan,
    EncodingAborted,
    LayeredRepresentation,
    denoise_attributes,
    encode,
    encode_corrupted,
    encoding_key,
    plan_receptive_field,
)
from .evaluation import (
    ClassificationItem,
    EvalReport,
    LinkItem,
    build_classification_items,
    build_link_items,
    link_working_graph,
    metric_from_records,
    parse_answer,
    run_ablation_grid,
    run_link_prediction,
    run_node_classification,
)
from .gateway import (
    CompletionRequest,
    CompletionResponse,
    Gateway,
    HttpChatBackend,
    MockBackend,
    UsageLedger,
    usage_report,
)
from .graph import TextGraph, corrupt_attributes, load_graph, load_labels, save_graph
from .judge import JudgeStudy, run_judge_study
from .prompts import (
    PromptBundle,
    build_all_in_one_prompt,
    build_denoise_prompt,
    build_judge_prompt,
    build_link_prediction_prompt,
    build_message_prompt,
    build_node_classification_prompt,
    build_promptgfm_prompt,
    parse_final_representation,
    render_final_representation,
)
from .sampling import (
    SampleSpec,
    corrupt_neighborhood,
    sample_negatives,
    sample_neighbors,
    sample_task_edges,
    sample_task_nodes,
    sample_two_hop,
)

__version__ = "0.1.0"
