"""Desk-scale adaptive reasoning pipeline.

Merge a long-reasoning and a short-reasoning checkpoint into a hybrid,
build a bi-level (group + instance) preference dataset from sampled
responses, preference-train a toy autoregressive policy with exact
gradients, and evaluate length/accuracy trade-offs with the same
aggregators used for published benchmark tables.
"""

from .answers import extract_answer, judge_correct, normalize_answer
from .checkpoints import (
    CheckpointError,
    CompatReport,
    MergeSpec,
    NamedTensorCollection,
    TensorRecord,
    load_checkpoint,
    merge_linear,
    save_checkpoint,
    validate_compat,
)
from .corpus import (
    GROUP_LONG,
    GROUP_SHORT,
    CorpusError,
    Problem,
    ResponseSample,
    SampleSet,
    filter_hopeless,
    gain_histogram,
    gain_vs_length,
    ingest_problems,
    ingest_samples,
    judge_sample_sets,
)
from .dpo import (
    DpoPair,
    TrainConfig,
    TrainResult,
    dpo_grad,
    dpo_loss,
    pairs_to_batch,
    sft_grad,
    sft_loss,
    train,
)
from .metrics import (
    BenchmarkResult,
    EvalReport,
    avg_accuracy_change,
    avg_length_change,
    per_level_breakdown,
    thinking_ratio,
)
from .pipeline import PipelineConfig, explain_decision, run_pipeline
from .policy import BOS, EOS, ToyPolicy, sample_response, sequence_logprob
from .prefs import (
    BuilderConfig,
    GroupPreference,
    PreferencePair,
    build_dataset,
    build_group_pairs,
    build_instance_pairs,
    decide_group,
    group_accuracy,
)
from .world import (
    WorldSpec,
    SyntheticProblem,
    build_vocab,
    gen_problems,
    gen_samples,
    grade_rollout,
    oracle_metrics,
    oracle_preference,
    reference_policies,
)

__version__ = "0.1.0"
