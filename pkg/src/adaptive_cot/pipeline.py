"""End-to-end pipeline: merge, simulate, judge, build preferences, train,
roll out, evaluate.

A run is driven by one declarative config (JSON file, overridable by
environment variables and flags), derives every stage seed from the
global seed via labeled hashing, and writes each intermediate artifact
into the run directory. Rerunning the same config reproduces the report
byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .checkpoints import MergeSpec, NamedTensorCollection, load_checkpoint, merge_linear
from .corpus import GROUP_LONG, Problem, ResponseSample, SampleSet
from .dpo import TrainConfig, pairs_to_batch, train
from .metrics import (
    BenchmarkResult,
    EvalReport,
    avg_accuracy_change,
    avg_length_change,
    per_level_breakdown,
    thinking_ratio,
)
from .policy import ToyPolicy, sample_response
from .prefs import BuilderConfig, BuildResult, build_dataset
from .seeding import derive_seed
from .world import (
    SyntheticProblem,
    WorldSpec,
    classify_mode,
    gen_problems,
    gen_samples,
    grade_rollout,
    oracle_metrics,
    oracle_preference,
    problem_features,
    reference_policies,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "PipelineStageError",
    "PipelineConfig",
    "RunResult",
    "run_pipeline",
    "explain_decision",
    "write_problems",
    "read_problems",
    "write_samples",
    "write_rollouts",
    "ENV_PREFIX",
]

ENV_PREFIX = "ADACOT_"


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SimulateSection:
    n_problems: int = 500
    n_eval: int = 500
    k: int = 12
    problems_path: str | None = None  # ingest instead of simulating
    samples_path: str | None = None


@dataclass(frozen=True)
class MergeSection:
    alpha: float = 0.5
    long_checkpoint: str | None = None   # None: synthesize from the world
    short_checkpoint: str | None = None
    union: bool = False


@dataclass(frozen=True)
class BuilderSection:
    epsilon: float = 0.10
    m1: int = 4
    m2: int = 2
    correct_chosen_only: bool = False


@dataclass(frozen=True)
class TrainSection:
    beta: float = 0.1
    learning_rate: float = 0.1
    epochs: int = 2
    batch_size: int = 32
    max_grad_norm: float | None = None
    mix: str = "both"        # both | group | instance
    objective: str = "dpo"   # dpo | sft

    def __post_init__(self) -> None:
        if self.mix not in ("both", "group", "instance"):
            raise ConfigError(f"train.mix must be both|group|instance, got {self.mix!r}")
        if self.objective not in ("dpo", "sft"):
            raise ConfigError(f"train.objective must be dpo|sft, got {self.objective!r}")


@dataclass(frozen=True)
class RolloutSection:
    temperature: float = 1.0
    max_len: int = 512


@dataclass(frozen=True)
class EvalSection:
    keywords: tuple[str, ...] = ("wait", "recheck")
    accuracy_mode: str = "macro-ratio"


_SECTIONS = {
    "world": WorldSpec,
    "simulate": SimulateSection,
    "merge": MergeSection,
    "builder": BuilderSection,
    "train": TrainSection,
    "rollout": RolloutSection,
    "eval": EvalSection,
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    world: WorldSpec = field(default_factory=WorldSpec)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    merge: MergeSection = field(default_factory=MergeSection)
    builder: BuilderSection = field(default_factory=BuilderSection)
    train: TrainSection = field(default_factory=TrainSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- dict / file round-trip ----------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        raw = dict(raw)
        kwargs = {}
        for key in ("seed", "out_dir"):
            if key in raw:
                kwargs[key] = raw.pop(key)
        for name, section_cls in _SECTIONS.items():
            section_raw = raw.pop(name, {})
            if not isinstance(section_raw, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(section_cls)}
            unknown = set(section_raw) - known
            if unknown:
                raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(unknown)}")
            coerced = {
                k: tuple(v) if isinstance(v, list) else v for k, v in section_raw.items()
            }
            try:
                kwargs[name] = section_cls(**coerced)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid section {name!r}: {exc}") from exc
        if raw:
            raise ConfigError(f"unknown top-level config key(s): {sorted(raw)}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        def plain(value):
            if dataclasses.is_dataclass(value):
                return {f.name: plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
            if isinstance(value, tuple):
                return [plain(v) for v in value]
            return value

        return plain(self)

    @classmethod
    def load(cls, path=None, env: dict | None = None, overrides: dict | None = None) -> "PipelineConfig":
        """Resolve file -> environment -> explicit overrides, in that order.

        Environment keys look like ``ADACOT_TRAIN__BETA=0.05`` (JSON-parsed
        values); overrides use dotted keys like ``train.beta``.
        """
        raw: dict = {}
        if path is not None:
            with open(path, "r", encoding="utf-8") as fh:
                try:
                    raw = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"config file {path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError("config file must contain a JSON object")
        env = dict(os.environ if env is None else env)
        for key, value in sorted(env.items()):
            if not key.startswith(ENV_PREFIX):
                continue
            dotted = key[len(ENV_PREFIX) :].lower().replace("__", ".")
            _assign(raw, dotted, _parse_value(value))
        for dotted, value in (overrides or {}).items():
            _assign(raw, dotted, value)
        return cls.from_dict(raw)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _assign(raw: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted!r}: {part!r} is not a section")
    node[parts[-1]] = value


# ---------------------------------------------------------------------------
# file formats


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_problems(problems: list[Problem], path) -> None:
    write_jsonl(
        path,
        (
            {
                "id": p.id,
                "statement": p.statement,
                "gold_answer": p.gold_answer,
                "difficulty": p.difficulty,
                "source": p.source,
            }
            for p in problems
        ),
    )


def read_problems(path) -> list[Problem]:
    by_id = corpus_mod.ingest_problems(path)
    return [by_id[pid] for pid in sorted(by_id)]


def _sample_record(sample: ResponseSample, include_correct: bool) -> dict:
    record = {
        "problem_id": sample.problem_id,
        "group": sample.group,
        "text": sample.text,
        "token_count": sample.token_length,
    }
    if include_correct and sample.correct is not None:
        record["correct"] = sample.correct
    return record


def write_samples(sets: list[SampleSet], path, include_correct: bool = False) -> None:
    records = []
    for sample_set in sets:
        for sample in sample_set.long_samples + sample_set.short_samples:
            records.append(_sample_record(sample, include_correct))
    write_jsonl(path, records)


def write_rollouts(rollouts: list[ResponseSample], path) -> None:
    write_jsonl(path, (_sample_record(r, include_correct=True) for r in rollouts))


def as_synthetic(problem: Problem) -> SyntheticProblem:
    if isinstance(problem, SyntheticProblem):
        return problem
    if problem.difficulty is None:
        raise ConfigError(f"problem {problem.id!r} has no difficulty label")
    return SyntheticProblem(
        id=problem.id,
        statement=problem.statement,
        gold_answer=problem.gold_answer,
        difficulty=problem.difficulty,
        source=problem.source,
        level=problem.difficulty,
    )


def pair_records(result: BuildResult) -> list[dict]:
    preferred = {p.problem_id: p.preferred for p in result.prefs}
    counters: dict[tuple[str, str], int] = {}
    records = []
    for level_name, pairs in (("group", result.group_pairs), ("instance", result.instance_pairs)):
        for pair in pairs:
            n = counters.get((pair.problem_id, level_name), 0)
            counters[(pair.problem_id, level_name)] = n + 1
            records.append(
                {
                    "pair_id": f"{pair.problem_id}#{level_name}{n}",
                    "problem_id": pair.problem_id,
                    "level": level_name,
                    "chosen_text": pair.chosen.text,
                    "rejected_text": pair.rejected.text,
                    "chosen_len": pair.chosen.token_length,
                    "rejected_len": pair.rejected.token_length,
                    "preferred_group": preferred[pair.problem_id],
                }
            )
    records.sort(key=lambda r: (r["problem_id"], r["level"], r["pair_id"]))
    return records


# ---------------------------------------------------------------------------
# the run itself


@dataclass
class RunResult:
    run_dir: Path
    config: PipelineConfig
    report: EvalReport
    problems: list[SyntheticProblem]
    eval_problems: list[SyntheticProblem]
    rollouts: list[ResponseSample]
    build: BuildResult
    trained: ToyPolicy
    loss_history: list[float]


def _stage(name: str, run_dir: Path):
    """Context that tags failures with the stage name and leaves a marker."""

    class _Ctx:
        def __enter__(self):
            logger.info("stage %s", name)
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None:
                write_json(run_dir / "FAILED.json", {"stage": name, "error": str(exc)})
                raise PipelineStageError(name, exc) from exc
            return False

    return _Ctx()


def _resolve_checkpoint(path_str: str | None, fallback: ToyPolicy, out_path: Path) -> NamedTensorCollection:
    if path_str is None:
        collection = fallback.to_collection()
        out_path.parent.mkdir(parents=True, exist_ok=True)
        from .checkpoints import save_checkpoint

        save_checkpoint(collection, out_path)
        return collection
    path = Path(path_str)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def run_pipeline(config: PipelineConfig) -> RunResult:
    """Execute the full pipeline under ``config.out_dir``."""
    run_dir = Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    failed_marker = run_dir / "FAILED.json"
    if failed_marker.exists():
        failed_marker.unlink()
    write_json(run_dir / "config.json", config.to_dict())
    world = config.world
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    # -- merge ---------------------------------------------------------------
    with _stage("merge", run_dir):
        ref_long, ref_short = reference_policies(world)
        long_c = _resolve_checkpoint(config.merge.long_checkpoint, ref_long, ckpt_dir / "long.safetensors")
        short_c = _resolve_checkpoint(config.merge.short_checkpoint, ref_short, ckpt_dir / "short.safetensors")
        hybrid_c = merge_linear(long_c, short_c, MergeSpec(alpha=config.merge.alpha), union=config.merge.union)
        from .checkpoints import save_checkpoint

        save_checkpoint(hybrid_c, ckpt_dir / "hybrid.safetensors")
        hybrid = ToyPolicy.from_collection(hybrid_c, vocab=ToyPolicy.from_collection(long_c).vocab)

    # -- simulate / ingest ---------------------------------------------------
    with _stage("simulate", run_dir):
        if config.simulate.problems_path:
            if not config.simulate.samples_path:
                raise ConfigError("simulate.samples_path required when ingesting problems")
            problems = [as_synthetic(p) for p in read_problems(config.simulate.problems_path)]
            sets = corpus_mod.ingest_samples(
                config.simulate.samples_path,
                {p.id: p for p in problems},
                expected_k=config.simulate.k,
            )
            eval_problems = problems
        else:
            problems = gen_problems(world, config.simulate.n_problems, derive_seed(config.seed, "problems"))
            eval_problems = gen_problems(world, config.simulate.n_eval, derive_seed(config.seed, "eval-problems"))
            sets = gen_samples(world, problems, config.simulate.k, derive_seed(config.seed, "samples"))
        write_problems(problems, run_dir / "problems.jsonl")
        write_problems(eval_problems, run_dir / "eval_problems.jsonl")
        write_samples(sets, run_dir / "samples.jsonl")

    # -- judge ---------------------------------------------------------------
    with _stage("judge", run_dir):
        by_id = {p.id: p for p in problems}
        corpus_mod.judge_sample_sets(sets, by_id)
        write_samples(sets, run_dir / "judged_samples.jsonl", include_correct=True)

    # -- filter ----------------------------------------------------------------
    with _stage("filter", run_dir):
        kept, dropped = corpus_mod.partition_hopeless(sets)
        write_json(
            run_dir / "filtered.json",
            {
                "kept": len(kept),
                "dropped": len(dropped),
                "dropped_problem_ids": sorted(s.problem_id for s in dropped),
            },
        )

    # -- build-prefs -----------------------------------------------------------
    with _stage("build-prefs", run_dir):
        builder_cfg = BuilderConfig(
            k=config.simulate.k,
            epsilon=config.builder.epsilon,
            m1=config.builder.m1,
            m2=config.builder.m2,
            seed=derive_seed(config.seed, "build-prefs"),
            correct_chosen_only=config.builder.correct_chosen_only,
        )
        build = build_dataset(kept, builder_cfg)
        records = pair_records(build)
        write_jsonl(run_dir / "pairs.jsonl", records)
        ids_by_problem: dict[str, dict[str, list[str]]] = {}
        for record in records:
            slot = ids_by_problem.setdefault(record["problem_id"], {"group": [], "instance": []})
            slot[record["level"]].append(record["pair_id"])
        write_jsonl(
            run_dir / "prefs.jsonl",
            (
                {
                    "problem_id": p.problem_id,
                    "e_long": p.e_long,
                    "e_short": p.e_short,
                    "epsilon": p.epsilon,
                    "preferred": p.preferred,
                    "group_pair_ids": ids_by_problem.get(p.problem_id, {}).get("group", []),
                    "instance_pair_ids": ids_by_problem.get(p.problem_id, {}).get("instance", []),
                }
                for p in build.prefs
            ),
        )
        write_json(run_dir / "builder_stats.json", build.stats)

    # -- train -----------------------------------------------------------------
    with _stage("train", run_dir):
        if config.train.mix == "group":
            selected = build.group_pairs
        elif config.train.mix == "instance":
            selected = build.instance_pairs
        else:
            selected = build.all_pairs
        features = {p.id: problem_features(world, p) for p in problems}
        batch = pairs_to_batch(selected, features)
        train_cfg = TrainConfig(
            beta=config.train.beta,
            learning_rate=config.train.learning_rate,
            epochs=config.train.epochs,
            batch_size=config.train.batch_size,
            seed=derive_seed(config.seed, "train"),
            max_grad_norm=config.train.max_grad_norm,
        )
        outcome = train(hybrid, batch, train_cfg, objective=config.train.objective)
        trained = outcome.policy
        trained.save(ckpt_dir / "trained.safetensors")
        write_jsonl(run_dir / "train_log.jsonl", outcome.log)

    # -- rollout -----------------------------------------------------------------
    with _stage("rollout", run_dir):
        rollouts = []
        for problem in eval_problems:
            tokens = sample_response(
                trained,
                problem_features(world, problem),
                temperature=config.rollout.temperature,
                max_len=config.rollout.max_len,
                seed=derive_seed(config.seed, "rollout", problem.id),
            )
            rollouts.append(grade_rollout(world, problem, tokens, derive_seed(config.seed, "rollout-grade")))
        write_rollouts(rollouts, run_dir / "rollouts.jsonl")

    # -- eval -----------------------------------------------------------------
    with _stage("eval", run_dir):
        report = evaluate_rollouts(
            world,
            eval_problems,
            rollouts,
            epsilon=config.builder.epsilon,
            keywords=config.eval.keywords,
            accuracy_mode=config.eval.accuracy_mode,
        )
        write_json(run_dir / "eval_report.json", report.to_dict())
        with open(run_dir / "report.txt", "w", encoding="utf-8") as fh:
            fh.write(report.render())

    return RunResult(
        run_dir=run_dir,
        config=config,
        report=report,
        problems=problems,
        eval_problems=eval_problems,
        rollouts=rollouts,
        build=build,
        trained=trained,
        loss_history=outcome.loss_history,
    )


def evaluate_rollouts(
    world: WorldSpec,
    problems: list[SyntheticProblem],
    rollouts: list[ResponseSample],
    epsilon: float,
    keywords=("wait", "recheck"),
    accuracy_mode: str = "macro-ratio",
    baseline: list[BenchmarkResult] | None = None,
) -> EvalReport:
    """Per-level benchmark rows versus the always-long oracle baseline,
    plus thinking and adaptivity statistics."""
    by_id = {p.id: p for p in problems}
    by_level: dict[int, list[ResponseSample]] = {}
    for rollout in rollouts:
        by_level.setdefault(by_id[rollout.problem_id].level, []).append(rollout)

    rows = []
    base_rows = []
    for level in sorted(by_level):
        d = world.level_index(level)
        items = by_level[level]
        rows.append(
            BenchmarkResult(
                name=f"level-{level}",
                accuracy=100.0 * float(np.mean([r.correct for r in items])),
                mean_length=float(np.mean([r.token_length for r in items])),
            )
        )
        base_rows.append(
            BenchmarkResult(
                name=f"level-{level}",
                accuracy=100.0 * world.a_long[d],
                mean_length=world.len_long[d],
            )
        )
    if baseline is not None:
        base_rows = baseline

    oracle = oracle_metrics(world, epsilon)
    agreement = [
        rollout.group == oracle_preference(world, by_id[rollout.problem_id].level, epsilon)
        for rollout in rollouts
    ]
    report = EvalReport(
        benchmarks=rows,
        baseline=base_rows,
        avg_length_change=avg_length_change(rows, base_rows),
        avg_accuracy_change=avg_accuracy_change(rows, base_rows, mode=accuracy_mode),
        accuracy_mode=accuracy_mode,
        thinking=thinking_ratio(rollouts, keywords),
        per_level=per_level_breakdown(problems, rollouts, keywords),
        extras={
            "mode_agreement": float(np.mean(agreement)),
            "mean_rollout_length": float(np.mean([r.token_length for r in rollouts])),
            "rollout_accuracy": float(np.mean([r.correct for r in rollouts])),
            "oracle_always_long": dataclasses.asdict(oracle.always_long),
            "oracle_always_short": dataclasses.asdict(oracle.always_short),
            "oracle_adaptive": dataclasses.asdict(oracle.adaptive),
        },
    )
    return report


# ---------------------------------------------------------------------------
# decision traces


def explain_decision(problem_id: str, run_dir) -> str:
    """Reconstruct why a problem produced (or did not produce) pairs."""
    run_dir = Path(run_dir)
    filtered_path = run_dir / "filtered.json"
    prefs_path = run_dir / "prefs.jsonl"
    if not prefs_path.exists() or not filtered_path.exists():
        raise FileNotFoundError(f"run directory {run_dir} has no builder outputs")
    with open(filtered_path, "r", encoding="utf-8") as fh:
        filtered = json.load(fh)
    if problem_id in filtered.get("dropped_problem_ids", []):
        return f"{problem_id}: removed: both groups fail completely"
    with open(prefs_path, "r", encoding="utf-8") as fh:
        for line in fh:
            record = json.loads(line)
            if record["problem_id"] == problem_id:
                margin = record["e_long"] - record["e_short"]
                lines = [
                    f"{problem_id}: preferred group = {record['preferred']}",
                    f"  E[C_long] = {record['e_long']:.4f}",
                    f"  E[C_short] = {record['e_short']:.4f}",
                    f"  margin = {margin:.4f} (epsilon = {record['epsilon']})",
                    f"  group pairs: {', '.join(record['group_pair_ids']) or '(none)'}",
                    f"  instance pairs: {', '.join(record['instance_pair_ids']) or '(none)'}",
                ]
                return "\n".join(lines)
    raise KeyError(f"unknown problem id {problem_id!r}")
