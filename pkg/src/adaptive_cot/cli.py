"""Command-line interface.

One binary orchestrates the full pipeline and exposes each stage as a
subcommand. Exit codes: 0 success, 2 validation error (bad flags,
config, or input files), 3 stage failure inside a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import corpus as corpus_mod
from .checkpoints import (
    CheckpointError,
    MergeSpec,
    load_checkpoint,
    merge_linear,
    save_checkpoint,
)
from .corpus import CorpusError
from .dpo import TrainConfig, pairs_to_batch, train
from .metrics import BenchmarkResult
from .pipeline import (
    ConfigError,
    PipelineConfig,
    PipelineStageError,
    as_synthetic,
    evaluate_rollouts,
    explain_decision,
    pair_records,
    read_problems,
    run_pipeline,
    write_jsonl,
    write_json,
    write_problems,
    write_rollouts,
    write_samples,
)
from .policy import PolicyError, ToyPolicy, sample_response
from .prefs import BuilderConfig, build_dataset
from .prefs import PreferencePair
from .corpus import ResponseSample
from .seeding import derive_seed
from .world import (
    WorldSpec,
    gen_problems,
    gen_samples,
    grade_rollout,
    problem_features,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3


def _world_from_config(path: str | None) -> WorldSpec:
    if path is None:
        return WorldSpec()
    return PipelineConfig.load(path, env={}).world


def _load_sets(problems_path, samples_path, k=None, judge=False):
    problems = corpus_mod.ingest_problems(problems_path)
    sets = corpus_mod.ingest_samples(samples_path, problems, expected_k=k)
    if judge:
        corpus_mod.judge_sample_sets(sets, problems)
    return problems, sets


# -- subcommand handlers -----------------------------------------------------


def _cmd_merge(args) -> int:
    long_c = load_checkpoint(args.long)
    short_c = load_checkpoint(args.short)
    merged = merge_linear(
        long_c, short_c, MergeSpec(alpha=args.alpha), union=args.union, workers=args.workers
    )
    save_checkpoint(merged, args.out)
    print(f"merged {len(merged)} tensors at alpha={args.alpha} -> {args.out}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    world = _world_from_config(args.config)
    problems = gen_problems(world, args.n, derive_seed(args.seed, "problems"))
    sets = gen_samples(world, problems, args.k, derive_seed(args.seed, "samples"))
    write_problems(problems, args.out_problems)
    write_samples(sets, args.out_samples)
    print(f"wrote {len(problems)} problems -> {args.out_problems}")
    print(f"wrote {sum(len(s.long_samples) + len(s.short_samples) for s in sets)} samples -> {args.out_samples}")
    return EXIT_OK


def _cmd_ingest(args) -> int:
    problems, sets = _load_sets(args.problems, args.samples, k=args.k)
    n_samples = sum(len(s.long_samples) + len(s.short_samples) for s in sets)
    print(f"problems: {len(problems)}")
    print(f"sample sets: {len(sets)} ({n_samples} samples)")
    return EXIT_OK


def _cmd_judge(args) -> int:
    problems, sets = _load_sets(args.problems, args.samples, judge=True)
    write_samples(sets, args.out, include_correct=True)
    n_correct = sum(
        sum(1 for s in ss.long_samples + ss.short_samples if s.correct) for ss in sets
    )
    n_total = sum(len(ss.long_samples) + len(ss.short_samples) for ss in sets)
    print(f"judged {n_total} samples, {n_correct} correct -> {args.out}")
    return EXIT_OK


def _cmd_analyze_gain(args) -> int:
    _, sets = _load_sets(args.problems, args.samples, judge=True)
    sets = corpus_mod.filter_hopeless(sets)
    hist = corpus_mod.gain_histogram(sets, n_bins=args.bins)
    out = {
        "histogram": {
            "edges": [float(e) for e in hist.edges],
            "masses": [float(m) for m in hist.masses],
        },
        "gain_at_or_below_zero": hist.mass_at_or_below(0.0),
        "gain_vs_length": [
            {"mean_length": b.mean_length, "mean_gain": b.mean_gain, "n": b.n_problems}
            for b in corpus_mod.gain_vs_length(sets, min(args.bins, len(sets)))
        ],
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_build_prefs(args) -> int:
    _, sets = _load_sets(args.problems, args.samples, k=args.k, judge=True)
    sets = corpus_mod.filter_hopeless(sets)
    cfg = BuilderConfig(
        k=args.k,
        epsilon=args.epsilon,
        m1=args.m1,
        m2=args.m2,
        seed=args.seed,
        correct_chosen_only=args.correct_chosen_only,
    )
    result = build_dataset(sets, cfg)
    write_jsonl(args.out, pair_records(result))
    print(
        f"built {len(result.group_pairs)} group + {len(result.instance_pairs)} instance pairs -> {args.out}"
    )
    return EXIT_OK


def _read_pairs(path):
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            r = json.loads(line)
            chosen = ResponseSample(
                problem_id=r["problem_id"],
                group=r["preferred_group"],
                text=r["chosen_text"],
                token_length=r["chosen_len"],
                correct=True,
            )
            other = r["preferred_group"] if r["level"] == "instance" else (
                "short" if r["preferred_group"] == "long" else "long"
            )
            rejected = ResponseSample(
                problem_id=r["problem_id"],
                group=other,
                text=r["rejected_text"],
                token_length=r["rejected_len"],
                correct=False if r["level"] == "group" else None,
            )
            if r["level"] == "instance" and rejected.token_length <= chosen.token_length:
                raise CorpusError(f"pair {r.get('pair_id')}: instance pair not strictly longer")
            pairs.append(
                PreferencePair(
                    problem_id=r["problem_id"], chosen=chosen, rejected=rejected, level=r["level"]
                )
            )
    return pairs


def _cmd_train(args) -> int:
    world = _world_from_config(args.config)
    policy = ToyPolicy.load(args.init)
    pairs = _read_pairs(args.prefs)
    problems = [as_synthetic(p) for p in read_problems(args.problems)]
    features = {p.id: problem_features(world, p) for p in problems}
    batch = pairs_to_batch(pairs, features)
    cfg = TrainConfig(
        beta=args.beta,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
    )
    result = train(policy, batch, cfg, objective=args.objective)
    result.policy.save(args.out)
    if args.log:
        write_jsonl(args.log, result.log)
    print(f"trained on {len(batch)} pairs; final loss {result.loss_history[-1]:.6f} -> {args.out}")
    return EXIT_OK


def _cmd_rollout(args) -> int:
    world = _world_from_config(args.config)
    policy = ToyPolicy.load(args.policy)
    problems = [as_synthetic(p) for p in read_problems(args.problems)]
    rollouts = []
    for problem in problems:
        tokens = sample_response(
            policy,
            problem_features(world, problem),
            temperature=args.temperature,
            max_len=args.max_len,
            seed=derive_seed(args.seed, "rollout", problem.id),
        )
        rollouts.append(grade_rollout(world, problem, tokens, derive_seed(args.seed, "rollout-grade")))
    write_rollouts(rollouts, args.out)
    print(f"rolled out {len(rollouts)} problems -> {args.out}")
    return EXIT_OK


def _read_rollouts(path, problems):
    sets = corpus_mod.ingest_samples(path, {p.id: p for p in problems})
    rollouts = []
    for sample_set in sets:
        rollouts.extend(sample_set.long_samples + sample_set.short_samples)
    if any(r.correct is None for r in rollouts):
        raise CorpusError("rollouts file must carry judged 'correct' flags")
    return rollouts


def _cmd_eval(args) -> int:
    world = _world_from_config(args.config)
    problems = [as_synthetic(p) for p in read_problems(args.problems)]
    rollouts = _read_rollouts(args.rollouts, problems)
    baseline = None
    if args.baseline:
        with open(args.baseline, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        rows = data["benchmarks"] if isinstance(data, dict) else data
        baseline = [
            BenchmarkResult(r["name"], r["accuracy"], r["mean_length"]) for r in rows
        ]
    report = evaluate_rollouts(
        world,
        problems,
        rollouts,
        epsilon=args.epsilon,
        keywords=tuple(args.keywords.split(",")),
        accuracy_mode=args.mode,
        baseline=baseline,
    )
    if args.out:
        write_json(args.out, report.to_dict())
    print(report.render(), end="")
    return EXIT_OK


def _cmd_run(args) -> int:
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    config = PipelineConfig.load(args.config, overrides=overrides)
    result = run_pipeline(config)
    print(f"run complete -> {result.run_dir}")
    print(result.report.render(), end="")
    return EXIT_OK


def _cmd_explain(args) -> int:
    print(explain_decision(args.problem, args.run))
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adacot",
        description="Adaptive long/short reasoning pipeline at desk scale.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="linearly interpolate two checkpoints")
    p.add_argument("--long", required=True)
    p.add_argument("--short", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--union", action="store_true", help="pass through one-sided tensors")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("simulate", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-problems", required=True)
    p.add_argument("--out-samples", required=True)
    p.add_argument("--config", help="pipeline config supplying the world section")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("ingest", help="validate problems and samples files")
    p.add_argument("--problems", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--k", type=int, default=None, help="expected samples per side")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("judge", help="judge samples against gold answers")
    p.add_argument("--problems", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_judge)

    p = sub.add_parser("analyze-gain", help="long-over-short gain analytics")
    p.add_argument("--problems", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=_cmd_analyze_gain)

    p = sub.add_parser("build-prefs", help="construct the bi-level preference dataset")
    p.add_argument("--problems", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--m1", type=int, default=4)
    p.add_argument("--m2", type=int, default=2)
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--correct-chosen-only", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_prefs)

    p = sub.add_parser("train", help="preference-train a policy checkpoint")
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefs", required=True, help="pairs file from build-prefs")
    p.add_argument("--init", required=True, help="initial policy checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--problems", required=True, help="problems file for features")
    p.add_argument("--objective", choices=("dpo", "sft"), default="dpo")
    p.add_argument("--log", help="write {epoch, batch, loss} records here")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("rollout", help="sample and grade responses on problems")
    p.add_argument("--policy", required=True)
    p.add_argument("--problems", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_rollout)

    p = sub.add_parser("eval", help="evaluate rollouts against a baseline")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--problems", required=True)
    p.add_argument("--baseline", help="JSON report with baseline benchmark rows")
    p.add_argument("--mode", choices=("macro-ratio", "mean-relative"), default="macro-ratio")
    p.add_argument("--keywords", default="wait,recheck")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--out", help="also write the report as JSON")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("run", help="execute the full pipeline from a config")
    p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    p.add_argument("--out", help="override out_dir")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (dotted)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("explain", help="trace one problem's preference decision")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--problem", required=True)
    p.set_defaults(func=_cmd_explain)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except PipelineStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (
        ConfigError,
        CorpusError,
        CheckpointError,
        PolicyError,
        ValueError,
        KeyError,
        FileNotFoundError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
