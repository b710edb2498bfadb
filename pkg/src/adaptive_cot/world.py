"""Synthetic difficulty-graded problem world.

A fully specified generative environment standing in for real math
benchmarks: problems carry a difficulty level; a "long" generator thinks
out loud (slow, more accurate on hard levels) and a "short" generator
answers directly (fast, accurate on easy levels). Accuracy and length
laws are declared per level, so every downstream quantity has an exact
oracle. By construction the long-over-short accuracy gain is
non-decreasing in difficulty while long responses cost far more tokens.

The world also supplies reference long/short policies whose sampling
distributions match its generators, and it grades policy rollouts: a
rollout's reasoning mode determines its success probability on a problem
of a given level. Mode is detected by the presence of the deliberation
keyword, not by template tokens: every long response interleaves "wait"
markers through its filler run, short responses never do, and a response
only counts (and succeeds) as deep thinking if it actually deliberates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import GROUP_LONG, GROUP_SHORT, Problem, ResponseSample, SampleSet
from .policy import BOS, EOS, ToyPolicy
from .prefs import decide_group
from .seeding import derive_rng

__all__ = [
    "THINK",
    "ANSWER",
    "KEYWORD",
    "FILLER",
    "WorldSpec",
    "SyntheticProblem",
    "StrategyStats",
    "OracleMetrics",
    "build_vocab",
    "problem_features",
    "gen_problems",
    "gen_samples",
    "oracle_preference",
    "oracle_metrics",
    "reference_policies",
    "classify_mode",
    "grade_rollout",
]

THINK = "<think>"
ANSWER = "<answer>"
KEYWORD = "wait"   # deliberation marker planted in every long response
FILLER = "step"

_DEFAULT_A_LONG = (0.95, 0.95, 0.92, 0.85, 0.70)
_DEFAULT_A_SHORT = (0.97, 0.90, 0.70, 0.40, 0.15)
_DEFAULT_LEN_LONG = (60.0, 90.0, 130.0, 180.0, 240.0)
_DEFAULT_LEN_SHORT = (8.0, 10.0, 12.0, 14.0, 16.0)
_DEFAULT_ANSWERS = tuple(str(i) for i in range(8))


@dataclass(frozen=True)
class WorldSpec:
    """Declared per-level accuracy and length laws of the two generators."""

    n_levels: int = 5
    a_long: tuple[float, ...] = _DEFAULT_A_LONG
    a_short: tuple[float, ...] = _DEFAULT_A_SHORT
    len_long: tuple[float, ...] = _DEFAULT_LEN_LONG
    len_short: tuple[float, ...] = _DEFAULT_LEN_SHORT
    length_jitter: float = 0.2
    keyword_rate: float = 0.125  # share of long-run filler tokens that deliberate
    answers: tuple[str, ...] = _DEFAULT_ANSWERS
    noise_dims: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("a_long", "a_short", "len_long", "len_short", "answers"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("a_long", "a_short", "len_long", "len_short"):
            if len(getattr(self, name)) != self.n_levels:
                raise ValueError(f"{name} must have {self.n_levels} entries")
        for acc in self.a_long + self.a_short:
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {acc} outside [0, 1]")
        gains = [l - s for l, s in zip(self.a_long, self.a_short)]
        if any(b < a for a, b in zip(gains, gains[1:])):
            raise ValueError("long-over-short gain must be non-decreasing in level")
        if any(n < 2 for n in self.len_long + self.len_short):
            raise ValueError("mean lengths must be >= 2")
        if not 0.0 <= self.length_jitter < 1.0:
            raise ValueError("length_jitter must be in [0, 1)")
        if not 0.0 < self.keyword_rate < 1.0:
            raise ValueError("keyword_rate must be in (0, 1)")
        if len(self.answers) < 2:
            raise ValueError("answer alphabet needs at least two symbols")

    def level_index(self, level: int) -> int:
        if not 1 <= level <= self.n_levels:
            raise ValueError(f"level {level} outside [1, {self.n_levels}]")
        return level - 1

    @property
    def feature_dim(self) -> int:
        return self.n_levels + self.noise_dims


@dataclass
class SyntheticProblem(Problem):
    level: int = 1


def boxed(answer: str) -> str:
    return "\\boxed{" + answer + "}"


def build_vocab(spec: WorldSpec) -> tuple[str, ...]:
    """Token inventory: control markers, deliberation keyword, filler,
    and one boxed token per answer symbol."""
    return (BOS, EOS, THINK, ANSWER, KEYWORD, FILLER) + tuple(boxed(a) for a in spec.answers)


def problem_features(spec: WorldSpec, problem: SyntheticProblem) -> np.ndarray:
    """One-hot difficulty level, plus optional uninformative noise dims
    (re-derivable from the world seed and problem id)."""
    phi = np.zeros(spec.feature_dim)
    phi[spec.level_index(problem.level)] = 1.0
    if spec.noise_dims:
        rng = derive_rng(spec.seed, "features", problem.id)
        phi[spec.n_levels :] = rng.standard_normal(spec.noise_dims)
    return phi


def gen_problems(spec: WorldSpec, n: int, seed: int) -> list[SyntheticProblem]:
    """Deterministic corpus: levels assigned round-robin then shuffled,
    gold answers drawn from the answer alphabet."""
    if n < spec.n_levels:
        raise ValueError(f"need at least n_levels={spec.n_levels} problems, got {n}")
    rng = derive_rng(seed, "gen-problems")
    levels = [(i % spec.n_levels) + 1 for i in range(n)]
    levels = [levels[i] for i in rng.permutation(n)]
    width = len(str(n))
    problems = []
    for i, level in enumerate(levels):
        gold = spec.answers[int(rng.integers(len(spec.answers)))]
        problems.append(
            SyntheticProblem(
                id=f"syn-{i:0{width}d}",
                statement=f"Work out puzzle #{i} (difficulty {level} of {spec.n_levels}).",
                gold_answer=gold,
                difficulty=level,
                source="synthetic",
                level=level,
            )
        )
    return problems


def _sample_tokens(
    spec: WorldSpec,
    group: str,
    level: int,
    jitter: float,
    answer: str,
    rng,
) -> list[str]:
    d = spec.level_index(level)
    if group == GROUP_LONG:
        # <think> (filler run with "wait" markers sprinkled through it)
        # \boxed{..}: step runs between keywords are geometric-ish. At
        # least one keyword is guaranteed: deliberation defines the mode.
        target = max(4, round(spec.len_long[d] * jitter))
        run = [
            KEYWORD if rng.random() < spec.keyword_rate else FILLER
            for _ in range(target - 2)
        ]
        if KEYWORD not in run:
            run[int(rng.integers(len(run)))] = KEYWORD
        return [THINK] + run + [boxed(answer)]
    # <answer> step... \boxed{..}: direct mode never deliberates
    target = max(3, round(spec.len_short[d] * jitter))
    return [ANSWER] + [FILLER] * (target - 2) + [boxed(answer)]


def _draw_answer(spec: WorldSpec, rng, gold: str, correct: bool) -> str:
    if correct:
        return gold
    wrong = [a for a in spec.answers if a != gold]
    return wrong[int(rng.integers(len(wrong)))]


def gen_samples(spec: WorldSpec, problems: list[SyntheticProblem], k: int, seed: int) -> list[SampleSet]:
    """K responses per group per problem. Each sample's randomness derives
    from (seed, problem_id, group, index), so generation is
    schedule-independent. Correctness is an independent Bernoulli draw at
    the group's declared per-level accuracy; lengths get +-jitter."""
    if k < 1:
        raise ValueError("k must be >= 1")
    sets = []
    for problem in problems:
        d = spec.level_index(problem.level)
        sample_set = SampleSet(problem_id=problem.id)
        for group, accuracy in ((GROUP_LONG, spec.a_long[d]), (GROUP_SHORT, spec.a_short[d])):
            for index in range(k):
                rng = derive_rng(seed, problem.id, group, index)
                jitter = 1.0 + rng.uniform(-spec.length_jitter, spec.length_jitter)
                correct = bool(rng.random() < accuracy)
                answer = _draw_answer(spec, rng, problem.gold_answer, correct)
                tokens = _sample_tokens(spec, group, problem.level, jitter, answer, rng)
                sample_set.side(group).append(
                    ResponseSample(
                        problem_id=problem.id,
                        group=group,
                        text=" ".join(tokens),
                        token_length=len(tokens),
                    )
                )
        sets.append(sample_set)
    return sets


# ---------------------------------------------------------------------------
# oracles


def oracle_preference(spec: WorldSpec, level: int, epsilon: float) -> str:
    """Group decision on the TRUE per-level accuracies (no sampling)."""
    d = spec.level_index(level)
    return decide_group(spec.a_long[d], spec.a_short[d], epsilon)


@dataclass(frozen=True)
class StrategyStats:
    accuracy: float     # fraction in [0, 1]
    mean_length: float  # tokens


@dataclass(frozen=True)
class OracleMetrics:
    always_long: StrategyStats
    always_short: StrategyStats
    adaptive: StrategyStats
    preferred_by_level: tuple[str, ...] = field(default=())


def oracle_metrics(spec: WorldSpec, epsilon: float) -> OracleMetrics:
    """Exact level-by-level expectations for three strategies: always
    long, always short, and oracle-adaptive (pick the preferred group per
    level from true accuracies)."""
    prefs = tuple(oracle_preference(spec, level, epsilon) for level in range(1, spec.n_levels + 1))
    pick_acc = [
        spec.a_long[d] if prefs[d] == GROUP_LONG else spec.a_short[d]
        for d in range(spec.n_levels)
    ]
    pick_len = [
        spec.len_long[d] if prefs[d] == GROUP_LONG else spec.len_short[d]
        for d in range(spec.n_levels)
    ]
    mean = lambda xs: float(sum(xs)) / len(xs)
    return OracleMetrics(
        always_long=StrategyStats(mean(spec.a_long), mean(spec.len_long)),
        always_short=StrategyStats(mean(spec.a_short), mean(spec.len_short)),
        adaptive=StrategyStats(mean(pick_acc), mean(pick_len)),
        preferred_by_level=prefs,
    )


# ---------------------------------------------------------------------------
# reference policies matching the generators


_SCAFFOLD = 12.0   # logit for grammar-forced transitions
_MODE_BIAS = 6.0   # bos-row preference of each reference model for its style
_BASE = -12.0      # logit for transitions the grammar forbids

# The short reference model knows the deliberation keyword but almost
# never uses it. Keeping it rare (not impossible) matters: after linear
# merging, the hybrid's keyword logit sits within reach of preference
# training, which moves parameters only until margins saturate.
_SHORT_KEYWORD_RATE = 0.01


def _continuation_split(n_answers: int, mean_run: float) -> float:
    """Logit gap between filler continuation and the answer tokens that
    yields a geometric filler run with the given mean."""
    t = max(mean_run, 1.5)
    return math.log(n_answers * (t - 1.0))


def _style_policy(spec: WorldSpec, style: str) -> ToyPolicy:
    vocab = build_vocab(spec)
    index = {token: i for i, token in enumerate(vocab)}
    v = len(vocab)
    w_ctx = np.full((v, v), _BASE)
    w_feat = np.zeros((spec.feature_dim, v))
    b = np.zeros(v)

    think, answer, wait, step, eos, bos = (
        index[THINK], index[ANSWER], index[KEYWORD], index[FILLER], index[EOS], index[BOS],
    )
    answer_ids = [index[boxed(a)] for a in spec.answers]

    sign = 1.0 if style == GROUP_LONG else -1.0
    w_ctx[bos, think] = sign * _MODE_BIAS
    w_ctx[bos, answer] = -sign * _MODE_BIAS
    # boxed answers always close the sequence
    for a in answer_ids:
        w_ctx[a, eos] = _SCAFFOLD
    w_ctx[eos, eos] = _SCAFFOLD

    # filler-run law: "wait" and "step" share one continuation state; the
    # long style deliberates (keyword share of the run), the short style
    # never emits the keyword. Openers enter the run with the same law
    # but cannot stop immediately.
    rate = spec.keyword_rate if style == GROUP_LONG else _SHORT_KEYWORD_RATE
    cont_step = math.log(1.0 - rate)
    cont_wait = math.log(rate)
    for state in (step, wait):
        w_ctx[state, step] = cont_step
        w_ctx[state, wait] = cont_wait
        for a in answer_ids:
            w_ctx[state, a] = 0.0
    for opener in (think, answer):
        w_ctx[opener, step] = cont_step + _SCAFFOLD
        w_ctx[opener, wait] = cont_wait + _SCAFFOLD

    # per-level run lengths: raise continuation (both filler tokens)
    # against the boxed stop tokens
    lengths = spec.len_long if style == GROUP_LONG else spec.len_short
    for d in range(spec.n_levels):
        gap = _continuation_split(len(spec.answers), lengths[d] - 2.0)
        w_feat[d, step] = 0.5 * gap
        w_feat[d, wait] = 0.5 * gap
        for a in answer_ids:
            w_feat[d, a] = -0.5 * gap
    return ToyPolicy(vocab, w_ctx, w_feat, b)


def reference_policies(spec: WorldSpec) -> tuple[ToyPolicy, ToyPolicy]:
    """(long, short) policies whose rollouts match the world's generators:
    same grammar, per-level run lengths matching the declared means, and
    a hard preference for their own opening marker."""
    return _style_policy(spec, GROUP_LONG), _style_policy(spec, GROUP_SHORT)


# ---------------------------------------------------------------------------
# grading policy rollouts


def classify_mode(tokens: list[str]) -> str:
    """Reasoning mode of a sampled sequence: long iff it actually
    deliberates (emits the keyword), regardless of template tokens."""
    return GROUP_LONG if KEYWORD in tokens else GROUP_SHORT


def grade_rollout(
    spec: WorldSpec,
    problem: SyntheticProblem,
    tokens: list[str],
    seed: int,
) -> ResponseSample:
    """Realize a policy rollout as a judged-style response.

    The environment decides success: a rollout in mode g on a level-d
    problem is correct with the world's probability ``a_g(d)`` (the toy
    policy chooses HOW to reason; the world knows how well that mode
    works). The final boxed answer is rewritten to be consistent with the
    draw, so re-judging the emitted text reproduces the same verdict.
    """
    mode = classify_mode(tokens)
    d = spec.level_index(problem.level)
    accuracy = spec.a_long[d] if mode == GROUP_LONG else spec.a_short[d]
    rng = derive_rng(seed, problem.id, "grade")
    correct = bool(rng.random() < accuracy)
    answer = _draw_answer(spec, rng, problem.gold_answer, correct)
    body = [t for t in tokens if not t.startswith("\\boxed{")]
    realized = body + [boxed(answer)]
    return ResponseSample(
        problem_id=problem.id,
        group=mode,
        text=" ".join(realized),
        token_length=len(realized),
        correct=correct,
    )
