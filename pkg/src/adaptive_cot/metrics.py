"""Accuracy/length aggregation, thinking-ratio, and difficulty breakdowns.

Aggregate change versus a baseline uses the mean of per-benchmark
relative changes for length. For accuracy two aggregators exist
(mean-relative and macro-ratio) because published averages are not
consistent under a single formula; reports always say which mode
produced a number.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DEFAULT_KEYWORDS",
    "BenchmarkResult",
    "ThinkingStats",
    "LevelRow",
    "EvalReport",
    "avg_length_change",
    "avg_accuracy_change",
    "thinking_ratio",
    "per_level_breakdown",
]

DEFAULT_KEYWORDS = ("wait", "recheck")

ACCURACY_MODES = ("mean-relative", "macro-ratio")


@dataclass(frozen=True)
class BenchmarkResult:
    """One benchmark row: accuracy in percent, mean response length in tokens."""

    name: str
    accuracy: float
    mean_length: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError(f"accuracy must be a percentage in [0, 100], got {self.accuracy}")
        if self.mean_length <= 0:
            raise ValueError(f"mean_length must be > 0, got {self.mean_length}")


def _check_aligned(method: list[BenchmarkResult], baseline: list[BenchmarkResult]) -> None:
    if [m.name for m in method] != [b.name for b in baseline]:
        raise ValueError(
            f"benchmark names differ: {[m.name for m in method]} vs {[b.name for b in baseline]}"
        )
    if not method:
        raise ValueError("need at least one benchmark")


def avg_length_change(method: list[BenchmarkResult], baseline: list[BenchmarkResult]) -> float:
    """Mean per-benchmark relative length change versus baseline, in
    percent (negative = shorter)."""
    _check_aligned(method, baseline)
    changes = [m.mean_length / b.mean_length - 1.0 for m, b in zip(method, baseline)]
    return 100.0 * float(np.mean(changes))


def avg_accuracy_change(
    method: list[BenchmarkResult],
    baseline: list[BenchmarkResult],
    mode: str = "macro-ratio",
) -> float:
    """Aggregate accuracy change versus baseline, in percent.

    mean-relative: mean of per-benchmark relative changes.
    macro-ratio:   relative change of the across-benchmark mean accuracy.
    """
    _check_aligned(method, baseline)
    if mode == "mean-relative":
        for b in baseline:
            if b.accuracy == 0:
                raise ValueError(f"baseline accuracy is zero on {b.name!r}")
        changes = [m.accuracy / b.accuracy - 1.0 for m, b in zip(method, baseline)]
        return 100.0 * float(np.mean(changes))
    if mode == "macro-ratio":
        base_mean = float(np.mean([b.accuracy for b in baseline]))
        if base_mean == 0:
            raise ValueError("baseline mean accuracy is zero")
        return 100.0 * (float(np.mean([m.accuracy for m in method])) / base_mean - 1.0)
    raise ValueError(f"unknown accuracy mode {mode!r}; expected one of {ACCURACY_MODES}")


@dataclass(frozen=True)
class ThinkingStats:
    ratio: float
    thinking_accuracy: float | None      # None when no thinking responses
    non_thinking_accuracy: float | None  # None when all responses think
    n_thinking: int
    n_non_thinking: int


def _keyword_pattern(keywords) -> re.Pattern:
    if not keywords:
        raise ValueError("keyword list must be nonempty")
    return re.compile(
        r"\b(?:" + "|".join(re.escape(k) for k in keywords) + r")\b", re.IGNORECASE
    )


def thinking_ratio(responses, keywords=DEFAULT_KEYWORDS) -> ThinkingStats:
    """Classify responses as deep-thinking by keyword detection.

    ``responses`` is a sequence of judged samples (``text`` and
    ``correct`` attributes) or (text, correct) tuples. A response thinks
    iff any keyword occurs as a whole word, case-insensitively. Empty
    categories report accuracy as None, not 0.
    """
    items = [
        (r.text, r.correct) if hasattr(r, "text") else (r[0], r[1]) for r in responses
    ]
    if not items:
        raise ValueError("response list must be nonempty")
    if any(correct is None for _, correct in items):
        raise ValueError("responses must be judged for correctness")
    pattern = _keyword_pattern(keywords)
    thinking = [correct for text, correct in items if pattern.search(text)]
    non_thinking = [correct for text, correct in items if not pattern.search(text)]

    def acc(flags):
        return float(np.mean(flags)) if flags else None

    return ThinkingStats(
        ratio=len(thinking) / len(items),
        thinking_accuracy=acc(thinking),
        non_thinking_accuracy=acc(non_thinking),
        n_thinking=len(thinking),
        n_non_thinking=len(non_thinking),
    )


@dataclass(frozen=True)
class LevelRow:
    level: int
    thinking_ratio: float
    accuracy: float
    mean_length: float
    n: int


def per_level_breakdown(problems, rollouts, keywords=DEFAULT_KEYWORDS) -> list[LevelRow]:
    """Group judged rollouts by their problem's difficulty level and
    report thinking ratio, accuracy, and mean length per level,
    ascending."""
    by_id = {p.id: p for p in problems}
    pattern = _keyword_pattern(keywords)
    grouped: dict[int, list] = {}
    for rollout in rollouts:
        problem = by_id.get(rollout.problem_id)
        if problem is None:
            raise ValueError(f"rollout references unknown problem {rollout.problem_id!r}")
        if problem.difficulty is None:
            raise ValueError(f"problem {problem.id!r} has no difficulty label")
        if rollout.correct is None:
            raise ValueError(f"rollout for {problem.id!r} is unjudged")
        grouped.setdefault(problem.difficulty, []).append(rollout)

    rows = []
    for level in sorted(grouped):
        items = grouped[level]
        rows.append(
            LevelRow(
                level=level,
                thinking_ratio=float(np.mean([bool(pattern.search(r.text)) for r in items])),
                accuracy=float(np.mean([r.correct for r in items])),
                mean_length=float(np.mean([r.token_length for r in items])),
                n=len(items),
            )
        )
    return rows


@dataclass
class EvalReport:
    """Full evaluation against a baseline strategy."""

    benchmarks: list[BenchmarkResult]
    baseline: list[BenchmarkResult]
    avg_length_change: float
    avg_accuracy_change: float
    accuracy_mode: str
    thinking: ThinkingStats
    per_level: list[LevelRow] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "benchmarks": [vars(b).copy() for b in self.benchmarks],
            "baseline": [vars(b).copy() for b in self.baseline],
            "avg_length_change_pct": self.avg_length_change,
            "avg_accuracy_change_pct": self.avg_accuracy_change,
            "accuracy_mode": self.accuracy_mode,
            "thinking": {
                "ratio": self.thinking.ratio,
                "thinking_accuracy": self.thinking.thinking_accuracy,
                "non_thinking_accuracy": self.thinking.non_thinking_accuracy,
                "n_thinking": self.thinking.n_thinking,
                "n_non_thinking": self.thinking.n_non_thinking,
            },
            "per_level": [vars(r).copy() for r in self.per_level],
            "extras": dict(self.extras),
        }

    def render(self) -> str:
        """Human-readable table."""
        lines = []
        lines.append(f"{'benchmark':<12} {'acc%':>7} {'len':>9} {'base acc%':>10} {'base len':>9}")
        for m, b in zip(self.benchmarks, self.baseline):
            lines.append(
                f"{m.name:<12} {m.accuracy:>7.2f} {m.mean_length:>9.2f} "
                f"{b.accuracy:>10.2f} {b.mean_length:>9.2f}"
            )
        lines.append(
            f"avg length change: {self.avg_length_change:+.2f}%   "
            f"avg accuracy change ({self.accuracy_mode}): {self.avg_accuracy_change:+.2f}%"
        )
        t = self.thinking
        t_acc = "n/a" if t.thinking_accuracy is None else f"{t.thinking_accuracy:.3f}"
        n_acc = "n/a" if t.non_thinking_accuracy is None else f"{t.non_thinking_accuracy:.3f}"
        lines.append(
            f"thinking ratio: {t.ratio:.3f} (thinking acc {t_acc}, non-thinking acc {n_acc})"
        )
        if self.per_level:
            lines.append(f"{'level':<6} {'think':>7} {'acc':>7} {'len':>9} {'n':>5}")
            for row in self.per_level:
                lines.append(
                    f"{row.level:<6} {row.thinking_ratio:>7.3f} {row.accuracy:>7.3f} "
                    f"{row.mean_length:>9.2f} {row.n:>5}"
                )
        for key, value in sorted(self.extras.items()):
            lines.append(f"{key}: {value}")
        return "\n".join(lines) + "\n"
