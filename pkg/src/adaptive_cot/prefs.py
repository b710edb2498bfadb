"""Bi-level preference dataset construction.

For each problem, the empirical accuracy of the long and short response
groups decides which reasoning style is preferred (group level). Within
the preferred group, the shortest correct response is preferred over the
longest ones (instance level). Both levels emit chosen/rejected pairs
for preference training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import GROUP_LONG, GROUP_SHORT, ResponseSample, SampleSet
from .seeding import derive_rng

logger = logging.getLogger(__name__)

__all__ = [
    "BuilderConfig",
    "GroupPreference",
    "PreferencePair",
    "BuildResult",
    "group_accuracy",
    "decide_group",
    "build_group_pairs",
    "build_instance_pairs",
    "build_dataset",
]


@dataclass(frozen=True)
class BuilderConfig:
    k: int = 12              # samples per group
    epsilon: float = 0.10    # accuracy margin the long group must exceed
    m1: int = 4              # group-level pairs kept per problem
    m2: int = 2              # longest rejected instances per problem
    seed: int = 0
    correct_chosen_only: bool = False

    def __post_init__(self) -> None:
        if self.k < 1 or self.m1 < 1 or self.m2 < 1:
            raise ValueError("k, m1, m2 must all be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class GroupPreference:
    """Per-problem group decision with the evidence it was based on."""

    problem_id: str
    e_long: float
    e_short: float
    preferred: str  # GROUP_LONG or GROUP_SHORT
    epsilon: float


@dataclass(frozen=True)
class PreferencePair:
    problem_id: str
    chosen: ResponseSample
    rejected: ResponseSample
    level: str  # "group" or "instance"

    def __post_init__(self) -> None:
        if self.chosen is self.rejected:
            raise ValueError("chosen and rejected must be distinct samples")
        if self.level == "group":
            if self.chosen.group == self.rejected.group:
                raise ValueError("group-level pair must cross groups")
        elif self.level == "instance":
            if self.chosen.group != self.rejected.group:
                raise ValueError("instance-level pair must stay within one group")
            if not self.chosen.correct:
                raise ValueError("instance-level chosen must be correct")
            if self.chosen.token_length >= self.rejected.token_length:
                raise ValueError("instance-level chosen must be strictly shorter")
        else:
            raise ValueError(f"unknown pair level {self.level!r}")


def group_accuracy(samples: list[ResponseSample]) -> float:
    """Fraction of correct samples (the empirical accuracy of a group)."""
    if not samples:
        raise ValueError("group_accuracy of an empty list is undefined")
    if any(s.correct is None for s in samples):
        raise ValueError("samples must be judged before computing accuracy")
    return sum(1 for s in samples if s.correct) / len(samples)


def decide_group(e_long: float, e_short: float, epsilon: float) -> str:
    """Prefer the long group iff its accuracy advantage strictly exceeds
    the margin; ties and small advantages go to the short group."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    return GROUP_LONG if e_long - e_short > epsilon else GROUP_SHORT


def _group_pair_universe(
    winners: list[ResponseSample],
    losers: list[ResponseSample],
    correct_chosen_only: bool,
) -> list[tuple[ResponseSample, ResponseSample]]:
    return [
        (w, l)
        for w in winners
        if not correct_chosen_only or w.correct
        for l in losers
    ]


def build_group_pairs(
    sample_set: SampleSet,
    pref: GroupPreference,
    cfg: BuilderConfig,
) -> list[PreferencePair]:
    """Sample up to ``m1`` cross-group pairs (winner from the preferred
    group) uniformly without replacement from the full Cartesian product.

    Deterministic given (cfg.seed, problem_id): the universe is
    enumerated winner-major in sample order and indices are drawn from a
    seeded generator.
    """
    winners = sample_set.side(pref.preferred)
    losers = sample_set.side(GROUP_SHORT if pref.preferred == GROUP_LONG else GROUP_LONG)
    if not winners or not losers:
        raise ValueError(f"problem {sample_set.problem_id!r}: empty group side")

    universe = _group_pair_universe(winners, losers, cfg.correct_chosen_only)
    if not universe:
        logger.warning(
            "problem %s: no correct winner available for group-level pairs",
            sample_set.problem_id,
        )
        return []
    take = min(cfg.m1, len(universe))
    rng = derive_rng(cfg.seed, sample_set.problem_id, "group")
    picked = sorted(rng.choice(len(universe), size=take, replace=False).tolist())
    return [
        PreferencePair(sample_set.problem_id, chosen=universe[i][0], rejected=universe[i][1], level="group")
        for i in picked
    ]


def build_instance_pairs(
    sample_set: SampleSet,
    pref: GroupPreference,
    cfg: BuilderConfig,
) -> list[PreferencePair]:
    """Within the preferred group: shortest correct sample vs the ``m2``
    longest samples (excluding the chosen one). Ties break by earliest
    sample index; pairs that are not strictly longer than the chosen are
    discarded."""
    group = sample_set.side(pref.preferred)
    correct = [(i, s) for i, s in enumerate(group) if s.correct]
    if not correct:
        logger.warning(
            "problem %s: no correct sample in preferred group, skipping instance pairs",
            sample_set.problem_id,
        )
        return []
    _, chosen = min(correct, key=lambda item: (item[1].token_length, item[0]))

    candidates = [(i, s) for i, s in enumerate(group) if s is not chosen]
    candidates.sort(key=lambda item: (-item[1].token_length, item[0]))
    pairs = []
    for _, rejected in candidates[: cfg.m2]:
        if rejected.token_length > chosen.token_length:
            pairs.append(
                PreferencePair(sample_set.problem_id, chosen=chosen, rejected=rejected, level="instance")
            )
    return pairs


@dataclass
class BuildResult:
    group_pairs: list[PreferencePair]
    instance_pairs: list[PreferencePair]
    prefs: list[GroupPreference]
    stats: dict = field(default_factory=dict)

    @property
    def all_pairs(self) -> list[PreferencePair]:
        return self.group_pairs + self.instance_pairs


def build_dataset(sets: list[SampleSet], cfg: BuilderConfig) -> BuildResult:
    """Run the full bi-level construction over judged, filtered sample
    sets. Output order is deterministic: problems by id, then pair index."""
    group_pairs: list[PreferencePair] = []
    instance_pairs: list[PreferencePair] = []
    prefs: list[GroupPreference] = []
    preferred_counts = {GROUP_LONG: 0, GROUP_SHORT: 0}
    skip_reasons: dict[str, int] = {}

    for sample_set in sorted(sets, key=lambda s: s.problem_id):
        e_long = group_accuracy(sample_set.long_samples)
        e_short = group_accuracy(sample_set.short_samples)
        preferred = decide_group(e_long, e_short, cfg.epsilon)
        pref = GroupPreference(
            problem_id=sample_set.problem_id,
            e_long=e_long,
            e_short=e_short,
            preferred=preferred,
            epsilon=cfg.epsilon,
        )
        prefs.append(pref)
        preferred_counts[preferred] += 1

        g_pairs = build_group_pairs(sample_set, pref, cfg)
        if not g_pairs:
            skip_reasons["no_group_pairs"] = skip_reasons.get("no_group_pairs", 0) + 1
        i_pairs = build_instance_pairs(sample_set, pref, cfg)
        if not i_pairs:
            skip_reasons["no_instance_pairs"] = skip_reasons.get("no_instance_pairs", 0) + 1
        group_pairs.extend(g_pairs)
        instance_pairs.extend(i_pairs)

    stats = {
        "n_problems": len(sets),
        "n_group_pairs": len(group_pairs),
        "n_instance_pairs": len(instance_pairs),
        "preferred_counts": dict(preferred_counts),
        "skip_reasons": dict(sorted(skip_reasons.items())),
    }
    return BuildResult(group_pairs=group_pairs, instance_pairs=instance_pairs, prefs=prefs, stats=stats)
