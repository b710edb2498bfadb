"""Problem/response corpora: ingestion, judging, filtering, gain analysis.

Problems and externally sampled responses arrive as UTF-8 line-delimited
JSON. Responses are tagged with the reasoning group that produced them
(long or short), judged against gold answers, filtered, and analyzed for
the per-problem accuracy gain of long over short reasoning.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .answers import extract_answer, judge_correct

logger = logging.getLogger(__name__)

__all__ = [
    "GROUP_LONG",
    "GROUP_SHORT",
    "CorpusError",
    "Problem",
    "ResponseSample",
    "SampleSet",
    "GainHistogram",
    "LengthBin",
    "ingest_problems",
    "ingest_samples",
    "judge_sample_sets",
    "filter_hopeless",
    "partition_hopeless",
    "gain_histogram",
    "gain_vs_length",
    "set_gain",
]

GROUP_LONG = "long"
GROUP_SHORT = "short"
_GROUPS = (GROUP_LONG, GROUP_SHORT)


class CorpusError(ValueError):
    """Malformed corpus input."""


@dataclass
class Problem:
    id: str
    statement: str
    gold_answer: str
    difficulty: int | None = None
    source: str = ""

    def __post_init__(self) -> None:
        if not self.gold_answer:
            raise CorpusError(f"problem {self.id!r}: empty gold_answer")


@dataclass
class ResponseSample:
    """One sampled solution, tagged with the group that generated it."""

    problem_id: str
    group: str
    text: str
    token_length: int
    correct: bool | None = None

    def __post_init__(self) -> None:
        if self.group not in _GROUPS:
            raise CorpusError(f"unknown group tag {self.group!r}")
        if self.token_length < 1:
            raise CorpusError(
                f"sample for {self.problem_id!r}: token_length must be >= 1"
            )


@dataclass
class SampleSet:
    """All samples for one problem, split by group. Order within each
    side follows the input file (ties in later selection break by it)."""

    problem_id: str
    long_samples: list[ResponseSample] = field(default_factory=list)
    short_samples: list[ResponseSample] = field(default_factory=list)

    def side(self, group: str) -> list[ResponseSample]:
        if group == GROUP_LONG:
            return self.long_samples
        if group == GROUP_SHORT:
            return self.short_samples
        raise CorpusError(f"unknown group tag {group!r}")

    @property
    def judged(self) -> bool:
        return all(
            s.correct is not None for s in self.long_samples + self.short_samples
        )


# ---------------------------------------------------------------------------
# ingestion


def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                yield lineno, line


def ingest_problems(path) -> dict[str, Problem]:
    """Parse a problems file into an id-keyed corpus.

    Collects every malformed line / duplicate id / missing field and
    raises one error reporting all of them with line numbers.
    """
    problems: dict[str, Problem] = {}
    first_line: dict[str, int] = {}
    errors: list[str] = []
    for lineno, line in _read_jsonl(path):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(f"line {lineno}: malformed JSON ({exc.msg})")
            continue
        missing = [k for k in ("id", "statement", "gold_answer") if not record.get(k)]
        if missing:
            errors.append(f"line {lineno}: missing field(s) {', '.join(missing)}")
            continue
        pid = str(record["id"])
        if pid in problems:
            errors.append(
                f"line {lineno}: duplicate id {pid!r} (first seen on line {first_line[pid]})"
            )
            continue
        problems[pid] = Problem(
            id=pid,
            statement=str(record["statement"]),
            gold_answer=str(record["gold_answer"]),
            difficulty=int(record["difficulty"]) if record.get("difficulty") is not None else None,
            source=str(record.get("source", "")),
        )
        first_line[pid] = lineno
    if errors:
        raise CorpusError("problems file invalid:\n  " + "\n  ".join(errors))
    return problems


def ingest_samples(path, corpus: dict[str, Problem], expected_k: int | None = None) -> list[SampleSet]:
    """Parse a samples file and group records by (problem_id, group).

    ``token_length`` comes from the record's ``token_count`` field when
    present, else falls back to the whitespace token count of the text.
    Sets with fewer than ``expected_k`` samples on a side are kept but
    flagged with a warning.
    """
    sets: dict[str, SampleSet] = {}
    errors: list[str] = []
    for lineno, line in _read_jsonl(path):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(f"line {lineno}: malformed JSON ({exc.msg})")
            continue
        pid = str(record.get("problem_id", ""))
        if pid not in corpus:
            errors.append(f"line {lineno}: unknown problem_id {pid!r}")
            continue
        group = record.get("group")
        if group not in _GROUPS:
            errors.append(f"line {lineno}: unknown group tag {group!r}")
            continue
        text = str(record.get("text", ""))
        token_count = record.get("token_count")
        token_length = int(token_count) if token_count is not None else len(text.split())
        correct = record.get("correct")
        try:
            sample = ResponseSample(
                problem_id=pid,
                group=group,
                text=text,
                token_length=token_length,
                correct=None if correct is None else bool(correct),
            )
        except CorpusError as exc:
            errors.append(f"line {lineno}: {exc}")
            continue
        sets.setdefault(pid, SampleSet(problem_id=pid)).side(group).append(sample)
    if errors:
        raise CorpusError("samples file invalid:\n  " + "\n  ".join(errors))

    result = [sets[pid] for pid in sorted(sets)]
    if expected_k is not None:
        short_handed = [
            s.problem_id
            for s in result
            if len(s.long_samples) < expected_k or len(s.short_samples) < expected_k
        ]
        if short_handed:
            logger.warning(
                "%d sample set(s) have fewer than %d samples per side: %s",
                len(short_handed), expected_k, ", ".join(short_handed[:10]),
            )
    return result


def judge_sample_sets(sets: list[SampleSet], corpus: dict[str, Problem]) -> list[SampleSet]:
    """Fill each sample's ``correct`` flag by extracting its boxed answer
    and judging it against the problem's gold answer. In place; returns
    the same list for chaining."""
    for sample_set in sets:
        gold = corpus[sample_set.problem_id].gold_answer
        for sample in sample_set.long_samples + sample_set.short_samples:
            sample.correct = judge_correct(extract_answer(sample.text), gold)
    return sets


# ---------------------------------------------------------------------------
# filtering and gain analysis


def _accuracy(samples: list[ResponseSample]) -> float:
    if not samples:
        raise CorpusError("accuracy of an empty sample list is undefined")
    if any(s.correct is None for s in samples):
        raise CorpusError("unjudged samples present")
    return sum(1 for s in samples if s.correct) / len(samples)


def set_gain(sample_set: SampleSet) -> float:
    """Long-group accuracy minus short-group accuracy, in [-1, 1]."""
    return _accuracy(sample_set.long_samples) - _accuracy(sample_set.short_samples)


def partition_hopeless(sets: list[SampleSet]) -> tuple[list[SampleSet], list[SampleSet]]:
    """Split into (kept, dropped): dropped sets are those where every long
    and every short sample is incorrect."""
    kept: list[SampleSet] = []
    dropped: list[SampleSet] = []
    for sample_set in sets:
        samples = sample_set.long_samples + sample_set.short_samples
        if any(s.correct is None for s in samples):
            raise CorpusError(f"unjudged samples present for {sample_set.problem_id!r}")
        if samples and not any(s.correct for s in samples):
            dropped.append(sample_set)
        else:
            kept.append(sample_set)
    return kept, dropped


def filter_hopeless(sets: list[SampleSet]) -> list[SampleSet]:
    """Drop sets where both groups fail completely; others pass unchanged."""
    kept, dropped = partition_hopeless(sets)
    logger.info("filter_hopeless: dropped %d of %d sets", len(dropped), len(sets))
    return kept


@dataclass
class GainHistogram:
    edges: np.ndarray  # n_bins + 1 edges spanning [-1, 1]
    masses: np.ndarray  # sums to 1

    def mass_at_or_below(self, value: float) -> float:
        """Fraction of problems with gain <= value (value must be an edge
        or inside a bin; partial bins count fully if their right edge
        <= value)."""
        return float(self.masses[self.edges[1:] <= value + 1e-12].sum())


def gain_histogram(sets: list[SampleSet], n_bins: int = 20) -> GainHistogram:
    """Distribution of per-problem gain over equal-width bins on [-1, 1]."""
    gains = np.array([set_gain(s) for s in sets], dtype=np.float64)
    counts, edges = np.histogram(gains, bins=n_bins, range=(-1.0, 1.0))
    total = counts.sum()
    if total == 0:
        return GainHistogram(edges=edges, masses=np.zeros(n_bins))
    return GainHistogram(edges=edges, masses=counts / total)


@dataclass
class LengthBin:
    mean_length: float  # mean long-sample token length of problems in the bin
    mean_gain: float
    n_problems: int


def gain_vs_length(sets: list[SampleSet], n_bins: int) -> list[LengthBin]:
    """Bucket problems by their average long-response length into quantile
    bins and report the mean gain per bin, ordered by length."""
    if len(sets) < n_bins:
        raise CorpusError(f"need at least {n_bins} problems, got {len(sets)}")
    lengths = np.array(
        [np.mean([s.token_length for s in ss.long_samples]) for ss in sets],
        dtype=np.float64,
    )
    gains = np.array([set_gain(s) for s in sets], dtype=np.float64)

    edges = np.unique(np.quantile(lengths, np.linspace(0.0, 1.0, n_bins + 1)))
    # assign each problem to a bin; the last edge is inclusive
    idx = np.clip(np.searchsorted(edges, lengths, side="right") - 1, 0, len(edges) - 2)

    bins: list[LengthBin] = []
    for b in range(len(edges) - 1):
        mask = idx == b
        if not mask.any():
            continue
        bins.append(
            LengthBin(
                mean_length=float(lengths[mask].mean()),
                mean_gain=float(gains[mask].mean()),
                n_problems=int(mask.sum()),
            )
        )
    bins.sort(key=lambda item: item.mean_length)
    return bins
