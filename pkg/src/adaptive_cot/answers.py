"""Final-answer extraction, normalization, and exact judging.

Solutions state their final answer inside a ``\\boxed{...}`` span. The
judge is deliberately minimal and deterministic: normalized string
equality, plus exact rational equivalence (integers, finite decimals,
a/b fractions). No floating tolerance, no computer algebra.
"""

from __future__ import annotations

import re
from fractions import Fraction

__all__ = ["extract_answer", "normalize_answer", "judge_correct"]

_WS = re.compile(r"\s+")


def normalize_answer(answer: str) -> str:
    """Canonical form: drop \\left/\\right, all whitespace, one outer
    ``$...$`` pair, and one trailing period."""
    s = answer.replace("\\left", "").replace("\\right", "")
    s = _WS.sub("", s)
    if len(s) >= 2 and s.startswith("$") and s.endswith("$"):
        s = s[1:-1]
    if s.endswith("."):
        s = s[:-1]
    return s


def extract_answer(text: str) -> str | None:
    """Normalized content of the last balanced ``\\boxed{...}`` span.

    Returns None when no balanced span exists. Later spans win: the final
    answer follows the reasoning.
    """
    for start in _rfind_all(text, "\\boxed"):
        idx = start + len("\\boxed")
        while idx < len(text) and text[idx].isspace():
            idx += 1
        if idx >= len(text) or text[idx] != "{":
            continue
        depth = 0
        for end in range(idx, len(text)):
            ch = text[end]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return normalize_answer(text[idx + 1 : end])
        # unbalanced: fall through to an earlier span
    return None


def _rfind_all(text: str, needle: str):
    idx = text.rfind(needle)
    while idx != -1:
        yield idx
        idx = text.rfind(needle, 0, idx)


def _as_rational(s: str) -> Fraction | None:
    # Fraction accepts "3", "-4", "0.5", "2.50", "1/2"; anything else
    # (tuples, symbols, latex) is not a rational literal.
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        return None


def judge_correct(extracted: str | None, gold: str) -> bool:
    """True iff the extracted answer matches the gold answer exactly,
    either as normalized strings or as equal rationals."""
    if not gold:
        raise ValueError("gold answer must be non-empty")
    if extracted is None:
        return False
    a, b = normalize_answer(extracted), normalize_answer(gold)
    if a == b:
        return True
    ra, rb = _as_rational(a), _as_rational(b)
    return ra is not None and rb is not None and ra == rb
