"""Final-answer and intermediate-waypoint extraction from solution text.

Normative pattern classes (scanned left to right; at each offset the longest
match wins, ties resolved in the order number, exponential, linear,
coefficient; matches never overlap):

    number       \\d+(?:\\.\\d+)?(?:[eE][-+]?\\d+)?          100, 1.99, 1e-10
    exponential  (?:\\d+|[A-Za-z])\\^(?:\\{[^{}]*\\}|-?\\d+|[A-Za-z])  n^{k+1}, e^{-x}
    linear       TERM\\s*[+-]\\s*TERM, with at least one variable   n+1, 2k-1
    coefficient  \\d+[A-Za-z] not followed by another letter      2k, 100n

where TERM is ``\\d*[A-Za-z]`` (not preceded by a letter) or ``\\d+``.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Iterator

log = logging.getLogger(__name__)

KINDS = ("number", "exponential", "linear", "coefficient")
MODES = ("numeric_only", "full")

_NUMBER = re.compile(r"\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")
_EXPONENTIAL = re.compile(r"(?:\d+|(?<![A-Za-z])[A-Za-z])\^(?:\{[^{}]*\}|-?\d+|[A-Za-z](?![A-Za-z]))")
_VAR_TERM = r"(?<![A-Za-z])\d*[A-Za-z](?![A-Za-z])"
_LINEAR = re.compile(
    rf"(?:{_VAR_TERM}\s*[+-]\s*(?:\d*[A-Za-z](?![A-Za-z])|\d+(?![\d.A-Za-z]))"
    rf"|\d+\s*[+-]\s*\d*[A-Za-z](?![A-Za-z]))"
)
_COEFFICIENT = re.compile(r"\d+[A-Za-z](?![A-Za-z])")

PATTERNS = {
    "number": _NUMBER,
    "exponential": _EXPONENTIAL,
    "linear": _LINEAR,
    "coefficient": _COEFFICIENT,
}

_BOXED = "\\boxed{"


@dataclass(frozen=True)
class Waypoint:
    text: str
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown waypoint kind {self.kind!r}")


@dataclass(frozen=True)
class PartialSolution:
    waypoints: tuple[Waypoint, ...] = ()
    answer: str | None = None

    def __post_init__(self) -> None:
        texts = [w.text for w in self.waypoints]
        if len(set(texts)) != len(texts):
            raise ValueError("waypoints must be deduplicated")
        if self.answer is not None and self.answer in texts:
            raise ValueError("final answer must not appear among waypoints")

    @property
    def texts(self) -> list[str]:
        return [w.text for w in self.waypoints]

    def to_record(self) -> dict:
        return {
            "answer": self.answer,
            "waypoints": [{"text": w.text, "kind": w.kind} for w in self.waypoints],
        }


def _boxed_spans(text: str) -> Iterator[tuple[int, int | None]]:
    """(content_start, content_end) per ``\\boxed{``; end None if unbalanced."""
    start = text.find(_BOXED)
    while start != -1:
        i = start + len(_BOXED)
        depth = 1
        j = i
        while j < len(text):
            if text[j] == "{":
                depth += 1
            elif text[j] == "}":
                depth -= 1
                if depth == 0:
                    break
            j += 1
        yield i, (j if depth == 0 else None)
        start = text.find(_BOXED, start + 1)


def extract_final_answer(solution: str) -> str | None:
    """Content of the last ``\\boxed{...}``, brace-balanced."""
    last = None
    for span in _boxed_spans(solution):
        last = span
    if last is None:
        return None
    i, j = last
    if j is None:
        log.warning("unbalanced braces after last \\boxed{ at offset %d", i)
        return None
    return solution[i:j]


def scan(text: str) -> list[Waypoint]:
    """All pattern-class matches in document order (no dedup)."""
    out = []
    pos = 0
    n = len(text)
    while pos < n:
        best: tuple[int, str] | None = None
        for kind in KINDS:
            m = PATTERNS[kind].match(text, pos)
            if m and m.end() > pos and (best is None or m.end() > best[0]):
                best = (m.end(), kind)
        if best is None:
            pos += 1
            continue
        end, kind = best
        out.append(Waypoint(text[pos:end], kind))
        pos = end
    return out


def extract_waypoints(solution: str, mode: str = "full") -> PartialSolution:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    answer = extract_final_answer(solution)
    seen = set()
    kept = []
    for w in scan(solution):
        if mode == "numeric_only" and w.kind != "number":
            continue
        if w.text in seen or w.text == answer:
            continue
        seen.add(w.text)
        kept.append(w)
    return PartialSolution(tuple(kept), answer)
