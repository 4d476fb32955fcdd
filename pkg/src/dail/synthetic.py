"""Arithmetic-chain problems with full traces, compressed expert solutions,
and injected rationalization shortcuts.

A problem is a start value followed by additions/subtractions of 1..5,
evaluated strictly left to right modulo 1000::

    problem   417+5-3+4
    steps     +5=422;-3=419;+4=423;
    solution  +5=422;+4=423;\\boxed{423}      (compressed: the -3 step is elided)

Every value is written with three digits so answers look like AIME answers
(``034``). A forced-result shortcut states a step value with its operation
missing (``=419;``); a skipped derivation drops a step entirely.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .contexts import ExpertSolution, ProblemInstance
from .vocab import BOXED_CLOSE, BOXED_OPEN, THINK_CLOSE

MODULUS = 1000
OPS = "+-"
MAX_OPERAND = 5
SHORTCUT_KINDS = ("skip_derivation", "forced_result")

_STEP = re.compile(r"([+\-*]?)(\d)?=(\d{3});")


def fmt(v: int) -> str:
    return f"{v % MODULUS:03d}"


def apply_op(value: int, op: str, operand: int) -> int:
    if op == "+":
        return (value + operand) % MODULUS
    if op == "-":
        return (value - operand) % MODULUS
    if op == "*":
        return (value * operand) % MODULUS
    raise ValueError(f"unknown operator {op!r}")


@dataclass(frozen=True)
class Step:
    op: str | None  # None marks a forced result (operation missing)
    operand: int | None
    value: int

    def render(self) -> str:
        if self.op is None:
            return f"={fmt(self.value)};"
        return f"{self.op}{self.operand}={fmt(self.value)};"


@dataclass(frozen=True)
class ArithChainProblem:
    id: str
    start: int
    ops: tuple[str, ...]
    operands: tuple[int, ...]

    @property
    def difficulty(self) -> int:
        return len(self.ops)

    @property
    def text(self) -> str:
        return fmt(self.start) + "".join(f"{o}{b}" for o, b in zip(self.ops, self.operands))

    @property
    def value(self) -> int:
        v = self.start
        for o, b in zip(self.ops, self.operands):
            v = apply_op(v, o, b)
        return v

    @property
    def answer(self) -> str:
        return fmt(self.value)

    def instance(self) -> ProblemInstance:
        return ProblemInstance(self.id, self.text, self.answer, "verifiable")


@dataclass(frozen=True)
class FullTrace:
    steps: tuple[Step, ...]
    answer: str

    @property
    def think_text(self) -> str:
        return "".join(s.render() for s in self.steps)

    @property
    def text(self) -> str:
        """The trace as the model generates it (EOS excluded)."""
        return self.think_text + THINK_CLOSE + BOXED_OPEN + self.answer + BOXED_CLOSE

    @property
    def solution_text(self) -> str:
        return self.think_text + BOXED_OPEN + self.answer + BOXED_CLOSE


@dataclass(frozen=True)
class CompressedSolution:
    retained: tuple[int, ...]  # indices into the full trace's steps
    steps: tuple[Step, ...]
    answer: str
    elision_rate: float

    @property
    def text(self) -> str:
        return "".join(s.render() for s in self.steps) + BOXED_OPEN + self.answer + BOXED_CLOSE

    def expert(self) -> ExpertSolution:
        return ExpertSolution(self.text, "synthetic")


@dataclass(frozen=True)
class ShortcutSpec:
    kind: str
    positions: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in SHORTCUT_KINDS:
            raise ValueError(f"kind must be one of {SHORTCUT_KINDS}")


@dataclass(frozen=True)
class ShortcutTrace:
    trace: FullTrace
    injected: tuple[int, ...]  # step indices, in the modified trace, that carry a shortcut


def full_trace(problem: ArithChainProblem) -> FullTrace:
    v = problem.start
    steps = []
    for o, b in zip(problem.ops, problem.operands):
        v = apply_op(v, o, b)
        steps.append(Step(o, b, v))
    return FullTrace(tuple(steps), fmt(v))


def generate_problem(seed: int, difficulty: int, pid: str | None = None) -> tuple[ArithChainProblem, FullTrace]:
    if difficulty < 1:
        raise ValueError("difficulty must be >= 1")
    rng = np.random.default_rng([seed, difficulty])
    start = int(rng.integers(0, MODULUS))
    ops = tuple(OPS[i] for i in rng.integers(0, len(OPS), size=difficulty))
    operands = tuple(int(b) for b in rng.integers(1, MAX_OPERAND + 1, size=difficulty))
    problem = ArithChainProblem(pid or f"p{seed}-d{difficulty}", start, ops, operands)
    return problem, full_trace(problem)


def compress_solution(trace: FullTrace, elision_rate: float, seed: int) -> CompressedSolution:
    """Drop each intermediate step with probability ``elision_rate``.

    The first step and the boxed answer are always kept.
    """
    if not 0.0 <= elision_rate <= 1.0:
        raise ValueError("elision_rate must be in [0, 1]")
    n = len(trace.steps)
    rng = np.random.default_rng(seed)
    draws = rng.random(n)
    keep = [0] + [i for i in range(1, n) if draws[i] >= elision_rate]
    return CompressedSolution(tuple(keep), tuple(trace.steps[i] for i in keep), trace.answer, elision_rate)


def inject_rationalization_shortcut(trace: FullTrace, spec: ShortcutSpec, seed: int = 0) -> ShortcutTrace:
    """Replace derivations with unjustified jumps to the correct waypoint.

    ``forced_result`` keeps every value but drops the producing operation at
    the given steps. ``skip_derivation`` removes the given steps; the step
    that follows each gap is the one left without a valid derivation, and
    the last step can never be skipped.
    """
    n = len(trace.steps)
    positions = tuple(sorted(set(spec.positions)))
    if not positions:
        hi = n if spec.kind == "forced_result" else n - 1
        if hi < 1:
            raise ValueError("trace too short for this shortcut")
        positions = (int(np.random.default_rng(seed).integers(0, hi)),)
    limit = n if spec.kind == "forced_result" else n - 1
    if any(p < 0 or p >= limit for p in positions):
        raise ValueError(f"invalid shortcut span {positions} for a {n}-step trace")
    steps = list(trace.steps)
    if spec.kind == "forced_result":
        for p in positions:
            steps[p] = Step(None, None, steps[p].value)
        injected = positions
    else:
        if any(b - a == 1 for a, b in zip(positions, positions[1:])):
            raise ValueError("adjacent skipped steps merge into one gap")
        steps = [s for i, s in enumerate(steps) if i not in positions]
        injected = tuple(p - k for k, p in enumerate(positions))
    return ShortcutTrace(FullTrace(tuple(steps), trace.answer), injected)


def parse_steps(think_text: str) -> list[Step] | None:
    """Inverse of ``FullTrace.think_text``; None if the text is malformed."""
    steps = []
    pos = 0
    for m in _STEP.finditer(think_text):
        if m.start() != pos:
            return None
        op, operand, value = m.group(1), m.group(2), int(m.group(3))
        if op and operand is not None:
            steps.append(Step(op, int(operand), value))
        elif not op and operand is None:
            steps.append(Step(None, None, value))
        else:
            return None
        pos = m.end()
    return steps if pos == len(think_text) else None


def detect_shortcuts(start: int, steps: Sequence[Step]) -> list[int]:
    """Re-derive each step from the previous stated value; flag failures."""
    flagged = []
    prev = start
    for i, s in enumerate(steps):
        if s.op is None or apply_op(prev, s.op, s.operand) != s.value:
            flagged.append(i)
        prev = s.value
    return flagged


def evaluate_chain(start: int, ops: Sequence[str], operands: Sequence[int]) -> int:
    """Independent left-to-right evaluator used as a check on the generator."""
    total = start
    for o, b in zip(ops, operands):
        total = {"+": total + b, "-": total - b, "*": total * b}[o] % MODULUS
    return total


def parse_problem(text: str) -> ArithChainProblem:
    m = re.fullmatch(r"(\d{3})((?:[+\-*]\d)*)", text)
    if not m:
        raise ValueError(f"not an arithmetic chain: {text!r}")
    pairs = re.findall(r"([+\-*])(\d)", m.group(2))
    return ArithChainProblem("", int(m.group(1)), tuple(p[0] for p in pairs), tuple(int(p[1]) for p in pairs))


# --------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    easy_difficulties: tuple[int, int] = (1, 5)
    hard_difficulties: tuple[int, int] = (8, 12)
    candidates_per_difficulty: int = 40
    elision_rate: float = 0.7
    filter_attempts: int = 32
    hard_size: int | None = None
    validation_size: int = 24
    easy_size: int = 200


@dataclass
class CorpusRecord:
    id: str
    problem: str
    solution: str
    answer: str | None
    domain: str = "verifiable"
    difficulty: int = 0
    full_solution: str = ""

    def to_json(self) -> dict:
        return {
            "id": self.id, "problem": self.problem, "solution": self.solution,
            "answer": self.answer, "domain": self.domain,
            "difficulty": self.difficulty, "full_solution": self.full_solution,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CorpusRecord":
        return cls(d["id"], d["problem"], d["solution"], d.get("answer"), d.get("domain", "verifiable"),
                   int(d.get("difficulty", 0)), d.get("full_solution", ""))

    def instance(self) -> ProblemInstance:
        return ProblemInstance(self.id, self.problem, self.answer, self.domain)

    def expert(self) -> ExpertSolution:
        return ExpertSolution(self.solution, "synthetic")


@dataclass
class Corpus:
    pretrain: list[CorpusRecord]
    hard: list[CorpusRecord]
    validation: list[CorpusRecord]
    solve_counts: dict[str, int] = field(default_factory=dict)

    def splits(self) -> dict[str, list[CorpusRecord]]:
        return {"pretrain": self.pretrain, "hard": self.hard, "validation": self.validation}


class CorpusError(ValueError):
    pass


def make_record(problem: ArithChainProblem, trace: FullTrace, elision_rate: float, seed: int) -> CorpusRecord:
    comp = compress_solution(trace, elision_rate, seed)
    return CorpusRecord(problem.id, problem.text, comp.text, problem.answer, "verifiable",
                        problem.difficulty, trace.solution_text)


def candidate_problems(seed: int, difficulties: tuple[int, int], per_difficulty: int,
                       prefix: str) -> list[tuple[ArithChainProblem, FullTrace]]:
    out = []
    for d in range(difficulties[0], difficulties[1] + 1):
        for j in range(per_difficulty):
            out.append(generate_problem(seed * 1_000_003 + j, d, f"{prefix}-d{d:02d}-{j:04d}"))
    return out


def build_corpus(config: CorpusConfig, solve_count: Callable[[list[ProblemInstance]], list[int]]) -> Corpus:
    """Split problems by how often the base model solves them.

    ``solve_count`` maps problems to the number of correct answers among
    ``config.filter_attempts`` seeded base-model attempts. Hard problems are
    the ones never solved; validation takes the next-hardest band (fewest
    non-zero successes).
    """
    easy = [
        make_record(p, t, 0.0, config.seed)
        for p, t in candidate_problems(config.seed, config.easy_difficulties,
                                       max(1, config.easy_size // (config.easy_difficulties[1] - config.easy_difficulties[0] + 1)),
                                       "easy")
    ]
    cands = candidate_problems(config.seed + 1, config.hard_difficulties, config.candidates_per_difficulty, "hard")
    records = [make_record(p, t, config.elision_rate, config.seed * 7919 + k) for k, (p, t) in enumerate(cands)]
    counts = solve_count([r.instance() for r in records])
    solved = dict(zip((r.id for r in records), counts))
    hard = [r for r in records if solved[r.id] == 0]
    if not hard:
        raise CorpusError(
            f"solvability filter left no hard problems: {len(records)} candidates, "
            f"min successes {min(counts) if counts else 'n/a'} of {config.filter_attempts}"
        )
    if config.hard_size is not None:
        hard = hard[: config.hard_size]
    rest = sorted((r for r in records if solved[r.id] > 0), key=lambda r: (solved[r.id], r.id))
    validation = rest[: config.validation_size]
    return Corpus(easy, hard, validation, solved)


def write_corpus(path, records: Sequence[CorpusRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_corpus(path) -> list[CorpusRecord]:
    with open(path, encoding="utf-8") as fh:
        return [CorpusRecord.from_json(json.loads(line)) for line in fh if line.strip()]
