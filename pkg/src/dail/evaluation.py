"""pass@k estimation, answer checking, evaluation runs, dedup, and the tau and
gamma sweeps."""
from __future__ import annotations

import csv
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .contexts import ExpertSolution, ProblemInstance, TemplateSet, default_templates
from .model import LowRankAdapter, ModelParams
from .rollout import (
    RolloutConfig,
    map_problems,
    mixed_policy_rollout,
    problem_rng,
    student_sample,
)
from .sampling import SamplerConfig

log = logging.getLogger(__name__)

TAU_GRID = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99, 0.999, 0.9999)
GAMMA_GRID = (0.01, 0.05, 0.1, 0.5, 1.0)
DEDUP_THRESHOLD = 0.7
_NUMERIC = re.compile(r"[+-]?\d+(\.\d+)?")


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: 1 - C(n-c, k) / C(n, k), in product form."""
    if not (isinstance(n, int) and isinstance(c, int) and isinstance(k, int)):
        raise TypeError("n, c and k must be integers")
    if n < 1 or not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got n={n}, k={k}")
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if n - c < k:
        return 1.0
    miss = 1.0
    for i in range(k):
        miss *= (n - c - i) / (n - i)
    return 1.0 - miss


def default_ks(n: int) -> list[int]:
    """Powers of two up to n."""
    ks, k = [], 1
    while k <= n:
        ks.append(k)
        k *= 2
    return ks


def _normalize_numeric(s: str) -> str | None:
    s = "".join(s.split())
    if not _NUMERIC.fullmatch(s):
        return None
    sign = "-" if s.startswith("-") else ""
    s = s.lstrip("+-")
    whole, _, frac = s.partition(".")
    whole = whole.lstrip("0") or "0"
    frac = frac.rstrip("0")
    if whole == "0" and not frac:
        sign = ""
    return sign + whole + ("." + frac if frac else "")


def answers_equivalent(a: str | None, b: str | None, domain: str = "verifiable") -> bool:
    """Numeric answers compare by normalized value, everything else exactly."""
    if not a or not b:
        return False
    na, nb = _normalize_numeric(a), _normalize_numeric(b)
    if na is not None and nb is not None:
        return na == nb
    return a.strip() == b.strip()


# --------------------------------------------------------------------------
# evaluation runs


@dataclass(frozen=True)
class EvalRecord:
    problem_id: str
    n: int
    c: int
    answers: tuple[str | None, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= self.c <= self.n:
            raise ValueError(f"{self.problem_id}: c={self.c} outside [0, {self.n}]")
        if self.answers and len(self.answers) != self.n:
            raise ValueError(f"{self.problem_id}: {len(self.answers)} answers for n={self.n}")


@dataclass(frozen=True)
class PassAtKCurve:
    ks: tuple[int, ...]
    estimates: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.ks) != len(self.estimates):
            raise ValueError("ks and estimates differ in length")
        if any(k < 1 for k in self.ks) or list(self.ks) != sorted(set(self.ks)):
            raise ValueError("ks must be distinct, increasing and >= 1")
        if any(not 0.0 <= e <= 1.0 for e in self.estimates):
            raise ValueError("estimates must lie in [0, 1]")
        if any(b < a - 1e-12 for a, b in zip(self.estimates, self.estimates[1:])):
            raise ValueError("pass@k must be non-decreasing in k")

    def at(self, k: int) -> float:
        return self.estimates[self.ks.index(k)]

    @classmethod
    def from_records(cls, records: Sequence[EvalRecord], ks: Sequence[int]) -> "PassAtKCurve":
        if not records:
            raise ValueError("no records to aggregate")
        est = []
        for k in ks:
            est.append(math.fsum(pass_at_k(r.n, r.c, k) for r in records) / len(records))
        return cls(tuple(ks), tuple(est))


def score_answers(problem_id: str, answers: Sequence[str | None], truth: str, domain: str) -> EvalRecord:
    c = sum(answers_equivalent(a, truth, domain) for a in answers)
    return EvalRecord(problem_id, len(answers), c, tuple(answers))


def _eval_one(args) -> EvalRecord:
    x, params, adapter, n, sampler, think_budget, max_len, seed, template_dir = args
    ts = default_templates() if template_dir is None else TemplateSet(template_dir)
    rngs = [problem_rng(seed, x.id, i) for i in range(n)]
    try:
        traces = student_sample(x, params, adapter, sampler, max_len, rngs, ts, think_budget=think_budget)
        answers = [t.answer(ts) for t in traces]
    except Exception as exc:  # generation failure counts as n incorrect samples
        log.warning("generation failed for %s: %s", x.id, exc)
        answers = [None] * n
    return score_answers(x.id, answers, x.answer or "", x.domain)


def evaluate(params: ModelParams, adapter: LowRankAdapter | None, problems: Sequence[ProblemInstance],
             n: int, sampler: SamplerConfig, think_budget: int | None = None, max_len: int = 256,
             seed: int = 0, ks: Sequence[int] | None = None, workers: int = 1,
             template_dir: str | None = None) -> tuple[list[EvalRecord], PassAtKCurve]:
    """n seeded student generations per problem, scored against ground truth."""
    ks = list(ks) if ks is not None else default_ks(n)
    if max(ks) > n:
        raise ValueError(f"n={n} is smaller than the largest requested k={max(ks)}")
    for x in problems:
        if x.answer is None:
            raise ValueError(f"{x.id}: evaluation needs answer-bearing problems")
    jobs = [(x, params, adapter, n, sampler, think_budget, max_len, seed, template_dir) for x in problems]
    records = map_problems(_eval_one, jobs, workers)
    return records, PassAtKCurve.from_records(records, ks)


def write_records_csv(path: str | Path, records: Sequence[EvalRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["problem_id", "n", "c"])
        for r in records:
            w.writerow([r.problem_id, r.n, r.c])


def write_curve_csv(path: str | Path, curve: PassAtKCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "pass_at_k"])
        for k, e in zip(curve.ks, curve.estimates):
            w.writerow([k, f"{e:.6f}"])


def plot_curves(path: str | Path, curves: dict[str, PassAtKCurve], title: str = "") -> None:
    """pass@k against log2 k, one line per label, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "dail"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label in sorted(curves):
        c = curves[label]
        ax.plot(c.ks, c.estimates, marker="o", label=label)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("k")
    ax.set_ylabel("pass@k")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# --------------------------------------------------------------------------
# deduplication


def _trigrams(text: str) -> Counter:
    return Counter(text[i:i + 3] for i in range(len(text) - 2))


def _cosine(a: Counter, b: Counter) -> float:
    dot = sum(v * b[k] for k, v in a.items())
    norm2 = sum(v * v for v in a.values()) * sum(v * v for v in b.values())
    return min(1.0, dot / math.sqrt(norm2))


def trigram_cosine(a: str, b: str) -> float:
    ca, cb = _trigrams(a), _trigrams(b)
    if not ca or not cb:
        return 1.0 if a == b else 0.0
    return _cosine(ca, cb)


def dedup(train: Sequence[str], eval_texts: Sequence[str],
          threshold: float = DEDUP_THRESHOLD) -> list[tuple[int, int, float]]:
    """(train index, eval index, similarity) for every pair at or above threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    train_grams = [_trigrams(t) for t in train]
    flagged = []
    for j, e in enumerate(eval_texts):
        eg = _trigrams(e)
        for i, tg in enumerate(train_grams):
            if eg and tg:
                sim = _cosine(tg, eg)
            else:
                sim = 1.0 if train[i] == e else 0.0
            if sim >= threshold:
                flagged.append((i, j, sim))
    return flagged


def remove_flagged(eval_texts: Sequence[str], flagged: Sequence[tuple[int, int, float]]) -> list[int]:
    """Indices of eval items that survive dedup."""
    drop = {j for _, j, _ in flagged}
    return [j for j in range(len(eval_texts)) if j not in drop]


# --------------------------------------------------------------------------
# calibration sweeps


@dataclass(frozen=True)
class TauRow:
    tau: float
    accept_rate: float
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass
class TauReport:
    rows: list[TauRow]
    selected: float


def select_tau(rows: Sequence[TauRow], exclude_from: float = 0.99) -> float:
    """Best accuracy outside the tau >= exclude_from region; ties go to lower tau."""
    pool = [r for r in rows if r.tau < exclude_from] or list(rows)
    best = max(pool, key=lambda r: (r.accuracy, -r.tau))
    return best.tau


def _tau_one(args) -> list[tuple[float, float, bool]]:
    x, s, params, adapter, config, taus, samples, seed, template_dir = args
    from dataclasses import replace

    ts = default_templates() if template_dir is None else TemplateSet(template_dir)
    out = []
    for tau in taus:
        cfg = replace(config, mode="mixed", tau=tau)
        for k in range(samples):
            tr = mixed_policy_rollout(x, s, params, adapter, cfg, problem_rng(seed, x.id, k), ts, k)
            out.append((tau, tr.accept_rate, answers_equivalent(tr.answer(ts), x.answer, x.domain)))
    return out


def calibrate_tau(items: Sequence[tuple[ProblemInstance, ExpertSolution]], params: ModelParams,
                  config: RolloutConfig, grid: Sequence[float] = TAU_GRID, samples: int = 1,
                  seed: int = 0, adapter: LowRankAdapter | None = None, workers: int = 1,
                  template_dir: str | None = None) -> TauReport:
    """Mixed-policy correctness on the training set for each tau."""
    if any(not 0.0 <= t <= 1.0 for t in grid):
        raise ValueError("tau grid must lie in [0, 1]")
    items = [(x, s) for x, s in items if x.answer is not None]
    jobs = [(x, s, params, adapter, config, tuple(grid), samples, seed, template_dir) for x, s in items]
    acc: dict[float, list] = {t: [] for t in grid}
    for res in map_problems(_tau_one, jobs, workers):
        for tau, rate, ok in res:
            acc[tau].append((rate, ok))
    rows = []
    for tau in grid:
        vals = acc[tau]
        rate = math.fsum(r for r, _ in vals) / len(vals) if vals else 0.0
        rows.append(TauRow(tau, rate, sum(ok for _, ok in vals), len(vals)))
    return TauReport(rows, select_tau(rows))


def write_tau_csv(path: str | Path, report: TauReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "accept_rate", "correct", "total", "accuracy", "selected"])
        for r in report.rows:
            w.writerow([r.tau, f"{r.accept_rate:.6f}", r.correct, r.total, f"{r.accuracy:.6f}",
                        int(r.tau == report.selected)])


@dataclass
class GammaReport:
    curves: dict[float, PassAtKCurve]
    selected: float
    extra: dict = field(default_factory=dict)


def select_gamma(curves: dict[float, PassAtKCurve]) -> float:
    """Highest pass@max-k; ties broken at the next lower k, then lower gamma."""
    if not curves:
        raise ValueError("gamma grid is empty")

    def key(g: float):
        c = curves[g]
        order = sorted(range(len(c.ks)), key=lambda i: -c.ks[i])
        return tuple(round(c.estimates[i], 12) for i in order) + (-g,)

    return max(curves, key=key)


def tune_gamma(validation: Sequence[ProblemInstance], train_fn: Callable[[float], LowRankAdapter],
               params: ModelParams, grid: Sequence[float], n: int, sampler: SamplerConfig,
               max_len: int = 256, seed: int = 0, ks: Sequence[int] | None = None,
               workers: int = 1) -> GammaReport:
    """Train one adapter per gamma via ``train_fn`` and compare on validation."""
    if not grid:
        raise ValueError("gamma grid is empty")
    curves = {}
    for g in grid:
        adapter = train_fn(g)
        _, curve = evaluate(params, adapter, validation, n, sampler, max_len=max_len, seed=seed,
                            ks=ks, workers=workers)
        curves[g] = curve
        log.info("gamma %s: %s", g, ", ".join(f"pass@{k}={e:.3f}" for k, e in zip(curve.ks, curve.estimates)))
    return GammaReport(curves, select_gamma(curves))


def write_gamma_csv(path: str | Path, report: GammaReport) -> None:
    ks = next(iter(report.curves.values())).ks
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma"] + [f"pass@{k}" for k in ks] + ["selected"])
        for g in sorted(report.curves):
            c = report.curves[g]
            w.writerow([g] + [f"{e:.6f}" for e in c.estimates] + [int(g == report.selected)])
