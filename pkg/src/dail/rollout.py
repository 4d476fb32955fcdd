"""Trace generation: direct sampling, mixed-policy rollouts, hint
rationalization, and budget-forced decoding.

Random streams are keyed by (seed, problem id, sample index), so a trace
never depends on which worker produced it or what else was in flight.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .contexts import (
    ExpertSolution,
    ProblemInstance,
    TemplateSet,
    default_templates,
)
from .model import Decoder, LowRankAdapter, ModelParams
from .sampling import SamplerConfig, sample_rows, softmax
from .waypoints import extract_final_answer

log = logging.getLogger(__name__)

STUDENT_ACCEPTED = "student_accepted"
PRIVILEGED_RESAMPLED = "privileged_resampled"
STUDENT_CONTINUATION = "student_continuation"

DEFAULT_ANSWER_BUDGET = 2048


@dataclass(frozen=True)
class RolloutConfig:
    mode: str = "mixed"
    tau: float = 0.8
    max_len: int = 256
    mixed_truncation: int | None = 256
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self) -> None:
        if self.mode not in ("direct", "mixed"):
            raise ValueError(f"mode must be 'direct' or 'mixed', got {self.mode!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")
        if self.mixed_truncation is not None and not 0 <= self.mixed_truncation <= self.max_len:
            raise ValueError("mixed_truncation must lie in [0, max_len]")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class Trace:
    problem_id: str
    tokens: tuple[int, ...]
    provenance: tuple[str, ...]
    accept_rate: float
    terminated_by: str
    sample_index: int = 0
    proposals: tuple[int, ...] = ()  # student proposals during the mixed phase
    forced_close: bool = False
    think_len: int | None = None  # tokens before THINK_CLOSE, None if never closed
    answer_len: int = 0  # tokens after THINK_CLOSE (EOS included)

    def __post_init__(self) -> None:
        if len(self.provenance) != len(self.tokens):
            raise ValueError("provenance must align with tokens")

    def text(self, templates: TemplateSet | None = None) -> str:
        return (templates or default_templates()).vocab.decode_until_eos(self.tokens)

    def answer(self, templates: TemplateSet | None = None) -> str | None:
        return extract_final_answer(self.text(templates))

    def to_record(self, templates: TemplateSet | None = None, fingerprint: str = "") -> dict:
        return {
            "problem_id": self.problem_id,
            "sample_index": self.sample_index,
            "text": self.text(templates),
            "tokens": list(self.tokens),
            "provenance": list(self.provenance),
            "accept_rate": self.accept_rate,
            "terminated_by": self.terminated_by,
            "config_fingerprint": fingerprint,
        }

    @classmethod
    def from_record(cls, d: dict) -> "Trace":
        return cls(d["problem_id"], tuple(d["tokens"]), tuple(d["provenance"]), float(d["accept_rate"]),
                   d["terminated_by"], int(d.get("sample_index", 0)))


def stream_key(problem_id: str) -> int:
    return int.from_bytes(hashlib.sha256(problem_id.encode()).digest()[:8], "little")


def problem_rng(seed: int, problem_id: str, sample_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream_key(problem_id), sample_index])


def resample_rng(rng: np.random.Generator) -> np.random.Generator:
    """Independent stream for privileged resampling, derived without advancing ``rng``."""
    return rng.spawn(1)[0]


def _run_rows(
    params: ModelParams,
    n: int,
    rngs: Sequence[np.random.Generator],
    sampler: SamplerConfig,
    max_len: int,
    *,
    mode: str,
    student_prefix: Sequence[int] | None = None,
    student_adapter: LowRankAdapter | None = None,
    privileged_prefix: Sequence[int] | None = None,
    tau: float = 0.0,
    truncation: int | None = None,
    resample_rngs: Sequence[np.random.Generator] | None = None,
    think_budget: int | None = None,
    answer_budget: int | None = None,
    problem_id: str = "",
    sample_offset: int = 0,
    templates: TemplateSet | None = None,
) -> list[Trace]:
    """Lock-step generation for ``n`` rows that share one prompt.

    mode ``student``: sample from the student view.
    mode ``direct``: sample from the privileged view.
    mode ``mixed``: student proposes, privileged verifies against ``tau``.
    """
    vocab = (templates or default_templates()).vocab
    use_student = mode in ("student", "mixed")
    use_priv = mode in ("direct", "mixed")
    stud = priv = None
    if use_student:
        stud = Decoder(params, student_adapter)
        logits_s = stud.prefill(torch.tensor([list(student_prefix)] * n))
    if use_priv:
        priv = Decoder(params, None)
        logits_p = priv.prefill(torch.tensor([list(privileged_prefix)] * n))

    out = [[] for _ in range(n)]
    prov = [[] for _ in range(n)]
    props = [[] for _ in range(n)]
    active = np.ones(n, dtype=bool)
    terminated = ["max_len"] * n
    think_len: list[int | None] = [None] * n
    answer_len = [0] * n
    forced = [False] * n
    mixed_len = truncation if (mode == "mixed" and truncation is not None) else max_len

    for step in range(max_len):
        in_mixed = mode == "mixed" and step < mixed_len
        if mode == "direct":
            toks, _ = sample_rows(logits_p, sampler, rngs)
            flags = [PRIVILEGED_RESAMPLED] * n
        elif in_mixed:
            proposal, _ = sample_rows(logits_s, sampler, rngs)
            p_accept = np.take_along_axis(softmax(logits_p), proposal[:, None], axis=-1)[:, 0]
            resampled, _ = sample_rows(logits_p, sampler, resample_rngs)
            accept = p_accept >= tau
            toks = np.where(accept, proposal, resampled)
            flags = [STUDENT_ACCEPTED if a else PRIVILEGED_RESAMPLED for a in accept]
        else:
            toks, _ = sample_rows(logits_s, sampler, rngs)
            flags = [STUDENT_CONTINUATION] * n

        if think_budget is not None:
            for i in range(n):
                if active[i] and think_len[i] is None and len(out[i]) >= think_budget \
                        and toks[i] != vocab.think_close:
                    toks[i] = vocab.think_close
                    forced[i] = True

        for i in range(n):
            if not active[i]:
                continue
            t = int(toks[i])
            out[i].append(t)
            prov[i].append(flags[i])
            if in_mixed:
                props[i].append(int(proposal[i]))
            if think_len[i] is not None:
                answer_len[i] += 1
            elif t == vocab.think_close:
                think_len[i] = len(out[i]) - 1
            if t == vocab.eos:
                active[i] = False
                terminated[i] = "eos"
            elif answer_budget is not None and answer_len[i] >= answer_budget:
                active[i] = False
                terminated[i] = "answer_budget"
        if not active.any() or step == max_len - 1:
            break

        feed = torch.as_tensor(np.where(active, toks, vocab.eos), dtype=torch.long)
        next_mixed = mode == "mixed" and step + 1 < mixed_len
        need_priv = mode == "direct" or next_mixed
        need_stud = use_student
        if (need_stud and stud.remaining <= 0) or (need_priv and priv.remaining <= 0):
            break  # context overflow: remaining rows end at max_len
        if need_stud:
            logits_s = stud.step(feed)
        if need_priv:
            logits_p = priv.step(feed)

    traces = []
    for i in range(n):
        mixed_flags = [f for f in prov[i] if f != STUDENT_CONTINUATION] if mode == "mixed" else []
        rate = (sum(f == STUDENT_ACCEPTED for f in mixed_flags) / len(mixed_flags)) if mixed_flags else 0.0
        if mode == "student":
            rate = 1.0 if prov[i] else 0.0
        traces.append(Trace(problem_id, tuple(out[i]), tuple(prov[i]), rate, terminated[i],
                            sample_offset + i, tuple(props[i]), forced[i], think_len[i], answer_len[i]))
    return traces


def _prefix(vocab, ctx) -> list[int]:
    return [vocab.bos] + list(ctx.tokens)


def direct_sample(x: ProblemInstance, s: ExpertSolution, params: ModelParams, config: RolloutConfig,
                  rng: np.random.Generator, templates: TemplateSet | None = None,
                  sample_index: int = 0) -> Trace:
    """Every token drawn from the privileged student; ``tau`` plays no role."""
    ts = templates or default_templates()
    return _run_rows(params, 1, [rng], config.sampler, config.max_len, mode="direct",
                     privileged_prefix=_prefix(ts.vocab, ts.privileged(x, s)),
                     problem_id=x.id, sample_offset=sample_index, templates=ts)[0]


def mixed_policy_rollout(x: ProblemInstance, s: ExpertSolution, params: ModelParams,
                         student_adapter: LowRankAdapter | None, config: RolloutConfig,
                         rng: np.random.Generator, templates: TemplateSet | None = None,
                         sample_index: int = 0) -> Trace:
    """Student proposes each token; the privileged student keeps it if its
    temperature-1 probability of that token is at least ``tau``, otherwise
    replaces it with its own draw. Past ``mixed_truncation`` tokens the
    student continues alone until EOS or ``max_len``.
    """
    ts = templates or default_templates()
    return _run_rows(params, 1, [rng], config.sampler, config.max_len, mode="mixed",
                     student_prefix=_prefix(ts.vocab, ts.student(x)), student_adapter=student_adapter,
                     privileged_prefix=_prefix(ts.vocab, ts.privileged(x, s)),
                     tau=config.tau, truncation=config.mixed_truncation,
                     resample_rngs=[resample_rng(rng)],
                     problem_id=x.id, sample_offset=sample_index, templates=ts)[0]


def student_sample(x: ProblemInstance, params: ModelParams, adapter: LowRankAdapter | None,
                   sampler: SamplerConfig, max_len: int, rngs: Sequence[np.random.Generator],
                   templates: TemplateSet | None = None, think_budget: int | None = None,
                   answer_budget: int | None = None, context: str = "student") -> list[Trace]:
    """``len(rngs)`` independent student samples, batched in lock-step."""
    ts = templates or default_templates()
    ctx = ts.student(x) if context == "student" else ts.rationalize(x)
    return _run_rows(params, len(rngs), rngs, sampler, max_len, mode="student",
                     student_prefix=_prefix(ts.vocab, ctx), student_adapter=adapter,
                     think_budget=think_budget, answer_budget=answer_budget,
                     problem_id=x.id, templates=ts)


def rationalize_with_hint(x: ProblemInstance, params: ModelParams, adapter: LowRankAdapter | None,
                          config: RolloutConfig, attempts: int, seed: int = 0,
                          templates: TemplateSet | None = None) -> list[Trace]:
    """Sample with the answer given as a hint; keep traces that box that answer."""
    from .evaluation import answers_equivalent

    if x.answer is None:
        raise ValueError("rationalization needs a verifiable instance")
    ts = templates or default_templates()
    rngs = [problem_rng(seed, x.id + "#hint", i) for i in range(attempts)]
    traces = student_sample(x, params, adapter, config.sampler, config.max_len, rngs, ts, context="rationalize")
    return [t for t in traces if answers_equivalent(t.answer(ts) or "", x.answer, x.domain)]


def budget_forced_generate(x: ProblemInstance, params: ModelParams, adapter: LowRankAdapter | None,
                           think_budget: int, sampler: SamplerConfig, rng: np.random.Generator,
                           answer_budget: int = DEFAULT_ANSWER_BUDGET, max_len: int | None = None,
                           templates: TemplateSet | None = None) -> Trace:
    """Force THINK_CLOSE once ``think_budget`` think tokens are spent, then
    allow at most ``answer_budget`` further tokens."""
    if think_budget < 0:
        raise ValueError("think_budget must be >= 0")
    total = max_len if max_len is not None else think_budget + 1 + answer_budget
    return student_sample(x, params, adapter, sampler, total, [rng], templates,
                          think_budget=think_budget, answer_budget=answer_budget)[0]


# --------------------------------------------------------------------------
# dataset construction


@dataclass
class DatasetResult:
    traces: list[Trace]
    failures: dict[str, str]


def _one_problem(args) -> tuple[str, list[Trace] | str]:
    x, s, params, adapter, config, seed, samples, template_dir = args
    ts = default_templates() if template_dir is None else TemplateSet(template_dir)
    try:
        out = []
        for k in range(samples):
            rng = problem_rng(seed, x.id, k)
            if config.mode == "direct":
                out.append(direct_sample(x, s, params, config, rng, ts, k))
            else:
                out.append(mixed_policy_rollout(x, s, params, adapter, config, rng, ts, k))
        return x.id, out
    except Exception as exc:  # recorded per problem, never fatal
        return x.id, f"{type(exc).__name__}: {exc}"


def _init_worker() -> None:
    torch.set_num_threads(1)


def map_problems(fn, jobs: list, workers: int) -> list:
    """Order-preserving map over problems, optionally across processes."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def generate_dataset(items: Iterable[tuple[ProblemInstance, ExpertSolution]], params: ModelParams,
                     config: RolloutConfig, workers: int = 1, seed: int = 0, samples: int = 1,
                     student_adapter: LowRankAdapter | None = None,
                     template_dir: str | None = None) -> DatasetResult:
    """D_syn: one trace per (problem, sample index)."""
    jobs = [(x, s, params, student_adapter, config, seed, samples, template_dir) for x, s in items]
    traces: list[Trace] = []
    failures: dict[str, str] = {}
    for pid, res in map_problems(_one_problem, jobs, workers):
        if isinstance(res, str):
            log.warning("rollout failed for %s: %s", pid, res)
            failures[pid] = res
        else:
            traces.extend(res)
    return DatasetResult(traces, failures)


def write_traces(path, traces: Sequence[Trace], config: RolloutConfig | None = None,
                 templates: TemplateSet | None = None) -> None:
    fp = config.fingerprint() if config is not None else ""
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(t.to_record(templates, fp), sort_keys=True) + "\n")


def read_traces(path) -> list[Trace]:
    with open(path, encoding="utf-8") as fh:
        return [Trace.from_record(json.loads(line)) for line in fh if line.strip()]
