"""End-to-end desk pipeline: pretrain a base model, curate the hard split,
generate D_syn with mixed-policy rollouts, train DAIL and the baselines, and
evaluate everything on a held-out part of the hard split.

Every stage is a plain function of the config, so the CLI subcommands and
``repro`` share one code path.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import PipelineConfig
from .contexts import TemplateSet, default_templates
from .evaluation import (
    PassAtKCurve,
    default_ks,
    evaluate,
    plot_curves,
    write_curve_csv,
    write_records_csv,
)
from .model import LowRankAdapter, ModelConfig, ModelParams, forward
from .pretrain import PretrainConfig, pretrain
from .rollout import RolloutConfig, Trace, generate_dataset, stream_key, write_traces
from .sampling import SamplerConfig
from .synthetic import (
    Corpus,
    CorpusConfig,
    CorpusRecord,
    ShortcutSpec,
    Step,
    build_corpus,
    fmt,
    full_trace,
    inject_rationalization_shortcut,
    parse_problem,
    parse_steps,
    write_corpus,
)
from .waypoints import extract_waypoints
from .training import TrainConfig, TrainExample, TrainResult, make_example, train

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# config translation


def model_config(cfg: PipelineConfig, vocab_size: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(vocab_size, m.embed_dim, m.layers, m.heads, m.context_len, "fast", m.positional)


def sampler_config(cfg: PipelineConfig) -> SamplerConfig:
    return SamplerConfig(cfg.rollout.temperature, cfg.rollout.top_p, cfg.seed)


def rollout_config(cfg: PipelineConfig) -> RolloutConfig:
    r = cfg.rollout
    return RolloutConfig(r.mode, r.tau, r.max_len, r.mixed_truncation, sampler_config(cfg))


def train_config(cfg: PipelineConfig, objective: str = "contrastive", gamma: float | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        gamma=t.gamma if gamma is None else gamma,
        learning_rate=t.learning_rate, warmup_steps=t.warmup_steps, weight_decay=t.weight_decay,
        batch_size=t.batch_size, epochs=t.epochs, token_aggregation=t.token_aggregation,
        negative_clamp=t.negative_clamp, objective=objective,
        rank=t.rank or None, alpha=t.alpha or None, seed=cfg.seed,
    )


def corpus_config(cfg: PipelineConfig) -> CorpusConfig:
    c = cfg.corpus
    return CorpusConfig(
        seed=cfg.seed, easy_difficulties=(c.easy_min, c.easy_max), hard_difficulties=(c.hard_min, c.hard_max),
        candidates_per_difficulty=c.candidates_per_difficulty, elision_rate=c.elision_rate,
        filter_attempts=c.filter_attempts, hard_size=c.hard_size or None, validation_size=c.validation_size,
    )


def pretrain_config(cfg: PipelineConfig) -> PretrainConfig:
    p = cfg.pretrain
    return PretrainConfig(steps=p.steps, batch_size=p.batch_size, lr=p.learning_rate, seed=cfg.seed,
                          student_phase=p.student_phase,
                          student_max_difficulty=cfg.corpus.easy_max,
                          guided_max_difficulty=cfg.corpus.hard_max)


def eval_ks(cfg: PipelineConfig) -> list[int]:
    return [k for k in default_ks(cfg.eval.n) if k <= cfg.eval.k_max]


# --------------------------------------------------------------------------
# stages


def pretrain_base(cfg: PipelineConfig, templates: TemplateSet | None = None) -> ModelParams:
    ts = templates or default_templates()
    params, _ = pretrain(model_config(cfg, len(ts.vocab)), pretrain_config(cfg), ts, progress=True)
    return params


def solve_counter(params: ModelParams, cfg: PipelineConfig):
    """Correct answers per problem among ``filter_attempts`` seeded base attempts."""

    def count(problems):
        records, _ = evaluate(params, None, problems, cfg.corpus.filter_attempts, sampler_config(cfg),
                              max_len=cfg.eval.max_len, seed=cfg.seed + 1, ks=[1], workers=cfg.workers)
        return [r.c for r in records]

    return count


def curate(params: ModelParams, cfg: PipelineConfig) -> Corpus:
    return build_corpus(corpus_config(cfg), solve_counter(params, cfg))


def split_hard(records: Sequence[CorpusRecord], holdout: float,
               seed: int) -> tuple[list[CorpusRecord], list[CorpusRecord]]:
    """Id-keyed partition of the hard split into (train, held-out eval).

    With ``holdout == 0`` both halves are the full split, which evaluates on
    the training problems.
    """
    if holdout <= 0:
        return list(records), list(records)
    train_part, eval_part = [], []
    for r in records:
        u = np.random.default_rng([seed, stream_key(r.id), 7]).random()
        (eval_part if u < holdout else train_part).append(r)
    return train_part, eval_part


def generate_dsyn(params: ModelParams, records: Sequence[CorpusRecord], cfg: PipelineConfig,
                  templates: TemplateSet | None = None) -> list[Trace]:
    items = [(r.instance(), r.expert()) for r in records]
    res = generate_dataset(items, params, rollout_config(cfg), workers=cfg.workers, seed=cfg.seed,
                           samples=cfg.rollout.samples)
    return res.traces


def dail_examples(records: Sequence[CorpusRecord], traces: Sequence[Trace],
                  templates: TemplateSet | None = None) -> list[TrainExample]:
    ts = templates or default_templates()
    by_id = {r.id: r for r in records}
    return [make_example(by_id[t.problem_id].instance(), by_id[t.problem_id].expert(), t.tokens, ts)
            for t in traces]


@dataclass(frozen=True)
class InjectedSpan:
    example: int  # index into the returned example list
    span: tuple[int, int]  # [start, end) in trace token positions


def inject_trace_shortcuts(records: Sequence[CorpusRecord], examples: Sequence[TrainExample], rate: float,
                           seed: int, templates: TemplateSet | None = None
                           ) -> tuple[list[TrainExample], list[InjectedSpan]]:
    """Give a ``rate`` share of traces one forced result at a step whose value
    is a waypoint of the expert solution, the way a reference-conditioned
    generator rationalizes its way to a known intermediate result.

    Traces that do not parse, or have no derived step landing on a waypoint,
    are left unchanged.
    """
    vocab = (templates or default_templates()).vocab
    by_id = {r.id: r for r in records}
    out, spans = [], []
    for j, ex in enumerate(examples):
        rng = np.random.default_rng([seed, stream_key(ex.problem_id), j])
        toks = list(ex.trace)
        if rng.random() >= rate or vocab.think_close not in toks:
            out.append(ex)
            continue
        close = toks.index(vocab.think_close)
        steps = parse_steps(vocab.decode(toks[:close])) or []
        marks = set(extract_waypoints(by_id[ex.problem_id].solution, "numeric_only").texts)
        candidates = [i for i, st in enumerate(steps) if st.op is not None and fmt(st.value) in marks]
        if not candidates:
            out.append(ex)
            continue
        pos = int(rng.choice(candidates))
        steps[pos] = Step(None, None, steps[pos].value)
        before = vocab.encode("".join(st.render() for st in steps[:pos]))
        jump = vocab.encode(steps[pos].render())
        after = vocab.encode("".join(st.render() for st in steps[pos + 1:]))
        spans.append(InjectedSpan(len(out), (len(before), len(before) + len(jump))))
        out.append(TrainExample(ex.problem_id, ex.student, ex.privileged, ex.negative,
                                tuple(before + jump + after + toks[close:])))
    return out, spans


def training_examples(records: Sequence[CorpusRecord], traces: Sequence[Trace], cfg: PipelineConfig,
                      templates: TemplateSet | None = None) -> tuple[list[TrainExample], list[InjectedSpan]]:
    """D_syn examples with the configured share of injected shortcuts."""
    examples = dail_examples(records, traces, templates)
    return inject_trace_shortcuts(records, examples, cfg.train.shortcut_rate, cfg.seed, templates)


def sft_examples(records: Sequence[CorpusRecord], templates: TemplateSet | None = None) -> list[TrainExample]:
    """The compressed expert solution itself as the target, in trace format."""
    ts = templates or default_templates()
    out = []
    for r in records:
        body, _, boxed = r.solution.rpartition("\\boxed{")
        text = f"{body}{ts.vocab.decode([ts.vocab.think_close])}\\boxed{{{boxed}"
        out.append(make_example(r.instance(), None, ts.vocab.encode(text) + [ts.vocab.eos], ts))
    return out


def train_adapter(params: ModelParams, examples: Sequence[TrainExample], cfg: PipelineConfig,
                  objective: str, gamma: float | None = None) -> TrainResult:
    return train(examples, params, train_config(cfg, objective, gamma))


@dataclass(frozen=True)
class ShortcutProbe:
    problem_id: str
    tokens: tuple[int, ...]
    span: tuple[int, int]  # [start, end) in trace token positions


def shortcut_probes(records: Sequence[CorpusRecord], seed: int,
                    templates: TemplateSet | None = None) -> list[ShortcutProbe]:
    """One forced-result shortcut per problem at an id-keyed intermediate step."""
    ts = templates or default_templates()
    vocab = ts.vocab
    out = []
    for r in records:
        trace = full_trace(parse_problem(r.problem))
        n = len(trace.steps)
        if n < 2:
            continue
        rng = np.random.default_rng([seed, stream_key(r.id)])
        pos = int(rng.integers(1, n))
        shortcut = inject_rationalization_shortcut(trace, ShortcutSpec("forced_result", (pos,))).trace
        before = "".join(s.render() for s in shortcut.steps[:pos])
        start = len(vocab.encode(before))
        end = start + len(vocab.encode(shortcut.steps[pos].render()))
        tokens = tuple(vocab.encode(shortcut.text) + [vocab.eos])
        out.append(ShortcutProbe(r.id, tokens, (start, end)))
    return out


def _span_mean(params: ModelParams, adapter: LowRankAdapter | None, prefix: Sequence[int],
               trace: Sequence[int], span: tuple[int, int]) -> float:
    seq = torch.tensor(list(prefix) + list(trace))
    with torch.no_grad():
        logp = torch.log_softmax(forward(params, adapter, seq[None, :-1])[0].double(), dim=-1)
    lo, hi = span
    pos = torch.arange(len(prefix) - 1 + lo, len(prefix) - 1 + hi)
    return logp[pos, seq[pos + 1]].mean().item()


def injected_span_loglik(params: ModelParams, adapter: LowRankAdapter | None, examples: Sequence[TrainExample],
                         spans: Sequence[InjectedSpan], templates: TemplateSet | None = None) -> float:
    """Mean per-token log-likelihood of injected training spans under the student view."""
    bos = (templates or default_templates()).vocab.bos
    vals = [_span_mean(params, adapter, [bos] + list(examples[sp.example].student), examples[sp.example].trace,
                       sp.span) for sp in spans]
    return float(np.mean(vals)) if vals else float("nan")


def span_loglik(params: ModelParams, adapter: LowRankAdapter | None, records: Sequence[CorpusRecord],
                probes: Sequence[ShortcutProbe], templates: TemplateSet | None = None) -> float:
    """Mean per-token log-likelihood of the shortcut spans under the student view."""
    ts = templates or default_templates()
    by_id = {r.id: r for r in records}
    vals = []
    for pr in probes:
        prefix = [ts.vocab.bos] + list(ts.student(by_id[pr.problem_id].instance()).tokens)
        vals.append(_span_mean(params, adapter, prefix, pr.tokens, pr.span))
    return float(np.mean(vals)) if vals else float("nan")


# --------------------------------------------------------------------------
# desk suite


@dataclass
class DeskResult:
    curves: dict[str, PassAtKCurve]
    shortcut_ll: dict[str, tuple[float, float]]  # (injected training spans, held-out probes)
    corpus: Corpus
    traces: list[Trace]
    timings: dict[str, float] = field(default_factory=dict)


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_desk(cfg: PipelineConfig, out: Path | None = None, plots: bool = True) -> DeskResult:
    """Full desk-scale reproduction. Writes artifacts under ``out`` when given."""
    ts = default_templates()
    timings: dict[str, float] = {}
    reports = ckpts = None
    if out is not None:
        reports, ckpts = out / "reports", out / "checkpoints"
        for d in (reports, ckpts, out / "corpus", out / "traces"):
            d.mkdir(parents=True, exist_ok=True)

    def lap(name: str, t0: float) -> None:
        timings[name] = time.time() - t0
        log.info("stage %s done in %.1fs", name, timings[name])

    t0 = time.time()
    base = pretrain_base(cfg, ts)
    lap("pretrain", t0)

    t0 = time.time()
    corpus = curate(base, cfg)
    lap("curate", t0)
    train_recs, eval_recs = split_hard(corpus.hard, cfg.eval.holdout, cfg.seed)
    log.info("hard split %d problems (%d train, %d eval), validation %d", len(corpus.hard),
             len(train_recs), len(eval_recs), len(corpus.validation))

    t0 = time.time()
    traces = generate_dsyn(base, train_recs, cfg, ts)
    lap("rollout", t0)

    t0 = time.time()
    examples, injected = training_examples(train_recs, traces, cfg, ts)
    log.info("injected shortcuts into %d of %d traces", len(injected), len(examples))
    dail = train_adapter(base, examples, cfg, "contrastive")
    nll = train_adapter(base, examples, cfg, "nll")
    sft = train_adapter(base, sft_examples(train_recs, ts), cfg, "nll")
    lap("train", t0)

    t0 = time.time()
    problems = [r.instance() for r in eval_recs]
    models = {"base": None, "dail": dail.adapter, "sft": sft.adapter, "nll": nll.adapter}
    curves, records = {}, {}
    for name, adapter in models.items():
        records[name], curves[name] = evaluate(base, adapter, problems, cfg.eval.n, sampler_config(cfg),
                                               cfg.eval.think_budget, cfg.eval.max_len, cfg.seed + 2,
                                               eval_ks(cfg), cfg.workers)
        log.info("%s: %s", name, " ".join(f"pass@{k}={v:.3f}" for k, v in zip(curves[name].ks, curves[name].estimates)))
    lap("eval", t0)

    t0 = time.time()
    probes = shortcut_probes(eval_recs, cfg.seed, ts)
    shortcut = {name: (injected_span_loglik(base, models[name], examples, injected, ts),
                       span_loglik(base, models[name], eval_recs, probes, ts))
                for name in ("base", "dail", "nll")}
    lap("shortcut", t0)

    if out is not None:
        save_checkpoint(ckpts / "base.npz", base)
        for name, res in (("dail", dail), ("nll", nll), ("sft", sft)):
            save_checkpoint(ckpts / f"{name}.npz", base, res.adapter)
            res.write_csv(reports / f"loss_{name}.csv")
        for split, recs in corpus.splits().items():
            write_corpus(out / "corpus" / f"{split}.jsonl", recs)
        _write_rows(reports / "solve_counts.csv", ["problem_id", "c"],
                    sorted(corpus.solve_counts.items()))
        _write_rows(reports / "hard_partition.csv", ["problem_id", "role"],
                    sorted([[r.id, "eval"] for r in eval_recs] + [[r.id, "train"] for r in train_recs
                                                                 if r not in eval_recs]))
        write_traces(out / "traces" / "dsyn.jsonl", traces, rollout_config(cfg), ts)
        for name in models:
            write_records_csv(reports / f"eval_{name}.csv", records[name])
            write_curve_csv(reports / f"passk_{name}.csv", curves[name])
        ks = curves["base"].ks
        _write_rows(reports / "summary.csv", ["model"] + [f"pass@{k}" for k in ks],
                    [[name] + [f"{v:.6f}" for v in curves[name].estimates] for name in models])
        _write_rows(reports / "shortcut.csv",
                    ["model", "injected_span_loglik", "injected_spans", "heldout_span_loglik", "heldout_probes"],
                    [[name, f"{a:.6f}", len(injected), f"{b:.6f}", len(probes)] for name, (a, b) in shortcut.items()])
        if plots:
            plot_curves(reports / "passk.svg", curves, "hard split")
            plot_losses(reports / "loss_dail.svg", dail)
    return DeskResult(curves, shortcut, corpus, traces, timings)


def plot_losses(path: Path, result: TrainResult) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "dail"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    steps = [r.step for r in result.log]
    ax.plot(steps, [r.total for r in result.log], label="total")
    ax.plot(steps, [r.kl_pos for r in result.log], label="kl_pos")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
