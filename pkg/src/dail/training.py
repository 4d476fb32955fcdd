"""Adapter training: contrastive dual-KL objective, NLL baseline, and a
finite-difference gradient check.

For a trace r of problem x the contrastive objective is, per position t,

    KL(student(. | x, r<t) || privileged(. | x, s, r<t))
      - gamma * KL(student(. | x, r<t) || negative(. | x, s~, r<t))

where only the student view carries the adapter. The privileged and
negative views run the same frozen base weights with the adapter off.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .contexts import ExpertSolution, ProblemInstance, RoleContext, TemplateSet, default_templates
from .model import (
    ContextOverflowError,
    LowRankAdapter,
    ModelParams,
    forward,
    init_adapter,
)
from .waypoints import extract_waypoints

log = logging.getLogger(__name__)

OBJECTIVES = ("contrastive", "kl_pos", "kl_neg", "nll")
AGGREGATIONS = ("sum", "mean")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.1
    learning_rate: float = 2e-4
    warmup_steps: int = 5
    weight_decay: float = 0.01
    batch_size: int = 4
    epochs: int = 5
    token_aggregation: str = "mean"
    negative_clamp: float | None = None
    objective: str = "contrastive"
    rank: int | None = None
    alpha: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.token_aggregation not in AGGREGATIONS:
            raise ValueError(f"token_aggregation must be one of {AGGREGATIONS}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_steps < 0:
            raise ValueError("batch_size >= 1, epochs >= 0, warmup_steps >= 0 required")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    kl_pos: float
    kl_neg: float
    total: float
    tokens: int


@dataclass(frozen=True)
class TrainExample:
    """Token prefixes for the three views plus the trace to score."""

    problem_id: str
    student: tuple[int, ...]
    privileged: tuple[int, ...]
    negative: tuple[int, ...]
    trace: tuple[int, ...]


def make_example(x: ProblemInstance, s: ExpertSolution | None, trace_tokens: Sequence[int],
                 templates: TemplateSet | None = None) -> TrainExample:
    """Build all three role prefixes (BOS included) for one (x, s, r) triple.

    Without an expert solution (plain SFT data) the privileged and negative
    prefixes fall back to the student prefix.
    """
    ts = templates or default_templates()
    bos = ts.vocab.bos
    stud = (bos,) + ts.student(x).tokens
    if s is None:
        return TrainExample(x.id, stud, stud, stud, tuple(trace_tokens))
    mode = "numeric_only" if x.domain == "verifiable" else "full"
    partial = extract_waypoints(s.text, mode)
    priv = (bos,) + ts.privileged(x, s).tokens
    neg = (bos,) + ts.negative(x, partial).tokens
    return TrainExample(x.id, stud, priv, neg, tuple(trace_tokens))


def example_from_contexts(problem_id: str, contexts: dict[str, RoleContext], trace_tokens: Sequence[int],
                          bos: int) -> TrainExample:
    return TrainExample(problem_id, (bos,) + contexts["student"].tokens, (bos,) + contexts["privileged"].tokens,
                        (bos,) + contexts["negative"].tokens, tuple(trace_tokens))


# --------------------------------------------------------------------------
# divergences


def token_kl(p_logits, q_logits) -> torch.Tensor:
    """KL(softmax(p) || softmax(q)) along the last axis, in log space."""
    p_logits = torch.as_tensor(p_logits)
    q_logits = torch.as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ValueError("logit vectors must have equal shape")
    lp = F.log_softmax(p_logits, dim=-1)
    lq = F.log_softmax(q_logits, dim=-1)
    return (lp.exp() * (lp - lq)).sum(-1)


def _gather_target_logits(params: ModelParams, adapter: LowRankAdapter | None,
                          prefixes: Sequence[Sequence[int]], traces: Sequence[Sequence[int]],
                          pad: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Logits predicting each trace token, packed as [N_tokens, V], plus row ids."""
    seqs = [list(p) + list(r) for p, r in zip(prefixes, traces)]
    ctx_len = params.config.context_len
    for s in seqs:
        if len(s) - 1 > ctx_len:
            raise ContextOverflowError(f"sequence of {len(s)} tokens exceeds context {ctx_len}")
    width = max(len(s) for s in seqs) - 1
    tokens = torch.full((len(seqs), width), pad, dtype=torch.long)
    rows, cols = [], []
    for i, (p, r) in enumerate(zip(prefixes, traces)):
        body = seqs[i][:-1]
        tokens[i, : len(body)] = torch.tensor(body)
        start = len(p) - 1
        rows.extend([i] * len(r))
        cols.extend(range(start, start + len(r)))
    logits = forward(params, adapter, tokens)
    rows_t = torch.tensor(rows)
    return logits[rows_t, torch.tensor(cols)], rows_t


def _aggregate(per_token: torch.Tensor, rows: torch.Tensor, n_rows: int, mode: str) -> torch.Tensor:
    """Per-trace reduction (sum or mean over positions), then mean over traces."""
    sums = torch.zeros(n_rows, dtype=per_token.dtype).index_add(0, rows, per_token)
    if mode == "mean":
        counts = torch.bincount(rows, minlength=n_rows).to(per_token.dtype)
        sums = sums / counts
    return sums.mean()


def contrastive_from_logits(student: torch.Tensor, privileged: torch.Tensor, negative: torch.Tensor,
                            gamma: float, rows: torch.Tensor | None = None, n_rows: int = 1,
                            aggregation: str = "mean", negative_clamp: float | None = None,
                            ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, kl_pos, kl_neg) from per-position logits of the three views, [N, V] each."""
    if rows is None:
        rows = torch.zeros(student.shape[0], dtype=torch.long)
    kl_pos_tok = token_kl(student, privileged)
    kl_neg_tok = token_kl(student, negative)
    if negative_clamp is not None:
        kl_neg_tok = torch.clamp(kl_neg_tok, max=negative_clamp)
    kl_pos = _aggregate(kl_pos_tok, rows, n_rows, aggregation)
    kl_neg = _aggregate(kl_neg_tok, rows, n_rows, aggregation)
    return kl_pos - gamma * kl_neg, kl_pos, kl_neg


def batch_loss(params: ModelParams, adapter: LowRankAdapter | None, batch: Sequence[TrainExample],
               gamma: float = 0.1, aggregation: str = "mean", objective: str = "contrastive",
               negative_clamp: float | None = None, pad: int = 0) -> tuple[torch.Tensor, LossBreakdown]:
    traces = [ex.trace for ex in batch]
    n = len(batch)
    student, rows = _gather_target_logits(params, adapter, [ex.student for ex in batch], traces, pad)
    ntok = int(rows.numel())
    if objective == "nll":
        targets = torch.tensor([t for r in traces for t in r])
        per_tok = F.cross_entropy(student, targets, reduction="none")
        loss = _aggregate(per_tok, rows, n, aggregation)
        val = loss.item()
        return loss, LossBreakdown(float("nan"), float("nan"), val, ntok)
    with torch.no_grad():
        priv, _ = _gather_target_logits(params, None, [ex.privileged for ex in batch], traces, pad)
        neg, _ = _gather_target_logits(params, None, [ex.negative for ex in batch], traces, pad)
    loss, kl_pos, kl_neg = contrastive_from_logits(student, priv, neg, gamma, rows, n, aggregation,
                                                   negative_clamp)
    if objective == "kl_pos":
        loss = kl_pos
    elif objective == "kl_neg":
        loss = kl_neg
    return loss, LossBreakdown(kl_pos.item(), kl_neg.item(), loss.item(), ntok)


def _adapter_grads(loss: torch.Tensor, adapter: LowRankAdapter) -> dict[str, torch.Tensor]:
    names = [n for n, _ in adapter.named_tensors()]
    tensors = [t for _, t in adapter.named_tensors()]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(t)) for n, t, g in zip(names, tensors, grads)}


def _trainable(adapter: LowRankAdapter) -> LowRankAdapter:
    return LowRankAdapter(adapter.rank, adapter.alpha, {
        k: (a.detach().clone().requires_grad_(True), b.detach().clone().requires_grad_(True))
        for k, (a, b) in adapter.factors.items()
    })


def contrastive_loss(params: ModelParams, adapter: LowRankAdapter, trace: Sequence[int],
                     contexts: dict[str, RoleContext] | TrainExample, gamma: float,
                     aggregation: str = "mean", negative_clamp: float | None = None,
                     with_grad: bool = True) -> tuple[LossBreakdown, dict[str, torch.Tensor] | None]:
    """Loss breakdown for one trace and the gradient w.r.t. every adapter factor."""
    if isinstance(contexts, TrainExample):
        ex = contexts
    else:
        ex = example_from_contexts("", contexts, trace, _bos())
    ex = TrainExample(ex.problem_id, ex.student, ex.privileged, ex.negative, tuple(trace))
    live = _trainable(adapter) if with_grad else adapter
    loss, bd = batch_loss(params, live, [ex], gamma, aggregation, "contrastive", negative_clamp)
    return bd, (_adapter_grads(loss, live) if with_grad else None)


def nll_loss(params: ModelParams, adapter: LowRankAdapter, trace: Sequence[int],
             student_context: RoleContext | Sequence[int], aggregation: str = "mean",
             with_grad: bool = True) -> tuple[float, dict[str, torch.Tensor] | None]:
    """-sum_t log student(r_t | x, r<t), aggregated like the contrastive loss."""
    prefix = ((_bos(),) + student_context.tokens) if isinstance(student_context, RoleContext) \
        else tuple(student_context)
    ex = TrainExample("", prefix, prefix, prefix, tuple(trace))
    live = _trainable(adapter) if with_grad else adapter
    loss, _ = batch_loss(params, live, [ex], aggregation=aggregation, objective="nll")
    return loss.item(), (_adapter_grads(loss, live) if with_grad else None)


def _bos() -> int:
    return default_templates().vocab.bos


# --------------------------------------------------------------------------
# training loop


@dataclass
class StepRecord:
    step: int
    epoch: int
    kl_pos: float
    kl_neg: float
    total: float
    lr: float


@dataclass
class TrainResult:
    adapter: LowRankAdapter
    log: list[StepRecord] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "epoch", "kl_pos", "kl_neg", "total", "lr"])
            for r in self.log:
                w.writerow([r.step, r.epoch, f"{r.kl_pos:.8g}", f"{r.kl_neg:.8g}", f"{r.total:.8g}", f"{r.lr:.8g}"])


def train(examples: Sequence[TrainExample], params: ModelParams, config: TrainConfig,
          dump_path: str | Path | None = None, pad: int | None = None) -> TrainResult:
    """Optimize a fresh adapter (base weights untouched).

    Linear warmup over ``warmup_steps`` then constant learning rate; AdamW
    with decoupled weight decay on both factors of every adapter pair.
    """
    if not examples:
        raise TrainingError("empty training set")
    pad = pad if pad is not None else default_templates().vocab.eos
    torch.manual_seed(config.seed)
    adapter = _trainable(init_adapter(params, config.rank, config.alpha, seed=config.seed))
    tensors = list(adapter.tensors())
    opt = torch.optim.AdamW(tensors, lr=config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(adapter)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start: start + config.batch_size]]
            lr = config.learning_rate * min(1.0, (step + 1) / config.warmup_steps) \
                if config.warmup_steps else config.learning_rate
            for g in opt.param_groups:
                g["lr"] = lr
            loss, bd = batch_loss(params, adapter, batch, config.gamma, config.token_aggregation,
                                  config.objective, config.negative_clamp, pad)
            if not math.isfinite(bd.total):
                diag = {"step": step, "epoch": epoch, "breakdown": asdict(bd),
                        "problems": [ex.problem_id for ex in batch],
                        "adapter_norms": {n: float(t.detach().norm()) for n, t in adapter.named_tensors()}}
                if dump_path is not None:
                    Path(dump_path).write_text(json.dumps(diag, indent=2))
                raise TrainingError(f"non-finite loss at step {step}: {json.dumps(diag)}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            result.log.append(StepRecord(step, epoch, bd.kl_pos, bd.kl_neg, bd.total, lr))
            step += 1
    result.adapter = adapter.detached()
    return result


# --------------------------------------------------------------------------
# gradient validation


def finite_diff_grad_check(loss_fn: Callable[[LowRankAdapter], torch.Tensor], adapter: LowRankAdapter,
                           probes: int = 64, eps: float = 1e-4, seed: int = 0,
                           abs_floor: float = 1e-7) -> float:
    """Max error between autograd and central differences on random entries.

    Relative error where the gradient is non-negligible; absolute error where
    both estimates fall below ``abs_floor`` (relative error is undefined).
    """
    live = _trainable(adapter)
    analytic = _adapter_grads(loss_fn(live), live)
    names = list(analytic)
    sizes = np.array([analytic[n].numel() for n in names])
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(int(sizes.sum()), size=min(probes, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    base = {n: t.detach().clone() for n, t in live.named_tensors()}
    for fid in flat_ids:
        k = int(np.searchsorted(offsets, fid, side="right") - 1)
        name, idx = names[k], int(fid - offsets[k])

        def at(delta: float) -> float:
            tensors = {n: t.clone() for n, t in base.items()}
            tensors[name].view(-1)[idx] += delta
            factors = {}
            for target in adapter.factors:
                factors[target] = (tensors[target + ".A"], tensors[target + ".B"])
            with torch.no_grad():
                return float(loss_fn(LowRankAdapter(adapter.rank, adapter.alpha, factors)))

        numeric = (at(eps) - at(-eps)) / (2 * eps)
        a = float(analytic[name].view(-1)[idx])
        scale = max(abs(a), abs(numeric))
        err = abs(a - numeric) if scale < abs_floor else abs(a - numeric) / scale
        worst = max(worst, err)
    return worst
