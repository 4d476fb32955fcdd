"""Base-model pretraining on the synthetic domain.

The base model stands in for a post-trained LLM: it learns to solve short
chains on its own, to expand a reference solution of any length when one is
in context, and to jump between listed results when given only waypoints.
That last behaviour is what makes the waypoint-conditioned view a useful
negative reference.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .contexts import TemplateSet, default_templates
from .model import ModelConfig, ModelParams, forward, init_params
from .synthetic import (
    CompressedSolution,
    FullTrace,
    ShortcutSpec,
    Step,
    compress_solution,
    generate_problem,
    inject_rationalization_shortcut,
)
from .waypoints import extract_waypoints

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 50
    weight_decay: float = 0.01
    seed: int = 0
    student_max_difficulty: int = 5
    guided_max_difficulty: int = 12
    mix: tuple[float, float, float] = (0.45, 0.4, 0.15)  # student, privileged, negative
    guided_shortcut_rate: float = 0.1
    student_phase: int = 0  # leading steps that train the unguided view only


def rationalized_trace(trace: FullTrace, comp: CompressedSolution) -> FullTrace:
    """The full trace with every listed result asserted instead of derived."""
    keep = set(comp.retained)
    steps = [Step(None, None, st.value) if i in keep else st for i, st in enumerate(trace.steps)]
    return FullTrace(tuple(steps), trace.answer)


def _example(rng: np.random.Generator, cfg: PretrainConfig, templates: TemplateSet,
             student_only: bool = False) -> tuple[list[int], int]:
    """One training sequence and the index where the supervised target starts."""
    vocab = templates.vocab
    role = 0 if student_only else rng.choice(3, p=np.asarray(cfg.mix) / sum(cfg.mix))
    seed = int(rng.integers(2**31)) + 10_000_000
    if role == 0:
        d = int(rng.integers(1, cfg.student_max_difficulty + 1))
    else:
        d = int(rng.integers(1, cfg.guided_max_difficulty + 1))
    problem, trace = generate_problem(seed, d, f"pre{seed}")
    x = problem.instance()
    if role == 0:
        ctx = templates.student(x)
        target = trace
    else:
        comp = compress_solution(trace, float(rng.uniform(0.0, 0.9)), seed)
        if role == 1:
            ctx = templates.privileged(x, comp.expert())
            target = trace
            # occasionally assert a result read off the reference instead of deriving it
            if rng.random() < cfg.guided_shortcut_rate:
                pos = int(rng.choice(comp.retained))
                target = inject_rationalization_shortcut(trace, ShortcutSpec("forced_result", (pos,))).trace
        else:
            partial = extract_waypoints(comp.text, "numeric_only")
            ctx = templates.negative(x, partial)
            target = rationalized_trace(trace, comp)
    prefix = [vocab.bos] + list(ctx.tokens)
    return prefix + vocab.encode(target.text) + [vocab.eos], len(prefix)


def pretrain(config: ModelConfig, cfg: PretrainConfig, templates: TemplateSet | None = None,
             progress: bool = False) -> tuple[ModelParams, list[float]]:
    templates = templates or default_templates()
    torch.manual_seed(cfg.seed)
    base = init_params(config, cfg.seed)
    tensors = {k: v.clone().requires_grad_(True) for k, v in base.tensors.items()}
    decay = [v for k, v in tensors.items() if v.dim() == 2]
    no_decay = [v for k, v in tensors.items() if v.dim() < 2]
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr, betas=(0.9, 0.98),
    )
    rng = np.random.default_rng(cfg.seed)
    losses = []
    t0 = time.time()
    for step in range(cfg.steps):
        if step < cfg.warmup:
            lr = cfg.lr * (step + 1) / cfg.warmup
        else:
            frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
            lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))
        for g in opt.param_groups:
            g["lr"] = lr
        batch = [_example(rng, cfg, templates, step < cfg.student_phase) for _ in range(cfg.batch_size)]
        width = max(len(s) for s, _ in batch)
        tokens = torch.full((len(batch), width), templates.vocab.eos, dtype=torch.long)
        mask = torch.zeros((len(batch), width), dtype=torch.bool)
        for i, (seq, start) in enumerate(batch):
            tokens[i, : len(seq)] = torch.tensor(seq)
            mask[i, start: len(seq)] = True
        params = ModelParams(config, cfg.seed, tensors)
        logits = forward(params, None, tokens[:, :-1])
        target_mask = mask[:, 1:]
        loss = F.cross_entropy(logits[target_mask], tokens[:, 1:][target_mask])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(list(tensors.values()), 1.0)
        opt.step()
        losses.append(loss.item())
        if progress and (step % 100 == 0 or step == cfg.steps - 1):
            log.info("pretrain step %d loss %.4f (%.0fs)", step, loss.item(), time.time() - t0)
    out = ModelParams(config, cfg.seed, {k: v.detach().clone() for k, v in tensors.items()})
    return out, losses
