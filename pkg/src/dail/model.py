"""A small decoder-only transformer written functionally over a dict of tensors.

Base weights (``ModelParams``) are treated as frozen values; the student is the
same weights plus a ``LowRankAdapter``. The privileged student and negative
reference are the base weights under different contexts, so one resident copy
of the weights serves all three roles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping, Sequence

import torch
import torch.nn.functional as F

PRECISIONS = {"fast": torch.float32, "check": torch.float64}
ADAPTER_TARGETS = ("wq", "wk", "wv", "wo", "w1", "w2")


class ModelError(ValueError):
    pass


class ContextOverflowError(ModelError):
    pass


class TokenRangeError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    layers: int = 2
    heads: int = 2
    context_len: int = 512
    precision: str = "fast"
    positional: str = "learned"

    def __post_init__(self) -> None:
        if self.positional not in ("learned", "rotary", "both"):
            raise ModelError("positional must be 'learned', 'rotary' or 'both'")
        for name in ("vocab_size", "embed_dim", "layers", "heads", "context_len"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embed_dim % self.heads:
            raise ModelError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.precision not in PRECISIONS:
            raise ModelError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def ff_dim(self) -> int:
        return 4 * self.embed_dim

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        """Name -> shape for every tensor the architecture declares."""
        d, f, v, c = self.embed_dim, self.ff_dim, self.vocab_size, self.context_len
        shapes: dict[str, tuple[int, ...]] = {"tok_emb": (v, d), "pos_emb": (c, d)}
        for i in range(self.layers):
            p = f"l{i}."
            shapes.update({
                p + "ln1_g": (d,), p + "ln1_b": (d,),
                p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
                p + "ln2_g": (d,), p + "ln2_b": (d,),
                p + "w1": (f, d), p + "b1": (f,), p + "w2": (d, f), p + "b2": (d,),
            })
        shapes.update({"lnf_g": (d,), "lnf_b": (d,), "head": (v, d)})
        return shapes


@dataclass(frozen=True)
class ModelParams:
    """Frozen base weights. Never mutated in place; derive new values instead."""

    config: ModelConfig
    seed: int
    tensors: Mapping[str, torch.Tensor] = field(repr=False)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def to_precision(self, precision: str) -> "ModelParams":
        dtype = PRECISIONS[precision]
        return ModelParams(
            replace(self.config, precision=precision),
            self.seed,
            {k: v.detach().to(dtype) for k, v in self.tensors.items()},
        )

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, self.seed, {k: v.detach().clone() for k, v in self.tensors.items()})

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(self.tensors[k].detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    gen = torch.Generator().manual_seed(seed)
    dtype = config.dtype
    std = 0.02
    proj_std = std / math.sqrt(2 * config.layers)
    tensors = {}
    for name, shape in config.expected_shapes().items():
        short = name.split(".")[-1]
        if short.endswith("_g"):
            t = torch.ones(shape, dtype=dtype)
        elif short.endswith("_b") or short in ("b1", "b2"):
            t = torch.zeros(shape, dtype=dtype)
        else:
            s = proj_std if short in ("wo", "w2") else std
            t = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype) * s
        tensors[name] = t
    return ModelParams(config, seed, tensors)


@dataclass(frozen=True)
class LowRankAdapter:
    """Per-target factors (A: rank x in, B: out x rank); delta = (alpha/rank) * B @ A."""

    rank: int
    alpha: float
    factors: Mapping[str, tuple[torch.Tensor, torch.Tensor]] = field(repr=False)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self, name: str) -> torch.Tensor:
        a, b = self.factors[name]
        return self.scale * (b @ a)

    def tensors(self) -> Iterator[torch.Tensor]:
        for name in sorted(self.factors):
            yield from self.factors[name]

    def named_tensors(self) -> Iterator[tuple[str, torch.Tensor]]:
        for name in sorted(self.factors):
            a, b = self.factors[name]
            yield name + ".A", a
            yield name + ".B", b

    def detached(self) -> "LowRankAdapter":
        return LowRankAdapter(
            self.rank, self.alpha,
            {k: (a.detach().clone(), b.detach().clone()) for k, (a, b) in self.factors.items()},
        )

    def to_precision(self, precision: str) -> "LowRankAdapter":
        dtype = PRECISIONS[precision]
        return LowRankAdapter(
            self.rank, self.alpha,
            {k: (a.detach().to(dtype), b.detach().to(dtype)) for k, (a, b) in self.factors.items()},
        )

    def with_alpha(self, alpha: float) -> "LowRankAdapter":
        return LowRankAdapter(self.rank, alpha, self.factors)

    def is_zero(self) -> bool:
        return all(not torch.any(b) for _, b in self.factors.values())


def default_rank(config: ModelConfig) -> int:
    return min(32, config.embed_dim // 2)


def init_adapter(params: ModelParams, rank: int | None = None, alpha: float | None = None,
                 seed: int = 0) -> LowRankAdapter:
    cfg = params.config
    rank = rank if rank is not None else default_rank(cfg)
    alpha = float(alpha if alpha is not None else rank)
    gen = torch.Generator().manual_seed(seed)
    factors = {}
    for i in range(cfg.layers):
        for t in ADAPTER_TARGETS:
            name = f"l{i}.{t}"
            out_dim, in_dim = params[name].shape
            bound = 1.0 / math.sqrt(in_dim)
            a = (torch.rand((rank, in_dim), generator=gen, dtype=torch.float64) * 2 - 1) * bound
            factors[name] = (a.to(cfg.dtype), torch.zeros((out_dim, rank), dtype=cfg.dtype))
    return LowRankAdapter(rank, alpha, factors)


def _linear(x: torch.Tensor, params: ModelParams, adapter: LowRankAdapter | None, name: str,
            bias: torch.Tensor | None = None) -> torch.Tensor:
    y = F.linear(x, params[name], bias)
    if adapter is not None and name in adapter.factors:
        a, b = adapter.factors[name]
        y = y + adapter.scale * F.linear(F.linear(x, a), b)
    return y


def _layer_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), g, b, eps=1e-5)


def check_tokens(config: ModelConfig, tokens: torch.Tensor) -> None:
    if tokens.shape[-1] > config.context_len:
        raise ContextOverflowError(f"context length {tokens.shape[-1]} exceeds {config.context_len}")
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= config.vocab_size):
        raise TokenRangeError(f"token id outside [0, {config.vocab_size})")


def _rotary_tables(config: ModelConfig, positions: torch.Tensor, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    half = config.head_dim // 2
    inv = 1.0 / (10000.0 ** (torch.arange(half, dtype=torch.float64) / half))
    ang = positions.to(torch.float64)[:, None] * inv[None, :]
    return ang.cos().to(dtype), ang.sin().to(dtype)


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def _uses_rotary(config: ModelConfig) -> bool:
    return config.positional in ("rotary", "both")


def _uses_learned(config: ModelConfig) -> bool:
    return config.positional in ("learned", "both")


def forward(params: ModelParams, adapter: LowRankAdapter | None, tokens: torch.Tensor) -> torch.Tensor:
    """Logits for every position of a right-aligned batch ``tokens[B, T]``.

    Attention is causal, so trailing padding never changes earlier positions.
    """
    cfg = params.config
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    if tokens.shape[-1] == 0:
        raise ModelError("empty context; pass at least the BOS token")
    check_tokens(cfg, tokens)
    bsz, seq = tokens.shape
    h, hd = cfg.heads, cfg.head_dim
    x = params["tok_emb"][tokens]
    if _uses_learned(cfg):
        x = x + params["pos_emb"][:seq]
    if _uses_rotary(cfg):
        cos, sin = _rotary_tables(cfg, torch.arange(seq), x.dtype)
    for i in range(cfg.layers):
        p = f"l{i}."
        y = _layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"])
        q = _linear(y, params, adapter, p + "wq").view(bsz, seq, h, hd).transpose(1, 2)
        k = _linear(y, params, adapter, p + "wk").view(bsz, seq, h, hd).transpose(1, 2)
        v = _linear(y, params, adapter, p + "wv").view(bsz, seq, h, hd).transpose(1, 2)
        if _uses_rotary(cfg):
            q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
        att = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        att = att.transpose(1, 2).reshape(bsz, seq, cfg.embed_dim)
        x = x + _linear(att, params, adapter, p + "wo")
        y = _layer_norm(x, params[p + "ln2_g"], params[p + "ln2_b"])
        y = F.gelu(_linear(y, params, adapter, p + "w1", params[p + "b1"]))
        x = x + _linear(y, params, adapter, p + "w2", params[p + "b2"])
    x = _layer_norm(x, params["lnf_g"], params["lnf_b"])
    return F.linear(x, params["head"])


def forward_logits(params: ModelParams, adapter: LowRankAdapter | None,
                   context: Sequence[int] | torch.Tensor) -> torch.Tensor:
    """Next-token logit vector (length V) after ``context``."""
    tokens = torch.as_tensor(context, dtype=torch.long)
    with torch.no_grad():
        return forward(params, adapter, tokens)[0, -1]


def merged_weights(params: ModelParams, adapter: LowRankAdapter | None) -> dict[str, torch.Tensor]:
    """Base weights with the adapter delta folded in (inference only)."""
    if adapter is None or adapter.is_zero():
        return dict(params.tensors)
    out = dict(params.tensors)
    for name in adapter.factors:
        out[name] = params[name] + adapter.delta(name).to(params[name].dtype)
    return out


class Decoder:
    """Incremental decoding with a key/value cache over a rectangular batch.

    All rows advance in lock-step, which keeps each row's arithmetic
    independent of how many other rows share the batch shape.
    """

    def __init__(self, params: ModelParams, adapter: LowRankAdapter | None = None):
        self.config = params.config
        self.w = {k: v.detach() for k, v in merged_weights(params, adapter).items()}
        self.cache: list[tuple[torch.Tensor, torch.Tensor]] = []
        self.length = 0

    def _block(self, x: torch.Tensor, start: int) -> torch.Tensor:
        cfg, w = self.config, self.w
        bsz, seq, _ = x.shape
        h, hd = cfg.heads, cfg.head_dim
        new_cache = []
        for i in range(cfg.layers):
            p = f"l{i}."
            y = _layer_norm(x, w[p + "ln1_g"], w[p + "ln1_b"])
            q = F.linear(y, w[p + "wq"]).view(bsz, seq, h, hd).transpose(1, 2)
            k = F.linear(y, w[p + "wk"]).view(bsz, seq, h, hd).transpose(1, 2)
            v = F.linear(y, w[p + "wv"]).view(bsz, seq, h, hd).transpose(1, 2)
            if _uses_rotary(cfg):
                cos, sin = _rotary_tables(cfg, torch.arange(start, start + seq), q.dtype)
                q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
            if start:
                pk, pv = self.cache[i]
                k = torch.cat([pk, k], dim=2)
                v = torch.cat([pv, v], dim=2)
            new_cache.append((k, v))
            att = F.scaled_dot_product_attention(q, k, v, is_causal=(start == 0 and seq > 1))
            att = att.transpose(1, 2).reshape(bsz, seq, cfg.embed_dim)
            x = x + F.linear(att, w[p + "wo"])
            y = _layer_norm(x, w[p + "ln2_g"], w[p + "ln2_b"])
            y = F.gelu(F.linear(y, w[p + "w1"], w[p + "b1"]))
            x = x + F.linear(y, w[p + "w2"], w[p + "b2"])
        self.cache = new_cache
        x = _layer_norm(x[:, -1], w["lnf_g"], w["lnf_b"])
        return F.linear(x, w["head"])

    @torch.no_grad()
    def prefill(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        check_tokens(self.config, tokens)
        seq = tokens.shape[1]
        x = self.w["tok_emb"][tokens]
        if _uses_learned(self.config):
            x = x + self.w["pos_emb"][:seq]
        self.cache = []
        logits = self._block(x, 0)
        self.length = seq
        return logits

    @torch.no_grad()
    def step(self, tokens: torch.Tensor) -> torch.Tensor:
        if self.length >= self.config.context_len:
            raise ContextOverflowError(f"context length {self.length + 1} exceeds {self.config.context_len}")
        check_tokens(self.config, tokens.view(-1, 1))
        x = self.w["tok_emb"][tokens].unsqueeze(1)
        if _uses_learned(self.config):
            x = x + self.w["pos_emb"][self.length]
        logits = self._block(x, self.length)
        self.length += 1
        return logits

    @property
    def remaining(self) -> int:
        return self.config.context_len - self.length
