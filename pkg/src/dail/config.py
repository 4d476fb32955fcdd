"""Pipeline configuration.

The on-disk format is flat ``section.key = value`` lines with ``#`` comments.
The first non-comment line must be ``schema = dail-config/1``. Unset keys keep
their defaults, so an empty file (apart from the schema line) is the shipped
default configuration. Values use Python-like literals: numbers, ``none``,
``true``/``false``, bare strings, and comma-separated lists.

Only paths may be overridden from the environment: ``DAIL_WORK_DIR`` moves
the whole artifact tree.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

SCHEMA = "dail-config/1"


class ConfigError(ValueError):
    """Carries one diagnostic per offending field."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass(frozen=True)
class PathsSection:
    work_dir: str = "runs/desk"
    corpus: str = "corpus"
    traces: str = "traces"
    checkpoints: str = "checkpoints"
    reports: str = "reports"


@dataclass(frozen=True)
class ModelSection:
    embed_dim: int = 64
    layers: int = 2
    heads: int = 2
    context_len: int = 512
    positional: str = "rotary"


@dataclass(frozen=True)
class PretrainSection:
    steps: int = 3500
    student_phase: int = 1500
    learning_rate: float = 1e-3
    batch_size: int = 32


@dataclass(frozen=True)
class CorpusSection:
    easy_min: int = 1
    easy_max: int = 5
    hard_min: int = 8
    hard_max: int = 12
    candidates_per_difficulty: int = 40
    elision_rate: float = 0.7
    filter_attempts: int = 32
    hard_size: int = 0
    validation_size: int = 24


@dataclass(frozen=True)
class RolloutSection:
    mode: str = "mixed"
    tau: float = 0.8
    max_len: int = 256
    mixed_truncation: int = 256
    temperature: float = 0.6
    top_p: float = 0.95
    samples: int = 1


@dataclass(frozen=True)
class TrainSection:
    gamma: float = 0.1
    learning_rate: float = 2e-4
    warmup_steps: int = 5
    weight_decay: float = 0.01
    batch_size: int = 4
    epochs: int = 5
    token_aggregation: str = "mean"
    negative_clamp: float | None = None
    rank: int = 0  # 0 selects min(32, embed_dim / 2)
    alpha: float = 0.0  # 0 selects alpha = rank
    gamma_grid: tuple[float, ...] = (0.01, 0.05, 0.1, 0.5, 1.0)
    shortcut_rate: float = 0.3  # share of D_syn traces given one forced-result shortcut


@dataclass(frozen=True)
class EvalSection:
    n: int = 128
    k_max: int = 128
    think_budget: int | None = None
    max_len: int = 256
    dedup_threshold: float = 0.7
    holdout: float = 0.5  # share of the hard split kept out of training for evaluation
    tau_grid: tuple[float, ...] = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99, 0.999, 0.9999)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    workers: int = 1
    paths: PathsSection = field(default_factory=PathsSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def fingerprint(self) -> str:
        """Hash of everything except paths and worker count, which never change results."""
        d = asdict(self)
        d.pop("paths")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def path(self, name: str) -> Path:
        root = Path(os.environ.get("DAIL_WORK_DIR", self.paths.work_dir))
        return root / getattr(self.paths, name)

    def with_overrides(self, values: dict[str, str]) -> "PipelineConfig":
        return _apply(self, values)


SECTIONS = ("paths", "model", "pretrain", "corpus", "rollout", "train", "eval")
TOP_LEVEL = ("seed", "workers")


def _convert(raw: str, hint: Any) -> Any:
    raw = raw.strip()
    origin = get_origin(hint)
    args = get_args(hint)
    if origin is tuple:
        return tuple(_convert(v, args[0]) for v in raw.split(",") if v.strip())
    if type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        return _convert(raw, next(a for a in args if a is not type(None)))
    if hint is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def _apply(cfg: PipelineConfig, values: dict[str, str]) -> PipelineConfig:
    problems = []
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {}
    for key, raw in values.items():
        if key in TOP_LEVEL:
            try:
                top[key] = int(raw)
            except ValueError:
                problems.append(f"{key}: expected an integer, got {raw!r}")
            continue
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or not name:
            problems.append(f"{key}: unknown key")
            continue
        obj = getattr(cfg, sec)
        hints = get_type_hints(type(obj))
        if name not in hints:
            problems.append(f"{key}: unknown key")
            continue
        try:
            sections.setdefault(sec, {})[name] = _convert(raw, hints[name])
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError(problems)
    out = replace(cfg, **top, **{s: replace(getattr(cfg, s), **v) for s, v in sections.items()})
    validate(out)
    return out


def validate(cfg: PipelineConfig) -> None:
    problems = []

    def need(ok: bool, key: str, msg: str) -> None:
        if not ok:
            problems.append(f"{key}: {msg}")

    need(cfg.workers >= 1, "workers", "must be >= 1")
    m = cfg.model
    for name in ("embed_dim", "layers", "heads", "context_len"):
        need(getattr(m, name) >= 1, f"model.{name}", "must be positive")
    need(m.heads >= 1 and m.embed_dim % max(m.heads, 1) == 0, "model.embed_dim", "must be divisible by model.heads")
    need(m.positional in ("learned", "rotary", "both"), "model.positional", "must be learned, rotary or both")
    need(cfg.pretrain.steps >= 0, "pretrain.steps", "must be >= 0")
    need(0 <= cfg.pretrain.student_phase <= cfg.pretrain.steps, "pretrain.student_phase",
         "must lie in [0, pretrain.steps]")
    c = cfg.corpus
    need(1 <= c.easy_min <= c.easy_max, "corpus.easy_max", "need 1 <= easy_min <= easy_max")
    need(1 <= c.hard_min <= c.hard_max, "corpus.hard_max", "need 1 <= hard_min <= hard_max")
    need(0.0 <= c.elision_rate <= 1.0, "corpus.elision_rate", "must lie in [0, 1]")
    need(c.filter_attempts >= 1, "corpus.filter_attempts", "must be >= 1")
    r = cfg.rollout
    need(r.mode in ("mixed", "direct"), "rollout.mode", "must be mixed or direct")
    need(0.0 <= r.tau <= 1.0, "rollout.tau", "must lie in [0, 1]")
    need(r.mixed_truncation <= r.max_len, "rollout.mixed_truncation", "must be <= rollout.max_len")
    need(r.temperature >= 0.0, "rollout.temperature", "must be >= 0")
    need(0.0 < r.top_p <= 1.0, "rollout.top_p", "must lie in (0, 1]")
    need(r.samples >= 1, "rollout.samples", "must be >= 1")
    t = cfg.train
    need(0.0 <= t.gamma <= 1.0, "train.gamma", "must lie in [0, 1]")
    need(t.learning_rate > 0, "train.learning_rate", "must be > 0")
    need(t.batch_size >= 1, "train.batch_size", "must be >= 1")
    need(t.epochs >= 1, "train.epochs", "must be >= 1")
    need(t.token_aggregation in ("sum", "mean"), "train.token_aggregation", "must be sum or mean")
    need(bool(t.gamma_grid), "train.gamma_grid", "must not be empty")
    need(all(0.0 <= g <= 1.0 for g in t.gamma_grid), "train.gamma_grid", "values must lie in [0, 1]")
    need(0.0 <= t.shortcut_rate <= 1.0, "train.shortcut_rate", "must lie in [0, 1]")
    e = cfg.eval
    need(e.n >= 1, "eval.n", "must be >= 1")
    need(1 <= e.k_max <= e.n, "eval.k_max", "need 1 <= k_max <= eval.n")
    need(e.think_budget is None or e.think_budget >= 0, "eval.think_budget", "must be >= 0")
    need(0.0 <= e.dedup_threshold <= 1.0, "eval.dedup_threshold", "must lie in [0, 1]")
    need(0.0 <= e.holdout < 1.0, "eval.holdout", "must lie in [0, 1)")
    need(all(0.0 <= v <= 1.0 for v in e.tau_grid), "eval.tau_grid", "values must lie in [0, 1]")
    if problems:
        raise ConfigError(problems)


def parse_config_text(text: str, source: str = "<config>") -> PipelineConfig:
    values: dict[str, str] = {}
    schema_seen = False
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            problems.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key = key.strip()
        if not schema_seen:
            if key != "schema" or raw.strip() != SCHEMA:
                problems.append(f"{source}:{lineno}: first entry must be 'schema = {SCHEMA}'")
            schema_seen = True
            continue
        if key in values:
            problems.append(f"{key}: set twice ({source}:{lineno})")
        values[key] = raw
    if not schema_seen:
        problems.append(f"{source}: missing 'schema = {SCHEMA}'")
    if problems:
        raise ConfigError(problems)
    return PipelineConfig().with_overrides(values)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def _render(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_render(x) for x in v)
    return str(v)


def dump_config(cfg: PipelineConfig) -> str:
    lines = [f"schema = {SCHEMA}"]
    for key in TOP_LEVEL:
        lines.append(f"{key} = {getattr(cfg, key)}")
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{sec}.{f.name} = {_render(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
