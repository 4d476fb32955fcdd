"""Role contexts: student, privileged student, and negative reference.

All three are the same base weights; only the conditioning text differs.
Template wording lives in ``templates/*.txt`` so it is data, not code.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from .vocab import Vocabulary, default_vocab, load_templates
from .waypoints import PartialSolution

log = logging.getLogger(__name__)

ROLES = ("student", "privileged", "negative", "rationalize")
DOMAINS = ("verifiable", "proof")


@dataclass(frozen=True)
class ProblemInstance:
    id: str
    problem: str
    answer: str | None = None
    domain: str = "verifiable"

    def __post_init__(self) -> None:
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")
        if self.domain == "verifiable" and not self.answer:
            raise ValueError(f"verifiable instance {self.id!r} needs an answer")
        if self.domain == "proof" and self.answer is not None:
            raise ValueError(f"proof instance {self.id!r} must not carry an answer")


@dataclass(frozen=True)
class ExpertSolution:
    text: str
    source: str = ""

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("expert solution must be non-empty")

    @classmethod
    def concatenate(cls, texts: list[str], source: str = "") -> "ExpertSolution":
        """Several reference solutions as one verbatim block."""
        return cls("\n\n".join(texts), source)


@dataclass(frozen=True)
class RoleContext:
    role: str
    tokens: tuple[int, ...]
    rendered_text: str


class TemplateSet:
    def __init__(self, template_dir: str | Path | None = None, vocab: Vocabulary | None = None):
        self.templates = load_templates(template_dir)
        self.vocab = vocab if vocab is not None else (
            default_vocab() if template_dir is None else Vocabulary.build(self.templates)
        )

    def _ctx(self, role: str, text: str) -> RoleContext:
        return RoleContext(role, tuple(self.vocab.encode(text)), text)

    def student(self, x: ProblemInstance) -> RoleContext:
        if not x.problem:
            log.warning("empty problem text for instance %r", x.id)
        return self._ctx("student", self.templates["student"].replace("{problem}", x.problem))

    def _with_reference(self, x: ProblemInstance, reference: str) -> str:
        # substitute the reference last so a literal "{problem}" inside it survives
        head, _, tail = self.templates["privileged"].partition("{solution}")
        return head.replace("{problem}", x.problem) + reference + tail.replace("{problem}", x.problem)

    def privileged(self, x: ProblemInstance, s: ExpertSolution) -> RoleContext:
        return self._ctx("privileged", self._with_reference(x, s.text))

    def negative_text(self, x: ProblemInstance, partial: PartialSolution) -> str:
        parts = []
        if x.domain == "verifiable":
            answer = partial.answer if partial.answer is not None else x.answer
            if answer is not None:
                parts.append(self.templates["negative_answer"].replace("{answer}", answer))
        if partial.waypoints:
            listing = ", ".join(partial.texts)
            parts.append(self.templates["negative_waypoints"].replace("{waypoints}", listing))
        return " ".join(parts)

    def negative(self, x: ProblemInstance, partial: PartialSolution) -> RoleContext:
        """The privileged framing with the waypoint-only partial solution as reference."""
        return self._ctx("negative", self._with_reference(x, self.negative_text(x, partial)))

    def rationalize(self, x: ProblemInstance) -> RoleContext:
        if x.answer is None:
            raise ValueError("rationalization needs an answer hint")
        text = self.templates["rationalize"].replace("{answer}", x.answer).replace("{problem}", x.problem)
        return self._ctx("rationalize", text)


@lru_cache(maxsize=None)
def default_templates() -> TemplateSet:
    return TemplateSet()


def build_student_context(x: ProblemInstance, templates: TemplateSet | None = None) -> RoleContext:
    return (templates or default_templates()).student(x)


def build_privileged_context(x: ProblemInstance, s: ExpertSolution,
                             templates: TemplateSet | None = None) -> RoleContext:
    return (templates or default_templates()).privileged(x, s)


def build_negative_context(x: ProblemInstance, partial: PartialSolution,
                           templates: TemplateSet | None = None) -> RoleContext:
    return (templates or default_templates()).negative(x, partial)


def build_rationalize_context(x: ProblemInstance, templates: TemplateSet | None = None) -> RoleContext:
    return (templates or default_templates()).rationalize(x)
