"""Symbol vocabulary shared by every model view.

The vocabulary has three blocks, in id order:

* special tokens (BOS, EOS, think delimiters, separator, boxed delimiters)
* one token per printable ASCII character plus newline
* a template block: one token per literal segment of the prompt templates

Encoding is greedy longest-match over all symbols, so a prompt rendered from
a template costs one token per literal segment while user content is spelled
character by character.
"""
from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

BOS = "<bos>"
EOS = "<eos>"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
SEP = "<sep>"
BOXED_OPEN = "\\boxed{"
BOXED_CLOSE = "}"

SPECIALS = (BOS, EOS, THINK_OPEN, THINK_CLOSE, SEP, BOXED_OPEN, BOXED_CLOSE)
TEMPLATE_NAMES = ("student", "privileged", "negative_answer", "negative_waypoints", "rationalize")

_PLACEHOLDER = re.compile(r"\{(problem|solution|answer|waypoints)\}")


class VocabularyError(ValueError):
    pass


def template_literals(text: str) -> list[str]:
    """Literal (non-placeholder) segments of a template, in order."""
    return [part for part in _PLACEHOLDER.split(text)[::2] if part]


def default_template_dir() -> Path:
    return Path(str(resources.files("dail") / "templates"))


def load_templates(template_dir: str | Path | None = None) -> dict[str, str]:
    root = Path(template_dir) if template_dir is not None else default_template_dir()
    out = {}
    for name in TEMPLATE_NAMES:
        path = root / f"{name}.txt"
        if not path.exists():
            raise FileNotFoundError(f"missing template asset: {path}")
        out[name] = path.read_text(encoding="utf-8")
    return out


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    _by_first: dict[str, tuple[str, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.symbols)) != len(self.symbols):
            raise VocabularyError("duplicate symbols")
        if any(not s for s in self.symbols):
            raise VocabularyError("empty symbol")
        index = {s: i for i, s in enumerate(self.symbols)}
        by_first: dict[str, list[str]] = {}
        for s in self.symbols:
            by_first.setdefault(s[0], []).append(s)
        object.__setattr__(self, "_index", index)
        object.__setattr__(
            self,
            "_by_first",
            {c: tuple(sorted(v, key=len, reverse=True)) for c, v in by_first.items()},
        )
        for s in SPECIALS:
            if s not in index:
                raise VocabularyError(f"special {s!r} missing")

    @classmethod
    def build(cls, templates: dict[str, str] | None = None) -> "Vocabulary":
        templates = templates if templates is not None else load_templates()
        chars = [c for c in string.printable if c not in "\t\r\x0b\x0c" and c != BOXED_CLOSE]
        symbols: list[str] = list(SPECIALS) + chars
        seen = set(symbols)
        for name in TEMPLATE_NAMES:
            for lit in template_literals(templates[name]):
                if lit not in seen:
                    symbols.append(lit)
                    seen.add(lit)
        return cls(tuple(symbols))

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def size(self) -> int:
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        return self._index[symbol]

    @property
    def bos(self) -> int:
        return self._index[BOS]

    @property
    def eos(self) -> int:
        return self._index[EOS]

    @property
    def think_open(self) -> int:
        return self._index[THINK_OPEN]

    @property
    def think_close(self) -> int:
        return self._index[THINK_CLOSE]

    @property
    def sep(self) -> int:
        return self._index[SEP]

    @property
    def boxed_open(self) -> int:
        return self._index[BOXED_OPEN]

    @property
    def boxed_close(self) -> int:
        return self._index[BOXED_CLOSE]

    def encode(self, text: str) -> list[int]:
        ids = []
        i = 0
        n = len(text)
        while i < n:
            for sym in self._by_first.get(text[i], ()):
                if text.startswith(sym, i):
                    ids.append(self._index[sym])
                    i += len(sym)
                    break
            else:
                raise VocabularyError(f"cannot encode character {text[i]!r} at offset {i}")
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        try:
            return "".join(self.symbols[i] for i in ids)
        except IndexError as exc:
            raise VocabularyError(f"token id out of range (V={len(self)})") from exc

    def decode_until_eos(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if i == self.eos:
                break
            out.append(self.symbols[i])
        return "".join(out)


@lru_cache(maxsize=None)
def default_vocab() -> Vocabulary:
    return Vocabulary.build()
