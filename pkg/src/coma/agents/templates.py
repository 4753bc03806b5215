"""Prompt template assets and rendering.

Bodies use ``{name}`` placeholders; ``{{`` and ``}}`` are literal braces.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Tuple

TEMPLATE_IDS: Tuple[str, ...] = (
    "rewrite", "segment", "base_motion", "local_edits", "segment_meta",
    "trajectory", "caption", "bodyparts", "compare",
)

_PLACEHOLDER = re.compile(r"\{\{|\}\}|\{([A-Za-z_][A-Za-z_0-9]*)\}")


class TemplateError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    body: str

    @property
    def placeholders(self) -> List[str]:
        seen = []
        for m in _PLACEHOLDER.finditer(self.body):
            if m.group(1) and m.group(1) not in seen:
                seen.append(m.group(1))
        return seen

    def render(self, **bindings: str) -> str:
        return render_template(self, bindings)


def render_template(tpl, bindings: Mapping[str, str]) -> str:
    """Single-pass literal substitution; bound values are never re-scanned."""
    body = tpl.body if isinstance(tpl, PromptTemplate) else tpl
    tid = tpl.id if isinstance(tpl, PromptTemplate) else "<inline>"

    def sub(m: re.Match) -> str:
        tok = m.group(0)
        if tok == "{{":
            return "{"
        if tok == "}}":
            return "}"
        name = m.group(1)
        if name not in bindings:
            raise TemplateError(f"template {tid!r}: placeholder {{{name}}} is unbound")
        return str(bindings[name])

    return _PLACEHOLDER.sub(sub, body)


@lru_cache(maxsize=None)
def load_template(template_id: str) -> PromptTemplate:
    if template_id not in TEMPLATE_IDS:
        raise TemplateError(f"unknown template {template_id!r}")
    text = resources.files(__package__).joinpath("templates", f"{template_id}.txt").read_text("utf-8")
    return PromptTemplate(template_id, text)


def load_vocabulary(path: Optional[str] = None) -> List[str]:
    if path is None:
        text = resources.files(__package__).joinpath("templates", "vocabulary.txt").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    words = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            words.append(line)
    return words


def format_words(words: Iterable[str]) -> str:
    return ", ".join(repr(w) for w in words)
