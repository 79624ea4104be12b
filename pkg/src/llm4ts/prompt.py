"""Judge prompt assembly from toggleable components, and verdict parsing.

Components: B (behavioral dynamics), F (participant free-text reply),
Q (intermediate reasoning questions), H (recent trajectory history).
"""
from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, TemplateError

PLACEHOLDERS = frozenset({"history", "user_reply", "candidate_action"})
SECTIONS = ("B", "H", "F", "Q", "CANDIDATE", "FINAL_Q", "FINAL")

# One phrase per component that must occur exactly once when the component is on.
SENTINELS = {
    "b": "A mobile health app can send a message to the user to encourage the user to walk.",
    "h": "The latest and current user data in json format are:",
    "f": "This morning, when we asked the user how they felt, the user reply was:",
    "q": "Given the user reply, answer the following questions:",
}
FINAL_QUESTION = "Should the mobile health app send a message to the user?"


@dataclass(frozen=True)
class PromptComponents:
    b: bool = True
    f: bool = True
    q: bool = True
    h: bool = True
    history_len: int = 4
    include_candidate: bool = False

    @property
    def label(self) -> str:
        return "".join(k.upper() for k in "bfqh" if getattr(self, k))

    @classmethod
    def preset(cls, name: str, **overrides) -> "PromptComponents":
        key = name.upper()
        if key not in PRESETS:
            raise ConfigError(f"unknown prompt preset {name!r}; choose from {sorted(PRESETS)}")
        flags = {k: (k.upper() in key) for k in "bfqh"}
        return cls(**flags, **overrides)


PRESETS = ("BFQH", "BFQ", "BF")


def display_round(x: float, places: int = 3) -> float:
    """Round for display, half-to-even on the decimal value (0.2385 -> 0.238)."""
    exact = Decimal(repr(round(float(x), 12)))
    return float(exact.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_EVEN))


@dataclass(frozen=True)
class HistoryRecord:
    C: int
    H: float
    D: float
    action: int | None = None
    reward: float | None = None

    def as_display(self) -> dict:
        rec = {"C": int(self.C), "H": display_round(self.H), "D": display_round(self.D)}
        if self.action is not None:
            rec["action"] = int(self.action)
        if self.reward is not None:
            rec["reward"] = display_round(self.reward)
        return rec


@dataclass(frozen=True)
class PromptContext:
    description: str
    history: Sequence[HistoryRecord] = field(default_factory=tuple)
    candidate_action: int | None = None


@dataclass(frozen=True)
class PromptTemplate:
    sections: dict

    @classmethod
    def parse(cls, text: str) -> "PromptTemplate":
        sections: dict[str, list[str]] = {}
        current = None
        for line in text.splitlines():
            m = re.fullmatch(r"##\s*([A-Z_]+)\s*", line)
            if m:
                current = m.group(1)
                if current not in SECTIONS:
                    raise TemplateError(f"unknown template section {current!r}")
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
            elif line.strip():
                raise TemplateError("template text found before the first section header")
        missing = [s for s in ("F", "FINAL") if s not in sections]
        if missing:
            raise TemplateError(f"template is missing required section(s): {missing}")
        out = {}
        for name, lines in sections.items():
            body = "\n".join(lines).strip("\n")
            for _, fname, _, _ in string.Formatter().parse(body):
                if fname is not None and fname not in PLACEHOLDERS:
                    raise TemplateError(f"unknown placeholder {{{fname}}} in section {name}")
            out[name] = body
        return cls(out)

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptTemplate":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


@lru_cache(maxsize=1)
def default_template() -> PromptTemplate:
    text = (resources.files("llm4ts") / "data" / "prompt_template.txt").read_text(encoding="utf-8")
    return PromptTemplate.parse(text)


def format_history(records: Sequence[HistoryRecord], history_len: int = 4) -> str:
    newest = list(records)[-history_len:] if history_len > 0 else []
    return str([r.as_display() for r in newest])


def render_prompt(components: PromptComponents, context: PromptContext,
                  template: PromptTemplate | str | None = None) -> str:
    if template is None:
        template = default_template()
    elif isinstance(template, str):
        template = PromptTemplate.parse(template)
    values = {
        "history": format_history(context.history, components.history_len),
        "user_reply": context.description,
        "candidate_action": "" if context.candidate_action is None else str(context.candidate_action),
    }
    order = []
    if components.b:
        order.append("B")
    if components.h and context.history:
        order.append("H")
    if components.f:
        order.append("F")
    if components.q:
        order.append("Q")
    if components.include_candidate and context.candidate_action is not None:
        order.append("CANDIDATE")
    order.append("FINAL_Q" if components.q and "FINAL_Q" in template.sections else "FINAL")
    parts = []
    for name in order:
        body = template.sections.get(name)
        if body is None:
            raise TemplateError(f"template has no section {name!r} required by {components.label}")
        try:
            parts.append(body.format(**values))
        except (KeyError, IndexError, ValueError) as exc:
            raise TemplateError(f"cannot fill section {name}: {exc}") from exc
    return "\n".join(parts) + "\n"


class Decision(Enum):
    ALLOW = "allow"
    BLOCK = "block"
    UNPARSEABLE = "unparseable"


_MARKER = re.compile(r"FINAL\s+ANSWER\s*:\s*\**\s*(YES|NO)\b", re.IGNORECASE)
_TOKEN = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
FALLBACK_WINDOW = 200


def parse_decision_detail(model_text: str | None) -> tuple[Decision, str | None]:
    """Return the decision and how it was found (``"marker"``, ``"fallback"`` or None)."""
    text = model_text or ""
    markers = _MARKER.findall(text)
    if markers:
        return (Decision.ALLOW if markers[-1].upper() == "YES" else Decision.BLOCK), "marker"
    tokens = _TOKEN.findall(text[-FALLBACK_WINDOW:])
    if tokens:
        return (Decision.ALLOW if tokens[-1].lower() == "yes" else Decision.BLOCK), "fallback"
    return Decision.UNPARSEABLE, None


def parse_decision(model_text: str | None) -> Decision:
    return parse_decision_detail(model_text)[0]
