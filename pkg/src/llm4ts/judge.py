"""Action filters that allow or block a candidate message.

Each judge sees the active participant description.  The oracle and noisy
judges also read the hidden ground-truth label; the LLM judge only sees the
rendered prompt.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .corpus import CAN_WALK, DescriptionEvent
from .errors import ConfigError
from .prompt import (Decision, PromptComponents, PromptContext, PromptTemplate,
                     parse_decision_detail, render_prompt)

JUDGE_KINDS = ("always_allow", "oracle", "noisy", "llm")


class Verdict(Enum):
    ALLOW = "allow"
    BLOCK = "block"


@dataclass(frozen=True)
class JudgeRequest:
    description_event: DescriptionEvent
    prompt_context: PromptContext | None = None
    time: int = 0

    def __post_init__(self):
        if not self.description_event.text.strip():
            raise ValueError("description text must be non-empty")

    def context(self) -> PromptContext:
        if self.prompt_context is not None:
            return self.prompt_context
        return PromptContext(description=self.description_event.text)


@dataclass
class JudgeDecision:
    verdict: Verdict
    source: str
    latency: float = 0.0
    raw_response: str | None = None
    retries: int = 0
    parse_outcome: str | None = None  # marker | fallback | fallback_default
    prompt_chars: int = 0
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    tokens_estimated: bool = False

    @property
    def allowed(self) -> bool:
        return self.verdict is Verdict.ALLOW


def _oracle_verdict(req: JudgeRequest) -> Verdict:
    return Verdict.ALLOW if req.description_event.label == CAN_WALK else Verdict.BLOCK


# Deterministic judges do no I/O and report zero latency so result files stay
# byte-reproducible.

def always_allow_decide(req: JudgeRequest) -> JudgeDecision:
    return JudgeDecision(Verdict.ALLOW, "always_allow")


def oracle_decide(req: JudgeRequest) -> JudgeDecision:
    return JudgeDecision(_oracle_verdict(req), "oracle")


def noisy_decide(req: JudgeRequest, rng: np.random.Generator,
                 p_false_block: float, p_false_allow: float) -> JudgeDecision:
    verdict = _oracle_verdict(req)
    u = rng.random()
    if verdict is Verdict.ALLOW and u < p_false_block:
        verdict = Verdict.BLOCK
    elif verdict is Verdict.BLOCK and u < p_false_allow:
        verdict = Verdict.ALLOW
    return JudgeDecision(verdict, "noisy")


def llm_decide(req: JudgeRequest, client, components: PromptComponents,
               retry_budget: int = 2, fallback: Verdict = Verdict.ALLOW,
               template: PromptTemplate | None = None, system: str | None = None) -> JudgeDecision:
    """Ask the model, reparsing up to ``retry_budget`` extra times on unparseable replies.

    Transport failures surface as :class:`~llm4ts.errors.EndpointError` from the client.
    """
    if retry_budget < 0:
        raise ValueError("retry_budget must be >= 0")
    prompt = render_prompt(components, req.context(), template)
    start = time.perf_counter()
    prompt_tokens = completion_tokens = 0
    estimated = False
    raw = None
    for attempt in range(retry_budget + 1):
        result = client.chat(prompt, system=system)
        raw = result.text
        estimated = estimated or result.usage_estimated
        prompt_tokens += result.prompt_tokens or 0
        completion_tokens += result.completion_tokens or 0
        decision, how = parse_decision_detail(raw)
        if decision is not Decision.UNPARSEABLE:
            verdict = Verdict.ALLOW if decision is Decision.ALLOW else Verdict.BLOCK
            break
    else:
        verdict, how = fallback, "fallback_default"
    return JudgeDecision(verdict, "llm", latency=time.perf_counter() - start, raw_response=raw,
                         retries=attempt, parse_outcome=how, prompt_chars=len(prompt),
                         prompt_tokens=prompt_tokens, completion_tokens=completion_tokens,
                         tokens_estimated=estimated)


class Judge:
    kind = "base"
    deterministic = True
    uses_network = False

    def decide(self, req: JudgeRequest) -> JudgeDecision:
        raise NotImplementedError


class AlwaysAllowJudge(Judge):
    kind = "always_allow"

    def decide(self, req):
        return always_allow_decide(req)


class OracleJudge(Judge):
    kind = "oracle"

    def decide(self, req):
        return oracle_decide(req)


class NoisyJudge(Judge):
    kind = "noisy"

    def __init__(self, p_false_block: float = 0.0, p_false_allow: float = 0.0,
                 rng: np.random.Generator | None = None):
        for name, p in (("p_false_block", p_false_block), ("p_false_allow", p_false_allow)):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        self.p_false_block = p_false_block
        self.p_false_allow = p_false_allow
        self.rng = rng if rng is not None else np.random.default_rng()

    def reseed(self, rng: np.random.Generator) -> None:
        self.rng = rng

    def decide(self, req):
        return noisy_decide(req, self.rng, self.p_false_block, self.p_false_allow)


class LLMJudge(Judge):
    kind = "llm"
    deterministic = False
    uses_network = True

    def __init__(self, client, components: PromptComponents | None = None, retry_budget: int = 2,
                 fallback: Verdict = Verdict.ALLOW, template: PromptTemplate | None = None,
                 system: str | None = None, cache: bool = False):
        self.client = client
        self.components = components or PromptComponents.preset("BFQH")
        self.retry_budget = retry_budget
        self.fallback = fallback
        self.template = template
        self.system = system
        self._cache: dict[str, JudgeDecision] | None = {} if cache else None
        self._lock = threading.Lock()

    def decide(self, req):
        key = req.description_event.text
        if self._cache is not None:
            with self._lock:
                hit = self._cache.get(key)
            if hit is not None:
                return JudgeDecision(hit.verdict, "llm", raw_response=hit.raw_response,
                                     parse_outcome=hit.parse_outcome)
        decision = llm_decide(req, self.client, self.components, self.retry_budget,
                              self.fallback, self.template, self.system)
        if self._cache is not None:
            with self._lock:
                self._cache[key] = decision
        return decision


@dataclass(frozen=True)
class JudgeSpec:
    """Serializable judge selection: a kind plus its parameter block."""
    kind: str = "always_allow"
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in JUDGE_KINDS:
            raise ConfigError(f"unknown judge kind {self.kind!r}; choose from {list(JUDGE_KINDS)}")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, data: dict[str, Any] | str | None) -> "JudgeSpec":
        if data is None:
            return cls()
        if isinstance(data, str):
            return cls(data)
        data = dict(data)
        kind = data.pop("kind", "always_allow")
        # allow per-kind blocks: {"kind": "noisy", "noisy": {...}}
        block = data.pop(kind, None)
        for other in JUDGE_KINDS:
            data.pop(other, None)
        if isinstance(block, dict):
            data = {**data, **block}
        return cls(kind, data)


def parse_fallback(value: str | Verdict) -> Verdict:
    if isinstance(value, Verdict):
        return value
    try:
        return Verdict(str(value).lower())
    except ValueError:
        raise ConfigError(f"fallback must be 'allow' or 'block', got {value!r}") from None


def build_judge(spec: JudgeSpec, rng: np.random.Generator | None = None, client=None,
                components: PromptComponents | None = None,
                template: PromptTemplate | None = None) -> Judge:
    p = dict(spec.params)
    if spec.kind == "always_allow":
        return AlwaysAllowJudge()
    if spec.kind == "oracle":
        return OracleJudge()
    if spec.kind == "noisy":
        return NoisyJudge(float(p.get("p_false_block", 0.0)), float(p.get("p_false_allow", 0.0)), rng)
    if client is None:
        raise ConfigError("the llm judge needs a configured inference endpoint")
    return LLMJudge(client, components, retry_budget=int(p.get("retry_budget", 2)),
                    fallback=parse_fallback(p.get("fallback", "allow")), template=template,
                    system=p.get("system"), cache=bool(p.get("cache", False)))
