"""Run configuration: one JSON document with sections sim, ts, judge, prompt, endpoint.

Optional run-level sections: ``run`` (simulate defaults such as ``seed``) and
``experiment`` (grid defaults).  A run manifest is accepted too; its
``config`` member is used.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .agent import TsConfig
from .errors import ConfigError
from .judge import JUDGE_KINDS, JudgeSpec
from .prompt import PromptComponents, PromptTemplate

SECTIONS = {"sim", "ts", "judge", "prompt", "endpoint", "run", "experiment", "corpus", "p_emit"}


def read_document(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be an object")
    if "config" in doc and "tool" in doc:
        doc = doc["config"]
    unknown = set(doc) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    return doc


def prompt_from_dict(data: dict[str, Any] | str | None) -> tuple[PromptComponents, PromptTemplate | None]:
    if data is None:
        return PromptComponents.preset("BFQH"), None
    if isinstance(data, str):
        return PromptComponents.preset(data), None
    data = dict(data)
    template = data.pop("template", None)
    preset = data.pop("preset", "BFQH")
    allowed = {"history_len", "include_candidate", "b", "f", "q", "h"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown prompt field(s): {sorted(unknown)}")
    comps = PromptComponents.preset(preset)
    if data:
        comps = PromptComponents(**{**comps.__dict__, **data})
    return comps, PromptTemplate.from_file(template) if template else None


def judge_params_for(raw: dict[str, Any] | str | None, kind: str) -> dict[str, Any]:
    """Parameter block for ``kind`` from a judge section, whichever kind it selects."""
    if not isinstance(raw, dict):
        return {}
    params = {}
    if raw.get("kind") == kind:
        params.update({k: v for k, v in raw.items() if k != "kind" and k not in JUDGE_KINDS})
    if isinstance(raw.get(kind), dict):
        params.update(raw[kind])
    return params


@dataclass
class RunConfig:
    raw: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        return cls(read_document(path) if path else {})

    @property
    def sim_dict(self) -> dict[str, Any]:
        return dict(self.raw.get("sim") or {})

    @property
    def ts(self) -> TsConfig:
        return TsConfig.from_dict(self.raw.get("ts"))

    @property
    def judge_raw(self):
        return self.raw.get("judge")

    def judge(self, kind: str | None = None) -> JudgeSpec:
        raw = self.judge_raw
        if kind is None:
            return JudgeSpec.from_dict(raw)
        return JudgeSpec(kind, judge_params_for(raw, kind))

    def prompt(self, preset: str | None = None) -> tuple[PromptComponents, PromptTemplate | None]:
        raw = self.raw.get("prompt")
        if preset is not None:
            raw = {**(raw if isinstance(raw, dict) else {}), "preset": preset}
        return prompt_from_dict(raw)

    @property
    def endpoint_raw(self) -> dict[str, Any]:
        return dict(self.raw.get("endpoint") or {})

    def section(self, name: str) -> dict[str, Any]:
        value = self.raw.get(name) or {}
        if not isinstance(value, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        return dict(value)
