"""Labeled pools of participant free-text state descriptions.

A corpus file is a UTF-8 JSON document::

    {"can_walk": [...], "cannot_walk": [...], "provenance": {...}}
"""
from __future__ import annotations

import datetime
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .errors import EndpointError, GenerationStalled, ParseError, ValidationError

logger = logging.getLogger(__name__)

CAN_WALK = "can_walk"
CANNOT_WALK = "cannot_walk"
DEFAULT_P_EMIT = 0.3

# Generation prompts: one for each walk state.
GENERATION_PROMPTS = {
    CANNOT_WALK: (
        "Write one short first-person sentence a person might say to explain a reason "
        "why they cannot walk today. Reply with the sentence only."
    ),
    CAN_WALK: (
        "Write one short first-person sentence a person might say to describe that they "
        "are feeling fine today. Reply with the sentence only."
    ),
}


def label_for(w: int) -> str:
    return CAN_WALK if w == 1 else CANNOT_WALK


@dataclass(frozen=True)
class Corpus:
    can_walk: tuple[str, ...]
    cannot_walk: tuple[str, ...]
    provenance: dict = field(default_factory=dict)

    def pool(self, label: str) -> tuple[str, ...]:
        if label == CAN_WALK:
            return self.can_walk
        if label == CANNOT_WALK:
            return self.cannot_walk
        raise KeyError(label)

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.can_walk), len(self.cannot_walk)

    def to_dict(self) -> dict[str, Any]:
        return {
            "provenance": dict(self.provenance),
            CAN_WALK: list(self.can_walk),
            CANNOT_WALK: list(self.cannot_walk),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def checksum(self) -> str:
        payload = json.dumps([self.can_walk, self.cannot_walk], ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class DescriptionEvent:
    t: int
    text: str
    label: str


def validate_corpus(can_walk, cannot_walk, provenance=None) -> Corpus:
    for name, pool in ((CAN_WALK, can_walk), (CANNOT_WALK, cannot_walk)):
        if not isinstance(pool, (list, tuple)):
            raise ValidationError(f"{name} must be an array of strings")
        if not pool:
            raise ValidationError(f"{name} pool is empty")
        for item in pool:
            if not isinstance(item, str):
                raise ValidationError(f"{name} contains a non-string entry: {item!r}")
            if not item.strip():
                raise ValidationError(f"{name} contains an empty description")
    overlap = set(can_walk) & set(cannot_walk)
    if overlap:
        raise ValidationError(f"descriptions present under both labels: {sorted(overlap)[:5]}")
    if provenance is not None and not isinstance(provenance, dict):
        raise ValidationError("provenance must be an object")
    return Corpus(tuple(can_walk), tuple(cannot_walk), dict(provenance or {}))


def load_corpus(source: str | Path | dict) -> Corpus:
    """Load and validate a corpus from a path, a JSON string or a parsed mapping."""
    if isinstance(source, dict):
        doc = source
    else:
        text = source
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            try:
                text = Path(source).read_text(encoding="utf-8")
            except OSError as exc:
                raise ParseError(f"cannot read corpus file {source}: {exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed corpus document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError("corpus document must be an object")
    missing = [k for k in (CAN_WALK, CANNOT_WALK) if k not in doc]
    if missing:
        raise ParseError(f"corpus document missing key(s): {missing}")
    corpus = validate_corpus(doc[CAN_WALK], doc[CANNOT_WALK], doc.get("provenance"))
    logger.info("loaded corpus: %d can_walk, %d cannot_walk", *corpus.counts)
    return corpus


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("llm4ts") / "data" / "seed_corpus.json"))


def load_bundled_corpus() -> Corpus:
    return load_corpus(bundled_corpus_path())


def sample_description(corpus: Corpus, label: str, rng: np.random.Generator, t: int = 0) -> DescriptionEvent:
    pool = corpus.pool(label)
    return DescriptionEvent(t=t, text=pool[int(rng.integers(len(pool)))], label=label)


def emit_description(w_prev: int, w_new: int, rng: np.random.Generator,
                     p_emit: float, corpus: Corpus, t: int = 0) -> DescriptionEvent | None:
    """Maybe emit a new description after the walk chain moved from ``w_prev`` to ``w_new``.

    Transitions always emit a description matching the new state.  Staying able
    to walk emits with probability ``p_emit``; staying unable never emits.
    """
    if w_prev != w_new:
        return sample_description(corpus, label_for(w_new), rng, t)
    if w_new == 1 and rng.random() < p_emit:
        return sample_description(corpus, CAN_WALK, rng, t)
    return None


_LEADING_JUNK = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def clean_generated(text: str) -> str:
    for line in text.strip().splitlines():
        line = _LEADING_JUNK.sub("", line).strip().strip("\"'“”").strip()
        if line:
            return line
    return ""


def generate_corpus(client, n_per_label: int, prompts: dict[str, str] | None = None,
                    max_stalled: int = 20, temperature: float | None = 1.0) -> Corpus:
    """Query an inference endpoint until ``n_per_label`` unique descriptions per label exist.

    ``client`` must expose ``chat(user, system=None, temperature=None)`` returning
    an object with a ``text`` attribute.  On endpoint failure the partial pools
    are attached to the raised exception as ``partial``.
    """
    if n_per_label < 1:
        raise ValueError("n_per_label must be >= 1")
    prompts = {**GENERATION_PROMPTS, **(prompts or {})}
    pools: dict[str, list[str]] = {CANNOT_WALK: [], CAN_WALK: []}
    seen: set[str] = set()
    for label in (CANNOT_WALK, CAN_WALK):
        stalled = 0
        while len(pools[label]) < n_per_label:
            try:
                result = client.chat(prompts[label], temperature=temperature)
            except EndpointError as exc:
                exc.partial = {k: list(v) for k, v in pools.items()}
                raise
            text = clean_generated(result.text)
            if text and text not in seen:
                seen.add(text)
                pools[label].append(text)
                stalled = 0
            else:
                stalled += 1
                if stalled >= max_stalled:
                    err = GenerationStalled(
                        f"{label}: no new unique description after {max_stalled} attempts "
                        f"({len(pools[label])}/{n_per_label} collected)")
                    err.partial = {k: list(v) for k, v in pools.items()}
                    raise err
    provenance = {"generator": getattr(client, "model", "unknown"), "prompts": prompts,
                  "n_per_label": n_per_label, "date": datetime.date.today().isoformat()}
    return validate_corpus(pools[CAN_WALK], pools[CANNOT_WALK], provenance)
