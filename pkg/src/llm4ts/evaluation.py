"""Judge validation against labeled description corpora.

The positive class is "send" (the participant can walk).  Confusion matrices
use rows = true (send, don't send) and columns = predicted (send, don't send).
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .corpus import CAN_WALK, CANNOT_WALK, Corpus, DescriptionEvent
from .errors import EmptyInput, EndpointError
from .judge import Judge, JudgeRequest, LLMJudge, Verdict
from .prompt import PromptComponents, PromptContext

CLASSES = ("send", "dont_send")


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalMetrics:
    confusion: list[list[int]]
    n: int
    accuracy: float
    per_class: dict[str, ClassMetrics]
    macro: dict[str, float]
    weighted: dict[str, float]
    zero_division: list[str] = field(default_factory=list)
    partial: bool = False
    label_consistency: float | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["per_class"] = {k: asdict(v) for k, v in self.per_class.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def report(self) -> str:
        (tp, fn), (fp, tn) = self.confusion
        lines = [
            f"samples: {self.n}{'  (PARTIAL)' if self.partial else ''}",
            "confusion (rows = true, cols = predicted):",
            f"{'':>12}{'send':>10}{'dont_send':>12}",
            f"{'send':>12}{tp:>10}{fn:>12}",
            f"{'dont_send':>12}{fp:>10}{tn:>12}",
            f"accuracy: {self.accuracy:.3f}",
        ]
        for name, m in self.per_class.items():
            lines.append(f"{name:>10}: precision {m.precision:.3f}  recall {m.recall:.3f}  "
                         f"f1 {m.f1:.3f}  support {m.support}")
        for avg in ("macro", "weighted"):
            m = getattr(self, avg)
            lines.append(f"{avg:>10}: precision {m['precision']:.3f}  recall {m['recall']:.3f}  "
                         f"f1 {m['f1']:.3f}")
        if self.label_consistency is not None:
            lines.append(f"label consistency: {self.label_consistency:.3f}")
        if self.zero_division:
            lines.append("zero-division (reported as 0): " + ", ".join(self.zero_division))
        return "\n".join(lines) + "\n"


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def confusion_to_metrics(confusion) -> EvalMetrics:
    cm = np.asarray(confusion, dtype=int)
    if cm.shape != (2, 2) or (cm < 0).any():
        raise ValueError("confusion must be a 2x2 array of non-negative counts")
    n = int(cm.sum())
    if n == 0:
        raise EmptyInput("confusion matrix has no samples")
    flags: list[str] = []
    per_class = {}
    for i, name in enumerate(CLASSES):
        tp = int(cm[i, i])
        predicted = int(cm[:, i].sum())
        actual = int(cm[i, :].sum())
        p = _ratio(tp, predicted, f"{name}.precision", flags)
        r = _ratio(tp, actual, f"{name}.recall", flags)
        f1 = _ratio(2 * p * r, p + r, f"{name}.f1", flags)
        per_class[name] = ClassMetrics(p, r, f1, actual)
    macro = {k: float(np.mean([getattr(m, k) for m in per_class.values()]))
             for k in ("precision", "recall", "f1")}
    weighted = {k: sum(getattr(m, k) * m.support for m in per_class.values()) / n
                for k in ("precision", "recall", "f1")}
    return EvalMetrics(confusion=cm.tolist(), n=n, accuracy=float(np.trace(cm)) / n,
                       per_class=per_class, macro=macro, weighted=weighted, zero_division=flags)


def confusion_from_pairs(labels: Sequence[str], verdicts: Sequence[Verdict]) -> list[list[int]]:
    cm = [[0, 0], [0, 0]]
    for label, verdict in zip(labels, verdicts):
        row = 0 if label == CAN_WALK else 1
        col = 0 if verdict is Verdict.ALLOW else 1
        cm[row][col] += 1
    return cm


def sample_requests(corpus: Corpus, n_per_label: int, rng: np.random.Generator) -> list[JudgeRequest]:
    """``n_per_label`` draws per pool, without replacement while the pool lasts."""
    if n_per_label < 1:
        raise ValueError("n_per_label must be >= 1")
    requests = []
    for label in (CAN_WALK, CANNOT_WALK):
        pool = corpus.pool(label)
        if n_per_label <= len(pool):
            idx = rng.choice(len(pool), size=n_per_label, replace=False)
        else:
            idx = rng.integers(len(pool), size=n_per_label)
        for i in idx:
            event = DescriptionEvent(t=0, text=pool[int(i)], label=label)
            requests.append(JudgeRequest(event, PromptContext(description=event.text)))
    return requests


def validate_judge(judge: Judge, corpus: Corpus, n_per_label: int, rng: np.random.Generator,
                   components: PromptComponents | None = None, jobs: int = 1) -> EvalMetrics:
    """Score ``judge`` on balanced samples from ``corpus`` with an empty history.

    ``components`` (default BFQ) replaces the prompt components of an LLM judge.
    Network judges may run with ``jobs`` concurrent requests; results are
    reassembled in sample order.  If the endpoint fails, the metrics cover the
    samples that completed and are flagged ``partial``.
    """
    if isinstance(judge, LLMJudge):
        judge.components = components or PromptComponents.preset("BFQ")
    requests = sample_requests(corpus, n_per_label, rng)
    verdicts: list[Verdict | None] = [None] * len(requests)
    partial = False
    if jobs > 1 and getattr(judge, "uses_network", False):
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(judge.decide, r) for r in requests]
            for i, fut in enumerate(futures):
                try:
                    verdicts[i] = fut.result().verdict
                except EndpointError:
                    partial = True
    else:
        for i, req in enumerate(requests):
            try:
                verdicts[i] = judge.decide(req).verdict
            except EndpointError:
                partial = True
                break
    done = [(r.description_event.label, v) for r, v in zip(requests, verdicts) if v is not None]
    if not done:
        raise EndpointError("no judge verdicts were obtained")
    metrics = confusion_to_metrics(confusion_from_pairs(*zip(*done)))
    metrics.partial = partial
    return metrics


def label_consistency(judge: Judge, corpus: Corpus) -> float:
    """Fraction of every corpus description whose verdict agrees with its generating label."""
    agree = total = 0
    for label in (CAN_WALK, CANNOT_WALK):
        for text in corpus.pool(label):
            ev = DescriptionEvent(0, text, label)
            verdict = judge.decide(JudgeRequest(ev, PromptContext(text))).verdict
            agree += (verdict is Verdict.ALLOW) == (label == CAN_WALK)
            total += 1
    return agree / total


def blinded_review_sheet(corpus: Corpus, n_per_label: int, rng: np.random.Generator) -> tuple[str, str]:
    """Shuffled unlabeled descriptions for manual review, plus the matching answer key (CSV)."""
    reqs = sample_requests(corpus, n_per_label, rng)
    order = rng.permutation(len(reqs))
    sheet = ["id,description\n"]
    key = ["id,label\n"]
    for new_id, i in enumerate(order):
        ev = reqs[int(i)].description_event
        text = ev.text.replace('"', '""')
        sheet.append(f'{new_id},"{text}"\n')
        key.append(f"{new_id},{ev.label}\n")
    return "".join(sheet), "".join(key)
