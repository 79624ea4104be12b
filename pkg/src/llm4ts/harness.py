"""Single-trial LLM4TS loop and the scenario-grid experiment runner."""
from __future__ import annotations

import csv
import io
import json
import logging
import zlib
from collections import Counter
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np

from .agent import ThompsonSampler, TsConfig
from .corpus import (CAN_WALK, DEFAULT_P_EMIT, Corpus, DescriptionEvent, emit_description,
                     load_bundled_corpus, sample_description)
from .errors import ConfigError, EmptyInput, EndpointError
from .judge import Judge, JudgeRequest, JudgeSpec, build_judge
from .prompt import HistoryRecord, PromptComponents, PromptContext
from .sim import SimParams, StepCountEnv

logger = logging.getLogger(__name__)

SCENARIOS = {1: (0.7, 0.5), 2: (0.7, 0.1), 3: (0.95, 0.5), 4: (0.95, 0.1)}
DEFAULT_ETA_D = (0.05, 0.4)

RESULT_COLUMNS = ("scenario", "p_w11", "p_w00", "eta_d", "method", "seed", "total_reward",
                  "excess_steps", "disengaged", "disengage_t", "msgs_sent", "msgs_blocked",
                  "judge_calls", "judge_fp", "judge_fn", "mean_judge_latency_ms")
AGGREGATE_COLUMNS = ("scenario", "p_w11", "p_w00", "eta_d", "method", "n_trials", "n_failed",
                     "total_reward_median", "total_reward_q25", "total_reward_q75",
                     "excess_steps_median", "excess_steps_q25", "excess_steps_q75",
                     "disengagement_rate", "mean_judge_accuracy",
                     "mean_judge_latency_ms", "max_judge_latency_ms")

_FROM_CONFIG = object()


@dataclass(frozen=True)
class TrialConfig:
    sim: SimParams = field(default_factory=SimParams)
    ts: TsConfig = field(default_factory=TsConfig)
    judge: JudgeSpec | None = field(default_factory=JudgeSpec)  # None disables the judge stage
    prompt: PromptComponents = field(default_factory=lambda: PromptComponents.preset("BFQH"))
    seed: int = 0
    method_label: str = "ts"
    p_emit: float = DEFAULT_P_EMIT

    def __post_init__(self):
        if not 0.0 <= self.p_emit <= 1.0:
            raise ConfigError("p_emit must lie in [0, 1]")


@dataclass
class StepRecord:
    t: int
    c: int
    h: float
    d: float
    w: int
    candidate: int | None
    verdict: str | None
    action: int | None
    reward: float
    h_next: float | None
    description: str
    description_label: str
    judge_latency: float = 0.0
    padded: bool = False

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrialResult:
    steps: list[StepRecord]
    total_reward: float
    excess_steps: float
    disengaged: bool
    disengage_t: int | None
    msgs_sent: int
    msgs_blocked: int
    judge_calls: int
    judge_confusion: tuple[int, int, int, int]  # tp, fp, tn, fn against latent w
    action_counts: dict[int, int]
    candidate_counts: dict[int, int]
    judge_latencies: list[float]
    seed: int = 0
    method: str = ""

    @property
    def judge_accuracy(self) -> float | None:
        tp, fp, tn, fn = self.judge_confusion
        n = tp + fp + tn + fn
        return (tp + tn) / n if n else None

    @property
    def mean_judge_latency_ms(self) -> float:
        return 1000.0 * float(np.mean(self.judge_latencies)) if self.judge_latencies else 0.0

    def summary(self) -> dict[str, Any]:
        tp, fp, tn, fn = self.judge_confusion
        return {
            "method": self.method, "seed": self.seed, "total_reward": self.total_reward,
            "excess_steps": self.excess_steps, "disengaged": self.disengaged,
            "disengage_t": self.disengage_t, "msgs_sent": self.msgs_sent,
            "msgs_blocked": self.msgs_blocked, "judge_calls": self.judge_calls,
            "judge_tp": tp, "judge_fp": fp, "judge_tn": tn, "judge_fn": fn,
            "mean_judge_latency_ms": self.mean_judge_latency_ms,
            "action_counts": {str(k): v for k, v in sorted(self.action_counts.items())},
            "candidate_counts": {str(k): v for k, v in sorted(self.candidate_counts.items())},
        }

    def to_dict(self) -> dict[str, Any]:
        return {"summary": self.summary(), "steps": [s.to_dict() for s in self.steps]}


def trial_streams(seed: int) -> tuple[np.random.SeedSequence, ...]:
    """Independent child streams: environment, agent, descriptions, judge."""
    return tuple(np.random.SeedSequence(seed).spawn(4))


def run_trial(cfg: TrialConfig, corpus: Corpus | None = None, *, judge: Judge | None = _FROM_CONFIG,
              client=None, agent: ThompsonSampler | None = None, env: StepCountEnv | None = None,
              template=None) -> TrialResult:
    """Run one simulated participant through the propose / judge / filter / update loop.

    ``judge=None`` removes the judge stage entirely; by default the judge is
    built from ``cfg.judge``.
    """
    corpus = corpus or load_bundled_corpus()
    env_ss, agent_ss, desc_ss, judge_ss = trial_streams(cfg.seed)
    if judge is _FROM_CONFIG:
        judge = None if cfg.judge is None else build_judge(
            cfg.judge, np.random.default_rng(judge_ss), client, cfg.prompt, template)
    env = env or StepCountEnv(cfg.sim, env_ss)
    agent = agent or ThompsonSampler(cfg.ts, np.random.default_rng(agent_ss))
    desc_rng = np.random.default_rng(desc_ss)
    sim = cfg.sim
    hist_keep = max(cfg.prompt.history_len - 1, 0)

    active: DescriptionEvent = sample_description(corpus, CAN_WALK, desc_rng, 0)
    history: list[HistoryRecord] = []
    steps: list[StepRecord] = []
    actions: Counter = Counter()
    candidates: Counter = Counter()
    latencies: list[float] = []
    tp = fp = tn = fn = 0
    sent = blocked = calls = 0
    total = excess = 0.0
    disengage_t = None
    state = env.state

    for t in range(sim.horizon):
        if state.disengaged:
            steps.append(StepRecord(t, state.c, state.h, state.d, state.w, None, None, None, 0.0,
                                    None, active.text, active.label, padded=True))
            continue
        v = agent.features(state.c, state.h, state.d)
        cand = agent.propose(v)
        candidates[cand] += 1
        a = cand
        verdict = None
        latency = 0.0
        if cand != 0 and judge is not None:
            recent = tuple(history[-hist_keep:]) if hist_keep else ()
            ctx = PromptContext(active.text, recent + (HistoryRecord(state.c, state.h, state.d),), cand)
            decision = judge.decide(JudgeRequest(active, ctx, t))
            calls += 1
            latency = decision.latency
            latencies.append(latency)
            verdict = decision.verdict.value
            if decision.allowed:
                tp += state.w == 1
                fp += state.w == 0
            else:
                a = 0
                blocked += 1
                tn += state.w == 0
                fn += state.w == 1
        w_now = state.w
        new_state, z, _ = env.step(a)
        agent.update(a, v, z)
        actions[a] += 1
        sent += a != 0
        total += z
        excess += z - sim.m_s * w_now
        steps.append(StepRecord(t, state.c, state.h, state.d, w_now, cand, verdict, a, z,
                                new_state.h, active.text, active.label, latency))
        history.append(HistoryRecord(state.c, state.h, state.d, a, z))
        if new_state.disengaged:
            disengage_t = t
        else:
            ev = emit_description(w_now, new_state.w, desc_rng, cfg.p_emit, corpus, t + 1)
            if ev is not None:
                active = ev
        state = new_state

    return TrialResult(steps=steps, total_reward=total, excess_steps=excess,
                       disengaged=disengage_t is not None, disengage_t=disengage_t,
                       msgs_sent=sent, msgs_blocked=blocked, judge_calls=calls,
                       judge_confusion=(tp, fp, tn, fn), action_counts=dict(actions),
                       candidate_counts=dict(candidates), judge_latencies=latencies,
                       seed=cfg.seed, method=cfg.method_label)


# --- experiment grid -------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    name: str
    judge: JudgeSpec | None
    prompt: PromptComponents = field(default_factory=lambda: PromptComponents.preset("BFQH"))


def method_from_name(name: str, judge_params: dict | None = None,
                     prompt: PromptComponents | None = None) -> MethodSpec:
    """Map a CLI method id to its judge: ts, llm4ts-oracle, llm4ts-noisy, llm4ts-llm."""
    prompt = prompt or PromptComponents.preset("BFQH")
    kinds = {"ts": "always_allow", "llm4ts-oracle": "oracle", "llm4ts-noisy": "noisy",
             "llm4ts-llm": "llm"}
    if name not in kinds:
        raise ConfigError(f"unknown method {name!r}; choose from {sorted(kinds)}")
    params = dict(judge_params or {}) if kinds[name] in ("noisy", "llm") else {}
    return MethodSpec(name, JudgeSpec(kinds[name], params), prompt)


@dataclass(frozen=True)
class Scenario:
    id: int
    p_w11: float
    p_w00: float


def scenarios_from_ids(ids: Iterable[int]) -> tuple[Scenario, ...]:
    out = []
    for i in ids:
        if i not in SCENARIOS:
            raise ConfigError(f"unknown scenario {i}; valid ids are {sorted(SCENARIOS)}")
        out.append(Scenario(i, *SCENARIOS[i]))
    return tuple(out)


@dataclass(frozen=True)
class ExperimentGrid:
    scenarios: tuple[Scenario, ...] = field(default_factory=lambda: scenarios_from_ids(SCENARIOS))
    eta_d: tuple[float, ...] = DEFAULT_ETA_D
    methods: tuple[MethodSpec, ...] = field(
        default_factory=lambda: (method_from_name("ts"), method_from_name("llm4ts-oracle")))
    repeats: int = 5
    base_seed: int = 0
    sim: SimParams = field(default_factory=SimParams)
    ts: TsConfig = field(default_factory=TsConfig)
    p_emit: float = DEFAULT_P_EMIT

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not self.scenarios or not self.eta_d or not self.methods:
            raise ConfigError("grid needs at least one scenario, eta_d value and method")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate method names: {names}")


def trial_seed(base_seed: int, scenario_id: int, eta_index: int, method: str, repeat: int) -> int:
    """Order-independent 64-bit seed for one grid cell repeat."""
    key = [base_seed & 0xFFFFFFFFFFFFFFFF, scenario_id, eta_index,
           zlib.crc32(method.encode("utf-8")), repeat]
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class _Task:
    scenario: Scenario
    eta_d: float
    eta_index: int
    method_index: int
    repeat: int
    config: TrialConfig


def grid_tasks(grid: ExperimentGrid) -> list[_Task]:
    tasks = []
    for sc in grid.scenarios:
        for ei, eta in enumerate(grid.eta_d):
            sim = replace(grid.sim, p_w11=sc.p_w11, p_w00=sc.p_w00, eta_d=eta)
            for mi, m in enumerate(grid.methods):
                for r in range(grid.repeats):
                    seed = trial_seed(grid.base_seed, sc.id, ei, m.name, r)
                    cfg = TrialConfig(sim=sim, ts=grid.ts, judge=m.judge, prompt=m.prompt,
                                      seed=seed, method_label=m.name, p_emit=grid.p_emit)
                    tasks.append(_Task(sc, eta, ei, mi, r, cfg))
    return tasks


def _row(task: _Task, res: TrialResult) -> dict[str, Any]:
    tp, fp, tn, fn = res.judge_confusion
    return {
        "scenario": task.scenario.id, "p_w11": task.scenario.p_w11, "p_w00": task.scenario.p_w00,
        "eta_d": task.eta_d, "method": task.config.method_label, "seed": task.config.seed,
        "total_reward": res.total_reward, "excess_steps": res.excess_steps,
        "disengaged": int(res.disengaged),
        "disengage_t": "" if res.disengage_t is None else res.disengage_t,
        "msgs_sent": res.msgs_sent, "msgs_blocked": res.msgs_blocked,
        "judge_calls": res.judge_calls, "judge_fp": fp, "judge_fn": fn,
        "mean_judge_latency_ms": res.mean_judge_latency_ms,
        # extras used for aggregation only
        "_judge_accuracy": res.judge_accuracy,
        "_max_latency_ms": 1000.0 * max(res.judge_latencies, default=0.0),
        "_sort": (task.scenario.id, task.eta_index, task.method_index, task.repeat),
    }


def _execute(task_and_corpus) -> tuple[dict, TrialResult | None, str | None]:
    task, corpus, client = task_and_corpus
    try:
        res = run_trial(task.config, corpus, client=client)
    except EndpointError as exc:
        failed = {"scenario": task.scenario.id, "eta_d": task.eta_d,
                  "method": task.config.method_label, "seed": task.config.seed,
                  "error": f"{type(exc).__name__}: {exc}",
                  "_sort": (task.scenario.id, task.eta_index, task.method_index, task.repeat)}
        return failed, None, str(exc)
    return _row(task, res), res, None


@dataclass
class ExperimentResults:
    rows: list[dict]
    failures: list[dict]
    aggregates: list[dict]
    trials: list[TrialResult] | None = None

    def rows_csv(self) -> str:
        return _to_csv(self.rows, RESULT_COLUMNS)

    def aggregates_csv(self) -> str:
        return _to_csv(self.aggregates, AGGREGATE_COLUMNS)

    def failures_csv(self) -> str:
        return _to_csv(self.failures, ("scenario", "eta_d", "method", "seed", "error"))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def aggregate_quantiles(values: Sequence[float]) -> tuple[float, float, float]:
    """Median, 25th and 75th percentile with linear interpolation."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise EmptyInput("cannot aggregate an empty list")
    q25, med, q75 = np.quantile(arr, [0.25, 0.5, 0.75])
    return float(med), float(q25), float(q75)


def aggregate_rows(rows: Sequence[dict], failures: Sequence[dict] = ()) -> list[dict]:
    cells: dict[tuple, list[dict]] = {}
    order: list[tuple] = []
    for row in rows:
        key = (row["scenario"], row["eta_d"], row["method"])
        if key not in cells:
            cells[key] = []
            order.append(key)
        cells[key].append(row)
    failed = Counter((f["scenario"], f["eta_d"], f["method"]) for f in failures)
    out = []
    for key in order:
        group = cells[key]
        first = group[0]
        agg = {"scenario": first["scenario"], "p_w11": first["p_w11"], "p_w00": first["p_w00"],
               "eta_d": first["eta_d"], "method": first["method"], "n_trials": len(group),
               "n_failed": failed.get(key, 0)}
        for metric in ("total_reward", "excess_steps"):
            med, q25, q75 = aggregate_quantiles([r[metric] for r in group])
            agg[f"{metric}_median"], agg[f"{metric}_q25"], agg[f"{metric}_q75"] = med, q25, q75
        agg["disengagement_rate"] = float(np.mean([r["disengaged"] for r in group]))
        accs = [r["_judge_accuracy"] for r in group if r.get("_judge_accuracy") is not None]
        agg["mean_judge_accuracy"] = float(np.mean(accs)) if accs else None
        agg["mean_judge_latency_ms"] = float(np.mean([r["mean_judge_latency_ms"] for r in group]))
        agg["max_judge_latency_ms"] = float(max(r.get("_max_latency_ms", 0.0) for r in group))
        out.append(agg)
    return out


def run_experiment(grid: ExperimentGrid, corpus: Corpus | None = None, jobs: int = 1,
                   client=None, keep_trials: bool = False) -> ExperimentResults:
    """Run every (scenario, eta_d, method, repeat) trial and aggregate per cell.

    Trials with an LLM judge that fail at the endpoint are recorded in
    ``failures`` and excluded from the aggregates.
    """
    corpus = corpus or load_bundled_corpus()
    tasks = grid_tasks(grid)
    needs_client = any(m.judge is not None and m.judge.kind == "llm" for m in grid.methods)
    if needs_client and client is None:
        raise ConfigError("an llm method was requested but no inference client is configured")
    payload = [(t, corpus, client if (t.config.judge and t.config.judge.kind == "llm") else None)
               for t in tasks]
    if jobs <= 1:
        outcomes = [_execute(p) for p in payload]
    elif needs_client:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_execute, payload))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_execute, payload, chunksize=max(1, len(payload) // (4 * jobs))))

    rows, failures, trials = [], [], []
    for row, res, err in outcomes:
        if err is None:
            rows.append(row)
            trials.append(res)
        else:
            failures.append(row)
    if failures:
        logger.warning("%d trial(s) failed at the inference endpoint and are excluded", len(failures))
    order = sorted(range(len(rows)), key=lambda i: rows[i]["_sort"])
    rows = [rows[i] for i in order]
    trials = [trials[i] for i in order]
    failures.sort(key=lambda f: f["_sort"])
    return ExperimentResults(rows=rows, failures=failures, aggregates=aggregate_rows(rows, failures),
                             trials=trials if keep_trials else None)


def write_trajectories(results: ExperimentResults, fh) -> None:
    """Line-delimited JSON, one record per step, keyed by trial."""
    if results.trials is None:
        raise ValueError("run_experiment(..., keep_trials=True) is required for trajectory logs")
    for row, trial in zip(results.rows, results.trials):
        for step in trial.steps:
            rec = {"scenario": row["scenario"], "eta_d": row["eta_d"], "method": row["method"],
                   "seed": row["seed"], **step.to_dict()}
            fh.write(json.dumps(rec) + "\n")
