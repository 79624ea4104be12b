from __future__ import annotations

import io
import json
from dataclasses import replace

import numpy as np
import pytest

from llm4ts.agent import TsConfig
from llm4ts.client import ChatClient
from llm4ts.errors import ConfigError, EmptyInput
from llm4ts.harness import (RESULT_COLUMNS, ExperimentGrid, TrialConfig, aggregate_quantiles,
                            method_from_name, run_experiment, run_trial, scenarios_from_ids,
                            trial_seed, write_trajectories)
from llm4ts.judge import JudgeSpec
from llm4ts.sim import SimParams, step_count


class FixedAgent:
    """Always proposes the same action; records updates."""

    def __init__(self, action):
        self.action = action
        self.updates = []

    def features(self, c, h, d):
        return np.array([c, h, d], dtype=float)

    def propose(self, v):
        return self.action

    def update(self, a, v, r):
        self.updates.append((a, r))


def check_trial(res, sim):
    live = [s for s in res.steps if not s.padded]
    assert len(res.steps) == sim.horizon
    assert res.msgs_sent + res.msgs_blocked + sum(s.candidate == 0 for s in live) == len(live)
    assert res.judge_calls == sum(s.candidate != 0 for s in live) or res.judge_calls == 0
    for s in live:
        if s.candidate == 0:
            assert s.verdict is None and s.action == 0
        elif s.verdict == "block":
            assert s.action == 0
        elif s.verdict == "allow":
            assert s.action == s.candidate
        assert s.reward == step_count(s.action, s.c, s.w, s.h_next, sim.m_s, sim.rho1, sim.rho2)
    assert res.total_reward == pytest.approx(sum(s.reward for s in res.steps))
    assert res.total_reward >= 0
    if res.disengaged:
        assert all(s.reward == 0 and s.padded for s in res.steps[res.disengage_t + 1:])
    assert res.excess_steps == pytest.approx(sum(s.reward - sim.m_s * s.w for s in live))


@pytest.mark.parametrize("kind", ["always_allow", "oracle", "noisy"])
def test_trial_accounting_and_replay(kind, corpus):
    sim = SimParams(p_w11=0.7, p_w00=0.5, eta_d=0.4)
    for seed in range(30):
        spec = JudgeSpec(kind, {"p_false_block": 0.2, "p_false_allow": 0.2} if kind == "noisy" else {})
        res = run_trial(TrialConfig(sim=sim, judge=spec, seed=seed), corpus)
        check_trial(res, sim)


def test_oracle_never_messages_cannot_walk(corpus):
    sim = SimParams(p_w11=0.7, p_w00=0.5)
    for seed in range(100):
        res = run_trial(TrialConfig(sim=sim, judge=JudgeSpec("oracle"), seed=seed), corpus)
        assert not any(s.action and s.w == 0 for s in res.steps if not s.padded)
        tp, fp, tn, fn = res.judge_confusion
        assert fp == fn == 0


def test_forced_message_disengages(corpus):
    sim = SimParams(p_w11=0.0, p_w00=1.0, eta_d=1.0)
    agent = FixedAgent(2)
    res = run_trial(TrialConfig(sim=sim, seed=3), corpus, agent=agent)
    # t=0 walks, t=1 cannot walk and the message caps disengagement
    assert res.disengaged and res.disengage_t == 1
    assert res.steps[1].w == 0 and res.steps[1].action == 2 and res.steps[1].reward == 0
    assert all(s.padded and s.reward == 0 for s in res.steps[2:])
    assert len(agent.updates) == 2


def test_blocked_steps_update_null_action(corpus):
    sim = SimParams(p_w11=0.0, p_w00=1.0)
    agent = FixedAgent(3)
    res = run_trial(TrialConfig(sim=sim, judge=JudgeSpec("oracle"), seed=0), corpus, agent=agent)
    assert res.msgs_blocked == sim.horizon - 1
    assert [a for a, _ in agent.updates[1:]] == [0] * (sim.horizon - 1)


def test_description_label_tracks_w(corpus):
    res = run_trial(TrialConfig(sim=SimParams(p_w11=0.7, p_w00=0.5), seed=11), corpus)
    assert all(s.description_label == ("can_walk" if s.w else "cannot_walk")
               for s in res.steps if not s.padded)


def test_trial_determinism(corpus):
    cfg = TrialConfig(judge=JudgeSpec("noisy", {"p_false_block": 0.3}), seed=42)
    a, b = run_trial(cfg, corpus), run_trial(cfg, corpus)
    assert a.to_dict() == b.to_dict()
    assert run_trial(replace(cfg, seed=43), corpus).to_dict() != a.to_dict()


def test_quantiles():
    assert aggregate_quantiles([1, 2, 3, 4, 5]) == (3, 2, 4)
    assert aggregate_quantiles([1, 1, 1]) == (1, 1, 1)
    assert aggregate_quantiles([0, 10]) == (5, 2.5, 7.5)
    with pytest.raises(EmptyInput):
        aggregate_quantiles([])


def test_default_grid_cardinality(corpus):
    res = run_experiment(ExperimentGrid(repeats=5), corpus)
    assert len(res.rows) == 4 * 2 * 2 * 5
    assert sum(r["method"] == "ts" for r in res.rows) == 40
    assert len(res.aggregates) == 16
    assert res.rows_csv().splitlines()[0] == ",".join(RESULT_COLUMNS)
    assert all(a["n_trials"] == 5 and a["n_failed"] == 0 for a in res.aggregates)


def test_seed_derivation_is_order_independent(corpus):
    full = run_experiment(ExperimentGrid(repeats=2), corpus)
    sub = run_experiment(ExperimentGrid(scenarios=scenarios_from_ids([3]), repeats=2), corpus)
    sub_seeds = {(r["scenario"], r["eta_d"], r["method"], r["seed"]) for r in sub.rows}
    full_seeds = {(r["scenario"], r["eta_d"], r["method"], r["seed"]) for r in full.rows}
    assert sub_seeds <= full_seeds
    assert trial_seed(0, 1, 0, "ts", 0) != trial_seed(0, 1, 0, "llm4ts-oracle", 0)
    assert len({r["seed"] for r in full.rows}) == len(full.rows)


def test_grid_validation():
    with pytest.raises(ConfigError):
        scenarios_from_ids([9])
    with pytest.raises(ConfigError):
        ExperimentGrid(repeats=0)
    with pytest.raises(ConfigError):
        method_from_name("ucb")
    with pytest.raises(ConfigError):
        ExperimentGrid(methods=(method_from_name("ts"), method_from_name("ts")))
    with pytest.raises(ConfigError):
        run_experiment(ExperimentGrid(methods=(method_from_name("llm4ts-llm"),), repeats=1))


def test_trajectory_log(corpus):
    grid = ExperimentGrid(scenarios=scenarios_from_ids([1]), eta_d=(0.05,), repeats=1)
    res = run_experiment(grid, corpus, keep_trials=True)
    buf = io.StringIO()
    write_trajectories(res, buf)
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert len(lines) == 2 * SimParams().horizon
    assert {"scenario", "method", "seed", "t", "action", "reward"} <= set(lines[0])


def test_llm_method_through_mock_server(mock_server, endpoint_cfg, corpus):
    mock_server.reply("FINAL ANSWER: NO")
    grid = ExperimentGrid(scenarios=scenarios_from_ids([1]), eta_d=(0.4,), repeats=2,
                          methods=(method_from_name("ts"), method_from_name("llm4ts-llm")),
                          sim=SimParams(horizon=10))
    with ChatClient(endpoint_cfg) as client:
        res = run_experiment(grid, corpus, client=client, jobs=2)
    llm_rows = [r for r in res.rows if r["method"] == "llm4ts-llm"]
    assert all(r["msgs_sent"] == 0 and r["msgs_blocked"] == r["judge_calls"] for r in llm_rows)
    assert mock_server.hits == sum(r["judge_calls"] for r in llm_rows) > 0


def test_llm_failures_are_recorded(mock_server, endpoint_cfg, corpus, caplog):
    mock_server.script = [(400, "nope")]
    grid = ExperimentGrid(scenarios=scenarios_from_ids([2]), eta_d=(0.05,), repeats=3,
                          methods=(method_from_name("ts"), method_from_name("llm4ts-llm")),
                          sim=SimParams(horizon=5))
    with ChatClient(endpoint_cfg) as client, caplog.at_level("WARNING"):
        res = run_experiment(grid, corpus, client=client)
    assert len(res.failures) == 3 and all(f["method"] == "llm4ts-llm" for f in res.failures)
    assert [a["method"] for a in res.aggregates] == ["ts"]
    assert "HttpError" in res.failures_csv()
    assert any("failed" in r.message for r in caplog.records)


def test_non_llm_runs_never_touch_client(mock_server, endpoint_cfg, corpus):
    with ChatClient(endpoint_cfg) as client:
        run_experiment(ExperimentGrid(repeats=1), corpus, client=client)
    assert mock_server.hits == 0


def test_bias_feature_runs(corpus):
    res = run_trial(TrialConfig(ts=TsConfig(include_bias=True), seed=1), corpus)
    check_trial(res, SimParams())
