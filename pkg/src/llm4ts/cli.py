"""``llm4ts`` command line: simulate, experiment, validate-judge, gen-corpus, report.

Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 configuration error.
Flags override the config file; ``LLM4TS_*`` environment variables override
both for the endpoint.  Every command writes a manifest next to its output.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .client import ChatClient, EndpointConfig
from .config import RunConfig
from .corpus import Corpus, generate_corpus, load_bundled_corpus, load_corpus
from .errors import ConfigError, EndpointError, GenerationStalled, Llm4tsError, ParseError, \
    TemplateError, ValidationError
from .evaluation import blinded_review_sheet, label_consistency, validate_judge
from .harness import (DEFAULT_ETA_D, SCENARIOS, ExperimentGrid, TrialConfig, method_from_name,
                      run_experiment, run_trial, scenarios_from_ids, write_trajectories)
from .judge import JUDGE_KINDS, JudgeSpec, build_judge
from .prompt import PRESETS
from .report import bar_chart_svg, read_results, summarize, summary_csv
from .sim import SimParams

log = logging.getLogger("llm4ts")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3
METHODS = ("ts", "llm4ts-oracle", "llm4ts-noisy", "llm4ts-llm")
CONFIG_ERRORS = (ConfigError, ParseError, ValidationError, TemplateError)


# --- argument types ----------------------------------------------------------

def _scenario_list(text: str) -> list[int]:
    try:
        ids = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"scenario ids must be integers; valid ids are {sorted(SCENARIOS)}")
    bad = [i for i in ids if i not in SCENARIOS]
    if bad or not ids:
        raise argparse.ArgumentTypeError(f"unknown scenario id(s) {bad}; valid ids are {sorted(SCENARIOS)}")
    return ids


def _float_list(text: str) -> list[float]:
    try:
        values = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    return values


def _method_list(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in METHODS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
    return names


def _positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _probability(text: str) -> float:
    p = float(text)
    if not 0.0 <= p <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {p}")
    return p


# --- shared helpers ------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_corpus(path: str | None) -> tuple[Corpus, str | None]:
    if path is None:
        return load_bundled_corpus(), None
    if not Path(path).is_file():
        raise ConfigError(f"corpus file not found: {path}")
    return load_corpus(Path(path)), str(path)


def _endpoint(cfg: RunConfig) -> EndpointConfig:
    return EndpointConfig.from_dict(cfg.endpoint_raw)


def _write_manifest(path: Path, command: str, argv: Sequence[str], config: dict[str, Any],
                    started: str, seeds: Any = None, corpus: Corpus | None = None,
                    endpoint: EndpointConfig | None = None, outputs: dict[str, str] | None = None) -> None:
    manifest = {
        "tool": "llm4ts",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "started_at": started,
        "finished_at": _now(),
        "corpus_sha256": corpus.checksum() if corpus is not None else None,
        "endpoint_model": endpoint.model if endpoint is not None else None,
        "outputs": outputs or {},
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _sim_from(cfg: RunConfig, scenario: int | None = None, eta_d: float | None = None) -> SimParams:
    sim = SimParams.from_dict(cfg.sim_dict)
    if scenario is not None:
        p11, p00 = SCENARIOS[scenario]
        sim = replace(sim, p_w11=p11, p_w00=p00)
    if eta_d is not None:
        sim = replace(sim, eta_d=eta_d)
    return sim


def _prompt_snapshot(cfg: RunConfig, preset: str | None):
    raw = cfg.raw.get("prompt")
    if preset is None:
        return raw
    return {**(raw if isinstance(raw, dict) else {}), "preset": preset}


def _p_emit(cfg: RunConfig) -> float:
    return float(cfg.raw.get("p_emit", TrialConfig.p_emit))


# --- commands ------------------------------------------------------------------

def cmd_simulate(args, argv) -> int:
    started = _now()
    cfg = RunConfig.load(args.config)
    run = cfg.section("run")
    seed = args.seed if args.seed is not None else int(run.get("seed", 0))
    spec = cfg.judge(args.judge) if args.judge else cfg.judge()
    prompt_name = args.prompt
    components, template = cfg.prompt(prompt_name)
    if prompt_name and spec.kind != "llm":
        log.warning("--prompt %s has no effect with the %s judge", prompt_name, spec.kind)
    scenario = args.scenario if args.scenario is not None else run.get("scenario")
    eta = args.eta_d if args.eta_d is not None else run.get("eta_d")
    sim = _sim_from(cfg, scenario, eta)
    corpus, corpus_path = _load_corpus(args.corpus or cfg.raw.get("corpus"))
    client = endpoint = None
    if spec.kind == "llm":
        endpoint = _endpoint(cfg)
        client = ChatClient(endpoint)
    trial_cfg = TrialConfig(sim=sim, ts=cfg.ts, judge=spec, prompt=components, seed=seed,
                            method_label=f"simulate-{spec.kind}", p_emit=_p_emit(cfg))
    try:
        result = run_trial(trial_cfg, corpus, client=client, template=template)
    finally:
        if client is not None:
            client.close()
    resolved = {"sim": sim.to_dict(), "ts": cfg.ts.to_dict(), "judge": spec.to_dict(),
                "prompt": _prompt_snapshot(cfg, prompt_name),
                "run": {"seed": seed}, "p_emit": trial_cfg.p_emit}
    if corpus_path:
        resolved["corpus"] = corpus_path
    if endpoint is not None:
        resolved["endpoint"] = endpoint.public_dict()
    resolved = {k: v for k, v in resolved.items() if v is not None}
    out = Path(args.out)
    _write(out, json.dumps({"config": resolved, **result.to_dict()}, indent=1) + "\n")
    _write_manifest(Path(str(out) + ".manifest.json"), "simulate", argv, resolved, started,
                    seeds={"seed": seed}, corpus=corpus, endpoint=endpoint,
                    outputs={"trial": _sha256_file(out)})
    s = result.summary()
    print(f"total_reward={s['total_reward']:.1f} excess_steps={s['excess_steps']:.1f} "
          f"msgs_sent={s['msgs_sent']} msgs_blocked={s['msgs_blocked']} "
          f"disengaged={s['disengaged']} -> {out}")
    return EXIT_OK


def cmd_experiment(args, argv) -> int:
    started = _now()
    cfg = RunConfig.load(args.config)
    exp = cfg.section("experiment")
    scenario_ids = args.scenarios or exp.get("scenarios") or sorted(SCENARIOS)
    eta_d = args.eta_d or exp.get("eta_d") or list(DEFAULT_ETA_D)
    methods = args.methods or exp.get("methods") or ["ts", "llm4ts-oracle"]
    repeats = args.repeats if args.repeats is not None else int(exp.get("repeats", 5))
    base_seed = args.base_seed if args.base_seed is not None else int(exp.get("base_seed", 0))
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
    components, template = cfg.prompt(args.prompt)
    if template is not None:
        log.warning("custom prompt templates are not used by experiment; the default template applies")
    specs = []
    for name in methods:
        kind = {"llm4ts-noisy": "noisy", "llm4ts-llm": "llm"}.get(name)
        params = cfg.judge(kind).params if kind else None
        specs.append(method_from_name(name, params, components))
    grid = ExperimentGrid(scenarios=scenarios_from_ids(scenario_ids), eta_d=tuple(float(e) for e in eta_d),
                          methods=tuple(specs), repeats=repeats, base_seed=base_seed,
                          sim=SimParams.from_dict(cfg.sim_dict), ts=cfg.ts, p_emit=_p_emit(cfg))
    corpus, corpus_path = _load_corpus(args.corpus or cfg.raw.get("corpus"))
    client = endpoint = None
    if "llm4ts-llm" in methods:
        endpoint = _endpoint(cfg)
        client = ChatClient(endpoint)
    jobs = args.jobs or os.cpu_count() or 1
    try:
        results = run_experiment(grid, corpus, jobs=jobs, client=client,
                                 keep_trials=bool(args.trajectories))
    finally:
        if client is not None:
            client.close()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for name, text in (("results.csv", results.rows_csv()), ("aggregate.csv", results.aggregates_csv())):
        _write(out / name, text)
        outputs[name] = _sha256_file(out / name)
    if results.failures:
        _write(out / "failures.csv", results.failures_csv())
        outputs["failures.csv"] = _sha256_file(out / "failures.csv")
    if args.trajectories:
        with open(out / "trajectories.jsonl", "w", encoding="utf-8") as fh:
            write_trajectories(results, fh)
    resolved = {k: v for k, v in cfg.raw.items() if k in ("sim", "ts", "judge", "prompt", "p_emit")}
    resolved["experiment"] = {"scenarios": list(scenario_ids), "eta_d": list(grid.eta_d),
                              "methods": list(methods), "repeats": repeats, "base_seed": base_seed}
    if args.prompt:
        resolved["prompt"] = _prompt_snapshot(cfg, args.prompt)
    if corpus_path:
        resolved["corpus"] = corpus_path
    if endpoint is not None:
        resolved["endpoint"] = endpoint.public_dict()
    _write_manifest(out / "manifest.json", "experiment", argv, resolved, started,
                    seeds={"base_seed": base_seed, "trial_seeds": [r["seed"] for r in results.rows]},
                    corpus=corpus, endpoint=endpoint, outputs=outputs)
    print(f"{len(results.rows)} trials, {len(results.aggregates)} cells -> {out}")
    if results.failures:
        log.warning("%d trial(s) failed; see %s", len(results.failures), out / "failures.csv")
        if args.strict:
            return EXIT_RUNTIME
    return EXIT_OK


def cmd_validate_judge(args, argv) -> int:
    started = _now()
    cfg = RunConfig.load(args.config)
    kind = args.judge or cfg.judge().kind
    spec = cfg.judge(kind)
    if kind == "noisy":
        params = dict(spec.params)
        if args.p_false_block is not None:
            params["p_false_block"] = args.p_false_block
        if args.p_false_allow is not None:
            params["p_false_allow"] = args.p_false_allow
        spec = JudgeSpec("noisy", params)
    elif args.p_false_block is not None or args.p_false_allow is not None:
        log.warning("--p-false-block/--p-false-allow only apply to the noisy judge")
    components, template = cfg.prompt(args.prompt or "BFQ")
    corpus, corpus_path = _load_corpus(args.corpus or cfg.raw.get("corpus"))
    ss_sample, ss_judge, ss_sheet = np.random.SeedSequence(args.seed).spawn(3)
    client = endpoint = None
    if kind == "llm":
        endpoint = _endpoint(cfg)
        client = ChatClient(endpoint)
    try:
        judge = build_judge(spec, np.random.default_rng(ss_judge), client, components, template)
        metrics = validate_judge(judge, corpus, args.n, np.random.default_rng(ss_sample),
                                 components=components, jobs=args.jobs or 1)
        if args.label_consistency:
            metrics.label_consistency = label_consistency(judge, corpus)
    finally:
        if client is not None:
            client.close()
    out = Path(args.out)
    doc = {"judge": spec.to_dict(), "prompt": components.label if kind == "llm" else None,
           "n_per_label": args.n, "seed": args.seed, **metrics.to_dict()}
    _write(out, json.dumps(doc, indent=2) + "\n")
    outputs = {"metrics": _sha256_file(out)}
    if args.review_sheet:
        sheet, key = blinded_review_sheet(corpus, min(args.n, 50), np.random.default_rng(ss_sheet))
        sheet_dir = Path(args.review_sheet)
        _write(sheet_dir / "review_sheet.csv", sheet)
        _write(sheet_dir / "review_key.csv", key)
    resolved = {"judge": spec.to_dict(), "prompt": {"preset": components.label},
                "run": {"seed": args.seed, "n": args.n}}
    if corpus_path:
        resolved["corpus"] = corpus_path
    if endpoint is not None:
        resolved["endpoint"] = endpoint.public_dict()
    _write_manifest(Path(str(out) + ".manifest.json"), "validate-judge", argv, resolved, started,
                    seeds={"seed": args.seed}, corpus=corpus, endpoint=endpoint, outputs=outputs)
    sys.stdout.write(metrics.report())
    if metrics.partial:
        log.warning("endpoint failures: metrics cover only completed samples")
    return EXIT_OK


def cmd_gen_corpus(args, argv) -> int:
    started = _now()
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} already exists; pass --force to overwrite")
    cfg = RunConfig.load(args.config)
    endpoint = _endpoint(cfg)
    partial_path = Path(str(out) + ".partial.json")
    with ChatClient(endpoint) as client:
        try:
            corpus = generate_corpus(client, args.n, temperature=args.temperature)
        except (EndpointError, GenerationStalled) as exc:
            partial = getattr(exc, "partial", {}) or {}
            _write(partial_path, json.dumps({**partial, "error": str(exc)}, indent=2) + "\n")
            log.error("generation stopped: %s (partial progress saved to %s)", exc, partial_path)
            return EXIT_RUNTIME
    _write(out, corpus.to_json())
    if partial_path.exists():
        partial_path.unlink()
    _write_manifest(Path(str(out) + ".manifest.json"), "gen-corpus", argv,
                    {"endpoint": endpoint.public_dict(), "run": {"n": args.n}}, started,
                    corpus=corpus, endpoint=endpoint, outputs={"corpus": _sha256_file(out)})
    print(f"wrote {corpus.counts[0]} can_walk + {corpus.counts[1]} cannot_walk -> {out}")
    return EXIT_OK


def cmd_report(args, argv) -> int:
    started = _now()
    src = Path(args.input)
    if not src.is_file():
        raise ConfigError(f"results file not found: {src}")
    summary = summarize(read_results(src))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "summary.csv", summary_csv(summary))
    outputs = {"summary.csv": _sha256_file(out / "summary.csv")}
    if args.svg:
        _write(out / "excess_steps.svg", bar_chart_svg(summary))
        outputs["excess_steps.svg"] = _sha256_file(out / "excess_steps.svg")
    _write_manifest(out / "manifest.json", "report", argv, {"run": {"input": str(src)}}, started,
                    outputs={**outputs, "input": _sha256_file(src)})
    print(f"{len(summary)} method-cells -> {out}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="llm4ts", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"llm4ts {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one trial and write its step log")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--judge", choices=JUDGE_KINDS)
    s.add_argument("--prompt", choices=PRESETS)
    s.add_argument("--scenario", type=int, choices=sorted(SCENARIOS))
    s.add_argument("--eta-d", type=float)
    s.add_argument("--corpus")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("experiment", help="run the scenario x eta_d x method grid")
    e.add_argument("--config")
    e.add_argument("--scenarios", type=_scenario_list, help="comma-separated ids (default 1,2,3,4)")
    e.add_argument("--eta-d", type=_float_list, help="comma-separated values (default 0.05,0.4)")
    e.add_argument("--methods", type=_method_list, help=f"comma-separated, from {','.join(METHODS)}")
    e.add_argument("--repeats", type=_positive_int)
    e.add_argument("--base-seed", type=int)
    e.add_argument("--prompt", choices=PRESETS)
    e.add_argument("--corpus")
    e.add_argument("--jobs", type=_positive_int, help="worker count (default: logical cores)")
    e.add_argument("--strict", action="store_true", help="exit 1 if any trial failed")
    e.add_argument("--trajectories", action="store_true", help="also write per-step JSONL")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_experiment)

    v = sub.add_parser("validate-judge", help="score a judge on labeled descriptions")
    v.add_argument("--config")
    v.add_argument("--judge", choices=JUDGE_KINDS)
    v.add_argument("--corpus")
    v.add_argument("--n", type=_positive_int, default=500, help="samples per label")
    v.add_argument("--prompt", choices=PRESETS, help="default BFQ")
    v.add_argument("--p-false-block", type=_probability)
    v.add_argument("--p-false-allow", type=_probability)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--jobs", type=_positive_int, default=1)
    v.add_argument("--label-consistency", action="store_true")
    v.add_argument("--review-sheet", metavar="DIR")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_validate_judge)

    g = sub.add_parser("gen-corpus", help="generate a description corpus from an endpoint")
    g.add_argument("--config")
    g.add_argument("--n", type=_positive_int, default=500, help="descriptions per label")
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--force", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    r = sub.add_parser("report", help="summarize a results CSV")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--svg", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="llm4ts: %(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args, argv)
    except CONFIG_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (Llm4tsError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return 130
