#!/usr/bin/env python3
"""
Command-line entry point.

Usage:
    python cli.py run --strategy irma --trials 5 --out results/irma
    python cli.py report --matrix results/irma/reward_matrix.json --k 5
    python cli.py annotate add --log results/irma/trajectories.jsonl --task t1 --trial 0 \
        --category agent_hallucination --event 4 --note "made-up order id"
    python cli.py annotate histogram
    python cli.py validate --suite data/mini_retail_suite.json --scripts data/scripts

Config values come from config.ini; flags override them. Exit status is 0
on success, 1 for usage or config errors and 2 for runtime failures.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from decimal import Decimal, InvalidOperation
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ValidationError, model_validator

import config as config_module
from config import ConfigError
from database import DATABASE_PATH, ERROR_CATEGORIES, AnnotationStore, DanglingReferenceError, ErrorAnnotation, \
    UnknownCategoryError, parse_category
from environment import TaskSuiteError, format_validation_error, load_suite
from llm_integration import GatewayError, LiveProviderFactory, ScriptError, ScriptedProviderFactory
from metrics import (
    EmptySetError, MetricsUsageError, compare_turns, exclusions_from_tasks, load_exclusions, overall_score,
    pass_hat_k_report, progressive_reports, render_markdown, render_report_table, render_turn_comparison,
    render_turn_stats, turn_stats,
)
from runner import (
    ArtifactError, RunConfig, load_reward_matrix, read_trajectories, run_experiment, save_reward_matrix,
    write_trajectories,
)
from strategies import STRATEGY_NAMES

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

TRAJECTORY_LOG = "trajectories.jsonl"
MATRIX_FILE = "reward_matrix.json"
REPORT_FILE = "report.md"


class ExperimentSpec(BaseModel):
    suite: str
    strategy: str
    provider: str
    run: RunConfig
    out: str
    endpoint: Dict[str, Any] = {}

    @model_validator(mode="after")
    def _check(self):
        if not os.path.isfile(self.suite):
            raise ValueError(f"suite file not found: {self.suite}")
        if self.strategy not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy '{self.strategy}'")
        kind, _, target = self.provider.partition(":")
        if kind not in ("scripted", "live") or not target:
            raise ValueError(f"provider must be scripted:<dir> or live:<endpoint>, got '{self.provider}'")
        if kind == "scripted" and not os.path.isdir(target):
            raise ValueError(f"scripts directory not found: {target}")
        return self

    @property
    def provider_kind(self) -> str:
        return self.provider.partition(":")[0]

    @property
    def provider_target(self) -> str:
        return self.provider.partition(":")[2]


def _pick(flag: Any, fallback: Any) -> Any:
    return fallback if flag is None else flag


def build_experiment_spec(args: argparse.Namespace, config) -> ExperimentSpec:
    """Merge config.ini with command-line flags; flags win."""
    get_int, get_bool = config_module.get_int, config_module.get_bool

    kind = config.get("Provider", "kind")
    default_provider = (f"scripted:{config.get('Provider', 'scripts')}" if kind == "scripted"
                        else f"live:{config.get('Provider', 'endpoint')}")
    provider = _pick(args.provider, default_provider)

    endpoint: Dict[str, Any] = {}
    if provider.startswith("live:"):
        endpoint = config_module.endpoint_settings(config, provider.partition(":")[2])
    settings = config_module.strategy_settings(config, endpoint)
    if args.irma_prompt:
        settings = replace(settings, irma_prompt=args.irma_prompt)
    if args.fact_backbone:
        settings = replace(settings, fact_backbone=args.fact_backbone)

    strategy = _pick(args.strategy, config_module.check_strategy(config))
    faults = config_module.fault_profiles(config)

    run = dict(
        max_turns=_pick(args.max_turns, get_int(config, "Run", "max_turns")),
        max_actions_per_turn=get_int(config, "Run", "max_actions_per_turn"),
        n_trials=_pick(args.trials, get_int(config, "Run", "trials")),
        parallelism=_pick(args.parallelism, get_int(config, "Run", "parallelism")),
        seed=_pick(args.seed, get_int(config, "Run", "seed")),
        strategy=strategy,
        memory=get_bool(config, "IRMA", "memory") and not args.no_memory,
        constraints=get_bool(config, "IRMA", "constraints") and not args.no_constraints,
        tools=get_bool(config, "IRMA", "tools") and not args.no_tools,
        faults=faults,
        include_aborted=args.include_aborted or get_bool(config, "Run", "include_aborted"),
        rerun_budget=get_int(config, "Run", "rerun_budget"),
        greeting=config.get("UserSim", "greeting"),
        stop_token=config.get("UserSim", "stop_token"),
        user_model=endpoint.get("user_model", ""),
        settings=settings,
        show_progress=get_bool(config, "Run", "progress") and not args.no_progress,
    )
    try:
        run_config = RunConfig(**run)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e, "run.")) from e
    return ExperimentSpec(
        suite=_pick(args.suite, config.get("Run", "suite")),
        strategy=strategy,
        provider=provider,
        run=run_config,
        out=_pick(args.out, config.get("Run", "out")),
        endpoint=endpoint,
    )


def make_provider_factory(spec: ExperimentSpec):
    if spec.provider_kind == "scripted":
        return ScriptedProviderFactory(spec.provider_target, spec.strategy)
    endpoint = spec.endpoint
    return LiveProviderFactory(endpoint["base_url"], endpoint["api_key_env"], endpoint["model"],
                               user_model=endpoint["user_model"], timeout=endpoint["timeout"],
                               max_attempts=endpoint["max_attempts"])


# Commands

def cmd_run(spec: ExperimentSpec) -> int:
    try:
        suite = load_suite(spec.suite)
        factory = make_provider_factory(spec)
    except (TaskSuiteError, ScriptError, ValueError) as e:
        print(f"Error: {e}")
        return EXIT_USAGE

    os.makedirs(spec.out, exist_ok=True)
    log_path = os.path.join(spec.out, TRAJECTORY_LOG)
    # A run starts a fresh log.
    open(log_path, "w", encoding="utf-8").close()

    try:
        matrix, trajectories = run_experiment(suite, spec.strategy, factory, spec.run)
    except GatewayError as e:
        logger.error("Run failed: %s", e)
        return EXIT_RUNTIME
    except Exception:
        logger.exception("Run failed")
        return EXIT_RUNTIME

    write_trajectories(log_path, trajectories)
    save_reward_matrix(os.path.join(spec.out, MATRIX_FILE), matrix)

    report = pass_hat_k_report(matrix, spec.run.n_trials, label=spec.strategy)
    try:
        turns = turn_stats(trajectories, success_only=True)
    except EmptySetError:
        turns = None
    with open(os.path.join(spec.out, REPORT_FILE), "w", encoding="utf-8") as f:
        f.write(render_markdown([report], turns, title=f"{spec.strategy} on {os.path.basename(spec.suite)}"))

    aborted = sum(1 for t in trajectories if t.aborted)
    print(render_report_table([report], title=f"{spec.strategy.upper()} ({len(trajectories)} trials)"))
    if turns is not None:
        print(render_turn_stats(turns, "successful trials"))
    if aborted:
        print(f"{aborted} trial(s) aborted by provider failures; see {log_path}")
    print(f"\nResults saved to:\n  - {log_path}\n  - {os.path.join(spec.out, MATRIX_FILE)}\n"
          f"  - {os.path.join(spec.out, REPORT_FILE)}")
    return EXIT_OK


def _turn_document(stats) -> Dict[str, Any]:
    return {"count": stats.count, "mean": stats.mean, "median": stats.median,
            "histogram": {str(k): v for k, v in stats.histogram.items()}}


def _log_label(path: str, trajectories) -> str:
    strategies = sorted({t.strategy for t in trajectories})
    return "+".join(strategies) if strategies else path


def cmd_report(matrix_path: Optional[str] = None, K: Optional[int] = None, exclusions_path: Optional[str] = None,
               suite_path: Optional[str] = None, exclude_flags: Optional[List[str]] = None,
               trajectories_path: Optional[str] = None, json_path: Optional[str] = None,
               domain_scores: Optional[List[Decimal]] = None, compare_paths: Optional[List[str]] = None) -> int:
    document: Dict[str, Any] = {}

    if matrix_path:
        try:
            matrix = load_reward_matrix(matrix_path)
            K = K or matrix.n or 0
            if suite_path and exclude_flags:
                tasks = load_suite(suite_path).tasks
                if "gt_error" in exclude_flags and "ui_error" in exclude_flags:
                    reports = progressive_reports(matrix, K, exclusions_from_tasks(tasks, ["gt_error"]),
                                                  exclusions_from_tasks(tasks, ["ui_error"]))
                else:
                    reports = [pass_hat_k_report(matrix, K, label="all tasks"),
                               pass_hat_k_report(matrix, K, exclusions_from_tasks(tasks, exclude_flags),
                                                 label=f"without {'+'.join(exclude_flags)}")]
            elif exclusions_path:
                reports = [pass_hat_k_report(matrix, K, label="all tasks"),
                           pass_hat_k_report(matrix, K, load_exclusions(exclusions_path), label="filtered")]
            else:
                reports = [pass_hat_k_report(matrix, K, label="all tasks")]
        except (ArtifactError, TaskSuiteError, MetricsUsageError, OSError) as e:
            print(f"Error: {e}")
            return EXIT_USAGE

        print(render_report_table(reports, title=f"PASS^K REPORT ({matrix.strategy or matrix_path})"))
        document["matrix"] = matrix_path
        document["reports"] = [r.to_dict() for r in reports]

    if trajectories_path:
        try:
            stats = turn_stats(read_trajectories(trajectories_path), success_only=True)
        except (ArtifactError, EmptySetError) as e:
            print(f"Error: {e}")
            return EXIT_USAGE
        print(render_turn_stats(stats, "successful trials"))
        document["turns"] = _turn_document(stats)

    if compare_paths:
        try:
            logs = [(path, read_trajectories(path)) for path in compare_paths]
            labelled = [(_log_label(path, trajectories), turn_stats(trajectories, success_only=True))
                        for path, trajectories in logs]
        except (ArtifactError, EmptySetError) as e:
            print(f"Error: {e}")
            return EXIT_USAGE
        print("\nTurns in successful trials:")
        for label, stats in labelled:
            print(f"  {render_turn_stats(stats, label)}")
        comparison = compare_turns(labelled[0][1], labelled[1][1], labelled[0][0], labelled[1][0])
        print(f"  {render_turn_comparison(comparison)}")
        document["turn_comparison"] = {
            "logs": [{"path": path, "label": label, **_turn_document(stats)}
                     for path, (label, stats) in zip(compare_paths, labelled)],
            "mean_difference": comparison.mean_difference,
            "median_difference": comparison.median_difference,
            "relative_percent": comparison.relative_percent,
        }

    if domain_scores:
        overall = overall_score(domain_scores)
        print(f"\nOverall score (unweighted mean of {len(domain_scores)} domains): {overall.normalize():f}")
        document["overall"] = {"domain_scores": [str(score) for score in domain_scores],
                               "overall": f"{overall.normalize():f}"}

    if json_path:
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2)
            f.write("\n")
    return EXIT_OK


def cmd_annotate(log_path: str, task_id: str, trial_index: int, category: str, event_index: int,
                 note: str = "", store_path: str = DATABASE_PATH) -> int:
    try:
        parse_category(category)
        trajectories = read_trajectories(log_path)
        annotation = ErrorAnnotation(task_id=task_id, trial_index=trial_index, category=category,
                                     event_index=event_index, note=note)
        annotation_id = AnnotationStore(store_path, trajectories).add(annotation)
    except (UnknownCategoryError, ArtifactError, DanglingReferenceError) as e:
        print(f"Error: {e}")
        return EXIT_USAGE
    except ValidationError as e:
        print(f"Error: {format_validation_error(e)}")
        return EXIT_USAGE
    print(f"Added annotation {annotation_id}: {task_id} trial {trial_index} event {event_index} -> {category}")
    return EXIT_OK


def cmd_histogram(store_path: str = DATABASE_PATH) -> int:
    counts = AnnotationStore(store_path).histogram()
    width = max(len(c) for c in ERROR_CATEGORIES) + 2
    print(f"{'Category':<{width}}{'Count':>8}")
    print("-" * (width + 8))
    for category, count in counts.items():
        print(f"{category:<{width}}{count:>8}")
    return EXIT_OK


def cmd_list(store_path: str = DATABASE_PATH, category: Optional[str] = None, task_id: Optional[str] = None) -> int:
    try:
        rows = AnnotationStore(store_path).query(category=category, task_id=task_id)
    except UnknownCategoryError as e:
        print(f"Error: {e}")
        return EXIT_USAGE
    for row in rows:
        print(f"{row['id']:>4}  {row['task_id']} trial {row['trial_index']} event {row['event_index']}  "
              f"{row['category']}  {row['note'] or ''}")
    return EXIT_OK


def cmd_validate(suite_path: str, scripts_dir: Optional[str] = None, n_trials: int = 5,
                 strategies: Optional[List[str]] = None) -> int:
    try:
        suite = load_suite(suite_path)
        print(f"Suite OK: {len(suite.tasks)} task(s), {len(suite.tools)} tool(s), domain {suite.domain}")
        if scripts_dir:
            for name in strategies or STRATEGY_NAMES:
                if not os.path.exists(os.path.join(scripts_dir, f"{name}.json")):
                    print(f"Scripts: no bundle for {name}, skipped")
                    continue
                ScriptedProviderFactory(scripts_dir, name).validate([t.id for t in suite.tasks], n_trials)
                print(f"Scripts OK: {name}")
    except (TaskSuiteError, ScriptError) as e:
        print(f"Error: {e}")
        return EXIT_USAGE
    return EXIT_OK


# Argument parsing

def _score(text: str) -> Decimal:
    try:
        value = Decimal(text)
    except InvalidOperation:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not value.is_finite():
        raise argparse.ArgumentTypeError(f"not a finite number: {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Multi-turn tool-calling benchmark harness")
    parser.add_argument("--config", default=config_module.CONFIG_PATH, help="Config file (created if missing)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", "-q", action="store_true", help="Warnings and errors only")
    sub = parser.add_subparsers(dest="command")

    run = sub.add_parser("run", help="Run an experiment")
    run.add_argument("--suite", help="Task suite JSON file")
    run.add_argument("--strategy", choices=STRATEGY_NAMES)
    run.add_argument("--provider", help="scripted:<dir> or live:<endpoint>")
    run.add_argument("--trials", type=int)
    run.add_argument("--max-turns", type=int)
    run.add_argument("--parallelism", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="Output directory")
    run.add_argument("--no-memory", action="store_true", help="IRMA: disable the memory block")
    run.add_argument("--no-constraints", action="store_true", help="IRMA: disable the constraints block")
    run.add_argument("--no-tools", action="store_true", help="IRMA: disable tool suggestions")
    run.add_argument("--irma-prompt", choices=("fact", "react"))
    run.add_argument("--fact-backbone", choices=("react", "function_calling"))
    run.add_argument("--include-aborted", action="store_true",
                     help="Count aborted trials as failures instead of re-running them")
    run.add_argument("--no-progress", action="store_true")

    report = sub.add_parser("report", help="pass^k report for a reward matrix")
    report.add_argument("--matrix", help="Reward matrix JSON file")
    report.add_argument("--k", type=int, help="Largest k (defaults to n)")
    report.add_argument("--exclude", help="Exclusion list, one task id per line")
    report.add_argument("--suite", help="Suite whose task annotations drive --exclude-flags")
    report.add_argument("--exclude-flags", help="Comma-separated: gt_error,ui_error")
    report.add_argument("--trajectories", help="Trajectory log for turn statistics")
    report.add_argument("--compare", nargs=2, metavar=("LOG_A", "LOG_B"),
                        help="Compare turns in successful trials between two trajectory logs")
    report.add_argument("--domain-scores", nargs="+", type=_score, metavar="SCORE",
                        help="Per-domain scores; prints their unweighted mean as the overall score")
    report.add_argument("--json", help="Also write the report as JSON")

    annotate = sub.add_parser("annotate", help="Manage error annotations")
    annotate_sub = annotate.add_subparsers(dest="action")
    add = annotate_sub.add_parser("add")
    add.add_argument("--log", required=True)
    add.add_argument("--task", required=True)
    add.add_argument("--trial", type=int, required=True)
    add.add_argument("--category", required=True, help=", ".join(ERROR_CATEGORIES))
    add.add_argument("--event", type=int, required=True)
    add.add_argument("--note", default="")
    add.add_argument("--store", default=DATABASE_PATH)
    histogram = annotate_sub.add_parser("histogram")
    histogram.add_argument("--store", default=DATABASE_PATH)
    listing = annotate_sub.add_parser("list")
    listing.add_argument("--store", default=DATABASE_PATH)
    listing.add_argument("--category")
    listing.add_argument("--task")

    validate = sub.add_parser("validate", help="Check a suite and scripted provider bundles")
    validate.add_argument("--suite")
    validate.add_argument("--scripts")
    validate.add_argument("--trials", type=int)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.command is None:
        parser.print_help()
        return EXIT_USAGE

    try:
        if args.command == "run":
            config = config_module.load_config(args.config)
            return cmd_run(build_experiment_spec(args, config))
        if args.command == "report":
            if not (args.matrix or args.compare or args.domain_scores):
                print("report needs --matrix, --compare or --domain-scores")
                return EXIT_USAGE
            flags = [f.strip() for f in args.exclude_flags.split(",") if f.strip()] if args.exclude_flags else None
            return cmd_report(args.matrix, args.k, args.exclude, args.suite, flags, args.trajectories, args.json,
                              args.domain_scores, args.compare)
        if args.command == "annotate":
            if args.action == "add":
                return cmd_annotate(args.log, args.task, args.trial, args.category, args.event, args.note, args.store)
            if args.action == "histogram":
                return cmd_histogram(args.store)
            if args.action == "list":
                return cmd_list(args.store, args.category, args.task)
            print("annotate needs one of: add, histogram, list")
            return EXIT_USAGE
        if args.command == "validate":
            config = config_module.load_config(args.config)
            suite = args.suite or config.get("Run", "suite")
            trials = args.trials or config_module.get_int(config, "Run", "trials", minimum=1)
            return cmd_validate(suite, args.scripts, trials)
    except ConfigError as e:
        print(f"Config error: {e}")
        return EXIT_USAGE
    except ValidationError as e:
        print(f"Config error: {format_validation_error(e)}")
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
