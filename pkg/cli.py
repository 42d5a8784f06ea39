"""
Command-line entry point for the SALU pipeline.

    python cli.py gen-data --n 2560 --na-ratio 0.5 --seed 7 --out data/episodes.jsonl
    python cli.py train-sft --data data/episodes.train.jsonl --val data/episodes.val.jsonl --out sft.ckpt
    python cli.py eval --model sft.ckpt --data data/episodes.test.jsonl
    python cli.py run-plan --config plan.yaml
    python cli.py check --out runs/default

Logs go to standard error; standard output carries only machine-readable results.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import config
import selftest
from corpus import (
    generate_dataset,
    load_dataset,
    load_preferences,
    save_preferences,
    synthesize_preferences,
    write_dataset_with_splits,
)
from errors import ConfigError, SaluError, UsageError
from experiments import (
    ExperimentPlan,
    acceptance_checks,
    apply_overrides,
    build,
    formatted,
    generate_test_set,
    load_plan,
    load_run_artifacts,
    rebuild_report,
    run_plan,
    run_sweep,
    write_acceptance,
    write_sweep_table,
)
from metrics import evaluate_model
from ppo import train_ppo
from reward_model import LearnedReward, RewardModel, RulesReward, shuffle_preferences, train_reward_model
from sft_trainer import train_sft
from tiny_lm import LanguageModel, load_model, save_checkpoint

logger = logging.getLogger(__name__)

# Sections each subcommand reads; --set on any other section is a usage error.
COMMAND_SECTIONS: Dict[str, tuple] = {
    "gen-data": ("data",),
    "train-sft": ("model", "sft", "eval"),
    "train-reward": ("model", "reward"),
    "train-ppo": ("ppo", "reward_table"),
    "eval": ("eval",),
    "sweep": ("data", "eval", "model", "sft"),
    "run-plan": ("data", "eval", "model", "sft", "reward", "reward_table", "ppo"),
    "report": (),
    "check": (),
    "selftest": (),
}

# Flag -> config key it overrides
FLAG_KEYS = {
    "n": "data.n_episodes",
    "na_ratio": "data.na_ratio",
    "alpha": "sft.alpha",
    "beta": "sft.beta",
    "epsilon": "ppo.clip_epsilon",
    "kl_coef": "ppo.kl_coef",
    "lambda_abstain": "ppo.lambda_abstain",
    "lambda_halluc": "ppo.lambda_halluc",
    "iters": "ppo.iterations",
}

SEEDED_SECTIONS = ("model", "data", "sft", "reward", "ppo")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="salu", description=config.APP_DESCRIPTION)
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="count", default=0, help="More log output")
    verbosity.add_argument("-q", "--quiet", action="count", default=0, help="Less log output")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, *, data=False, model=False, out=False, out_required=False):
        p.add_argument("--config", type=str, help="YAML file with config sections (or a plan for run-plan)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="Override one config key; repeatable")
        p.add_argument("--seed", type=int, help="Seed for every seeded section")
        p.add_argument("--threads", type=int, default=config.THREADS, help="Parallelism cap")
        if data:
            p.add_argument("--data", type=str, required=True, help="Episodes JSONL")
        if model:
            p.add_argument("--model", type=str, required=True, help="Policy checkpoint")
        if out:
            p.add_argument("--out", type=str, required=out_required, help="Output path")

    p = sub.add_parser("gen-data", help="Generate a synthetic corpus with splits")
    common(p, out=True, out_required=True)
    p.add_argument("--n", type=int, help="Number of episodes")
    p.add_argument("--na-ratio", type=float, help="Fraction of unanswerable episodes")

    p = sub.add_parser("train-sft", help="Supervised fine-tuning on L_SFT")
    common(p, data=True, out=True, out_required=True)
    p.add_argument("--val", type=str, help="Validation episodes JSONL")
    p.add_argument("--alpha", type=float, help="Weight on the answerable loss term")
    p.add_argument("--beta", type=float, help="Weight on the abstention loss term")
    p.add_argument("--steps", type=int, help="Maximum SFT steps")

    p = sub.add_parser("train-reward", help="Train the preference reward model")
    common(p, data=True, out=True, out_required=True)
    p.add_argument("--prefs", type=str, help="Preference pairs JSONL; synthesized from --data when absent")
    p.add_argument("--shuffle-labels", action="store_true", help="Label-shuffled control run")
    p.add_argument("--init-model", type=str, help="Policy checkpoint whose backbone initialises the reward model")
    p.add_argument("--steps", type=int, help="Maximum reward-model steps")

    p = sub.add_parser("train-ppo", help="Confidence-shaped PPO from an SFT checkpoint")
    common(p, data=True, model=True, out=True, out_required=True)
    p.add_argument("--reward-model", type=str, help="Reward checkpoint for ppo.reward_source=learned")
    p.add_argument("--epsilon", type=float, help="PPO clip range")
    p.add_argument("--kl-coef", type=float, help="KL penalty coefficient")
    p.add_argument("--lambda-abstain", type=float, help="Abstention confidence bonus")
    p.add_argument("--lambda-halluc", type=float, help="Hallucination confidence penalty")
    p.add_argument("--iters", type=int, help="PPO iterations")

    p = sub.add_parser("eval", help="Evaluate a policy; MetricsReport JSON on stdout")
    common(p, data=True, model=True)

    p = sub.add_parser("sweep", help="Training-composition sweep")
    common(p, out=True)
    p.add_argument("--data", type=str, help="Shared test episodes JSONL; generated when absent")
    p.add_argument("--n", type=int, help="Training corpus size per cell")
    p.add_argument("--steps", type=int, help="Maximum SFT steps per cell")
    p.add_argument("--ratios", type=float, nargs="+", help="Training NA ratios")

    p = sub.add_parser("run-plan", help="Run every experiment arm and write the report")
    common(p, out=True)

    p = sub.add_parser("report", help="Rebuild report tables from saved arm metrics")
    p.add_argument("--out", type=str, required=True, help="Plan output directory")

    p = sub.add_parser("check", help="Check a finished plan run against the acceptance gates")
    p.add_argument("--out", type=str, required=True, help="Plan output directory")

    sub.add_parser("selftest", help="Gradient checks and metric oracles")
    return parser


def collect_overrides(args: argparse.Namespace, seed_sections: bool = True) -> List[str]:
    """Flag values and --set assignments as section.key=value strings, flags first."""
    assignments = []
    allowed = COMMAND_SECTIONS[args.command]
    if seed_sections and getattr(args, "seed", None) is not None:
        assignments += [f"{s}.seed={args.seed}" for s in SEEDED_SECTIONS if s in allowed]
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            assignments.append(f"{key}={value}")
    if getattr(args, "steps", None) is not None:
        section = "reward" if args.command == "train-reward" else "sft"
        assignments.append(f"{section}.max_steps={args.steps}")
    for item in getattr(args, "overrides", []):
        section = item.partition(".")[0]
        if section not in allowed:
            raise UsageError(f"{args.command} does not read config section {section!r} (from --set {item})")
        assignments.append(item)
    return assignments


def load_sections(args: argparse.Namespace) -> Dict[str, Dict]:
    """Config-file sections (when given) with flag and --set overrides applied."""
    sections = {s: {} for s in COMMAND_SECTIONS[args.command]}
    if getattr(args, "config", None):
        plan = load_plan(args.config)
        sections.update({s: v for s, v in plan.sections().items() if s in sections})
    return apply_overrides(sections, collect_overrides(args))


def _sibling(path: str, suffix: str) -> str:
    return os.path.splitext(path)[0] + suffix


def _print_json(payload: Dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args, sections) -> int:
    spec = build("data", sections["data"])
    episodes = generate_dataset(spec)
    paths = write_dataset_with_splits(spec, episodes, args.out)
    _print_json({"episodes": len(episodes), "unanswerable": spec.n_unanswerable, "paths": paths})
    return 0


def cmd_train_sft(args, sections) -> int:
    train = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else []
    sft_cfg = build("sft", sections["sft"])
    model = LanguageModel(build("model", sections["model"]))
    result = train_sft(model, train, val, sft_cfg, args.threads)
    save_checkpoint(model, args.out)
    result.curve.to_csv(_sibling(args.out, ".loss.csv"), index=False, float_format="%.6g")
    if val:
        result.validation.to_csv(_sibling(args.out, ".val.csv"), index=False, float_format="%.6g")
    _print_json({"checkpoint": args.out, "best_step": result.best_step, "steps": len(result.curve)})
    return 0


def cmd_train_reward(args, sections) -> int:
    episodes = load_dataset(args.data)
    reward_cfg = build("reward", sections["reward"])
    if args.prefs:
        pairs = load_preferences(args.prefs, episodes)
    else:
        pairs = synthesize_preferences(episodes, reward_cfg.negatives_per_episode, reward_cfg.seed)
        save_preferences(pairs, _sibling(args.out, ".prefs.jsonl"))
    if args.shuffle_labels:
        pairs = shuffle_preferences(pairs, reward_cfg.seed)
    if args.init_model:
        policy = load_model(args.init_model, expected_kind="policy")
        model = RewardModel(replace(policy.config, seed=build("model", sections["model"]).seed))
        model.copy_backbone(policy)
    else:
        model = RewardModel(build("model", sections["model"]))
    result = train_reward_model(model, pairs, reward_cfg)
    save_checkpoint(model, args.out)
    result.curve.to_csv(_sibling(args.out, ".loss.csv"), index=False, float_format="%.6g")
    _print_json({
        "checkpoint": args.out,
        "holdout_accuracy": result.holdout_accuracy,
        "n_train": result.n_train,
        "n_holdout": result.n_holdout,
    })
    return 0


def cmd_train_ppo(args, sections) -> int:
    episodes = load_dataset(args.data)
    policy = load_model(args.model, expected_kind="policy")
    ppo_cfg = build("ppo", sections["ppo"])
    if ppo_cfg.reward_source == "learned":
        if not args.reward_model:
            raise UsageError("ppo.reward_source=learned needs --reward-model")
        source = LearnedReward(load_model(args.reward_model, expected_kind="reward"))
    else:
        source = RulesReward(build("reward_table", sections["reward_table"]))
    result = train_ppo(policy, episodes, source, ppo_cfg)
    save_checkpoint(policy, args.out)
    result.stats.to_csv(_sibling(args.out, ".stats.csv"), index=False, float_format="%.6g")
    result.rollout_log.to_csv(_sibling(args.out, ".rollouts.csv"), index=False, float_format="%.6g")
    final = result.stats.iloc[-1].to_dict() if len(result.stats) else {}
    _print_json({"checkpoint": args.out, "iterations": len(result.stats),
                 "final_mean_reward": final.get("mean_reward"), "final_mean_kl": final.get("mean_kl")})
    return 0


def cmd_eval(args, sections) -> int:
    episodes = load_dataset(args.data)
    policy = load_model(args.model, expected_kind="policy")
    eval_cfg = build("eval", sections["eval"])
    echo = {"model": args.model, "data": args.data, "max_new_tokens": eval_cfg.max_new_tokens}
    report, _ = evaluate_model(policy, episodes, args.threads, eval_cfg.max_new_tokens, echo)
    sys.stdout.write(report.to_json() + "\n")
    return 0


def cmd_sweep(args, sections) -> int:
    plan = ExperimentPlan(
        master_seed=sections["data"].get("seed", config.RANDOM_STATE),
        out_dir=args.out or config.OUTPUT_DIR,
        sweep_enabled=True,
        sweep_ratios=list(args.ratios) if args.ratios else list(config.SWEEP_RATIOS),
        **sections,
    )
    test = load_dataset(args.data) if args.data else generate_test_set(plan)
    sweep = run_sweep(plan, test, args.threads)
    paths = write_sweep_table(sweep, plan.out_dir)
    _print_json({"rows": len(sweep), "failed": int((sweep["error"] != "").sum()), "paths": paths})
    return 0


def cmd_run_plan(args, sections) -> int:
    # --seed becomes the master seed; arm seeds are derived from it
    plan = load_plan(args.config) if args.config else ExperimentPlan()
    plan = plan.with_overrides(collect_overrides(args, seed_sections=False))
    if args.seed is not None:
        plan = replace(plan, master_seed=args.seed)
    if args.out:
        plan = replace(plan, out_dir=args.out)
    result = run_plan(plan, args.threads)
    _print_json({"out_dir": plan.out_dir, "succeeded": list(result.reports), "errors": result.errors})
    return 0 if result.reports else 1


def cmd_report(args, sections) -> int:
    if not os.path.isdir(args.out):
        raise ConfigError(f"{args.out} is not a directory")
    paths = rebuild_report(args.out)
    _print_json({"paths": paths})
    return 0


def cmd_check(args, sections) -> int:
    if not os.path.isdir(args.out):
        raise ConfigError(f"{args.out} is not a directory")
    table = formatted(acceptance_checks(load_run_artifacts(args.out)))
    paths = write_acceptance(args.out)
    failed = int((table["status"] == "fail").sum())
    _print_json({"paths": paths, "failed": failed, "checks": table.to_dict("records")})
    return 1 if failed else 0


def cmd_selftest(args, sections) -> int:
    failures = selftest.run_all()
    _print_json({"passed": not failures, "failures": failures})
    return 1 if failures else 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-sft": cmd_train_sft,
    "train-reward": cmd_train_reward,
    "train-ppo": cmd_train_ppo,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "run-plan": cmd_run_plan,
    "report": cmd_report,
    "check": cmd_check,
    "selftest": cmd_selftest,
}


def configure_logging(verbose: int = 0, quiet: int = 0) -> None:
    level = getattr(logging, config.LOG_LEVEL.upper(), logging.INFO) - 10 * verbose + 10 * quiet
    logging.basicConfig(
        level=min(max(level, logging.DEBUG), logging.CRITICAL),
        format=config.LOG_FORMAT,
        stream=sys.stderr,
    )


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv and run one subcommand.

    Returns:
        0 on success, 1 on a runtime failure, 2 on a usage error.
        Failures print one `error: <Type>: <message>` line to stderr.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
        configure_logging(args.verbose, args.quiet)
        sections = {} if args.command in ("run-plan", "report", "check", "selftest") else load_sections(args)
        return COMMANDS[args.command](args, sections)
    except UsageError as e:
        sys.stderr.write(f"error: UsageError: {e}\n")
        return 2
    except SystemExit as e:
        # --help exits 0 through argparse
        return e.code if isinstance(e.code, int) else 2
    except (SaluError, OSError) as e:
        sys.stderr.write(f"error: {type(e).__name__}: {e}\n")
        return 1
    except Exception as e:
        logger.debug("Unhandled error", exc_info=True)
        message = str(e).replace("\n", " ")
        sys.stderr.write(f"error: {type(e).__name__}: {message}\n")
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
