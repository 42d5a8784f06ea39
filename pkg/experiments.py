"""
Experiment plans: train the ablation arms on a shared corpus, evaluate them
on one held-out set, run the training-composition sweep, write the
comparison tables and check a finished run against its acceptance gates.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from joblib import Parallel, delayed

import config
from corpus import DatasetSpec, Episode, generate_dataset, holdout_split, synthesize_preferences
from errors import ConfigError
from metrics import EvalConfig, MetricsReport, Outcome, composition_sweep, evaluate_model
from ppo import PpoConfig, train_ppo
from reward_model import (
    BaseRewardTable,
    LearnedReward,
    RewardConfig,
    RewardModel,
    RulesReward,
    shuffle_preferences,
    train_reward_model,
)
from sft_trainer import SftConfig, train_sft
from tiny_lm import LanguageModel, ModelConfig, save_checkpoint

logger = logging.getLogger(__name__)

SECTION_TYPES = {
    "model": ModelConfig,
    "data": DatasetSpec,
    "sft": SftConfig,
    "reward": RewardConfig,
    "reward_table": BaseRewardTable,
    "ppo": PpoConfig,
    "eval": EvalConfig,
}


# ---------------------------------------------------------------------------
# Configuration overrides
# ---------------------------------------------------------------------------

def _coerce(raw, target_type, key: str):
    if target_type is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if target_type is int and isinstance(raw, str):
            return int(float(raw)) if float(raw).is_integer() else int(raw)
        return target_type(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot convert {raw!r} to {target_type.__name__}") from None


def validate_section(section: str, values: Dict) -> Dict:
    """Check keys against the section's dataclass and coerce values to field types."""
    if section not in SECTION_TYPES:
        raise ConfigError(f"unknown config section {section!r}")
    types = {f.name: type(f.default) for f in fields(SECTION_TYPES[section])}
    clean = {}
    for key, raw in (values or {}).items():
        if key not in types:
            raise ConfigError(f"unknown config key {section}.{key}")
        clean[key] = _coerce(raw, types[key], f"{section}.{key}")
    SECTION_TYPES[section](**clean)
    return clean


def apply_overrides(sections: Dict[str, Dict], assignments: Sequence[str]) -> Dict[str, Dict]:
    """
    Apply `section.key=value` assignments on top of section dicts.

    Args:
        sections: Existing section -> {key: value} mapping
        assignments: Strings like 'ppo.kl_coef=0.1'

    Returns:
        New mapping with every touched section re-validated
    """
    merged = {name: dict(values) for name, values in sections.items()}
    for item in assignments:
        target, sep, value = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        merged.setdefault(section, {})[key] = value.strip()
    for section in merged:
        merged[section] = validate_section(section, merged[section])
    return merged


def build(section: str, values: Optional[Dict] = None, **extra):
    """Instantiate a section's dataclass from validated values plus keyword extras."""
    merged = {**validate_section(section, values or {}), **extra}
    return SECTION_TYPES[section](**merged)


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

@dataclass
class ArmSpec:
    name: str
    label: str = ""
    sft_overrides: Dict = field(default_factory=dict)
    ppo_overrides: Dict = field(default_factory=dict)
    ppo: bool = False
    sft_seed_arm: Optional[str] = None

    def __post_init__(self):
        self.label = self.label or self.name
        self.sft_overrides = validate_section("sft", self.sft_overrides)
        self.ppo_overrides = validate_section("ppo", self.ppo_overrides)


@dataclass
class ExperimentPlan:
    """Arms, shared data and hyperparameter sections for one experiment run."""

    master_seed: int = config.RANDOM_STATE
    out_dir: str = config.OUTPUT_DIR
    arms: List[ArmSpec] = field(default_factory=lambda: [ArmSpec(**a) for a in config.DEFAULT_ARMS])
    data: Dict = field(default_factory=dict)
    eval: Dict = field(default_factory=dict)
    model: Dict = field(default_factory=dict)
    sft: Dict = field(default_factory=dict)
    reward: Dict = field(default_factory=dict)
    reward_table: Dict = field(default_factory=dict)
    ppo: Dict = field(default_factory=dict)
    train_episodes: int = config.PLAN_TRAIN_EPISODES
    val_episodes: int = config.PLAN_VAL_EPISODES
    sweep_enabled: bool = False
    sweep_ratios: List[float] = field(default_factory=lambda: list(config.SWEEP_RATIOS))
    reward_init: str = config.REWARD_INIT
    reward_control: bool = False

    def __post_init__(self):
        if not self.arms:
            raise ConfigError("plan must declare at least one arm")
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ConfigError(f"arm names must be unique: {names}")
        for arm in self.arms:
            if arm.sft_seed_arm and arm.sft_seed_arm not in names:
                raise ConfigError(f"arm {arm.name}: sft_seed_arm {arm.sft_seed_arm!r} is not a declared arm")
        for section in ("data", "eval", "model", "sft", "reward", "reward_table", "ppo"):
            setattr(self, section, validate_section(section, getattr(self, section)))
        if self.train_episodes < 10 or self.val_episodes < 1:
            raise ConfigError("plan train_episodes must be >= 10 and val_episodes >= 1")
        if any(not 0.0 <= r <= 1.0 for r in self.sweep_ratios):
            raise ConfigError("sweep ratios must lie in [0, 1]")
        if self.reward_init not in config.REWARD_INIT_CHOICES:
            raise ConfigError(f"reward_init must be one of {config.REWARD_INIT_CHOICES}, got {self.reward_init!r}")

    def sections(self) -> Dict[str, Dict]:
        return {s: dict(getattr(self, s)) for s in ("data", "eval", "model", "sft", "reward", "reward_table", "ppo")}

    def with_overrides(self, assignments: Sequence[str]) -> "ExperimentPlan":
        return replace(self, **apply_overrides(self.sections(), assignments)) if assignments else self


PLAN_KEYS = {"master_seed", "out_dir", "arms", "data", "eval", "model", "sft", "reward",
             "reward_table", "ppo", "sweep", "train_episodes", "val_episodes", "reward_init", "reward_control"}


def plan_from_dict(raw: Dict) -> ExperimentPlan:
    raw = dict(raw or {})
    unknown = set(raw) - PLAN_KEYS
    if unknown:
        raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
    sweep = raw.pop("sweep", None) or {}
    arms = raw.pop("arms", None)
    kwargs = dict(raw)
    if arms is not None:
        kwargs["arms"] = [ArmSpec(**a) for a in arms]
    kwargs["sweep_enabled"] = bool(sweep.get("enabled", False))
    if "ratios" in sweep:
        kwargs["sweep_ratios"] = [float(r) for r in sweep["ratios"]]
    try:
        return ExperimentPlan(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad plan: {e}") from None


def load_plan(path: str) -> ExperimentPlan:
    """Read a YAML plan file."""
    with open(path, encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML ({e})") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: plan must be a mapping")
    return plan_from_dict(raw or {})


def derive_seed(master_seed: int, name: str) -> int:
    """Per-arm seed from (master seed, arm name); independent of arm order."""
    key = f"{master_seed}:{name}"
    return int(hashlib.md5(key.encode()).hexdigest()[:8], 16)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

@dataclass
class SharedData:
    train: List[Episode]
    val: List[Episode]
    test: List[Episode]


def generate_test_set(plan: ExperimentPlan) -> List[Episode]:
    """The shared held-out evaluation set; its seed depends only on the master seed."""
    eval_cfg = build("eval", plan.eval)
    test_spec = build("data", plan.data, n_episodes=eval_cfg.n_episodes, na_ratio=eval_cfg.na_ratio,
                      seed=derive_seed(plan.master_seed, "eval"))
    return generate_dataset(test_spec)


def corpus_size(plan: ExperimentPlan) -> int:
    return plan.data.get("n_episodes", plan.train_episodes + plan.val_episodes)


def split_train_val(plan: ExperimentPlan, corpus: List[Episode], seed: int) -> Tuple[List[Episode], List[Episode]]:
    # validation keeps the plan's train:val proportion for any corpus size
    share = plan.val_episodes / (plan.train_episodes + plan.val_episodes)
    n_val = max(1, int(round(len(corpus) * share)))
    train, val = holdout_split(corpus, n_val, seed)
    return sorted(train, key=lambda e: e.id), sorted(val, key=lambda e: e.id)


def prepare_data(plan: ExperimentPlan) -> SharedData:
    """Held-out test set first, then a training corpus that excludes every test tuple."""
    test = generate_test_set(plan)
    train_spec = build("data", plan.data, n_episodes=corpus_size(plan), seed=derive_seed(plan.master_seed, "data"))
    corpus = generate_dataset(train_spec, exclude={e.key() for e in test})
    train, val = split_train_val(plan, corpus, train_spec.seed)
    logger.info(f"Plan data: {len(train)} train / {len(val)} val / {len(test)} test episodes")
    return SharedData(train, val, test)


def _save_csv(frame: pd.DataFrame, path: str) -> None:
    frame.to_csv(path, index=False, float_format="%.6g")


def new_reward_model(plan: ExperimentPlan, policy: LanguageModel, seed: int) -> RewardModel:
    """A reward model shaped like the plan's policy; its backbone is copied from policy unless reward_init is scratch."""
    model = RewardModel(build("model", plan.model, seed=seed))
    if plan.reward_init == "policy":
        model.copy_backbone(policy)
    return model


def run_arm(plan: ExperimentPlan, arm: ArmSpec, data: SharedData, threads: int = 1) -> MetricsReport:
    """
    Train and evaluate one arm, writing its artifacts under out_dir/arm.

    The SFT stage is seeded from `sft_seed_arm` when set, so an RLHF arm starts
    from exactly the policy its SFT-only sibling produces.
    """
    arm_dir = os.path.join(plan.out_dir, arm.name)
    os.makedirs(arm_dir, exist_ok=True)
    arm_seed = derive_seed(plan.master_seed, arm.name)
    sft_seed = derive_seed(plan.master_seed, arm.sft_seed_arm or arm.name)
    eval_cfg = build("eval", plan.eval)
    metadata = {"arm": arm.name, "label": arm.label, "arm_seed": arm_seed, "sft_seed": sft_seed,
                "started_at": datetime.now().isoformat(timespec="seconds")}

    policy = LanguageModel(build("model", plan.model, seed=sft_seed))
    sft_cfg = build("sft", {**plan.sft, **arm.sft_overrides}, seed=sft_seed)
    sft = train_sft(policy, data.train, data.val, sft_cfg, threads)
    save_checkpoint(policy, os.path.join(arm_dir, config.SFT_CHECKPOINT))
    _save_csv(sft.curve, os.path.join(arm_dir, config.SFT_LOSS_CSV))
    metadata["sft_best_step"] = sft.best_step

    if arm.ppo:
        reward_cfg = build("reward", plan.reward, seed=arm_seed)
        pairs = synthesize_preferences(data.train, reward_cfg.negatives_per_episode, arm_seed)
        reward_net = new_reward_model(plan, policy, arm_seed)
        fitted = train_reward_model(reward_net, pairs, reward_cfg)
        save_checkpoint(reward_net, os.path.join(arm_dir, config.REWARD_CHECKPOINT))
        _save_csv(fitted.curve, os.path.join(arm_dir, config.REWARD_LOSS_CSV))
        metadata.update(reward_holdout_accuracy=fitted.holdout_accuracy,
                        reward_train_pairs=fitted.n_train, reward_holdout_pairs=fitted.n_holdout)
        if plan.reward_control:
            control = train_reward_model(new_reward_model(plan, policy, arm_seed),
                                         shuffle_preferences(pairs, arm_seed), reward_cfg)
            metadata["reward_shuffled_accuracy"] = control.holdout_accuracy

        ppo_cfg = build("ppo", {**plan.ppo, **arm.ppo_overrides}, seed=arm_seed)
        table = build("reward_table", plan.reward_table)
        source = LearnedReward(reward_net) if ppo_cfg.reward_source == "learned" else RulesReward(table)
        result = train_ppo(policy, data.train, source, ppo_cfg)
        save_checkpoint(policy, os.path.join(arm_dir, config.PPO_CHECKPOINT))
        _save_csv(result.stats, os.path.join(arm_dir, config.PPO_STATS_CSV))
        _save_csv(result.rollout_log, os.path.join(arm_dir, config.ROLLOUT_LOG_CSV))

    echo = {"arm": arm.name, "label": arm.label, "sft": asdict(sft_cfg), "ppo": arm.ppo}
    scored, _ = evaluate_model(policy, data.test, threads, eval_cfg.max_new_tokens, echo)
    scored.to_json(os.path.join(arm_dir, config.METRICS_JSON))
    metadata["latency_ms_per_query"] = scored.latency_ms
    metadata["finished_at"] = datetime.now().isoformat(timespec="seconds")
    with open(os.path.join(arm_dir, config.METADATA_JSON), "w", encoding="utf-8") as f:
        json.dump(metadata, f, indent=2)
    logger.info(
        f"Arm {arm.name}: overall acc={scored.overall_accuracy:.3f}, "
        f"halluc rate={scored.hallucination_rate:.3f}"
    )
    return scored


def _run_arm_captured(plan, arm, data, threads) -> Tuple[Optional[Dict], Optional[str]]:
    try:
        return run_arm(plan, arm, data, threads).to_dict(), None
    except Exception as e:
        logger.debug(f"Arm {arm.name} traceback", exc_info=True)
        return None, f"{type(e).__name__}: {e}"


@dataclass
class PlanResult:
    plan: ExperimentPlan
    reports: Dict[str, MetricsReport]
    errors: Dict[str, str]
    sweep: Optional[pd.DataFrame] = None


def run_plan(plan: ExperimentPlan, threads: int = config.THREADS) -> PlanResult:
    """
    Run every arm, then the sweep when enabled, and write the report tables.

    Arms run in parallel processes when threads > 1; results are collected in
    declared order. A failing arm is recorded and the rest continue.
    """
    os.makedirs(plan.out_dir, exist_ok=True)
    data = prepare_data(plan)
    n_jobs = max(1, min(threads, len(plan.arms)))
    inner = max(1, threads // n_jobs)
    if n_jobs > 1:
        outcomes = Parallel(n_jobs=n_jobs, prefer="processes")(
            delayed(_run_arm_captured)(plan, arm, data, inner) for arm in plan.arms
        )
    else:
        outcomes = [_run_arm_captured(plan, arm, data, inner) for arm in plan.arms]

    reports, errors = {}, {}
    for arm, (record, error) in zip(plan.arms, outcomes):
        if error:
            logger.error(f"Arm {arm.name} failed: {error}")
            errors[arm.name] = error
        else:
            reports[arm.name] = MetricsReport.from_dict(record)

    sweep = None
    if plan.sweep_enabled:
        sweep = run_sweep(plan, data.test, threads)
    result = PlanResult(plan, reports, errors, sweep)
    if reports:
        report(result, plan.out_dir)
        write_acceptance(plan.out_dir)
    else:
        logger.error("Every arm failed; no report written")
    return result


def run_sweep(plan: ExperimentPlan, test: Sequence[Episode], threads: int = 1) -> pd.DataFrame:
    """SFT-only models trained at each sweep ratio, scored on a shared test set."""
    seed = derive_seed(plan.master_seed, "sweep")
    base_spec = build("data", plan.data, n_episodes=corpus_size(plan), seed=seed)

    def train_fn(episodes: List[Episode]) -> LanguageModel:
        train, val = split_train_val(plan, episodes, seed)
        model = LanguageModel(build("model", plan.model, seed=seed))
        train_sft(model, train, val, build("sft", plan.sft, seed=seed), threads)
        return model

    return composition_sweep(base_spec, train_fn, test, plan.sweep_ratios, threads)


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and value != value):
        return ""
    if isinstance(value, float):
        return f"{value:.{config.REPORT_DECIMALS}f}"
    return str(value)


def formatted(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.apply(lambda col: col.map(_fmt)).astype(str)


def to_markdown(frame: pd.DataFrame) -> str:
    header = "| " + " | ".join(frame.columns) + " |"
    rule = "|" + "---|" * len(frame.columns)
    rows = ["| " + " | ".join(row) + " |" for row in frame.itertuples(index=False, name=None)]
    return "\n".join([header, rule] + rows) + "\n"


def _write_table(frame: pd.DataFrame, out_dir: str, stem: str) -> Dict[str, str]:
    text = formatted(frame)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    md_path = os.path.join(out_dir, f"{stem}.md")
    text.to_csv(csv_path, index=False)
    with open(md_path, "w", encoding="utf-8") as f:
        f.write(to_markdown(text))
    return {f"{stem}_csv": csv_path, f"{stem}_md": md_path}


def comparison_table(reports: Sequence[Tuple[str, MetricsReport]]) -> pd.DataFrame:
    rows = [{"Arm": label, **r.table_row()} for label, r in reports]
    return pd.DataFrame(rows)


def hallucination_table(reports: Sequence[Tuple[str, MetricsReport]]) -> pd.DataFrame:
    return pd.DataFrame([
        {"Model Configuration": label, "Hallucination Rate": r.hallucination_rate}
        for label, r in reports
    ])


def report(result: PlanResult, out_dir: str) -> Dict[str, str]:
    """
    Write comparison, hallucination and (if present) sweep tables as CSV and markdown.

    Both formats are rendered from the same 3-decimal string table.

    Returns:
        Mapping of artifact name to path
    """
    labelled = [
        (arm.label, result.reports[arm.name]) for arm in result.plan.arms if arm.name in result.reports
    ]
    return write_report_tables(labelled, out_dir, result.sweep)


def write_report_tables(
    labelled: Sequence[Tuple[str, MetricsReport]],
    out_dir: str,
    sweep: Optional[pd.DataFrame] = None,
) -> Dict[str, str]:
    if not labelled:
        raise ValueError("report needs at least one successful arm")
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    paths.update(_write_table(comparison_table(labelled), out_dir, "comparison"))
    paths.update(_write_table(hallucination_table(labelled), out_dir, "hallucination"))
    if sweep is not None and len(sweep):
        paths.update(write_sweep_table(sweep, out_dir))
    logger.info(f"Wrote report tables to {out_dir}")
    return paths


def write_sweep_table(sweep: pd.DataFrame, out_dir: str) -> Dict[str, str]:
    """Sweep rows as sweep.csv / sweep.md, ratios shown as percentages."""
    os.makedirs(out_dir, exist_ok=True)
    frame = sweep.rename(columns={
        "na_ratio": "NA Ratio",
        "unanswerability_f1": "Unans. F1",
        "answerable_f1": "Ans. F1",
        "overall_accuracy": "Overall Acc",
        "error": "Error",
    })
    frame["NA Ratio"] = frame["NA Ratio"].map(lambda r: f"{r:.0%}")
    return _write_table(frame, out_dir, "sweep")


def load_reports(out_dir: str) -> List[Tuple[str, MetricsReport]]:
    """Collect per-arm metrics.json files under out_dir, in default arm order then by name."""
    order = {a["name"]: i for i, a in enumerate(config.DEFAULT_ARMS)}
    found = []
    for name in sorted(os.listdir(out_dir)):
        path = os.path.join(out_dir, name, config.METRICS_JSON)
        if os.path.isfile(path):
            with open(path, encoding="utf-8") as f:
                record = MetricsReport.from_dict(json.load(f))
            found.append((order.get(name, len(order)), name, record))
    found.sort(key=lambda item: (item[0], item[1]))
    return [(r.config.get("label", name), r) for _, name, r in found]


def read_sweep_table(out_dir: str) -> Optional[pd.DataFrame]:
    """Parse out_dir/sweep.csv back into sweep rows; None when it is absent."""
    sweep_path = os.path.join(out_dir, "sweep.csv")
    if not os.path.isfile(sweep_path):
        return None
    raw = pd.read_csv(sweep_path, keep_default_na=False)
    return pd.DataFrame({
        "na_ratio": raw["NA Ratio"].map(lambda s: float(str(s).rstrip("%")) / 100.0),
        "unanswerability_f1": pd.to_numeric(raw["Unans. F1"], errors="coerce"),
        "answerable_f1": pd.to_numeric(raw["Ans. F1"], errors="coerce"),
        "overall_accuracy": pd.to_numeric(raw["Overall Acc"], errors="coerce"),
        "error": raw["Error"].astype(str),
    })


def rebuild_report(out_dir: str) -> Dict[str, str]:
    """Regenerate the tables from saved per-arm metrics (and sweep.csv when present)."""
    paths = write_report_tables(load_reports(out_dir), out_dir, read_sweep_table(out_dir))
    paths.update(write_acceptance(out_dir))
    return paths


# ---------------------------------------------------------------------------
# Acceptance
# ---------------------------------------------------------------------------

PASS, FAIL, SKIPPED = "pass", "fail", "skipped"
ACCEPTANCE_COLUMNS = ["criterion", "check", "value", "threshold", "status"]


@dataclass
class RunArtifacts:
    """Everything the acceptance checks read from a plan's output directory, keyed by arm name."""

    reports: Dict[str, MetricsReport] = field(default_factory=dict)
    metadata: Dict[str, Dict] = field(default_factory=dict)
    ppo_stats: Dict[str, pd.DataFrame] = field(default_factory=dict)
    rollouts: Dict[str, pd.DataFrame] = field(default_factory=dict)
    sweep: Optional[pd.DataFrame] = None


def load_run_artifacts(out_dir: str) -> RunArtifacts:
    found = RunArtifacts(sweep=read_sweep_table(out_dir))
    for name in sorted(os.listdir(out_dir)):
        arm_dir = os.path.join(out_dir, name)
        if not os.path.isdir(arm_dir):
            continue
        metrics_path = os.path.join(arm_dir, config.METRICS_JSON)
        if os.path.isfile(metrics_path):
            with open(metrics_path, encoding="utf-8") as f:
                found.reports[name] = MetricsReport.from_dict(json.load(f))
        metadata_path = os.path.join(arm_dir, config.METADATA_JSON)
        if os.path.isfile(metadata_path):
            with open(metadata_path, encoding="utf-8") as f:
                found.metadata[name] = json.load(f)
        for target, filename in ((found.ppo_stats, config.PPO_STATS_CSV), (found.rollouts, config.ROLLOUT_LOG_CSV)):
            path = os.path.join(arm_dir, filename)
            if os.path.isfile(path):
                target[name] = pd.read_csv(path)
    return found


def _check(criterion: str, check: str, value, threshold: str, passed: Optional[bool]) -> Dict:
    status = SKIPPED if passed is None else (PASS if passed else FAIL)
    return {"criterion": criterion, "check": check, "value": value, "threshold": threshold, "status": status}


def window_violations(values: Sequence[float], window: int) -> Optional[int]:
    """Decreases between the means of consecutive non-overlapping windows; None with fewer than two windows."""
    values = np.asarray(values, dtype=np.float64)
    n_windows = len(values) // window
    if n_windows < 2:
        return None
    means = values[: n_windows * window].reshape(n_windows, window).mean(axis=1)
    return int((np.diff(means) < -1e-12).sum())


def shaping_violations(rollouts: pd.DataFrame) -> int:
    """
    Rows where the shaping multiplier drops as confidence rises.

    Within each shaped outcome the multiplier shaped/base must be
    non-decreasing in exp(S); unshaped rows (multiplier 1) are ignored.
    """
    violations = 0
    for outcome in (Outcome.HALLUCINATION, Outcome.CORRECT_ABSTENTION):
        rows = rollouts[(rollouts["outcome"] == outcome.value) & (rollouts["base_reward"] != 0)]
        multiplier = rows["shaped_reward"] / rows["base_reward"]
        shaped = pd.DataFrame({"confidence": rows["confidence"], "multiplier": multiplier})
        shaped = shaped[shaped["multiplier"] > 1.0 + 1e-12].sort_values("confidence", kind="stable")
        violations += int((np.diff(shaped["multiplier"].to_numpy()) < -1e-9).sum())
    return violations


def _quality_checks(art: RunArtifacts, t: Dict) -> List[Dict]:
    sft = art.reports.get(config.ACCEPTANCE_ARMS["sft"])
    rows = []
    for check, attr in (("SALU-SFT unanswerability F1", "unanswerability_f1"),
                        ("SALU-SFT overall accuracy", "overall_accuracy")):
        value = getattr(sft, attr) if sft else None
        rows.append(_check("sft_quality", check, value, f">= {t['sft_min']}",
                           None if value is None else value >= t["sft_min"]))
    return rows


def _hallucination_checks(art: RunArtifacts, t: Dict) -> List[Dict]:
    rates = {
        role: (art.reports[name].hallucination_rate if name in art.reports else None)
        for role, name in config.ACCEPTANCE_ARMS.items()
    }
    qa, sft, rl = rates["qa_only"], rates["sft"], rates["rlhf"]
    rows = [
        _check("hallucination", "QA-only hallucination rate", qa, f">= {t['qa_only_halluc_min']}",
               None if qa is None else qa >= t["qa_only_halluc_min"]),
        _check("hallucination", "SALU+RLHF hallucination rate", rl, f"<= {t['rlhf_halluc_max']}",
               None if rl is None else rl <= t["rlhf_halluc_max"]),
    ]
    if None in (qa, sft, rl):
        rows.append(_check("hallucination", "QA-only > SALU-SFT > SALU+RLHF", None, "strict", None))
        rows.append(_check("hallucination", "relative reduction by RLHF", None, f">= {t['rlhf_min_reduction']}", None))
        return rows
    rows.append(_check("hallucination", "QA-only > SALU-SFT > SALU+RLHF",
                       f"{qa:.3f} > {sft:.3f} > {rl:.3f}", "strict", qa > sft > rl))
    reduction = 1.0 - rl / sft if sft > 0 else float("nan")
    rows.append(_check("hallucination", "relative reduction by RLHF", reduction,
                       f">= {t['rlhf_min_reduction']}", sft > 0 and reduction >= t["rlhf_min_reduction"]))
    return rows


def _sweep_checks(art: RunArtifacts) -> List[Dict]:
    comparisons = [
        ("Unans. F1 at 50% >= at 20%", "unanswerability_f1", 0.5, 0.2, 1),
        ("Overall accuracy at 50% >= at 20%", "overall_accuracy", 0.5, 0.2, 1),
        ("Ans. F1 at 70% <= at 20%", "answerable_f1", 0.7, 0.2, -1),
    ]
    cells = {}
    if art.sweep is not None:
        usable = art.sweep[art.sweep["error"].isin(["", "nan"])]
        cells = {round(float(r), 3): row for r, row in zip(usable["na_ratio"], usable.to_dict("records"))}
    rows = []
    for check, column, high, low, sign in comparisons:
        if high not in cells or low not in cells:
            rows.append(_check("composition_sweep", check, None, "trend", None))
            continue
        a, b = cells[high][column], cells[low][column]
        rows.append(_check("composition_sweep", check, f"{a:.3f} vs {b:.3f}", "trend",
                           bool(sign * (a - b) >= 0)))
    return rows


def _reward_checks(art: RunArtifacts, t: Dict) -> List[Dict]:
    meta = art.metadata.get(config.ACCEPTANCE_ARMS["rlhf"], {})
    accuracy = meta.get("reward_holdout_accuracy")
    n_pairs = None
    if "reward_train_pairs" in meta:
        n_pairs = meta["reward_train_pairs"] + meta["reward_holdout_pairs"]
    shuffled = meta.get("reward_shuffled_accuracy")
    lo, hi = t["shuffled_center"] - t["shuffled_band"], t["shuffled_center"] + t["shuffled_band"]
    return [
        _check("reward_model", "hold-out pair accuracy", accuracy, f">= {t['reward_accuracy_min']}",
               None if accuracy is None else accuracy >= t["reward_accuracy_min"]),
        _check("reward_model", "preference pairs", n_pairs, f">= {t['reward_min_pairs']}",
               None if n_pairs is None else n_pairs >= t["reward_min_pairs"]),
        _check("reward_model", "shuffled-label control accuracy", shuffled, f"{lo:.1f} .. {hi:.1f}",
               None if shuffled is None else lo <= shuffled <= hi),
    ]


def _ppo_checks(art: RunArtifacts, t: Dict) -> List[Dict]:
    name = config.ACCEPTANCE_ARMS["rlhf"]
    stats = art.ppo_stats.get(name)
    rollouts = art.rollouts.get(name)
    rows = []
    if stats is None or not len(stats):
        rows.append(_check("ppo_stability", "max mean KL", None, f"< {t['kl_max']}", None))
        rows.append(_check("ppo_stability", "reward window decreases", None,
                           f"<= {t['reward_window_violations']}", None))
    else:
        stats = stats.sort_values("iter")
        max_kl = float(stats["mean_kl"].max())
        rows.append(_check("ppo_stability", "max mean KL", max_kl, f"< {t['kl_max']}", max_kl < t["kl_max"]))
        drops = window_violations(stats["mean_reward"], t["reward_window"])
        rows.append(_check("ppo_stability", f"reward decreases between {t['reward_window']}-iteration windows",
                           drops, f"<= {t['reward_window_violations']}",
                           None if drops is None else drops <= t["reward_window_violations"]))
    if rollouts is None or not len(rollouts):
        rows.append(_check("confidence_shaping", "shaping monotone in exp(S)", None, "0", None))
    else:
        broken = shaping_violations(rollouts)
        rows.append(_check("confidence_shaping", "shaping monotone in exp(S)", broken, "0", broken == 0))
    return rows


def acceptance_checks(art: RunArtifacts) -> pd.DataFrame:
    """
    Pass/fail table for a finished run.

    Covers SFT quality, the hallucination ordering, the composition sweep
    trend, reward-model accuracy with its shuffled control, PPO stability and
    confidence-shaping monotonicity. A check whose inputs are missing is
    reported as skipped.
    """
    t = config.ACCEPTANCE
    rows = (
        _quality_checks(art, t) + _hallucination_checks(art, t) + _sweep_checks(art)
        + _reward_checks(art, t) + _ppo_checks(art, t)
    )
    return pd.DataFrame(rows, columns=ACCEPTANCE_COLUMNS)


def write_acceptance(out_dir: str) -> Dict[str, str]:
    """Check a plan output directory and write acceptance.csv / acceptance.md."""
    table = acceptance_checks(load_run_artifacts(out_dir))
    counts = table["status"].value_counts()
    logger.info(
        f"Acceptance: {counts.get(PASS, 0)} passed, {counts.get(FAIL, 0)} failed, "
        f"{counts.get(SKIPPED, 0)} skipped"
    )
    for row in table[table["status"] == FAIL].itertuples(index=False):
        logger.warning(f"Acceptance check failed: {row.criterion} / {row.check} = {row.value} ({row.threshold})")
    return _write_table(table, out_dir, "acceptance")
