"""
Unit tests for experiment plans, arm runs and report tables.
Run with: pytest tests/
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import json

import pytest
import numpy as np
import pandas as pd

import config
import experiments
from corpus import DatasetSpec, generate_dataset, gold_target
from errors import ConfigError
from experiments import (
    ACCEPTANCE_COLUMNS,
    ArmSpec,
    RunArtifacts,
    acceptance_checks,
    apply_overrides,
    build,
    derive_seed,
    load_plan,
    plan_from_dict,
    prepare_data,
    rebuild_report,
    run_plan,
    shaping_violations,
    window_violations,
    write_report_tables,
    write_sweep_table,
)
from metrics import build_report
from selftest import SMALL_MODEL
from tiny_lm import ABSTENTION, VOCAB, TokenSequence, Vocab


def _tiny_plan(out_dir, **extra):
    raw = {
        "master_seed": 5,
        "out_dir": str(out_dir),
        "model": dict(SMALL_MODEL),
        "sft": {"max_steps": 2, "batch_size": 8, "eval_every": 1, "patience": 1},
        "eval": {"n_episodes": 20},
        "train_episodes": 36,
        "val_episodes": 4,
    }
    raw.update(extra)
    return plan_from_dict(raw)


@pytest.fixture(scope="module")
def reports():
    episodes = generate_dataset(DatasetSpec(n_episodes=20, na_ratio=0.5, seed=2))
    gold = build_report(episodes, [gold_target(e) for e in episodes], {"label": "Gold"})
    abstain = build_report(episodes, [ABSTENTION] * len(episodes), {"label": "Abstain"})
    return [("Gold", gold), ("Abstain", abstain)]


class TestOverrides:
    """Tests for section.key=value overrides."""

    def test_values_coerced(self):
        """Override strings take the field's type."""
        merged = apply_overrides({"ppo": {}}, ["ppo.kl_coef=0.1", "ppo.iterations=3"])
        assert merged["ppo"] == {"kl_coef": 0.1, "iterations": 3}

    def test_later_assignment_wins(self):
        """Repeated keys keep the last value."""
        merged = apply_overrides({}, ["sft.beta=0.5", "sft.beta=2"])
        assert merged["sft"]["beta"] == 2.0

    def test_unknown_key(self):
        """Keys outside the section's schema are config errors."""
        with pytest.raises(ConfigError):
            apply_overrides({}, ["sft.gamma=1"])

    def test_unknown_section(self):
        """Sections outside the schema are config errors."""
        with pytest.raises(ConfigError):
            apply_overrides({}, ["optimizer.lr=1"])

    def test_malformed_assignment(self):
        """Assignments need a dotted key and an equals sign."""
        with pytest.raises(ConfigError):
            apply_overrides({}, ["beta=1"])

    def test_invariants_checked(self):
        """Coerced values still pass through the section's own validation."""
        with pytest.raises(ConfigError):
            apply_overrides({}, ["ppo.clip_epsilon=1.5"])

    def test_build_with_extras(self):
        """build merges validated values with keyword extras."""
        spec = build("data", {"na_ratio": "0.3"}, n_episodes=50)
        assert spec.na_ratio == 0.3
        assert spec.n_episodes == 50


class TestPlans:
    """Tests for plan parsing."""

    def test_default_arms(self):
        """Without arms the three default configurations are used."""
        plan = plan_from_dict({})
        assert [a.name for a in plan.arms] == ["qa_only", "salu_sft", "salu_rlhf"]
        assert plan.arms[0].sft_overrides == {"beta": 0.0}
        assert plan.arms[2].sft_seed_arm == "salu_sft"

    def test_duplicate_arm_names(self):
        """Arm names must be unique."""
        with pytest.raises(ConfigError):
            plan_from_dict({"arms": [{"name": "a"}, {"name": "a"}]})

    def test_unknown_seed_arm(self):
        """sft_seed_arm must name a declared arm."""
        with pytest.raises(ConfigError):
            plan_from_dict({"arms": [{"name": "a", "sft_seed_arm": "b"}]})

    def test_unknown_plan_key(self):
        """Top-level keys are checked."""
        with pytest.raises(ConfigError):
            plan_from_dict({"arm": []})

    def test_bad_arm_override(self):
        """Arm overrides are validated against their section."""
        with pytest.raises(ConfigError):
            ArmSpec(name="x", sft_overrides={"alpha": -1})

    def test_load_yaml(self, tmp_path):
        """Plans load from YAML with the sweep block."""
        path = tmp_path / "plan.yaml"
        path.write_text(
            "master_seed: 9\n"
            "sft:\n  beta: 0.5\n"
            "sweep:\n  enabled: true\n  ratios: [0.2, 0.8]\n"
        )
        plan = load_plan(str(path))
        assert plan.master_seed == 9
        assert plan.sft == {"beta": 0.5}
        assert plan.sweep_enabled
        assert plan.sweep_ratios == [0.2, 0.8]

    def test_invalid_yaml(self, tmp_path):
        """Malformed YAML is a config error."""
        path = tmp_path / "plan.yaml"
        path.write_text("sft: [unclosed\n")
        with pytest.raises(ConfigError):
            load_plan(str(path))

    def test_with_overrides(self):
        """Overrides produce a new plan and leave the original alone."""
        plan = plan_from_dict({})
        changed = plan.with_overrides(["ppo.kl_coef=0.2"])
        assert changed.ppo == {"kl_coef": 0.2}
        assert plan.ppo == {}

    def test_shipped_plan_parses(self):
        """The plan.yaml at the repository root is valid."""
        root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        plan = load_plan(os.path.join(root, "plan.yaml"))
        assert {a.name for a in plan.arms} == {"qa_only", "salu_sft", "salu_rlhf"}
        assert plan.reward_init == "policy"
        assert plan.reward_control


class TestSeeds:
    """Tests for derived seeds."""

    def test_stable_and_distinct(self):
        """Seeds depend only on (master seed, name)."""
        assert derive_seed(42, "salu_sft") == derive_seed(42, "salu_sft")
        assert derive_seed(42, "salu_sft") != derive_seed(42, "qa_only")
        assert derive_seed(42, "salu_sft") != derive_seed(43, "salu_sft")
        assert 0 <= derive_seed(42, "eval") < 2 ** 32

    def test_test_set_independent_of_arms(self, tmp_path):
        """The shared test set does not change when arms are reordered."""
        plan = _tiny_plan(tmp_path)
        reordered = _tiny_plan(tmp_path, arms=[
            {"name": "salu_sft"}, {"name": "qa_only", "sft_overrides": {"beta": 0.0}},
        ])
        first = [e.to_dict() for e in prepare_data(plan).test]
        second = [e.to_dict() for e in prepare_data(reordered).test]
        assert first == second

    def test_train_disjoint_from_test(self, tmp_path):
        """No training or validation episode repeats a test tuple."""
        data = prepare_data(_tiny_plan(tmp_path))
        test_keys = {e.key() for e in data.test}
        assert not test_keys & {e.key() for e in data.train + data.val}
        assert (len(data.train), len(data.val), len(data.test)) == (36, 4, 20)

    def test_default_split_sizes(self, tmp_path):
        """The default plan trains on 2048 episodes and validates on 256."""
        data = prepare_data(plan_from_dict({"out_dir": str(tmp_path)}))
        assert (len(data.train), len(data.val), len(data.test)) == (2048, 256, 256)

    def test_split_keeps_proportion(self, tmp_path):
        """A data.n_episodes override keeps the plan's train:val proportion."""
        plan = _tiny_plan(tmp_path, data={"n_episodes": 80})
        data = prepare_data(plan)
        assert (len(data.train), len(data.val)) == (72, 8)


class TestReport:
    """Tests for the comparison tables."""

    def test_three_decimals(self, reports, tmp_path):
        """Every numeric cell is written with three decimals."""
        paths = write_report_tables(reports, str(tmp_path))
        table = pd.read_csv(paths["comparison_csv"], dtype=str)
        assert list(table["Arm"]) == ["Gold", "Abstain"]
        assert table.loc[0, "Overall Acc"] == "1.000"
        assert table.loc[1, "Overall Acc"] == "0.500"

    def test_csv_matches_markdown(self, reports, tmp_path):
        """CSV and markdown carry the same cells."""
        paths = write_report_tables(reports, str(tmp_path))
        table = pd.read_csv(paths["hallucination_csv"], dtype=str)
        with open(paths["hallucination_md"]) as f:
            lines = f.read().splitlines()
        assert lines[0] == "| Model Configuration | Hallucination Rate |"
        cells = [[c.strip() for c in line.strip("|").split("|")] for line in lines[2:]]
        assert cells == table.values.tolist()

    def test_empty_rejected(self, tmp_path):
        """A report needs at least one arm."""
        with pytest.raises(ValueError):
            write_report_tables([], str(tmp_path))

    def test_sweep_table(self, tmp_path):
        """Sweep ratios print as percentages and failures keep their error."""
        sweep = pd.DataFrame({
            "na_ratio": [0.2, 0.5],
            "unanswerability_f1": [0.25, np.nan],
            "answerable_f1": [0.75, np.nan],
            "overall_accuracy": [0.5, np.nan],
            "error": ["", "RuntimeError: boom"],
        })
        paths = write_sweep_table(sweep, str(tmp_path))
        table = pd.read_csv(paths["sweep_csv"], dtype=str, keep_default_na=False)
        assert list(table["NA Ratio"]) == ["20%", "50%"]
        assert table.loc[0, "Unans. F1"] == "0.250"
        assert table.loc[1, "Overall Acc"] == ""
        assert table.loc[1, "Error"] == "RuntimeError: boom"


def _artifacts(rlhf_responses=None):
    """A finished run whose every acceptance criterion holds."""
    episodes = generate_dataset(DatasetSpec(n_episodes=60, na_ratio=0.5, seed=8))
    gold = [gold_target(e) for e in episodes]
    slip = next(i for i, e in enumerate(episodes) if not e.answerable)
    sft = list(gold)
    sft[slip] = TokenSequence((VOCAB.id("V00"), Vocab.EOS))
    answering = [g if e.answerable else TokenSequence((VOCAB.id("V00"), Vocab.EOS))
                 for e, g in zip(episodes, gold)]
    reports = {
        "qa_only": build_report(episodes, answering),
        "salu_sft": build_report(episodes, sft),
        "salu_rlhf": build_report(episodes, rlhf_responses(sft) if rlhf_responses else gold),
    }
    metadata = {"salu_rlhf": {"reward_holdout_accuracy": 0.97, "reward_train_pairs": 2800,
                              "reward_holdout_pairs": 300, "reward_shuffled_accuracy": 0.52}}
    stats = pd.DataFrame({"iter": range(1, 31), "mean_reward": np.linspace(-1.0, 1.0, 30), "mean_kl": 0.01})
    confidence = np.linspace(0.1, 0.9, 5)
    rollouts = pd.DataFrame({
        "outcome": ["Hallucination"] * 5 + ["CorrectAbstention"] * 5,
        "confidence": np.concatenate([confidence, confidence]),
        "base_reward": [-2.0] * 5 + [1.0] * 5,
        "shaped_reward": np.concatenate([-2.0 * (1 + 0.5 * confidence), 1.0 + confidence]),
    })
    sweep = pd.DataFrame({
        "na_ratio": [0.2, 0.5, 0.7],
        "unanswerability_f1": [0.8, 0.9, 0.95],
        "answerable_f1": [0.95, 0.9, 0.85],
        "overall_accuracy": [0.85, 0.9, 0.92],
        "error": ["", "", ""],
    })
    return RunArtifacts(reports, metadata, {"salu_rlhf": stats}, {"salu_rlhf": rollouts}, sweep)


class TestAcceptance:
    """Tests for the pass/fail checks over a finished run."""

    def test_all_pass(self):
        """A run meeting every threshold passes all fifteen checks."""
        table = acceptance_checks(_artifacts())
        assert list(table.columns) == ACCEPTANCE_COLUMNS
        assert len(table) == 15
        assert (table["status"] == "pass").all(), table[table["status"] != "pass"]

    def test_rlhf_without_gain_fails(self):
        """RLHF that hallucinates as often as SFT breaks the ordering and the reduction."""
        table = acceptance_checks(_artifacts(rlhf_responses=lambda sft: sft))
        failed = set(table.loc[table["status"] == "fail", "check"])
        assert failed == {"QA-only > SALU-SFT > SALU+RLHF", "relative reduction by RLHF"}

    def test_unstable_ppo_fails(self):
        """A KL spike and a falling reward curve fail the stability checks."""
        art = _artifacts()
        stats = art.ppo_stats["salu_rlhf"]
        stats["mean_reward"] = np.linspace(1.0, -1.0, 30)
        stats.loc[5, "mean_kl"] = 0.8
        table = acceptance_checks(art)
        ppo = table[table["criterion"] == "ppo_stability"]
        assert list(ppo["status"]) == ["fail", "fail"]

    def test_empty_run_skips(self):
        """With no artifacts every check is skipped rather than failed."""
        table = acceptance_checks(RunArtifacts())
        assert len(table) == 15
        assert (table["status"] == "skipped").all()

    def test_window_violations(self):
        """Window means that fall once count one violation."""
        values = [1.0] * 10 + [0.0] * 10 + [2.0] * 10
        assert window_violations(values, 10) == 1
        assert window_violations(np.arange(30.0), 10) == 0
        assert window_violations(np.arange(19.0), 10) is None

    def test_shaping_violations(self):
        """A more confident hallucination shaped less harshly is counted."""
        rollouts = _artifacts().rollouts["salu_rlhf"].copy()
        assert shaping_violations(rollouts) == 0
        rollouts.loc[4, "shaped_reward"] = -2.05
        assert shaping_violations(rollouts) == 1



class TestRunPlan:
    """End-to-end plan run on tiny settings."""

    def test_run_and_rebuild(self, tmp_path):
        """SFT arms succeed, an arm short of preference pairs is recorded, and tables rebuild."""
        plan = _tiny_plan(tmp_path)
        result = run_plan(plan, threads=1)
        assert set(result.reports) == {"qa_only", "salu_sft"}
        assert "salu_rlhf" in result.errors
        for arm in ("qa_only", "salu_sft"):
            arm_dir = tmp_path / arm
            for name in (config.SFT_CHECKPOINT, config.SFT_LOSS_CSV, config.METRICS_JSON, config.METADATA_JSON):
                assert (arm_dir / name).exists()
            with open(arm_dir / config.METADATA_JSON) as f:
                meta = json.load(f)
            assert meta["arm_seed"] == derive_seed(5, arm)

        table = pd.read_csv(tmp_path / "comparison.csv", dtype=str)
        assert list(table["Arm"]) == ["SFT for Standard QA", "SALU without RLHF"]

        before = (tmp_path / "comparison.md").read_text()
        (tmp_path / "comparison.md").unlink()
        rebuild_report(str(tmp_path))
        assert (tmp_path / "comparison.md").read_text() == before
        acceptance = pd.read_csv(tmp_path / "acceptance.csv", dtype=str)
        assert len(acceptance) == 15
        assert acceptance.loc[acceptance["criterion"] == "reward_model", "status"].eq("skipped").all()

    def test_unexpected_arm_error_recorded(self, tmp_path, monkeypatch):
        """An arm failing with a non-library exception is recorded and the other arms still report."""
        real_run_arm = experiments.run_arm

        def flaky(plan, arm, data, threads=1):
            if arm.name == "qa_only":
                raise KeyError("missing column")
            return real_run_arm(plan, arm, data, threads)

        monkeypatch.setattr(experiments, "run_arm", flaky)
        result = run_plan(_tiny_plan(tmp_path), threads=1)
        assert result.errors["qa_only"].startswith("KeyError")
        assert "salu_sft" in result.reports

    def test_seeded_arm_shares_sft_policy(self, tmp_path):
        """An arm seeded from a sibling starts from the sibling's SFT policy."""
        plan = _tiny_plan(tmp_path, arms=[
            {"name": "salu_sft"},
            {"name": "copy", "sft_seed_arm": "salu_sft"},
        ])
        run_plan(plan, threads=1)
        with open(tmp_path / "salu_sft" / config.METADATA_JSON) as f:
            first = json.load(f)
        with open(tmp_path / "copy" / config.METADATA_JSON) as f:
            second = json.load(f)
        assert first["sft_seed"] == second["sft_seed"]
        assert (tmp_path / "salu_sft" / config.SFT_CHECKPOINT).read_bytes() == \
            (tmp_path / "copy" / config.SFT_CHECKPOINT).read_bytes()


# Run tests with: pytest tests/test_experiments.py -v
if __name__ == '__main__':
    pytest.main([__file__, '-v'])
