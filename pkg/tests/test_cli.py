"""
Unit tests for the command-line interface.
Run with: pytest tests/
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import json

import pytest
import numpy as np

import cli
from cli import build_parser, collect_overrides, dispatch
from corpus import DatasetSpec, generate_dataset, gold_target, load_dataset
from errors import UsageError
from metrics import build_report
from selftest import SMALL_MODEL
from tiny_lm import load_model


MODEL_FLAGS = [item for k, v in SMALL_MODEL.items() for item in ("--set", f"model.{k}={v}")]


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture
def corpus(tmp_path, capsys):
    path = str(tmp_path / "episodes.jsonl")
    assert dispatch(["gen-data", "--n", "40", "--na-ratio", "0.5", "--seed", "3", "--out", path]) == 0
    capsys.readouterr()
    return path


class TestUsage:
    """Tests for argument handling and exit codes."""

    def test_unknown_subcommand(self, capsys):
        """Unknown subcommands exit with 2."""
        assert dispatch(["bogus"]) == 2
        assert "error: UsageError" in capsys.readouterr().err

    def test_set_on_unread_section(self, tmp_path):
        """--set on a section the command never reads is a usage error."""
        out = str(tmp_path / "d.jsonl")
        assert dispatch(["gen-data", "--out", out, "--set", "ppo.kl_coef=0.1"]) == 2

    def test_bad_config_value(self, tmp_path, capsys):
        """An invalid config value is a runtime failure with an error line."""
        out = str(tmp_path / "d.jsonl")
        assert dispatch(["gen-data", "--out", out, "--na-ratio", "1.5"]) == 1
        assert "error: ConfigError" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        """--help succeeds."""
        assert dispatch(["--help"]) == 0

    def test_flags_become_overrides(self):
        """Named flags map onto section keys, the seed onto every seeded section read."""
        args = build_parser().parse_args(["train-sft", "--data", "x", "--out", "y", "--beta", "0",
                                          "--steps", "5", "--seed", "9"])
        assignments = collect_overrides(args)
        assert "sft.beta=0.0" in assignments
        assert "sft.max_steps=5" in assignments
        assert {"model.seed=9", "sft.seed=9"} <= set(assignments)
        assert not any(a.startswith("data.") for a in assignments)

    def test_steps_targets_reward_section(self):
        """train-reward --steps sets reward.max_steps."""
        args = build_parser().parse_args(["train-reward", "--data", "x", "--out", "y", "--steps", "7"])
        assert "reward.max_steps=7" in collect_overrides(args)

    def test_parser_errors_raise(self):
        """The parser raises instead of exiting."""
        with pytest.raises(UsageError):
            build_parser().parse_args(["eval"])


class TestCommands:
    """Tests for individual subcommands."""

    def test_gen_data(self, tmp_path, capsys):
        """gen-data writes the corpus, its splits, and reports the composition."""
        path = str(tmp_path / "episodes.jsonl")
        assert dispatch(["gen-data", "--n", "50", "--na-ratio", "0.5", "--out", path]) == 0
        summary = _stdout_json(capsys)
        assert summary["episodes"] == 50
        assert summary["unanswerable"] == 25
        episodes = load_dataset(path)
        assert sum(not e.answerable for e in episodes) == 25
        assert os.path.exists(summary["paths"]["train"])

    def test_train_then_eval(self, corpus, tmp_path, capsys):
        """A short SFT run produces a checkpoint that eval scores as JSON on stdout."""
        ckpt = str(tmp_path / "sft.ckpt")
        train = corpus.replace(".jsonl", ".train.jsonl")
        test = corpus.replace(".jsonl", ".test.jsonl")
        code = dispatch(["train-sft", "--data", train, "--out", ckpt, "--steps", "2",
                         "--set", "sft.batch_size=8", *MODEL_FLAGS])
        assert code == 0
        assert _stdout_json(capsys)["steps"] == 2
        assert os.path.exists(str(tmp_path / "sft.loss.csv"))

        assert dispatch(["eval", "--model", ckpt, "--data", test]) == 0
        report = _stdout_json(capsys)
        assert report["n_episodes"] == 4
        assert set(report["unanswerability"]) == {"accuracy", "precision", "recall", "f1"}

    def test_train_ppo_needs_reward_model(self, corpus, tmp_path, capsys):
        """The learned reward source needs --reward-model."""
        ckpt = str(tmp_path / "sft.ckpt")
        train = corpus.replace(".jsonl", ".train.jsonl")
        assert dispatch(["train-sft", "--data", train, "--out", ckpt, "--steps", "1", *MODEL_FLAGS]) == 0
        code = dispatch(["train-ppo", "--data", train, "--model", ckpt, "--out", str(tmp_path / "ppo.ckpt"),
                         "--set", "ppo.reward_source=learned"])
        assert code == 2

    def test_corrupt_checkpoint(self, corpus, tmp_path, capsys):
        """Loading a file that is not a checkpoint exits 1 with an error line."""
        bogus = tmp_path / "bogus.ckpt"
        bogus.write_text("hello\n")
        assert dispatch(["eval", "--model", str(bogus), "--data", corpus]) == 1
        assert "error: DataFormatError" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        """A missing dataset exits 1."""
        assert dispatch(["eval", "--model", "nope.ckpt", "--data", str(tmp_path / "missing.jsonl")]) == 1
        assert "error: FileNotFoundError" in capsys.readouterr().err

    def test_selftest_passes(self, capsys):
        """Every gradient check, closed-form value and metric oracle passes."""
        assert dispatch(["selftest"]) == 0
        summary = _stdout_json(capsys)
        assert summary["passed"]
        assert summary["failures"] == []

    def test_insufficient_pairs_single_line(self, corpus, tmp_path, capsys):
        """Too few preference pairs exits 1 with one error line and no traceback."""
        code = dispatch(["train-reward", "--data", corpus, "--out", str(tmp_path / "reward.ckpt"), *MODEL_FLAGS])
        assert code == 1
        err = capsys.readouterr().err
        assert "Traceback" not in err
        errors = [line for line in err.splitlines() if line.startswith("error: ")]
        assert len(errors) == 1
        assert errors[0].startswith("error: InsufficientDataError")

    def test_unexpected_exception_single_line(self, monkeypatch, capsys):
        """Exceptions outside the library's hierarchy still end in one error line."""
        def broken(args, sections):
            raise KeyError("lost")

        monkeypatch.setitem(cli.COMMANDS, "selftest", broken)
        assert dispatch(["selftest"]) == 1
        err = capsys.readouterr().err
        assert "Traceback" not in err
        assert [line for line in err.splitlines() if line.startswith("error: ")] == ["error: KeyError: 'lost'"]

    def test_reward_backbone_from_policy(self, tmp_path, capsys):
        """--init-model copies the policy backbone into the reward model."""
        data = str(tmp_path / "episodes.jsonl")
        assert dispatch(["gen-data", "--n", "100", "--seed", "4", "--out", data]) == 0
        policy_path = str(tmp_path / "sft.ckpt")
        assert dispatch(["train-sft", "--data", data, "--out", policy_path, "--steps", "1", *MODEL_FLAGS]) == 0
        reward_path = str(tmp_path / "reward.ckpt")
        code = dispatch(["train-reward", "--data", data, "--out", reward_path, "--steps", "0",
                         "--init-model", policy_path, *MODEL_FLAGS])
        assert code == 0
        capsys.readouterr()
        policy = load_model(policy_path, expected_kind="policy")
        reward = load_model(reward_path, expected_kind="reward")
        np.testing.assert_array_equal(reward.params["tok_emb"].data, policy.params["tok_emb"].data)

    def test_check_reports_failures(self, tmp_path, capsys):
        """check exits 0 while every available gate passes and 1 once one fails."""
        episodes = generate_dataset(DatasetSpec(n_episodes=40, na_ratio=0.5, seed=6))
        gold = build_report(episodes, [gold_target(e) for e in episodes])
        (tmp_path / "salu_sft").mkdir()
        gold.to_json(str(tmp_path / "salu_sft" / "metrics.json"))
        assert dispatch(["check", "--out", str(tmp_path)]) == 0
        summary = _stdout_json(capsys)
        assert summary["failed"] == 0
        assert os.path.exists(summary["paths"]["acceptance_csv"])

        (tmp_path / "qa_only").mkdir()
        gold.to_json(str(tmp_path / "qa_only" / "metrics.json"))
        assert dispatch(["check", "--out", str(tmp_path)]) == 1
        failed = [c["check"] for c in _stdout_json(capsys)["checks"] if c["status"] == "fail"]
        assert failed == ["QA-only hallucination rate"]

    def test_check_missing_directory(self, tmp_path, capsys):
        """check on a missing directory is a runtime failure."""
        assert dispatch(["check", "--out", str(tmp_path / "nowhere")]) == 1
        assert "error: ConfigError" in capsys.readouterr().err


# Run tests with: pytest tests/test_cli.py -v
if __name__ == '__main__':
    pytest.main([__file__, '-v'])
