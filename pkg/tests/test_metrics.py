"""
Unit tests for answerability evaluation metrics.
Run with: pytest tests/
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import json

import pytest
import numpy as np

from corpus import DatasetSpec, answer_response, generate_dataset, gold_target
from errors import ConfigError
from metrics import (
    EvalConfig,
    MetricsReport,
    Outcome,
    build_report,
    classify_response,
    composition_sweep,
    error_breakdown,
    evaluate_model,
    hallucination_rate,
    token_f1,
    unanswerability_prf,
)
from selftest import metric_oracle_mismatches
from tiny_lm import ABSTENTION, VOCAB, LanguageModel, ModelConfig, TokenSequence, Vocab


@pytest.fixture(scope="module")
def episodes():
    return generate_dataset(DatasetSpec(n_episodes=40, na_ratio=0.5, seed=9))


def _wrong_value(episode):
    return next(v for v in VOCAB.values if v != episode.gold)


def _absent_value(episode):
    return next(v for v in VOCAB.values if v not in episode.passage_values())


class TestClassification:
    """Tests for response classification."""

    def test_five_outcomes(self, episodes):
        """Each (label, response kind) combination maps to its outcome."""
        a = next(e for e in episodes if e.answerable)
        u = next(e for e in episodes if not e.answerable)
        assert classify_response(a, gold_target(a)) is Outcome.CORRECT_ANSWER
        assert classify_response(a, answer_response(_wrong_value(a))) is Outcome.WRONG_ANSWER
        assert classify_response(a, ABSTENTION) is Outcome.OVER_ABSTENTION
        assert classify_response(u, ABSTENTION) is Outcome.CORRECT_ABSTENTION
        assert classify_response(u, answer_response("V00")) is Outcome.HALLUCINATION

    def test_abstention_needs_exact_match(self, episodes):
        """NA followed by more tokens is an answer attempt, not an abstention."""
        u = next(e for e in episodes if not e.answerable)
        response = TokenSequence((Vocab.NA, VOCAB.id("V01"), Vocab.EOS))
        assert classify_response(u, response) is Outcome.HALLUCINATION

    def test_bare_eos_is_an_attempt(self, episodes):
        """A bare EOS on an unanswerable episode counts as a hallucination."""
        u = next(e for e in episodes if not e.answerable)
        assert classify_response(u, TokenSequence((Vocab.EOS,))) is Outcome.HALLUCINATION


class TestUnanswerabilityMetrics:
    """Tests for precision, recall and F1 on the unanswerable class."""

    def test_worked_example(self):
        """3 TP, 1 FP, 1 FN, 5 TN."""
        outcomes = (
            [Outcome.CORRECT_ABSTENTION] * 3 + [Outcome.OVER_ABSTENTION]
            + [Outcome.HALLUCINATION] + [Outcome.CORRECT_ANSWER] * 5
        )
        prf, flags = unanswerability_prf(outcomes)
        assert prf["precision"] == pytest.approx(0.75)
        assert prf["recall"] == pytest.approx(0.75)
        assert prf["f1"] == pytest.approx(0.75)
        assert prf["accuracy"] == pytest.approx(0.8)
        assert flags == []

    def test_never_abstains(self):
        """No predicted positives: precision 0 and a degenerate flag."""
        prf, flags = unanswerability_prf([Outcome.HALLUCINATION, Outcome.CORRECT_ANSWER])
        assert prf["precision"] == 0.0
        assert "unanswerability_precision_degenerate" in flags

    def test_matches_brute_force(self):
        """sklearn-based metrics match the brute-force references on random multisets."""
        assert metric_oracle_mismatches(n_multisets=300, n_pairs=50, seed=4) == []

    def test_empty_rejected(self):
        """At least one outcome is required."""
        with pytest.raises(ValueError):
            unanswerability_prf([])


class TestAnswerMetrics:
    """Tests for token F1 and the hallucination rate."""

    def test_token_f1(self):
        """Partial overlap follows the SQuAD-style formula."""
        assert token_f1([1, 2], [2, 3]) == pytest.approx(0.5)
        assert token_f1([1], [1]) == 1.0
        assert token_f1([1], [2]) == 0.0
        assert token_f1([], []) == 1.0

    def test_hallucination_rate(self):
        """Share of unanswerable episodes answered anyway."""
        outcomes = [Outcome.HALLUCINATION, Outcome.CORRECT_ABSTENTION, Outcome.CORRECT_ABSTENTION,
                    Outcome.WRONG_ANSWER]
        assert hallucination_rate(outcomes) == pytest.approx(1 / 3)

    def test_hallucination_rate_undefined(self):
        """Without unanswerable episodes the rate is undefined."""
        with pytest.raises(ValueError):
            hallucination_rate([Outcome.CORRECT_ANSWER])


class TestReport:
    """Tests for the full metrics report."""

    def test_oracle_responses(self, episodes):
        """Gold responses score perfectly across the board."""
        report = build_report(episodes, [gold_target(e) for e in episodes])
        assert report.overall_accuracy == 1.0
        assert report.unanswerability_f1 == 1.0
        assert report.answer_em == 1.0
        assert report.hallucination_rate == 0.0
        assert report.error_breakdown == {}

    def test_always_abstain(self, episodes):
        """Abstaining everywhere: recall 1, overall accuracy equals the NA share."""
        report = build_report(episodes, [ABSTENTION] * len(episodes))
        assert report.unanswerability_recall == 1.0
        assert report.overall_accuracy == pytest.approx(0.5)
        assert "answer_quality_degenerate" in report.flags
        assert report.error_breakdown == {"over_abstention": 20}

    def test_error_breakdown_split(self, episodes):
        """Copied passage values are subtle; absent values are fabrications."""
        u = [e for e in episodes if not e.answerable][:2]
        copied = answer_response(sorted(u[0].passage_values())[0])
        absent = answer_response(_absent_value(u[1]))
        counts = error_breakdown(u, [copied, absent])
        assert counts == {"subtle_unanswerability": 1, "unsupported_fabrication": 1}

    def test_json_round_trip(self, episodes, tmp_path):
        """Reports reload from their JSON form."""
        report = build_report(episodes, [ABSTENTION] * len(episodes), {"arm": "x"})
        path = str(tmp_path / "m.json")
        report.to_json(path)
        with open(path) as f:
            assert MetricsReport.from_dict(json.load(f)) == report

    def test_outcome_counts_cover_all(self, episodes):
        """Every outcome appears in the counts, zeros included."""
        report = build_report(episodes, [gold_target(e) for e in episodes])
        assert set(report.outcome_counts) == {o.value for o in Outcome}
        assert sum(report.outcome_counts.values()) == len(episodes)

    def test_markdown_three_decimals(self, episodes):
        """Markdown cells use three decimals."""
        report = build_report(episodes, [gold_target(e) for e in episodes])
        assert "| 1.000 |" in report.to_markdown()


class TestEvaluation:
    """Tests for model evaluation and the composition sweep."""

    def test_evaluate_model(self, episodes):
        """evaluate_model returns one response per episode and a latency."""
        model = LanguageModel(ModelConfig(n_layers=1, d_model=8, n_heads=2, ffn_dim=16))
        report, responses = evaluate_model(model, episodes[:12], threads=2)
        assert len(responses) == 12
        assert report.n_episodes == 12
        assert report.latency_ms is not None

    def test_threads_do_not_change_results(self, episodes):
        """Threaded decoding matches single-threaded decoding."""
        model = LanguageModel(ModelConfig(n_layers=1, d_model=8, n_heads=2, ffn_dim=16))
        one, _ = evaluate_model(model, episodes, threads=1)
        many, _ = evaluate_model(model, episodes, threads=3)
        assert one.to_dict() == many.to_dict()

    def test_sweep_records_failures(self, episodes):
        """A failing cell is recorded and the sweep continues."""
        model = LanguageModel(ModelConfig(n_layers=1, d_model=8, n_heads=2, ffn_dim=16))

        def train_fn(train):
            if all(not e.answerable for e in train):
                raise RuntimeError("no answerable episodes")
            return model

        frame = composition_sweep(DatasetSpec(n_episodes=20, seed=1), train_fn, episodes, [0.5, 1.0])
        assert list(frame["na_ratio"]) == [0.5, 1.0]
        assert frame.loc[0, "error"] == ""
        assert "RuntimeError" in frame.loc[1, "error"]
        assert np.isnan(frame.loc[1, "overall_accuracy"])

    def test_eval_config_validation(self):
        """Bad evaluation settings are config errors."""
        with pytest.raises(ConfigError):
            EvalConfig(n_episodes=3)


# Run tests with: pytest tests/test_metrics.py -v
if __name__ == '__main__':
    pytest.main([__file__, '-v'])
