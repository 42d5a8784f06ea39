"""
Unit tests for supervised fine-tuning.
Run with: pytest tests/
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math
from types import SimpleNamespace

import pytest
import numpy as np

from autodiff import Graph, backward, gradient_check
from corpus import DatasetSpec, generate_dataset
from errors import ConfigError
from selftest import SMALL_MODEL
from sft_trainer import SftConfig, loss_na, loss_qa, loss_sft, sft_terms, train_sft, validation_loss
from tiny_lm import LanguageModel, ModelConfig


@pytest.fixture(scope="module")
def episodes():
    return generate_dataset(DatasetSpec(n_episodes=60, na_ratio=0.5, seed=13))


def _model(seed=3):
    return LanguageModel(ModelConfig(seed=seed, **SMALL_MODEL))


def _flat_report():
    return SimpleNamespace(overall_accuracy=0.5, unanswerability_f1=0.0)


class TestLosses:
    """Tests for L_QA, L_NA and L_SFT."""

    def test_uniform_model_loss(self, episodes):
        """With a zero output head, L_QA of a k-token target is k ln 64."""
        model = _model()
        model.params["lm_head.w"].data = np.zeros_like(model.params["lm_head.w"].data)
        answerable = next(e for e in episodes if e.answerable)
        assert loss_qa(model, answerable).item() == pytest.approx(2 * math.log(64), abs=1e-9)

    def test_wrong_episode_kind(self, episodes):
        """L_QA needs an answerable episode and L_NA an unanswerable one."""
        model = _model()
        answerable = next(e for e in episodes if e.answerable)
        unanswerable = next(e for e in episodes if not e.answerable)
        with pytest.raises(ValueError):
            loss_qa(model, unanswerable)
        with pytest.raises(ValueError):
            loss_na(model, answerable)

    def test_sft_weighting(self, episodes):
        """L_SFT = alpha * mean L_QA + beta * mean L_NA over the batch."""
        model = _model()
        batch = episodes[:10]
        qa = np.mean([loss_qa(model, e).item() for e in batch if e.answerable])
        na = np.mean([loss_na(model, e).item() for e in batch if not e.answerable])
        total = loss_sft(model, batch, 0.7, 1.3).item()
        assert total == pytest.approx(0.7 * qa + 1.3 * na, rel=1e-10)

    def test_beta_zero_ignores_unanswerables(self, episodes):
        """With beta = 0 only answerable episodes contribute."""
        model = _model()
        batch = episodes[:10]
        qa = np.mean([loss_qa(model, e).item() for e in batch if e.answerable])
        assert loss_sft(model, batch, 1.0, 0.0).item() == pytest.approx(qa, rel=1e-10)

    def test_terms_reported(self, episodes):
        """sft_terms returns the loss with its per-kind means."""
        model = _model()
        loss, l_qa, l_na = sft_terms(Graph(), model, episodes[:10], 1.0, 1.0)
        assert loss.item() == pytest.approx(l_qa + l_na, rel=1e-10)

    def test_records_on_caller_graph(self, episodes):
        """A fresh caller graph receives the nodes and backward reaches the parameters."""
        model = _model()
        answerable = next(e for e in episodes if e.answerable)
        g = Graph()
        loss = loss_qa(model, answerable, g)
        assert len(g) > 0
        grads = backward(g, loss)
        assert any(np.abs(grad).sum() > 0 for grad in model.params.grads_by_name(grads).values())

    def test_gradient_check(self, episodes):
        """L_SFT gradients match finite differences."""
        model = _model()
        err = gradient_check(
            lambda g: loss_sft(model, episodes[:4], 1.0, 1.0, g),
            model.params.tensors(),
            max_checks_per_tensor=2,
        )
        assert err < 1e-4


class TestConfig:
    """Tests for SFT hyperparameter validation."""

    def test_negative_weights(self):
        """Negative alpha or beta is rejected."""
        with pytest.raises(ConfigError):
            SftConfig(alpha=-1.0)

    def test_both_zero(self):
        """alpha + beta must be positive."""
        with pytest.raises(ConfigError):
            SftConfig(alpha=0.0, beta=0.0)


class TestTraining:
    """Tests for the training loop."""

    def test_loss_decreases(self, episodes):
        """A few dozen steps lower the held-out loss."""
        model = _model()
        cfg = SftConfig(lr=1e-2, batch_size=16, max_steps=40, log_every=20, seed=1)
        before = validation_loss(model, episodes[40:], cfg)
        result = train_sft(model, episodes[:40], [], cfg)
        assert validation_loss(result.model, episodes[40:], cfg) < before
        assert list(result.curve.columns) == ["step", "l_sft", "l_qa_mean", "l_na_mean"]

    def test_deterministic(self, episodes):
        """Same seed, same curve."""
        cfg = SftConfig(lr=1e-2, batch_size=8, max_steps=5, seed=2)
        first = train_sft(_model(), episodes[:20], [], cfg).curve
        second = train_sft(_model(), episodes[:20], [], cfg).curve
        assert first.equals(second)

    def test_best_step_restored(self, episodes):
        """Validation history starts at step 0 and the best step is recorded."""
        cfg = SftConfig(lr=1e-2, batch_size=16, max_steps=20, eval_every=10, patience=1, seed=3)
        result = train_sft(_model(), episodes[:40], episodes[40:], cfg)
        assert result.validation["step"].iloc[0] == 0
        assert result.best_step in set(result.validation["step"])

    def test_progress_on_loss_alone_keeps_training(self, episodes, monkeypatch):
        """A falling validation loss resets patience even when accuracy is flat."""
        losses = iter(np.linspace(10.0, 1.0, 7))
        monkeypatch.setattr("sft_trainer.evaluate_model", lambda *a, **k: (_flat_report(), None))
        monkeypatch.setattr("sft_trainer.validation_loss", lambda *a, **k: float(next(losses)))
        cfg = SftConfig(lr=1e-2, batch_size=8, max_steps=30, eval_every=5, patience=1, seed=4)
        result = train_sft(_model(), episodes[:40], episodes[40:], cfg)
        assert list(result.validation["step"]) == [0, 5, 10, 15, 20, 25, 30]
        assert result.best_step == 30

    def test_no_progress_stops(self, episodes, monkeypatch):
        """Flat accuracy and flat loss stop training after `patience` evaluations."""
        monkeypatch.setattr("sft_trainer.evaluate_model", lambda *a, **k: (_flat_report(), None))
        monkeypatch.setattr("sft_trainer.validation_loss", lambda *a, **k: 3.0)
        cfg = SftConfig(lr=1e-2, batch_size=8, max_steps=30, eval_every=5, patience=2, seed=4)
        result = train_sft(_model(), episodes[:40], episodes[40:], cfg)
        assert list(result.validation["step"]) == [0, 5, 10]
        assert result.best_step == 0
        assert len(result.curve) == 10

    def test_clipped_warmup_run(self, episodes):
        """Warmup with gradient clipping trains without error and still learns."""
        model = _model()
        cfg = SftConfig(lr=1e-2, batch_size=16, max_steps=40, warmup_steps=10, max_grad_norm=1.0, seed=1)
        before = validation_loss(model, episodes[40:], cfg)
        result = train_sft(model, episodes[:40], [], cfg)
        assert validation_loss(result.model, episodes[40:], cfg) < before

    def test_empty_training_set(self):
        """Training needs episodes."""
        with pytest.raises(ValueError):
            train_sft(_model(), [], [])


# Run tests with: pytest tests/test_sft_trainer.py -v
if __name__ == '__main__':
    pytest.main([__file__, '-v'])
