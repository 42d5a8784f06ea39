"""
Unit tests for the tiny transformer language model.
Run with: pytest tests/
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

import pytest
import numpy as np

from autodiff import Graph
from corpus import DatasetSpec, generate_dataset, render_prompt
from errors import ConfigError, DataFormatError, SequenceError
from selftest import SMALL_MODEL, certain_policy
from tiny_lm import (
    ABSTENTION,
    VOCAB,
    LanguageModel,
    ModelConfig,
    TokenSequence,
    Vocab,
    load_model,
    pack_pairs,
    read_checkpoint,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def model():
    return LanguageModel(ModelConfig(seed=11, **SMALL_MODEL))


@pytest.fixture(scope="module")
def prompts():
    episodes = generate_dataset(DatasetSpec(n_episodes=10, seed=5))
    return [render_prompt(e) for e in episodes]


class TestVocab:
    """Tests for the fixed vocabulary."""

    def test_size_and_specials(self):
        """64 tokens with the reserved ids in place."""
        assert len(VOCAB) == 64
        assert VOCAB.token(Vocab.PAD) == "<PAD>"
        assert VOCAB.token(Vocab.NA) == "<NA>"
        assert len(VOCAB.keys) == 16 and len(VOCAB.values) == 16

    def test_unknown_token(self):
        """Unknown tokens raise SequenceError."""
        with pytest.raises(SequenceError):
            VOCAB.id("banana")


class TestTokenSequence:
    """Tests for sequence validation."""

    def test_response_needs_eos(self):
        """Responses must be EOS-terminated; prompts need not be."""
        with pytest.raises(SequenceError):
            TokenSequence((VOCAB.id("V01"),))
        TokenSequence((Vocab.CLS, Vocab.SEP), role="prompt")

    def test_empty_rejected(self):
        """Empty sequences are rejected."""
        with pytest.raises(SequenceError):
            TokenSequence(())

    def test_out_of_vocab_rejected(self):
        """Ids outside the vocabulary are rejected."""
        with pytest.raises(SequenceError):
            TokenSequence((64, Vocab.EOS))


class TestModelConfig:
    """Tests for architecture validation."""

    def test_heads_must_divide_width(self):
        """d_model not divisible by n_heads is a config error."""
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=3)

    def test_vocab_size_fixed(self):
        """vocab_size must match the vocabulary."""
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=32)


class TestForward:
    """Tests for logits and log-probabilities."""

    def test_forward_logits_shape(self, model, prompts):
        """One row of V logits per prefix position."""
        logits = model.forward_logits(prompts[0])
        assert logits.shape == (len(prompts[0]), 64)

    def test_causality(self, model, prompts):
        """Appending tokens never changes logits at earlier positions."""
        prefix = prompts[0]
        longer = prefix.ids + (VOCAB.id("V03"), VOCAB.id("V07"))
        short = model.forward_logits(prefix)
        long = model.forward_logits(longer)
        np.testing.assert_allclose(long[: len(prefix)], short, atol=1e-12)

    def test_batched_log_probs_match_single(self, model, prompts):
        """Batched teacher forcing with right padding matches one-at-a-time scoring."""
        responses = [ABSTENTION, TokenSequence((VOCAB.id("V02"), Vocab.EOS)), TokenSequence((Vocab.EOS,))]
        packed = pack_pairs(prompts[:3], responses, model.config.max_seq_len)
        batched = model.sequence_log_probs(Graph(), packed).data
        single = [model.sequence_log_prob(p, r) for p, r in zip(prompts[:3], responses)]
        np.testing.assert_allclose(batched, single, atol=1e-10)

    def test_log_prob_matches_manual(self, model, prompts):
        """Sequence log-probability equals the sum of per-step log-softmax entries."""
        prompt, response = prompts[1], ABSTENTION
        logits = model.forward_logits(prompt.ids + response.ids[:-1])
        total = 0.0
        for j, tok in enumerate(response.ids):
            row = logits[len(prompt) - 1 + j]
            total += row[tok] - (row.max() + math.log(np.exp(row - row.max()).sum()))
        assert model.sequence_log_prob(prompt, response) == pytest.approx(total, abs=1e-10)

    def test_confidence_is_mean_log_prob(self, model, prompts):
        """S(Y|X) is the log-probability divided by the response length."""
        response = TokenSequence((VOCAB.id("V02"), Vocab.EOS))
        lp = model.sequence_log_prob(prompts[0], response)
        assert model.confidence_score(prompts[0], response) == pytest.approx(lp / 2)

    def test_certain_model_has_zero_confidence(self, prompts):
        """A unit-probability response has confidence exactly 0."""
        sure = certain_policy(Vocab.EOS)
        assert sure.confidence_score(prompts[0], TokenSequence((Vocab.EOS,))) == 0.0

    def test_value_estimate_matches_heads(self, prompts):
        """V(X) from the prompt alone equals the value the shared forward pass reads."""
        policy = LanguageModel(ModelConfig(seed=12, **SMALL_MODEL))
        rng = np.random.default_rng(12)
        policy.params["value_head.w"].data = rng.normal(0.0, 0.5, policy.params["value_head.w"].shape)
        policy.params["value_head.b"].data = np.array([0.25])
        packed = pack_pairs(prompts[:3], [ABSTENTION] * 3, policy.config.max_seq_len)
        _, values = policy.heads(Graph(), packed)
        expected = [policy.value_estimate(p) for p in prompts[:3]]
        np.testing.assert_allclose(values.data, expected, atol=1e-10)
        assert len(set(np.round(expected, 8))) > 1

    def test_zero_value_head(self, model, prompts):
        """A freshly built value head estimates zero everywhere."""
        assert model.value_estimate(prompts[0]) == 0.0

    def test_overflow_raises(self, model):
        """Inputs longer than max_seq_len raise SequenceError."""
        with pytest.raises(SequenceError):
            model.forward_logits([Vocab.CLS] * (model.config.max_seq_len + 1))


class TestDecode:
    """Tests for greedy and sampled decoding."""

    def test_responses_end_with_eos(self, model, prompts):
        """Every decoded response is EOS-terminated within max_new tokens."""
        for response in model.decode_batch(prompts, "sample", 1.0, list(range(len(prompts))), 3):
            assert response.ids[-1] == Vocab.EOS
            assert len(response) <= 3

    def test_forced_eos(self, prompts):
        """A model that never emits EOS gets one forced in the last slot."""
        stubborn = certain_policy(VOCAB.id("V05"))
        response = stubborn.decode(prompts[0], max_new=4)
        assert response.ids == (VOCAB.id("V05"),) * 3 + (Vocab.EOS,)

    def test_greedy_is_deterministic(self, model, prompts):
        """Greedy decoding repeats exactly."""
        assert model.decode_batch(prompts) == model.decode_batch(prompts)

    def test_sampling_independent_of_batch(self, model, prompts):
        """A row's sample depends only on its own seed."""
        alone = model.decode(prompts[2], "sample", 1.0, seed=99, max_new=4)
        batch = model.decode_batch(prompts[:4], "sample", 1.0, [1, 2, 99, 4], 4)
        assert batch[2] == alone

    def test_cold_sampling_matches_greedy(self, model, prompts):
        """As the temperature goes to zero, sampling picks the greedy token."""
        greedy = model.decode_batch(prompts, max_new=4)
        cold = model.decode_batch(prompts, "sample", 1e-8, list(range(len(prompts))), 4)
        assert cold == greedy

    def test_budget_overflow_raises(self, model, prompts):
        """A prompt plus decode budget past max_seq_len is rejected up front."""
        with pytest.raises(SequenceError):
            model.decode(prompts[0], max_new=model.config.max_seq_len)


class TestCheckpoint:
    """Tests for checkpoint persistence."""

    def test_round_trip_bit_exact(self, model, tmp_path):
        """Saved and reloaded parameters are bit-identical."""
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, str(path))
        loaded = load_model(str(path), expected_kind="policy")
        assert loaded.config == model.config
        for name, tensor in model.params.items():
            assert loaded.params[name].data.tobytes() == tensor.data.tobytes()

    def test_header_fields(self, model, tmp_path):
        """The header records the format version and model kind."""
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, str(path))
        header, tensors = read_checkpoint(str(path))
        assert header["format_version"] == "1"
        assert header["kind"] == "policy"
        assert set(tensors) == set(model.params)

    def test_truncated_file(self, model, tmp_path):
        """A truncated checkpoint raises DataFormatError."""
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 17])
        with pytest.raises(DataFormatError):
            load_model(str(path))

    def test_wrong_kind(self, model, tmp_path):
        """Loading a policy checkpoint as a reward model fails."""
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, str(path))
        with pytest.raises(DataFormatError):
            load_model(str(path), expected_kind="reward")


# Run tests with: pytest tests/test_tiny_lm.py -v
if __name__ == '__main__':
    pytest.main([__file__, '-v'])
