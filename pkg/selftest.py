"""
Self-checks run by `cli.py selftest`: finite-difference gradient checks for
every op kind and every trainable loss, closed-form loss values, and metric
oracles against brute-force references.
"""

import logging
import math
from collections import Counter
from typing import Callable, Dict, List, Tuple

import numpy as np

from autodiff import Graph, Tensor, gradient_check
from corpus import DatasetSpec, generate_dataset, gold_target, render_prompt, synthesize_preferences
from metrics import Outcome, hallucination_rate, token_f1, unanswerability_prf
from ppo import PpoConfig, clipped_surrogate, collect_rollouts, ppo_objective, value_loss
from reward_model import RewardModel, RulesReward, pair_losses, preference_loss
from sft_trainer import loss_na, loss_qa, loss_sft
from tiny_lm import VOCAB, LanguageModel, ModelConfig, TokenSequence, Vocab

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-4
PPO_GRAD_TOL = 1e-3
CHECKS_PER_TENSOR = 3

SMALL_MODEL = dict(n_layers=1, d_model=8, n_heads=2, ffn_dim=16, max_seq_len=64, init_std=0.3)


def _episodes(n: int = 12, seed: int = 3):
    return generate_dataset(DatasetSpec(n_episodes=n, na_ratio=0.5, seed=seed))


def _policy(seed: int = 1) -> LanguageModel:
    model = LanguageModel(ModelConfig(seed=seed, **SMALL_MODEL))
    rng = np.random.default_rng(seed)
    # value head starts at zero; give it something to differentiate
    for name in ("value_head.w", "value_head.b"):
        model.params[name].data = rng.normal(0.0, 0.3, model.params[name].shape)
    return model


def _reward_model(seed: int = 2) -> RewardModel:
    model = RewardModel(ModelConfig(seed=seed, **SMALL_MODEL))
    rng = np.random.default_rng(seed)
    for name in ("score_head.w", "score_head.b"):
        model.params[name].data = rng.normal(0.0, 0.3, model.params[name].shape)
    return model


# ---------------------------------------------------------------------------
# Op-level gradient checks
# ---------------------------------------------------------------------------

def op_gradient_errors() -> Dict[str, float]:
    """Max relative error per op kind on small random inputs."""
    rng = np.random.default_rng(0)

    def leaf(*shape, scale=1.0):
        return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

    a, b = leaf(3, 4), leaf(4, 5)
    x, y = leaf(3, 4), leaf(3, 4)
    q, k = leaf(2, 3, 4), leaf(2, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    gain, bias = leaf(4), leaf(4)
    emb = leaf(6, 4)
    ids = np.array([[0, 2, 5], [1, 1, 3]])
    targets = np.array([1, 0, 3])
    weights = rng.normal(size=(3, 4))

    def weighted(graph: Graph, t: Tensor) -> Tensor:
        return graph.sum(graph.mul(t, Tensor(weights[: t.shape[0], : t.shape[-1]])))

    cases: Dict[str, Tuple[Callable[[Graph], Tensor], List[Tensor]]] = {
        "matmul": (lambda g: graph_sum(g, g.matmul(a, b)), [a, b]),
        "matmul_transpose_b": (lambda g: graph_sum(g, g.matmul(q, k, transpose_b=True)), [q, k]),
        "add": (lambda g: weighted(g, g.add(x, gain)), [x, gain]),
        "mul": (lambda g: weighted(g, g.mul(x, y)), [x, y]),
        "softmax": (lambda g: weighted(g, g.softmax(x)), [x]),
        "log": (lambda g: weighted(g, g.log(pos)), [pos]),
        "exp": (lambda g: weighted(g, g.exp(x)), [x]),
        "embedding": (lambda g: graph_sum(g, g.mul(g.embedding(emb, ids), g.embedding(emb, ids))), [emb]),
        "layer_norm": (lambda g: weighted(g, g.layer_norm(x, gain, bias)), [x, gain, bias]),
        "gelu": (lambda g: weighted(g, g.gelu(x)), [x]),
        "cross_entropy": (lambda g: g.sum(g.cross_entropy(x, targets)), [x]),
        "mean": (lambda g: g.mean(g.mul(x, y)), [x, y]),
        "slice": (lambda g: weighted(g, g.slice(x, (np.array([0, 2, 2]), slice(None)))), [x]),
        "concat": (lambda g: graph_sum(g, g.mul(g.concat([x, y], axis=-1), g.concat([y, x], axis=-1))), [x, y]),
        "clip": (lambda g: weighted(g, g.clip(x, -0.37, 0.41)), [x]),
        "minimum": (lambda g: weighted(g, g.minimum(x, y)), [x, y]),
    }
    return {name: gradient_check(fn, tensors) for name, (fn, tensors) in cases.items()}


def graph_sum(graph: Graph, t: Tensor) -> Tensor:
    return graph.sum(graph.mul(t, t))


# ---------------------------------------------------------------------------
# Loss-level gradient checks
# ---------------------------------------------------------------------------

def loss_gradient_errors() -> Dict[str, float]:
    """Max relative error for every trainable loss on a small model."""
    episodes = _episodes()
    answerable = next(e for e in episodes if e.answerable)
    unanswerable = next(e for e in episodes if not e.answerable)
    policy = _policy()
    params = policy.params.tensors()

    def check(fn):
        return gradient_check(fn, params, max_checks_per_tensor=CHECKS_PER_TENSOR)

    errors = {
        "loss_qa": check(lambda g: loss_qa(policy, answerable, g)),
        "loss_na": check(lambda g: loss_na(policy, unanswerable, g)),
        "loss_sft": check(lambda g: loss_sft(policy, episodes[:6], 1.0, 1.0, g)),
    }

    reward_net = _reward_model()
    pairs = synthesize_preferences(episodes[:4], 1, seed=0)
    errors["preference_loss"] = gradient_check(
        lambda g: g.mean(pair_losses(g, reward_net, pairs)),
        reward_net.params.tensors(),
        max_checks_per_tensor=CHECKS_PER_TENSOR,
    )

    cfg = PpoConfig(max_new_tokens=3, kl_coef=0.1)
    batch = collect_rollouts(policy, episodes[:6], cfg, RulesReward(), seed=0)
    current = policy.clone()
    rng = np.random.default_rng(5)
    for _, tensor in current.params.items():
        tensor.data = tensor.data + rng.normal(0.0, 0.01, tensor.shape)
    current_params = current.params.tensors()
    errors["ppo_objective"] = gradient_check(
        lambda g: ppo_objective(current, batch, cfg, g)[0],
        current_params,
        max_checks_per_tensor=CHECKS_PER_TENSOR,
    )
    errors["value_loss"] = gradient_check(
        lambda g: value_loss(current, batch, g),
        current_params,
        max_checks_per_tensor=CHECKS_PER_TENSOR,
    )
    return errors


# ---------------------------------------------------------------------------
# Closed-form values
# ---------------------------------------------------------------------------

def analytic_checks() -> Dict[str, bool]:
    episodes = _episodes()
    answerable = next(e for e in episodes if e.answerable)

    uniform = _policy()
    uniform.params["lm_head.w"].data = np.zeros_like(uniform.params["lm_head.w"].data)
    k = len(gold_target(answerable).ids)
    uniform_qa = loss_qa(uniform, answerable).item()

    reward_net = RewardModel(ModelConfig(seed=4, **SMALL_MODEL))
    pair = synthesize_preferences([answerable], 1, seed=0)[0]
    equal_scores = preference_loss(reward_net, pair).item()

    certain = certain_policy(Vocab.EOS)
    prompt = render_prompt(answerable, certain.config.max_seq_len)
    confidence = certain.confidence_score(prompt, TokenSequence((Vocab.EOS,)))

    return {
        "uniform_loss_qa_is_k_ln_vocab": abs(uniform_qa - k * math.log(len(VOCAB))) < 1e-9,
        "equal_score_preference_loss_is_ln2": abs(equal_scores - math.log(2.0)) < 1e-12,
        "unit_probability_confidence_is_zero": confidence == 0.0,
        "clip_upper": clipped_surrogate(1.5, 1.0, 0.2) == 1.2,
        "clip_lower": clipped_surrogate(0.5, -1.0, 0.2) == -0.8,
    }


def certain_policy(token: int) -> LanguageModel:
    """A policy that puts probability exactly 1 on `token` at every position."""
    model = _policy()
    d = model.config.d_model
    model.params["ln_f.g"].data = np.zeros(d)
    bias = np.zeros(d)
    bias[0] = 1.0
    model.params["ln_f.b"].data = bias
    head = np.zeros((d, model.config.vocab_size))
    head[0, :] = -1e4
    head[0, token] = 1e4
    model.params["lm_head.w"].data = head
    return model


# ---------------------------------------------------------------------------
# Metric oracles
# ---------------------------------------------------------------------------

def _brute_force_prf(outcomes: List[Outcome]) -> Dict[str, float]:
    tp = sum(1 for o in outcomes if o.unanswerable and o.abstained)
    fp = sum(1 for o in outcomes if not o.unanswerable and o.abstained)
    fn = sum(1 for o in outcomes if o.unanswerable and not o.abstained)
    tn = len(outcomes) - tp - fp - fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": (tp + tn) / len(outcomes), "precision": precision, "recall": recall, "f1": f1}


def _hand_token_f1(gold: List[int], pred: List[int]) -> float:
    common, remaining = 0, list(gold)
    for tok in pred:
        if tok in remaining:
            remaining.remove(tok)
            common += 1
    if not gold or not pred:
        return float(gold == pred)
    if common == 0:
        return 0.0
    p, r = common / len(pred), common / len(gold)
    return 2 * p * r / (p + r)


def metric_oracle_mismatches(n_multisets: int = 1000, n_pairs: int = 50, seed: int = 0) -> List[str]:
    rng = np.random.default_rng(seed)
    kinds = list(Outcome)
    mismatches = []
    for trial in range(n_multisets):
        size = int(rng.integers(1, 40))
        outcomes = [kinds[i] for i in rng.integers(0, len(kinds), size)]
        prf, _ = unanswerability_prf(outcomes)
        expected = _brute_force_prf(outcomes)
        for key, value in expected.items():
            if not math.isclose(prf[key], value, rel_tol=0.0, abs_tol=1e-12):
                mismatches.append(f"multiset {trial}: {key} {prf[key]} != {value}")
        counts = Counter(outcomes)
        n_na = counts[Outcome.CORRECT_ABSTENTION] + counts[Outcome.HALLUCINATION]
        if n_na and not math.isclose(hallucination_rate(outcomes), counts[Outcome.HALLUCINATION] / n_na, abs_tol=1e-12):
            mismatches.append(f"multiset {trial}: hallucination rate")
    for trial in range(n_pairs):
        gold = list(rng.integers(0, 6, int(rng.integers(0, 5))))
        pred = list(rng.integers(0, 6, int(rng.integers(0, 5))))
        if not math.isclose(token_f1(gold, pred), _hand_token_f1(gold, pred), abs_tol=1e-12):
            mismatches.append(f"token pair {trial}: {gold} vs {pred}")
    return mismatches


def run_all() -> List[str]:
    """Run every self-check; returns a list of failure descriptions (empty on success)."""
    failures = []
    for name, err in op_gradient_errors().items():
        logger.info(f"op {name}: max rel err {err:.2e}")
        if err >= GRAD_TOL:
            failures.append(f"gradient check for op {name}: {err:.2e}")
    for name, err in loss_gradient_errors().items():
        tol = PPO_GRAD_TOL if name == "ppo_objective" else GRAD_TOL
        logger.info(f"loss {name}: max rel err {err:.2e}")
        if err >= tol:
            failures.append(f"gradient check for {name}: {err:.2e}")
    for name, ok in analytic_checks().items():
        if not ok:
            failures.append(f"closed-form check {name}")
    failures.extend(metric_oracle_mismatches())
    if failures:
        logger.error(f"{len(failures)} self-checks failed")
    else:
        logger.info("All self-checks passed")
    return failures
