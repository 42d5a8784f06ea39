"""
Confidence-shaped PPO for the answer-or-abstain policy.

Each response is one bandit-style action: it gets a single reward at the end,
a sequence-level probability ratio, and an advantage against the value head.
The KL penalty is exact over the vocabulary at every response position.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import config
from autodiff import AdamState, Graph, Tensor, adam_step, backward, clip_grad_norm
from corpus import Episode, render_prompt
from errors import (
    ConfigError,
    DivergenceError,
    InsufficientDataError,
    NonFiniteError,
    PolicyCollapseError,
    SequenceError,
)
from metrics import Outcome, classify_response
from reward_model import BaseRewardTable, base_reward
from tiny_lm import LanguageModel, PackedBatch, TokenSequence, pack_pairs

logger = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    clip_epsilon: float = config.PPO_DEFAULTS["clip_epsilon"]
    kl_coef: float = config.PPO_DEFAULTS["kl_coef"]
    lambda_abstain: float = config.PPO_DEFAULTS["lambda_abstain"]
    lambda_halluc: float = config.PPO_DEFAULTS["lambda_halluc"]
    rollout_batch: int = config.PPO_DEFAULTS["rollout_batch"]
    ppo_epochs: int = config.PPO_DEFAULTS["ppo_epochs"]
    iterations: int = config.PPO_DEFAULTS["iterations"]
    lr: float = config.PPO_DEFAULTS["lr"]
    value_loss_coef: float = config.PPO_DEFAULTS["value_loss_coef"]
    max_new_tokens: int = config.PPO_DEFAULTS["max_new_tokens"]
    sample_temperature: float = config.PPO_DEFAULTS["sample_temperature"]
    max_grad_norm: float = config.PPO_DEFAULTS["max_grad_norm"]
    kl_abort: float = config.PPO_DEFAULTS["kl_abort"]
    reward_source: str = config.PPO_DEFAULTS["reward_source"]
    log_every: int = config.PPO_DEFAULTS["log_every"]
    seed: int = config.PPO_DEFAULTS["seed"]

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ConfigError("ppo.clip_epsilon must lie in (0, 1)")
        if self.kl_coef < 0:
            raise ConfigError("ppo.kl_coef must be non-negative")
        if self.lambda_abstain < 0 or self.lambda_halluc < 0:
            raise ConfigError("ppo.lambda_abstain and ppo.lambda_halluc must be non-negative")
        if min(self.rollout_batch, self.ppo_epochs, self.max_new_tokens, self.log_every) < 1:
            raise ConfigError("ppo.rollout_batch, ppo_epochs, max_new_tokens and log_every must be positive")
        if self.iterations < 0 or self.lr <= 0 or self.sample_temperature <= 0:
            raise ConfigError("ppo.iterations, ppo.lr and ppo.sample_temperature are out of range")
        if self.reward_source not in ("rules", "learned"):
            raise ConfigError("ppo.reward_source must be 'rules' or 'learned'")


@dataclass
class Rollout:
    episode: Episode
    prompt: TokenSequence
    response: TokenSequence
    old_log_prob: float
    confidence: float          # S(Y|X), mean token log-probability
    base_reward: float
    reward: float              # shaped
    value: float
    advantage: float
    outcome: Outcome           # true outcome against gold
    shaping_outcome: Optional[Outcome] = None


@dataclass
class RolloutBatch:
    rollouts: List[Rollout]
    packed: Optional[PackedBatch]
    old_token_log_probs: Optional[np.ndarray]   # (N, V) log pi_old(.|prefix) per response token
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.rollouts)

    @property
    def advantages(self) -> np.ndarray:
        return np.array([r.advantage for r in self.rollouts])

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts])

    @property
    def old_log_probs(self) -> np.ndarray:
        return np.array([r.old_log_prob for r in self.rollouts])


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def clipped_surrogate(ratio: float, advantage: float, epsilon: float) -> float:
    """min(r*A, clip(r, 1-eps, 1+eps)*A) for one rollout."""
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


def shape_reward(
    r0: float,
    outcome: Optional[Outcome],
    confidence: float,
    lambda_abstain: float,
    lambda_halluc: float,
) -> float:
    """Scale correct abstentions and hallucinations by (1 + lambda * exp(S)); leave the rest alone."""
    if confidence > 1e-12:
        raise ValueError(f"confidence score must be <= 0, got {confidence}")
    c = float(np.exp(min(confidence, 0.0)))
    if outcome is Outcome.CORRECT_ABSTENTION:
        return r0 * (1.0 + lambda_abstain * c)
    if outcome is Outcome.HALLUCINATION:
        return r0 * (1.0 + lambda_halluc * c)
    return r0


def shaped_reward(
    episode: Episode,
    response: TokenSequence,
    confidence: float,
    ppo_config: Optional[PpoConfig] = None,
    table: Optional[BaseRewardTable] = None,
) -> float:
    """Rule-table reward for (episode, response) with confidence shaping applied."""
    cfg = ppo_config or PpoConfig()
    return shape_reward(
        base_reward(episode, response, table),
        classify_response(episode, response),
        confidence,
        cfg.lambda_abstain,
        cfg.lambda_halluc,
    )


def collect_rollouts(
    policy_old: LanguageModel,
    episodes: Sequence[Episode],
    ppo_config: PpoConfig,
    reward_source,
    seed,
) -> RolloutBatch:
    """
    Sample one response per episode from the snapshot policy and score it.

    Episodes whose prompt plus decode budget would overflow the context are
    skipped and counted.

    Args:
        policy_old: Frozen snapshot the responses are sampled from
        episodes: Episodes to roll out
        ppo_config: Sampling and shaping settings
        reward_source: RulesReward or LearnedReward
        seed: Base seed; row i samples with [*seed, episode id]

    Returns:
        RolloutBatch in episode order
    """
    cfg = ppo_config
    max_len = policy_old.config.max_seq_len
    kept, prompts = [], []
    for episode in episodes:
        try:
            prompt = render_prompt(episode, max_len)
        except SequenceError:
            continue
        if len(prompt) + cfg.max_new_tokens - 1 > max_len:
            continue
        kept.append(episode)
        prompts.append(prompt)
    skipped = len(episodes) - len(kept)
    if skipped:
        logger.warning(f"Skipped {skipped} rollouts that would overflow max_seq_len={max_len}")
    if not kept:
        return RolloutBatch([], None, None, skipped)

    base = list(np.atleast_1d(seed))
    responses = policy_old.decode_batch(
        prompts, "sample", cfg.sample_temperature,
        [base + [e.id] for e in kept], cfg.max_new_tokens,
    )
    packed = pack_pairs(prompts, responses, max_len)
    logits, values = policy_old.heads(Graph(), packed)
    token_lp = _log_softmax(logits.data)
    picked = token_lp[np.arange(len(packed.targets)), packed.targets]
    seq_lp = packed.segment @ picked
    confidence = seq_lp / packed.response_lengths

    scored = reward_source(kept, prompts, responses)
    rollouts = []
    for i, (episode, prompt, response) in enumerate(zip(kept, prompts, responses)):
        r0, shaping_outcome = scored[i]
        reward = shape_reward(r0, shaping_outcome, min(confidence[i], 0.0),
                              cfg.lambda_abstain, cfg.lambda_halluc)
        value = float(values.data[i])
        rollouts.append(Rollout(
            episode=episode,
            prompt=prompt,
            response=response,
            old_log_prob=float(seq_lp[i]),
            confidence=float(confidence[i]),
            base_reward=float(r0),
            reward=reward,
            value=value,
            advantage=reward - value,
            outcome=classify_response(episode, response),
            shaping_outcome=shaping_outcome,
        ))
    return RolloutBatch(rollouts, packed, token_lp, skipped)


def _objective_from_logits(
    graph: Graph,
    token_logits: Tensor,
    batch: RolloutBatch,
    cfg: PpoConfig,
) -> Tuple[Tensor, Dict[str, float]]:
    packed = batch.packed
    segment = Tensor(packed.segment)
    token_lp = graph.scale(graph.cross_entropy(token_logits, packed.targets), -1.0)
    seq_lp = graph.sum(graph.mul(token_lp, segment), axis=1)

    log_ratio = graph.sub(seq_lp, Tensor(batch.old_log_probs))
    gap = log_ratio.data
    flagged = int(np.sum(np.abs(gap) > config.MAX_LOG_RATIO))
    if flagged:
        logger.warning(f"Clamped the probability ratio of {flagged} rollouts (log gap > {config.MAX_LOG_RATIO})")
    ratio = graph.exp(graph.clip(log_ratio, -config.MAX_LOG_RATIO, config.MAX_LOG_RATIO))
    adv = Tensor(batch.advantages)
    eps = cfg.clip_epsilon
    surrogate = graph.minimum(
        graph.mul(ratio, adv),
        graph.mul(graph.clip(ratio, 1.0 - eps, 1.0 + eps), adv),
    )
    policy_term = graph.mean(surrogate)

    # exact KL(pi_theta || pi_old) per response token, averaged per rollout then over the batch
    probs = graph.softmax(token_logits)
    log_probs = graph.log(probs)
    kl_tokens = graph.sum(graph.mul(probs, graph.sub(log_probs, Tensor(batch.old_token_log_probs))), axis=-1)
    per_position = Tensor(packed.segment / packed.response_lengths[:, None])
    kl = graph.mean(graph.sum(graph.mul(kl_tokens, per_position), axis=1))

    objective = graph.sub(policy_term, graph.scale(kl, cfg.kl_coef))
    r = ratio.data
    stats = {
        "objective": objective.item(),
        "policy_term": policy_term.item(),
        "mean_kl": kl.item(),
        "clip_frac": float(np.mean((r < 1.0 - eps) | (r > 1.0 + eps))),
        "flagged": flagged,
    }
    return objective, stats


def ppo_objective(
    policy: LanguageModel,
    batch: RolloutBatch,
    ppo_config: Optional[PpoConfig] = None,
    graph: Optional[Graph] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """
    Clipped surrogate minus the KL penalty, to be maximized.

    Returns:
        (objective scalar tensor, stats with mean_kl, clip_frac, flagged)
    """
    if not len(batch):
        raise InsufficientDataError("ppo_objective needs a non-empty batch")
    graph = Graph() if graph is None else graph
    logits, _ = policy.heads(graph, batch.packed)
    return _objective_from_logits(graph, logits, batch, ppo_config or PpoConfig())


def _value_loss_from(graph: Graph, values: Tensor, batch: RolloutBatch) -> Tensor:
    residual = graph.sub(values, Tensor(batch.rewards))
    return graph.mean(graph.mul(residual, residual))


def value_loss(policy: LanguageModel, batch: RolloutBatch, graph: Optional[Graph] = None) -> Tensor:
    """Mean squared error between V(X) and the shaped reward."""
    if not len(batch):
        raise InsufficientDataError("value_loss needs a non-empty batch")
    graph = Graph() if graph is None else graph
    _, values = policy.heads(graph, batch.packed)
    return _value_loss_from(graph, values, batch)


def ppo_loss(
    graph: Graph,
    policy: LanguageModel,
    batch: RolloutBatch,
    cfg: PpoConfig,
) -> Tuple[Tensor, Dict[str, float]]:
    """Loss to minimize: -objective + value_loss_coef * value_loss, from one forward pass."""
    logits, values = policy.heads(graph, batch.packed)
    objective, stats = _objective_from_logits(graph, logits, batch, cfg)
    v_loss = _value_loss_from(graph, values, batch)
    stats["value_loss"] = v_loss.item()
    loss = graph.sub(graph.scale(v_loss, cfg.value_loss_coef), objective)
    return loss, stats


STATS_COLUMNS = [
    "iter", "mean_reward", "halluc_rate", "mean_kl", "clip_frac",
    "mean_confidence_on_abstentions", "n_rollouts", "skipped",
]
ROLLOUT_COLUMNS = ["iter", "episode_id", "outcome", "confidence", "base_reward", "shaped_reward"]


@dataclass
class PpoResult:
    policy: LanguageModel
    stats: pd.DataFrame
    rollout_log: pd.DataFrame


def _iteration_stats(iteration: int, batch: RolloutBatch, kl_stats: Dict[str, float]) -> Dict:
    rollouts = batch.rollouts
    unanswerable = [r for r in rollouts if not r.episode.answerable]
    abstentions = [r for r in rollouts if r.outcome.abstained]
    return {
        "iter": iteration,
        "mean_reward": float(np.mean([r.reward for r in rollouts])),
        "halluc_rate": (
            float(np.mean([r.outcome is Outcome.HALLUCINATION for r in unanswerable]))
            if unanswerable else float("nan")
        ),
        "mean_kl": kl_stats["mean_kl"],
        "clip_frac": kl_stats["clip_frac"],
        "mean_confidence_on_abstentions": (
            float(np.mean([np.exp(r.confidence) for r in abstentions])) if abstentions else float("nan")
        ),
        "n_rollouts": len(rollouts),
        "skipped": batch.skipped,
    }


def train_ppo(
    policy: LanguageModel,
    episodes: Sequence[Episode],
    reward_source,
    ppo_config: Optional[PpoConfig] = None,
) -> PpoResult:
    """
    Run PPO iterations on the policy in place.

    Each iteration snapshots pi_old, collects rollouts from it, takes
    `ppo_epochs` clipped gradient steps, then measures the KL between the
    updated policy and the snapshot. A mean KL above `kl_abort` stops
    training with PolicyCollapseError.

    Args:
        policy: SFT-initialized policy
        episodes: Prompt pool rollouts are drawn from
        reward_source: RulesReward or LearnedReward
        ppo_config: Hyperparameters

    Returns:
        PpoResult with per-iteration stats and the rollout log
    """
    cfg = ppo_config or PpoConfig()
    if not episodes:
        raise InsufficientDataError("train_ppo needs episodes")
    adam = AdamState(lr=cfg.lr)
    stats_rows, log_rows = [], []

    for iteration in range(1, cfg.iterations + 1):
        rng = np.random.default_rng([cfg.seed, iteration])
        size = min(cfg.rollout_batch, len(episodes))
        chosen = [episodes[i] for i in sorted(rng.choice(len(episodes), size=size, replace=False))]
        policy_old = policy.clone()
        batch = collect_rollouts(policy_old, chosen, cfg, reward_source, [cfg.seed, iteration])
        if not len(batch):
            logger.warning(f"PPO iteration {iteration}: no usable rollouts")
            continue

        try:
            for _ in range(cfg.ppo_epochs):
                graph = Graph()
                loss, _ = ppo_loss(graph, policy, batch, cfg)
                grads = policy.params.grads_by_name(backward(graph, loss))
                clip_grad_norm(grads, cfg.max_grad_norm)
                adam_step(policy.params, grads, adam)
            _, kl_stats = ppo_objective(policy, batch, cfg)
        except NonFiniteError as e:
            raise DivergenceError(f"PPO diverged ({e})", iteration) from None

        row = _iteration_stats(iteration, batch, kl_stats)
        stats_rows.append(row)
        for r in batch.rollouts:
            log_rows.append({
                "iter": iteration,
                "episode_id": r.episode.id,
                "outcome": r.outcome.value,
                "confidence": float(np.exp(r.confidence)),
                "base_reward": r.base_reward,
                "shaped_reward": r.reward,
            })
        if iteration % cfg.log_every == 0:
            logger.info(
                f"PPO iter {iteration}: reward={row['mean_reward']:.3f}, "
                f"halluc={row['halluc_rate']:.3f}, kl={row['mean_kl']:.5f}, clip={row['clip_frac']:.3f}"
            )
        if row["mean_kl"] > cfg.kl_abort:
            raise PolicyCollapseError(
                f"mean KL {row['mean_kl']:.4f} exceeded {cfg.kl_abort}", iteration
            )

    return PpoResult(
        policy=policy,
        stats=pd.DataFrame(stats_rows, columns=STATS_COLUMNS),
        rollout_log=pd.DataFrame(log_rows, columns=ROLLOUT_COLUMNS),
    )
