"""
Reward model trained from preference pairs, plus the rule-based reward
table used as the default PPO environment reward.
"""

import logging
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import GroupShuffleSplit

import config
from autodiff import AdamState, Graph, Tensor, adam_step, backward, clip_grad_norm, warmup_cosine_lr
from corpus import Episode, PreferencePair, render_prompt
from errors import ConfigError, DivergenceError, InsufficientDataError, NonFiniteError, SequenceError
from metrics import Outcome, classify_response, is_abstention
from tiny_lm import SeqLike, TokenSequence, Transformer, Vocab, as_ids, register_model_kind

logger = logging.getLogger(__name__)


class RewardModel(Transformer):
    """Backbone with a scalar head read at the final position."""

    kind = "reward"

    def _init_heads(self, rng: np.random.Generator) -> None:
        self.params.add("score_head.w", np.zeros((self.config.d_model, 1)))
        self.params.add("score_head.b", np.zeros(1))

    def scores(self, graph: Graph, inputs: Sequence[Sequence[int]]) -> Tensor:
        """Scalar score per reward input; shape (B,)."""
        if not inputs:
            raise SequenceError("scores needs at least one input")
        width = max(len(s) for s in inputs)
        if width > self.config.max_seq_len:
            raise SequenceError(
                f"reward input of length {width} exceeds max_seq_len={self.config.max_seq_len}"
            )
        ids = np.full((len(inputs), width), Vocab.PAD, dtype=np.int64)
        for b, seq in enumerate(inputs):
            ids[b, : len(seq)] = seq
        last = np.asarray([len(s) - 1 for s in inputs], dtype=np.int64)
        pooled = self.pooled(graph, ids, last)
        out = graph.add(graph.matmul(pooled, self.params["score_head.w"]), self.params["score_head.b"])
        return graph.slice(out, (slice(None), 0))


register_model_kind("reward", RewardModel)


def reward_input(prompt: SeqLike, response: SeqLike) -> Tuple[int, ...]:
    """
    Rebuild a policy prompt as CLS C SEP q SEP R SEP.

    The prompt's history and passage segments together form the context C.
    """
    ids = as_ids(prompt)
    if not ids or ids[0] != Vocab.CLS:
        raise SequenceError("prompt must start with CLS")
    segments, current = [], []
    for tok in ids[1:]:
        if tok == Vocab.SEP:
            segments.append(current)
            current = []
        else:
            current.append(tok)
    if len(segments) != 3 or current:
        raise SequenceError("prompt must hold exactly three SEP-terminated segments")
    history, question, passages = segments
    return (
        (Vocab.CLS,) + tuple(history) + tuple(passages) + (Vocab.SEP,)
        + tuple(question) + (Vocab.SEP,) + as_ids(response) + (Vocab.SEP,)
    )


def score(model: RewardModel, prompt: SeqLike, response: SeqLike) -> float:
    return float(model.scores(Graph(), [reward_input(prompt, response)]).data[0])


def score_batch(model: RewardModel, prompts: Sequence[SeqLike], responses: Sequence[SeqLike],
                chunk_size: int = 128) -> np.ndarray:
    inputs = [reward_input(p, r) for p, r in zip(prompts, responses)]
    return np.concatenate([
        model.scores(Graph(), inputs[i: i + chunk_size]).data
        for i in range(0, len(inputs), chunk_size)
    ]) if inputs else np.zeros(0)


def pair_losses(graph: Graph, model: RewardModel, pairs: Sequence[PreferencePair]) -> Tensor:
    """-log sigmoid(s_A - s_B) per pair, as two-way cross-entropy toward the preferred side."""
    prompts = [render_prompt(p.episode, model.config.max_seq_len) for p in pairs]
    inputs = (
        [reward_input(x, p.preferred) for x, p in zip(prompts, pairs)]
        + [reward_input(x, p.dispreferred) for x, p in zip(prompts, pairs)]
    )
    s = model.scores(graph, inputs)
    n = len(pairs)
    s_a = graph.slice(s, (slice(0, n), None))
    s_b = graph.slice(s, (slice(n, 2 * n), None))
    logits = graph.concat([s_a, s_b], axis=-1)
    return graph.cross_entropy(logits, np.zeros(n, dtype=np.int64))


def preference_loss(model: RewardModel, pair: PreferencePair, graph: Optional[Graph] = None) -> Tensor:
    graph = Graph() if graph is None else graph
    return graph.sum(pair_losses(graph, model, [pair]))


def pair_accuracy(model: RewardModel, pairs: Sequence[PreferencePair]) -> float:
    """Fraction of pairs whose preferred response scores strictly higher."""
    if not pairs:
        return 0.0
    prompts = [render_prompt(p.episode, model.config.max_seq_len) for p in pairs]
    s_a = score_batch(model, prompts, [p.preferred for p in pairs])
    s_b = score_batch(model, prompts, [p.dispreferred for p in pairs])
    return float(np.mean(s_a > s_b))


def shuffle_preferences(pairs: Sequence[PreferencePair], seed: int) -> List[PreferencePair]:
    """Label-shuffled control: each pair's sides are swapped with probability 1/2."""
    rng = np.random.default_rng(seed)
    flips = rng.random(len(pairs)) < 0.5
    return [
        PreferencePair(p.episode, p.dispreferred, p.preferred, f"shuffled:{p.rule}") if flip
        else PreferencePair(p.episode, p.preferred, p.dispreferred, f"shuffled:{p.rule}")
        for p, flip in zip(pairs, flips)
    ]


def holdout_pairs(
    pairs: Sequence[PreferencePair],
    fraction: float,
    seed: int,
) -> Tuple[List[PreferencePair], List[PreferencePair]]:
    """Split pairs into (train, holdout) so that no episode contributes to both sides."""
    pairs = list(pairs)
    groups = [p.episode.id for p in pairs]
    splitter = GroupShuffleSplit(n_splits=1, test_size=fraction, random_state=seed)
    train_idx, holdout_idx = next(splitter.split(np.zeros(len(pairs)), groups=groups))
    return [pairs[i] for i in train_idx], [pairs[i] for i in holdout_idx]


@dataclass
class RewardConfig:
    lr: float = config.REWARD_DEFAULTS["lr"]
    batch_size: int = config.REWARD_DEFAULTS["batch_size"]
    max_steps: int = config.REWARD_DEFAULTS["max_steps"]
    holdout_fraction: float = config.REWARD_DEFAULTS["holdout_fraction"]
    negatives_per_episode: int = config.REWARD_DEFAULTS["negatives_per_episode"]
    warmup_steps: int = config.REWARD_DEFAULTS["warmup_steps"]
    max_grad_norm: float = config.REWARD_DEFAULTS["max_grad_norm"]
    log_every: int = config.REWARD_DEFAULTS["log_every"]
    seed: int = config.REWARD_DEFAULTS["seed"]

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_steps < 0 or self.log_every < 1:
            raise ConfigError("reward.lr, reward.batch_size and reward.log_every must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("reward.warmup_steps must be non-negative")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("reward.holdout_fraction must lie in (0, 1)")


@dataclass
class RewardResult:
    model: RewardModel
    curve: pd.DataFrame
    holdout_accuracy: float
    n_train: int
    n_holdout: int


def train_reward_model(
    model: RewardModel,
    pairs: Sequence[PreferencePair],
    reward_config: Optional[RewardConfig] = None,
) -> RewardResult:
    """
    Fit the reward model on the mean preference loss.

    Args:
        model: Reward model to train in place
        pairs: At least 100 preference pairs
        reward_config: Hyperparameters

    Returns:
        RewardResult with the loss curve and hold-out pair accuracy
    """
    cfg = reward_config or RewardConfig()
    if len(pairs) < 100:
        raise InsufficientDataError(f"train_reward_model needs at least 100 pairs, got {len(pairs)}")
    train, holdout = holdout_pairs(pairs, cfg.holdout_fraction, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(lr=cfg.lr)
    rows = []
    order = rng.permutation(len(train))
    cursor = 0
    for step in range(1, cfg.max_steps + 1):
        if cursor + cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(train)), 0
        batch = [train[i] for i in order[cursor: cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        graph = Graph()
        try:
            loss = graph.mean(pair_losses(graph, model, batch))
            grads = model.params.grads_by_name(backward(graph, loss))
            clip_grad_norm(grads, cfg.max_grad_norm)
            adam.lr = warmup_cosine_lr(step, cfg.lr, cfg.warmup_steps, cfg.max_steps)
            adam_step(model.params, grads, adam)
        except NonFiniteError as e:
            raise DivergenceError(f"reward model diverged ({e})", step) from None
        rows.append({"step": step, "loss": loss.item()})
        if step % cfg.log_every == 0:
            logger.info(f"Reward step {step}: loss={loss.item():.4f}")
    accuracy = pair_accuracy(model, holdout)
    logger.info(f"Reward model hold-out pair accuracy {accuracy:.3f} on {len(holdout)} pairs")
    return RewardResult(model, pd.DataFrame(rows, columns=["step", "loss"]), accuracy, len(train), len(holdout))


# ---------------------------------------------------------------------------
# Environment rewards
# ---------------------------------------------------------------------------

@dataclass
class BaseRewardTable:
    correct_answer: float = config.BASE_REWARD_TABLE["correct_answer"]
    correct_abstention: float = config.BASE_REWARD_TABLE["correct_abstention"]
    hallucination: float = config.BASE_REWARD_TABLE["hallucination"]
    wrong_answer: float = config.BASE_REWARD_TABLE["wrong_answer"]
    over_abstention: float = config.BASE_REWARD_TABLE["over_abstention"]

    def __post_init__(self):
        if not self.hallucination < self.wrong_answer < 0 < self.correct_answer:
            raise ConfigError(
                "reward_table must satisfy hallucination < wrong_answer < 0 < correct_answer"
            )
        others = [getattr(self, f.name) for f in fields(self) if f.name != "hallucination"]
        if not all(self.hallucination < v for v in others):
            raise ConfigError("reward_table.hallucination must be the strict minimum")

    def lookup(self, outcome: Outcome) -> float:
        return {
            Outcome.CORRECT_ANSWER: self.correct_answer,
            Outcome.CORRECT_ABSTENTION: self.correct_abstention,
            Outcome.HALLUCINATION: self.hallucination,
            Outcome.WRONG_ANSWER: self.wrong_answer,
            Outcome.OVER_ABSTENTION: self.over_abstention,
        }[outcome]


def base_reward(episode: Episode, response: TokenSequence, table: Optional[BaseRewardTable] = None) -> float:
    return (table or BaseRewardTable()).lookup(classify_response(episode, response))


class RulesReward:
    """Reward from the rule table; shaping uses the true outcome."""

    name = "rules"

    def __init__(self, table: Optional[BaseRewardTable] = None):
        self.table = table or BaseRewardTable()

    def __call__(
        self,
        episodes: Sequence[Episode],
        prompts: Sequence[TokenSequence],
        responses: Sequence[TokenSequence],
    ) -> List[Tuple[float, Optional[Outcome]]]:
        results = []
        for episode, response in zip(episodes, responses):
            outcome = classify_response(episode, response)
            results.append((self.table.lookup(outcome), outcome))
        return results


class LearnedReward:
    """
    Reward from a trained reward model's score.

    The shaping outcome comes from the response kind and the score sign: a
    positively scored abstention counts as a correct abstention, a negatively
    scored answer attempt as a hallucination, and anything else is unshaped.
    """

    name = "learned"

    def __init__(self, model: RewardModel):
        self.model = model

    def __call__(
        self,
        episodes: Sequence[Episode],
        prompts: Sequence[TokenSequence],
        responses: Sequence[TokenSequence],
    ) -> List[Tuple[float, Optional[Outcome]]]:
        values = score_batch(self.model, prompts, responses)
        results = []
        for value, response in zip(values, responses):
            outcome = None
            if is_abstention(response) and value > 0:
                outcome = Outcome.CORRECT_ABSTENTION
            elif not is_abstention(response) and value < 0:
                outcome = Outcome.HALLUCINATION
            results.append((float(value), outcome))
        return results


def reward_table_from_dict(values: Dict[str, float]) -> BaseRewardTable:
    return BaseRewardTable(**{k: float(v) for k, v in values.items()})
