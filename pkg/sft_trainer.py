"""
Multi-task supervised fine-tuning: answer loss on answerable episodes,
abstention loss on unanswerable ones, mixed with weights alpha and beta.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import config
from autodiff import AdamState, Graph, Tensor, adam_step, backward, clip_grad_norm, warmup_cosine_lr
from corpus import Episode, gold_target, render_prompt
from errors import ConfigError, DivergenceError, InsufficientDataError, NonFiniteError
from metrics import evaluate_model
from tiny_lm import LanguageModel, pack_pairs

logger = logging.getLogger(__name__)


@dataclass
class SftConfig:
    alpha: float = config.SFT_DEFAULTS["alpha"]
    beta: float = config.SFT_DEFAULTS["beta"]
    lr: float = config.SFT_DEFAULTS["lr"]
    batch_size: int = config.SFT_DEFAULTS["batch_size"]
    max_steps: int = config.SFT_DEFAULTS["max_steps"]
    eval_every: int = config.SFT_DEFAULTS["eval_every"]
    patience: int = config.SFT_DEFAULTS["patience"]
    warmup_steps: int = config.SFT_DEFAULTS["warmup_steps"]
    max_grad_norm: float = config.SFT_DEFAULTS["max_grad_norm"]
    log_every: int = config.SFT_DEFAULTS["log_every"]
    seed: int = config.SFT_DEFAULTS["seed"]

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("sft.alpha and sft.beta must be non-negative")
        if self.alpha + self.beta <= 0:
            raise ConfigError("sft.alpha + sft.beta must be positive")
        if self.lr <= 0 or self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("sft.lr, sft.batch_size and sft.max_steps must be positive")
        if self.eval_every < 1 or self.patience < 1 or self.log_every < 1:
            raise ConfigError("sft.eval_every, sft.patience and sft.log_every must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("sft.warmup_steps must be non-negative")


@dataclass
class SftResult:
    model: LanguageModel
    curve: pd.DataFrame          # step, l_sft, l_qa_mean, l_na_mean
    validation: pd.DataFrame     # step, val_l_sft, val_overall_accuracy, val_unanswerability_f1
    best_step: Optional[int]


def sequence_nll(graph: Graph, model: LanguageModel, episodes: Sequence[Episode]) -> Tensor:
    """Token-summed negative log-likelihood of each episode's gold target; shape (B,)."""
    prompts = [render_prompt(e, model.config.max_seq_len) for e in episodes]
    targets = [gold_target(e) for e in episodes]
    packed = pack_pairs(prompts, targets, model.config.max_seq_len)
    return graph.scale(model.sequence_log_probs(graph, packed), -1.0)


def loss_qa(model: LanguageModel, episode: Episode, graph: Optional[Graph] = None) -> Tensor:
    """L_QA = -sum_i log P(a_i | X, a_<i) over the target (v, EOS)."""
    if not episode.answerable:
        raise InsufficientDataError(f"loss_qa needs an answerable episode, got episode {episode.id}")
    graph = Graph() if graph is None else graph
    return graph.sum(sequence_nll(graph, model, [episode]))


def loss_na(model: LanguageModel, episode: Episode, graph: Optional[Graph] = None) -> Tensor:
    """L_NA: the same negative log-likelihood against the abstention (NA, EOS)."""
    if episode.answerable:
        raise InsufficientDataError(f"loss_na needs an unanswerable episode, got episode {episode.id}")
    graph = Graph() if graph is None else graph
    return graph.sum(sequence_nll(graph, model, [episode]))


def sft_terms(
    graph: Graph,
    model: LanguageModel,
    batch: Sequence[Episode],
    alpha: float,
    beta: float,
) -> Tuple[Tensor, float, float]:
    """
    Combined loss for one batch.

    Each kind is averaged within the batch before weighting, and a kind with
    no episodes in the batch contributes nothing.

    Returns:
        (L_SFT tensor, mean L_QA, mean L_NA); the means are 0 for an absent kind
    """
    if not batch:
        raise InsufficientDataError("loss_sft needs a non-empty batch")
    nll = sequence_nll(graph, model, batch)
    answerable = np.array([e.answerable for e in batch])
    n_qa = int(answerable.sum())
    n_na = len(batch) - n_qa
    weights = np.where(answerable, alpha / max(n_qa, 1), beta / max(n_na, 1))
    loss = graph.sum(graph.mul(nll, Tensor(weights)))
    l_qa = float(nll.data[answerable].mean()) if n_qa else 0.0
    l_na = float(nll.data[~answerable].mean()) if n_na else 0.0
    return loss, l_qa, l_na


def loss_sft(
    model: LanguageModel,
    batch: Sequence[Episode],
    alpha: float = config.SFT_DEFAULTS["alpha"],
    beta: float = config.SFT_DEFAULTS["beta"],
    graph: Optional[Graph] = None,
) -> Tensor:
    loss, _, _ = sft_terms(Graph() if graph is None else graph, model, batch, alpha, beta)
    return loss


def validation_loss(model: LanguageModel, episodes: Sequence[Episode], sft_config: SftConfig,
                    chunk_size: int = 64) -> float:
    """L_SFT over a whole episode set, each kind averaged over the full set."""
    nll = np.concatenate([
        sequence_nll(Graph(), model, episodes[i: i + chunk_size]).data
        for i in range(0, len(episodes), chunk_size)
    ])
    answerable = np.array([e.answerable for e in episodes])
    total = 0.0
    if answerable.any():
        total += sft_config.alpha * nll[answerable].mean()
    if (~answerable).any():
        total += sft_config.beta * nll[~answerable].mean()
    return float(total)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start: start + batch_size]


def train_sft(
    model: LanguageModel,
    train: Sequence[Episode],
    val: Sequence[Episode],
    sft_config: Optional[SftConfig] = None,
    threads: int = 1,
) -> SftResult:
    """
    Fine-tune the policy on L_SFT with Adam.

    The learning rate warms up linearly over `warmup_steps` and then decays
    on a cosine to a tenth of `lr` at `max_steps`. Validation runs every
    `eval_every` steps (and before the first step). An evaluation counts as
    progress when Overall Accuracy or validation L_SFT improves; training
    stops after `patience` evaluations without progress. The parameters with
    the best accuracy, ties broken by lower validation loss, are restored.

    Args:
        model: Policy to train in place
        train: Training episodes
        val: Validation episodes (may be empty to skip validation)
        sft_config: Hyperparameters
        threads: Thread cap for validation decoding

    Returns:
        SftResult with per-step curve and validation history
    """
    cfg = sft_config or SftConfig()
    if not train:
        raise InsufficientDataError("train_sft needs training episodes")
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(lr=cfg.lr)
    batches = _batches(len(train), cfg.batch_size, rng)

    curve_rows: List[dict] = []
    val_rows: List[dict] = []
    best_key, best_state, best_step = None, None, None
    lowest_loss, top_acc, stale = np.inf, -1.0, 0

    def validate(step: int) -> bool:
        nonlocal best_key, best_state, best_step, lowest_loss, top_acc, stale
        report, _ = evaluate_model(model, val, threads)
        val_l = validation_loss(model, val, cfg)
        val_rows.append({
            "step": step,
            "val_l_sft": val_l,
            "val_overall_accuracy": report.overall_accuracy,
            "val_unanswerability_f1": report.unanswerability_f1,
        })
        logger.info(
            f"SFT step {step}: val L_SFT={val_l:.4f}, overall acc={report.overall_accuracy:.3f}"
        )
        key = (report.overall_accuracy, -val_l)
        if best_key is None or key > best_key:
            best_key, best_state, best_step = key, model.state_dict(), step
        progressed = report.overall_accuracy > top_acc or val_l < lowest_loss * (1.0 - 1e-3)
        top_acc = max(top_acc, report.overall_accuracy)
        lowest_loss = min(lowest_loss, val_l)
        stale = 0 if progressed else stale + 1
        return stale >= cfg.patience

    if val:
        validate(0)

    for step in range(1, cfg.max_steps + 1):
        batch = [train[i] for i in next(batches)]
        graph = Graph()
        try:
            loss, l_qa, l_na = sft_terms(graph, model, batch, cfg.alpha, cfg.beta)
            grads = model.params.grads_by_name(backward(graph, loss))
            clip_grad_norm(grads, cfg.max_grad_norm)
            adam.lr = warmup_cosine_lr(step, cfg.lr, cfg.warmup_steps, cfg.max_steps)
            adam_step(model.params, grads, adam)
        except NonFiniteError as e:
            raise DivergenceError(f"SFT diverged ({e})", step) from None
        curve_rows.append({"step": step, "l_sft": loss.item(), "l_qa_mean": l_qa, "l_na_mean": l_na})
        if step % cfg.log_every == 0:
            logger.info(f"SFT step {step}: L_SFT={loss.item():.4f} (QA {l_qa:.4f}, NA {l_na:.4f})")
        if val and step % cfg.eval_every == 0 and validate(step):
            logger.info(f"SFT early stop at step {step}; best step {best_step}")
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    return SftResult(
        model=model,
        curve=pd.DataFrame(curve_rows, columns=["step", "l_sft", "l_qa_mean", "l_na_mean"]),
        validation=pd.DataFrame(
            val_rows, columns=["step", "val_l_sft", "val_overall_accuracy", "val_unanswerability_f1"]
        ),
        best_step=best_step,
    )
