"""
Answerability evaluation: response classification, unanswerability
precision/recall/F1, answer EM and token F1, overall accuracy,
hallucination rate, error breakdown, and the training-composition sweep.
"""

import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import accuracy_score, confusion_matrix, precision_recall_fscore_support

import config
from errors import ConfigError, InsufficientDataError
from corpus import DatasetSpec, Episode, generate_dataset, gold_target, render_prompt
from tiny_lm import ABSTENTION, VOCAB, TokenSequence, Vocab

logger = logging.getLogger(__name__)


class Outcome(str, Enum):
    CORRECT_ANSWER = "CorrectAnswer"
    WRONG_ANSWER = "WrongAnswer"
    HALLUCINATION = "Hallucination"
    CORRECT_ABSTENTION = "CorrectAbstention"
    OVER_ABSTENTION = "OverAbstention"

    @property
    def unanswerable(self) -> bool:
        """Whether this outcome can only arise on an unanswerable episode."""
        return self in (Outcome.HALLUCINATION, Outcome.CORRECT_ABSTENTION)

    @property
    def abstained(self) -> bool:
        return self in (Outcome.CORRECT_ABSTENTION, Outcome.OVER_ABSTENTION)


ERROR_CATEGORIES = (
    "subtle_unanswerability",
    "unsupported_fabrication",
    "wrong_answer",
    "over_abstention",
)


@dataclass
class EvalConfig:
    """Held-out evaluation set shape and decode budget."""

    n_episodes: int = config.EVAL_DEFAULTS["n_episodes"]
    na_ratio: float = config.EVAL_DEFAULTS["na_ratio"]
    max_new_tokens: int = config.EVAL_DEFAULTS["max_new_tokens"]

    def __post_init__(self):
        if self.n_episodes < 10 or not 0.0 <= self.na_ratio <= 1.0 or self.max_new_tokens < 1:
            raise ConfigError("eval.n_episodes >= 10, eval.na_ratio in [0, 1], eval.max_new_tokens >= 1")


def is_abstention(response: TokenSequence) -> bool:
    return response.ids == ABSTENTION.ids


def classify_response(episode: Episode, response: TokenSequence) -> Outcome:
    """Map a response to exactly one outcome; abstention is exact equality with (NA, EOS)."""
    if is_abstention(response):
        return Outcome.OVER_ABSTENTION if episode.answerable else Outcome.CORRECT_ABSTENTION
    if not episode.answerable:
        return Outcome.HALLUCINATION
    if response.ids == gold_target(episode).ids:
        return Outcome.CORRECT_ANSWER
    return Outcome.WRONG_ANSWER


def unanswerability_prf(outcomes: Sequence[Outcome]) -> Tuple[Dict[str, float], List[str]]:
    """
    Unanswerability detection metrics, positive class = unanswerable.

    A prediction is positive when the model abstained. 0/0 ratios are
    reported as 0 and named in the returned flags.

    Returns:
        (metrics dict with accuracy/precision/recall/f1/tp/fp/fn/tn, flags)
    """
    if not outcomes:
        raise ValueError("unanswerability_prf needs at least one outcome")
    y_true = [int(o.unanswerable) for o in outcomes]
    y_pred = [int(o.abstained) for o in outcomes]
    precision, recall, f1, _ = precision_recall_fscore_support(
        y_true, y_pred, average="binary", pos_label=1, zero_division=0
    )
    tn, fp, fn, tp = confusion_matrix(y_true, y_pred, labels=[0, 1]).ravel()
    flags = []
    if tp + fp == 0:
        flags.append("unanswerability_precision_degenerate")
    if tp + fn == 0:
        flags.append("unanswerability_recall_degenerate")
    for flag in flags:
        logger.warning(f"Degenerate denominator: {flag} (reported as 0)")
    metrics = {
        "accuracy": float(accuracy_score(y_true, y_pred)),
        "precision": float(precision),
        "recall": float(recall),
        "f1": float(f1),
        "tp": int(tp), "fp": int(fp), "fn": int(fn), "tn": int(tn),
    }
    return metrics, flags


def _answer_tokens(seq: TokenSequence) -> List[int]:
    return [t for t in seq.ids if t != Vocab.EOS]


def token_f1(gold: Sequence, prediction: Sequence) -> float:
    common = Counter(gold) & Counter(prediction)
    num_same = sum(common.values())
    if not gold or not prediction:
        return float(list(gold) == list(prediction))
    if num_same == 0:
        return 0.0
    precision = num_same / len(prediction)
    recall = num_same / len(gold)
    return 2 * precision * recall / (precision + recall)


def answer_quality(
    episodes: Sequence[Episode], responses: Sequence[TokenSequence]
) -> Tuple[float, float, int]:
    """
    EM and token F1 over answerable episodes where an answer was attempted.

    Returns:
        (exact match rate, mean token F1, number of scored episodes)
    """
    em, f1 = [], []
    for episode, response in zip(episodes, responses):
        if not episode.answerable or is_abstention(response):
            continue
        gold = _answer_tokens(gold_target(episode))
        pred = _answer_tokens(response)
        em.append(float(gold == pred))
        f1.append(token_f1(gold, pred))
    if not em:
        return 0.0, 0.0, 0
    return float(np.mean(em)), float(np.mean(f1)), len(em)


def hallucination_rate(outcomes: Sequence[Outcome]) -> float:
    unanswerable = [o for o in outcomes if o.unanswerable]
    if not unanswerable:
        raise ValueError("hallucination_rate needs at least one unanswerable episode")
    return sum(o is Outcome.HALLUCINATION for o in unanswerable) / len(unanswerable)


def error_breakdown(episodes: Sequence[Episode], responses: Sequence[TokenSequence]) -> Dict[str, int]:
    """
    Count errors by category; categories with no errors are omitted.

    Hallucinations that reuse a value printed in the retrieved passages are
    the subtle cases: the context looks like it answers the question.
    """
    counts: Counter = Counter()
    for episode, response in zip(episodes, responses):
        outcome = classify_response(episode, response)
        if outcome is Outcome.HALLUCINATION:
            copied = set(VOCAB.decode(_answer_tokens(response))) & episode.passage_values()
            counts["subtle_unanswerability" if copied else "unsupported_fabrication"] += 1
        elif outcome is Outcome.WRONG_ANSWER:
            counts["wrong_answer"] += 1
        elif outcome is Outcome.OVER_ABSTENTION:
            counts["over_abstention"] += 1
    return {k: counts[k] for k in ERROR_CATEGORIES if counts[k]}


@dataclass
class MetricsReport:
    """All evaluation numbers for one model on one episode set."""

    n_episodes: int
    unanswerability_accuracy: float
    unanswerability_precision: float
    unanswerability_recall: float
    unanswerability_f1: float
    answer_em: float
    answer_f1: float
    overall_accuracy: float
    hallucination_rate: float
    outcome_counts: Dict[str, int]
    error_breakdown: Dict[str, int]
    flags: List[str] = field(default_factory=list)
    config: Dict = field(default_factory=dict)
    # wall-clock, never serialized with the report
    latency_ms: Optional[float] = field(default=None, compare=False)

    def to_dict(self) -> Dict:
        return {
            "n_episodes": self.n_episodes,
            "unanswerability": {
                "accuracy": self.unanswerability_accuracy,
                "precision": self.unanswerability_precision,
                "recall": self.unanswerability_recall,
                "f1": self.unanswerability_f1,
            },
            "answerable": {"em": self.answer_em, "f1": self.answer_f1},
            "overall_accuracy": self.overall_accuracy,
            "hallucination_rate": self.hallucination_rate,
            "outcome_counts": dict(self.outcome_counts),
            "error_breakdown": dict(self.error_breakdown),
            "flags": list(self.flags),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, record: Dict) -> "MetricsReport":
        return cls(
            n_episodes=int(record["n_episodes"]),
            unanswerability_accuracy=record["unanswerability"]["accuracy"],
            unanswerability_precision=record["unanswerability"]["precision"],
            unanswerability_recall=record["unanswerability"]["recall"],
            unanswerability_f1=record["unanswerability"]["f1"],
            answer_em=record["answerable"]["em"],
            answer_f1=record["answerable"]["f1"],
            overall_accuracy=record["overall_accuracy"],
            hallucination_rate=record["hallucination_rate"],
            outcome_counts=dict(record["outcome_counts"]),
            error_breakdown=dict(record.get("error_breakdown", {})),
            flags=list(record.get("flags", [])),
            config=dict(record.get("config", {})),
        )

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path:
            with open(path, "w", encoding="utf-8") as f:
                f.write(text + "\n")
        return text

    def table_row(self) -> Dict[str, float]:
        """Headline numbers in comparison-table column order."""
        return {
            "Unans. Acc": self.unanswerability_accuracy,
            "Unans. P": self.unanswerability_precision,
            "Unans. R": self.unanswerability_recall,
            "Unans. F1": self.unanswerability_f1,
            "Ans. EM": self.answer_em,
            "Ans. F1": self.answer_f1,
            "Overall Acc": self.overall_accuracy,
            "Halluc. Rate": self.hallucination_rate,
        }

    def to_markdown(self) -> str:
        decimals = config.REPORT_DECIMALS
        row = self.table_row()
        lines = [
            "| " + " | ".join(row) + " |",
            "|" + "---|" * len(row),
            "| " + " | ".join(f"{v:.{decimals}f}" for v in row.values()) + " |",
            "",
            "| Outcome | Count |",
            "|---|---|",
        ]
        lines += [f"| {k} | {v} |" for k, v in self.outcome_counts.items()]
        if self.flags:
            lines += ["", "Flags: " + ", ".join(self.flags)]
        return "\n".join(lines) + "\n"


def build_report(
    episodes: Sequence[Episode],
    responses: Sequence[TokenSequence],
    config_echo: Optional[Dict] = None,
) -> MetricsReport:
    """Compute every metric from decoded responses."""
    if not episodes or len(episodes) != len(responses):
        raise InsufficientDataError("build_report needs one response per episode and at least one episode")
    outcomes = [classify_response(e, r) for e, r in zip(episodes, responses)]
    prf, flags = unanswerability_prf(outcomes)
    em, f1, n_scored = answer_quality(episodes, responses)
    if n_scored == 0:
        flags.append("answer_quality_degenerate")
        logger.warning("No answer attempts on answerable episodes; EM/F1 reported as 0")
    try:
        halluc = hallucination_rate(outcomes)
    except ValueError:
        halluc = 0.0
        flags.append("hallucination_rate_undefined")
        logger.warning("No unanswerable episodes; hallucination rate reported as 0")
    counts = Counter(o.value for o in outcomes)
    correct = counts[Outcome.CORRECT_ANSWER.value] + counts[Outcome.CORRECT_ABSTENTION.value]
    return MetricsReport(
        n_episodes=len(episodes),
        unanswerability_accuracy=prf["accuracy"],
        unanswerability_precision=prf["precision"],
        unanswerability_recall=prf["recall"],
        unanswerability_f1=prf["f1"],
        answer_em=em,
        answer_f1=f1,
        overall_accuracy=correct / len(episodes),
        hallucination_rate=halluc,
        outcome_counts={o.value: counts[o.value] for o in Outcome},
        error_breakdown=error_breakdown(episodes, responses),
        flags=flags,
        config=dict(config_echo or {}),
    )


def decode_episodes(
    model,
    episodes: Sequence[Episode],
    threads: int = 1,
    max_new: int = config.EVAL_DEFAULTS["max_new_tokens"],
    chunk_size: int = 64,
) -> List[TokenSequence]:
    """Greedy responses for every episode, in episode order."""
    prompts = [render_prompt(e, model.config.max_seq_len) for e in episodes]
    chunks = [prompts[i: i + chunk_size] for i in range(0, len(prompts), chunk_size)]
    if threads > 1 and len(chunks) > 1:
        parts = Parallel(n_jobs=threads, prefer="threads")(
            delayed(model.decode_batch)(chunk, "greedy", 1.0, None, max_new) for chunk in chunks
        )
    else:
        parts = [model.decode_batch(chunk, "greedy", 1.0, None, max_new) for chunk in chunks]
    return [r for part in parts for r in part]


def evaluate_model(
    model,
    episodes: Sequence[Episode],
    threads: int = 1,
    max_new: int = config.EVAL_DEFAULTS["max_new_tokens"],
    config_echo: Optional[Dict] = None,
) -> Tuple[MetricsReport, List[TokenSequence]]:
    """
    Greedy-decode every episode and score the responses.

    Args:
        model: LanguageModel
        episodes: Evaluation episodes
        threads: Thread cap for decoding
        max_new: Decode budget, EOS included
        config_echo: Configuration copied into the report

    Returns:
        (MetricsReport, responses in episode order)
    """
    start = time.perf_counter()
    responses = decode_episodes(model, episodes, threads, max_new)
    elapsed = time.perf_counter() - start
    report = build_report(episodes, responses, config_echo)
    report.latency_ms = 1000.0 * elapsed / max(1, len(episodes))
    return report, responses


SWEEP_COLUMNS = ["na_ratio", "unanswerability_f1", "answerable_f1", "overall_accuracy", "error"]


def composition_sweep(
    base_spec: DatasetSpec,
    train_fn: Callable[[List[Episode]], object],
    test_episodes: Sequence[Episode],
    ratios: Sequence[float] = config.SWEEP_RATIOS,
    threads: int = 1,
) -> pd.DataFrame:
    """
    Train one model per training NA ratio and score each on a shared test set.

    Training corpora share the base seed and exclude every test episode.
    A failing cell records its error and the sweep moves on.

    Args:
        base_spec: Dataset spec whose na_ratio is replaced per cell
        train_fn: Maps training episodes to a trained LanguageModel
        test_episodes: Shared held-out episodes
        ratios: Training NA ratios
        threads: Thread cap for evaluation

    Returns:
        DataFrame with one row per ratio
    """
    exclude = {e.key() for e in test_episodes}
    rows = []
    for ratio in ratios:
        spec = replace(base_spec, na_ratio=float(ratio))
        try:
            episodes = generate_dataset(spec, exclude=exclude)
            model = train_fn(episodes)
            report, _ = evaluate_model(model, test_episodes, threads)
            rows.append({
                "na_ratio": float(ratio),
                "unanswerability_f1": report.unanswerability_f1,
                "answerable_f1": report.answer_f1,
                "overall_accuracy": report.overall_accuracy,
                "error": "",
            })
            logger.info(
                f"Sweep na_ratio={ratio}: unans F1={report.unanswerability_f1:.3f}, "
                f"overall={report.overall_accuracy:.3f}"
            )
        except Exception as e:
            logger.error(f"Sweep cell na_ratio={ratio} failed: {type(e).__name__}: {e}")
            rows.append({
                "na_ratio": float(ratio),
                "unanswerability_f1": np.nan,
                "answerable_f1": np.nan,
                "overall_accuracy": np.nan,
                "error": f"{type(e).__name__}: {e}",
            })
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)
