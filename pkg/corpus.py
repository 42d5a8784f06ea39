"""
Synthetic answerability corpus.

Each episode asks for the value of one key given a few short passages of
"K is V" facts. The question is answerable iff some passage states a fact
about the queried key, so gold labels are exact by construction.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

import config
from errors import ConfigError, DataFormatError, SequenceError
from tiny_lm import ABSTENTION, VOCAB, TokenSequence, Vocab

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 1000


@dataclass
class Episode:
    """One question-context instance with its gold label."""

    id: int
    history: List[Tuple[str, str]]
    question: str
    passages: List[List[str]]
    gold: Optional[str]                      # value token, or None when unanswerable
    passage_labels: List[bool] = field(default_factory=list)

    @property
    def answerable(self) -> bool:
        return self.gold is not None

    def key(self) -> Tuple:
        """Identity used for de-duplication: question plus passage contents."""
        return (self.question, tuple(tuple(p) for p in self.passages))

    def passage_values(self) -> Set[str]:
        return {tok for p in self.passages for tok in p if tok in VOCAB.values}

    def to_dict(self) -> Dict:
        gold = {"answer": self.gold} if self.answerable else {"unanswerable": True}
        return {
            "id": self.id,
            "history": [list(turn) for turn in self.history],
            "question": self.question,
            "passages": [list(p) for p in self.passages],
            "gold": gold,
            "passage_labels": list(self.passage_labels),
        }

    @classmethod
    def from_dict(cls, record: Dict) -> "Episode":
        gold = record["gold"]
        if "answer" in gold:
            value = gold["answer"]
        elif gold.get("unanswerable") is True:
            value = None
        else:
            raise ValueError("gold must be {'answer': v} or {'unanswerable': true}")
        episode = cls(
            id=int(record["id"]),
            history=[(str(q), str(a)) for q, a in record["history"]],
            question=str(record["question"]),
            passages=[[str(t) for t in p] for p in record["passages"]],
            gold=value,
            passage_labels=[bool(b) for b in record["passage_labels"]],
        )
        for tok in episode_tokens(episode):
            VOCAB.id(tok)
        return episode


@dataclass
class DatasetSpec:
    """Shape and composition of a generated corpus."""

    n_episodes: int = config.DATASET_DEFAULTS["n_episodes"]
    na_ratio: float = config.DATASET_DEFAULTS["na_ratio"]
    n_passages: int = config.DATASET_DEFAULTS["n_passages"]
    facts_per_passage: int = config.DATASET_DEFAULTS["facts_per_passage"]
    history_min: int = config.DATASET_DEFAULTS["history_min"]
    history_max: int = config.DATASET_DEFAULTS["history_max"]
    seed: int = config.DATASET_DEFAULTS["seed"]

    def __post_init__(self):
        if self.n_episodes < 10:
            raise ConfigError("data.n_episodes must be at least 10")
        if not 0.0 <= self.na_ratio <= 1.0:
            raise ConfigError("data.na_ratio must lie in [0, 1]")
        if self.n_passages < 1 or self.facts_per_passage < 1:
            raise ConfigError("data.n_passages and data.facts_per_passage must be positive")
        if not 0 <= self.history_min <= self.history_max:
            raise ConfigError("data.history_min must satisfy 0 <= history_min <= history_max")
        if self.unique_keys_needed > config.NUM_KEYS:
            raise ConfigError(
                f"an episode needs {self.unique_keys_needed} distinct keys "
                f"but the vocabulary has only {config.NUM_KEYS}"
            )

    @property
    def n_facts(self) -> int:
        return self.n_passages * self.facts_per_passage

    @property
    def unique_keys_needed(self) -> int:
        # an unanswerable episode needs every fact key distinct from the question key
        return self.n_facts + 1

    @property
    def n_unanswerable(self) -> int:
        return int(np.floor(self.n_episodes * self.na_ratio + 0.5))


@dataclass
class PreferencePair:
    """Preferred and dispreferred responses for one episode."""

    episode: Episode
    preferred: TokenSequence
    dispreferred: TokenSequence
    rule: str

    def __post_init__(self):
        if self.preferred.ids == self.dispreferred.ids:
            raise SequenceError("preference pair responses must differ")

    @property
    def episode_id(self) -> int:
        return self.episode.id

    def to_dict(self) -> Dict:
        return {
            "episode_id": self.episode.id,
            "preferred": self.preferred.tokens(),
            "dispreferred": self.dispreferred.tokens(),
            "rule": self.rule,
        }


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _build_episode(spec: DatasetSpec, index: int, unanswerable: bool, attempt: int) -> Episode:
    rng = np.random.default_rng([spec.seed, index, attempt])
    keys = VOCAB.keys
    picked = [keys[i] for i in rng.choice(len(keys), size=spec.unique_keys_needed, replace=False)]
    question = picked[0]
    fact_keys = picked[1:] if unanswerable else picked[: spec.n_facts]
    fact_keys = [fact_keys[i] for i in rng.permutation(len(fact_keys))]
    fact_values = [VOCAB.values[i] for i in rng.integers(0, len(VOCAB.values), size=spec.n_facts)]
    facts = list(zip(fact_keys, fact_values))

    passages, labels = [], []
    for p in range(spec.n_passages):
        chunk = facts[p * spec.facts_per_passage: (p + 1) * spec.facts_per_passage]
        filler = VOCAB.fillers[int(rng.integers(0, len(VOCAB.fillers)))]
        tokens = [filler]
        for k, v in chunk:
            tokens += [k, "is", v]
        passages.append(tokens)
        labels.append(any(k == question for k, _ in chunk))

    gold = None if unanswerable else dict(facts)[question]

    n_history = int(rng.integers(spec.history_min, spec.history_max + 1))
    others = [k for k in keys if k != question]
    history = []
    for i in rng.choice(len(others), size=n_history, replace=False):
        history.append((others[i], VOCAB.values[int(rng.integers(0, len(VOCAB.values)))]))

    return Episode(index, history, question, passages, gold, labels)


def generate_dataset(spec: DatasetSpec, exclude: Optional[Iterable[Tuple]] = None) -> List[Episode]:
    """
    Generate a corpus with an exact unanswerable count.

    Episode i draws from its own generator seeded by [seed, i, attempt]; a
    (question, passages) tuple already produced, or present in `exclude`,
    bumps the attempt counter so every tuple is globally unique.

    Args:
        spec: Dataset specification
        exclude: Episode keys (see Episode.key) that must not be generated

    Returns:
        Episodes ordered by index
    """
    n_na = spec.n_unanswerable
    na_indices = set(np.random.default_rng(spec.seed).permutation(spec.n_episodes)[:n_na].tolist())
    seen: Set[Tuple] = set(exclude or ())
    episodes = []
    for index in range(spec.n_episodes):
        for attempt in range(MAX_ATTEMPTS):
            episode = _build_episode(spec, index, index in na_indices, attempt)
            if episode.key() not in seen:
                break
        else:
            raise ConfigError(f"could not draw a unique episode for index {index}; spec too small")
        seen.add(episode.key())
        render_prompt(episode)
        episodes.append(episode)
    logger.info(
        f"Generated {len(episodes)} episodes ({n_na} unanswerable, seed={spec.seed})"
    )
    return episodes


def split_dataset(
    episodes: Sequence[Episode],
    fractions: Tuple[float, float, float] = config.SPLIT_FRACTIONS,
    seed: int = config.RANDOM_STATE,
) -> Tuple[List[Episode], List[Episode], List[Episode]]:
    """Seed-deterministic train/val/test split, stratified on answerability when possible."""
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) <= 0:
        raise ConfigError("split fractions must be positive and sum to 1")
    train_frac, val_frac, test_frac = fractions
    train, rest = holdout_split(list(episodes), 1.0 - train_frac, seed)
    val, test = holdout_split(rest, test_frac / (val_frac + test_frac), seed)
    return _by_id(train), _by_id(val), _by_id(test)


def holdout_split(episodes: List[Episode], test_size: float, seed: int) -> Tuple[List[Episode], List[Episode]]:
    """Two-way split; `test_size` is a fraction or an absolute count."""
    labels = [e.answerable for e in episodes]
    try:
        return train_test_split(episodes, test_size=test_size, random_state=seed, stratify=labels)
    except ValueError:
        # too few of one class to stratify
        return train_test_split(episodes, test_size=test_size, random_state=seed)


def _by_id(episodes: Iterable[Episode]) -> List[Episode]:
    return sorted(episodes, key=lambda e: e.id)


def is_answerable(episode: Episode) -> bool:
    """Brute-force label check: scan passages for a fact about the queried key."""
    for passage in episode.passages:
        for i in range(len(passage) - 2):
            if passage[i] == episode.question and passage[i + 1] == "is":
                return True
    return False


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def history_tokens(episode: Episode) -> List[str]:
    tokens = []
    for q, a in episode.history:
        tokens += [q, ".", a, "."]
    return tokens


def question_tokens(episode: Episode) -> List[str]:
    return ["what", "is", episode.question, "?"]


def passage_tokens(episode: Episode) -> List[str]:
    tokens: List[str] = []
    for i, passage in enumerate(episode.passages):
        if i:
            tokens.append(".")
        tokens += passage
    return tokens


def episode_tokens(episode: Episode) -> List[str]:
    return history_tokens(episode) + question_tokens(episode) + passage_tokens(episode)


def render_prompt(episode: Episode, max_seq_len: int = config.MODEL_DEFAULTS["max_seq_len"]) -> TokenSequence:
    """CLS history SEP question SEP passages SEP."""
    tokens = (
        ["<CLS>"] + history_tokens(episode) + ["<SEP>"]
        + question_tokens(episode) + ["<SEP>"]
        + passage_tokens(episode) + ["<SEP>"]
    )
    # the longest response is one answer token plus EOS
    if len(tokens) + 1 > max_seq_len:
        raise SequenceError(
            f"episode {episode.id} renders to {len(tokens)} tokens, too long for max_seq_len={max_seq_len}"
        )
    return TokenSequence(VOCAB.encode(tokens), role="prompt")


def answer_response(value: str) -> TokenSequence:
    return TokenSequence((VOCAB.id(value), Vocab.EOS), role="answer")


def gold_target(episode: Episode) -> TokenSequence:
    return answer_response(episode.gold) if episode.answerable else ABSTENTION


# ---------------------------------------------------------------------------
# Preferences
# ---------------------------------------------------------------------------

def synthesize_preferences(
    episodes: Sequence[Episode],
    negatives_per_episode: int = config.NEGATIVES_PER_EPISODE,
    seed: int = config.RANDOM_STATE,
) -> List[PreferencePair]:
    """
    Rule-generated preference pairs.

    Unanswerable episodes yield `negatives_per_episode` pairs preferring the
    abstention over a fabricated value. Answerable episodes yield one pair
    preferring the gold answer over the abstention plus `negatives_per_episode`
    pairs preferring it over a wrong value.
    """
    if not 1 <= negatives_per_episode < len(VOCAB.values):
        raise ConfigError("reward.negatives_per_episode must be in [1, 15]")
    pairs: List[PreferencePair] = []
    for episode in episodes:
        rng = np.random.default_rng([seed, episode.id])
        candidates = [v for v in VOCAB.values if v != episode.gold]
        picks = rng.choice(len(candidates), size=negatives_per_episode, replace=False)
        wrong = [answer_response(candidates[i]) for i in picks]
        if episode.answerable:
            gold = gold_target(episode)
            pairs.append(PreferencePair(episode, gold, ABSTENTION, "answer_over_abstention"))
            pairs.extend(PreferencePair(episode, gold, w, "answer_over_wrong_value") for w in wrong)
        else:
            pairs.extend(PreferencePair(episode, ABSTENTION, w, "abstain_over_fabrication") for w in wrong)
    return pairs


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _write_jsonl(records: Iterable[Dict], path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")


def _read_jsonl(path: str) -> Iterable[Tuple[int, Dict]]:
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.endswith("\n"):
                raise DataFormatError(path, line_no, "truncated line")
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(path, line_no, f"invalid JSON ({e.msg})") from None


def save_dataset(episodes: Iterable[Episode], path: str) -> None:
    _write_jsonl((e.to_dict() for e in episodes), path)


def load_dataset(path: str) -> List[Episode]:
    episodes = []
    for line_no, record in _read_jsonl(path):
        try:
            episodes.append(Episode.from_dict(record))
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(path, line_no, f"bad episode record ({e})") from None
    return episodes


def save_preferences(pairs: Iterable[PreferencePair], path: str) -> None:
    _write_jsonl((p.to_dict() for p in pairs), path)


def load_preferences(path: str, episodes: Iterable[Episode]) -> List[PreferencePair]:
    """Load pairs, resolving each episode_id against `episodes`."""
    by_id = {e.id: e for e in episodes}
    pairs = []
    for line_no, record in _read_jsonl(path):
        try:
            pairs.append(PreferencePair(
                episode=by_id[int(record["episode_id"])],
                preferred=TokenSequence(VOCAB.encode(record["preferred"])),
                dispreferred=TokenSequence(VOCAB.encode(record["dispreferred"])),
                rule=str(record["rule"]),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(path, line_no, f"bad preference record ({e})") from None
    return pairs


def split_paths(path: str) -> Dict[str, str]:
    """Sibling file names for the split files and metadata sidecar of a dataset path."""
    stem, ext = os.path.splitext(path)
    ext = ext or ".jsonl"
    return {
        "train": f"{stem}.train{ext}",
        "val": f"{stem}.val{ext}",
        "test": f"{stem}.test{ext}",
        "meta": f"{stem}.meta.json",
    }


def write_dataset_with_splits(spec: DatasetSpec, episodes: Sequence[Episode], path: str) -> Dict[str, str]:
    """Write the full corpus, its three splits, and a metadata sidecar."""
    save_dataset(episodes, path)
    paths = split_paths(path)
    train, val, test = split_dataset(episodes, seed=spec.seed)
    for name, part in (("train", train), ("val", val), ("test", test)):
        save_dataset(part, paths[name])
    meta = {
        "spec": spec.__dict__,
        "counts": {"total": len(episodes), "train": len(train), "val": len(val), "test": len(test),
                   "unanswerable": sum(not e.answerable for e in episodes)},
        "created_at": datetime.now().isoformat(timespec="seconds"),
    }
    with open(paths["meta"], "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    logger.info(f"Wrote {len(episodes)} episodes to {path} (train/val/test {len(train)}/{len(val)}/{len(test)})")
    return paths
