"""
Configuration settings for the SALU answerability pipeline.
"""

import os
from typing import Dict, List

# Application settings
APP_NAME = "SALU Desk-Scale Answerability Pipeline"
APP_DESCRIPTION = "Train a tiny language model to answer or abstain, then refine it with confidence-shaped PPO"
OUTPUT_DIR = os.getenv("SALU_OUT_DIR", "runs")
THREADS = int(os.getenv("SALU_THREADS", 1))

# Logging settings
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

# Random state shared by every default config
RANDOM_STATE = 42

# Vocabulary layout
SPECIAL_TOKENS = ["<PAD>", "<CLS>", "<SEP>", "<EOS>", "<NA>"]
NUM_KEYS = 16
NUM_VALUES = 16
QUERY_WORDS = ["what", "is", "?", "."]
FILLER_WORDS = [
    "river", "garden", "market", "winter", "harbor", "forest", "tower",
    "valley", "letter", "engine", "signal", "meadow", "castle", "bridge",
    "candle", "mirror", "orbit", "pepper", "ribbon", "saddle", "timber",
    "velvet", "walnut",
]
VOCAB_SIZE = 64

# Numerical guards
PROB_CLAMP = 1e-12
MASK_VALUE = -1e9
LAYER_NORM_EPS = 1e-5
# finite differences at h=1e-5 carry ~1e-10 of rounding noise on a zero gradient
GRAD_CHECK_ATOL = 1e-7

# Model architecture (shared by policy and reward backbones)
MODEL_DEFAULTS = {
    "n_layers": 2,
    "d_model": 64,
    "n_heads": 4,
    "ffn_dim": 256,
    "max_seq_len": 64,
    "vocab_size": VOCAB_SIZE,
    "init_std": 0.02,
    "seed": RANDOM_STATE,
}

# Synthetic corpus
DATASET_DEFAULTS = {
    "n_episodes": 2560,
    "na_ratio": 0.5,
    "n_passages": 3,
    "facts_per_passage": 2,
    "history_min": 0,
    "history_max": 2,
    "seed": RANDOM_STATE,
}
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
NEGATIVES_PER_EPISODE = 1

# Supervised fine-tuning
SFT_DEFAULTS = {
    "alpha": 1.0,
    "beta": 1.0,
    "lr": 3e-4,
    "batch_size": 32,
    "max_steps": 2000,
    "eval_every": 100,
    "patience": 5,
    "warmup_steps": 0,
    "max_grad_norm": 1.0,
    "log_every": 50,
    "seed": RANDOM_STATE,
}

# Reward model
REWARD_DEFAULTS = {
    "lr": 3e-4,
    "batch_size": 32,
    "max_steps": 800,
    "holdout_fraction": 0.1,
    "negatives_per_episode": NEGATIVES_PER_EPISODE,
    "warmup_steps": 0,
    "max_grad_norm": 1.0,
    "log_every": 50,
    "seed": RANDOM_STATE,
}

# Plan arms initialise the reward backbone from their SFT policy ("policy") or at random ("scratch")
REWARD_INIT_CHOICES = ("policy", "scratch")
REWARD_INIT = "policy"

BASE_REWARD_TABLE = {
    "correct_answer": 1.0,
    "correct_abstention": 1.0,
    "hallucination": -2.0,
    "wrong_answer": -1.0,
    "over_abstention": -0.5,
}

# Confidence-shaped PPO
PPO_DEFAULTS = {
    "clip_epsilon": 0.2,
    "kl_coef": 0.05,
    "lambda_abstain": 0.5,
    "lambda_halluc": 1.0,
    "rollout_batch": 64,
    "ppo_epochs": 4,
    "iterations": 30,
    "lr": 1e-4,
    "value_loss_coef": 0.5,
    "max_new_tokens": 4,
    "sample_temperature": 1.0,
    "max_grad_norm": 1.0,
    "kl_abort": 1.0,
    "reward_source": "rules",
    "log_every": 1,
    "seed": RANDOM_STATE,
}
MAX_LOG_RATIO = 50.0

# Evaluation
EVAL_DEFAULTS = {
    "n_episodes": 256,
    "na_ratio": 0.5,
    "max_new_tokens": 4,
}

# Experiment plan: training corpus size is train + val; the test set is generated separately
PLAN_TRAIN_EPISODES = 2048
PLAN_VAL_EPISODES = 256

# Training data composition sweep
SWEEP_RATIOS: List[float] = [0.2, 0.3, 0.5, 0.7]

# Experiment arms, in hallucination-table order
DEFAULT_ARMS: List[Dict] = [
    {"name": "qa_only", "label": "SFT for Standard QA", "sft_overrides": {"beta": 0.0}, "ppo": False},
    {"name": "salu_sft", "label": "SALU without RLHF", "sft_overrides": {}, "ppo": False},
    {"name": "salu_rlhf", "label": "SALU with RLHF", "sft_overrides": {}, "ppo": True,
     "sft_seed_arm": "salu_sft"},
]

# Artifact names (per arm directory)
CHECKPOINT_FORMAT_VERSION = 1
SFT_CHECKPOINT = "sft.ckpt"
REWARD_CHECKPOINT = "reward.ckpt"
PPO_CHECKPOINT = "ppo.ckpt"
SFT_LOSS_CSV = "sft_loss.csv"
REWARD_LOSS_CSV = "reward_loss.csv"
PPO_STATS_CSV = "ppo_stats.csv"
ROLLOUT_LOG_CSV = "rollouts.csv"
METRICS_JSON = "metrics.json"
METADATA_JSON = "metadata.json"

# Acceptance checks over a finished plan run
ACCEPTANCE_ARMS = {"qa_only": "qa_only", "sft": "salu_sft", "rlhf": "salu_rlhf"}
ACCEPTANCE = {
    "sft_min": 0.95,
    "qa_only_halluc_min": 0.8,
    "rlhf_halluc_max": 0.05,
    "rlhf_min_reduction": 0.5,
    "reward_accuracy_min": 0.95,
    "reward_min_pairs": 2000,
    "shuffled_center": 0.5,
    "shuffled_band": 0.1,
    "kl_max": 0.5,
    "reward_window": 10,
    "reward_window_violations": 1,
}

# Number formatting for report tables
REPORT_DECIMALS = 3
