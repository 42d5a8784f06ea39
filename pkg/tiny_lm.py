"""
Tiny decoder-only transformer: the policy language model with a value head.

Sequences are processed in right-padded batches. Causal masking guarantees
that padding after a sequence's last real token never changes the hidden
states of earlier positions, so teacher forcing and decoding can share one
batched forward pass.
"""

import logging
import struct
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from autodiff import Graph, ParameterStore, Tensor
from errors import ConfigError, DataFormatError, SequenceError, ShapeError

logger = logging.getLogger(__name__)


class Vocab:
    """Fixed synthetic vocabulary with reserved special ids."""

    PAD, CLS, SEP, EOS, NA = 0, 1, 2, 3, 4

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ConfigError("Vocabulary tokens must be unique")
        self.tokens: List[str] = list(tokens)
        self._ids: Dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}
        self.keys = [t for t in self.tokens if t.startswith("K") and t[1:].isdigit()]
        self.values = [t for t in self.tokens if t.startswith("V") and t[1:].isdigit()]
        self.fillers = list(config.FILLER_WORDS)

    @classmethod
    def default(cls) -> "Vocab":
        tokens = (
            list(config.SPECIAL_TOKENS)
            + [f"K{i:02d}" for i in range(config.NUM_KEYS)]
            + [f"V{i:02d}" for i in range(config.NUM_VALUES)]
            + list(config.QUERY_WORDS)
            + list(config.FILLER_WORDS)
        )
        vocab = cls(tokens)
        if len(vocab) != config.VOCAB_SIZE:
            raise ConfigError(f"Vocabulary has {len(vocab)} tokens, expected {config.VOCAB_SIZE}")
        return vocab

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise SequenceError(f"Unknown token: {token!r}") from None

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise SequenceError(f"Token id {idx} outside vocabulary")
        return self.tokens[idx]

    def encode(self, tokens: Sequence[str]) -> Tuple[int, ...]:
        return tuple(self.id(t) for t in tokens)

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.token(int(i)) for i in ids]


VOCAB = Vocab.default()

ROLES = ("prompt", "response", "answer", "abstention")


@dataclass(frozen=True)
class TokenSequence:
    """A prompt or response as vocabulary ids."""

    ids: Tuple[int, ...]
    role: str = "response"

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if self.role not in ROLES:
            raise SequenceError(f"Unknown sequence role: {self.role}")
        if not self.ids:
            raise SequenceError(f"Empty {self.role} sequence")
        if min(self.ids) < 0 or max(self.ids) >= len(VOCAB):
            raise SequenceError(f"{self.role} contains ids outside vocabulary")
        if self.role != "prompt" and self.ids[-1] != Vocab.EOS:
            raise SequenceError(f"{self.role} sequence must end with EOS")

    def __len__(self) -> int:
        return len(self.ids)

    def tokens(self) -> List[str]:
        return VOCAB.decode(self.ids)


ABSTENTION = TokenSequence((Vocab.NA, Vocab.EOS), role="abstention")

SeqLike = Union[TokenSequence, Sequence[int]]


def as_ids(seq: SeqLike) -> Tuple[int, ...]:
    return seq.ids if isinstance(seq, TokenSequence) else tuple(int(i) for i in seq)


@dataclass
class ModelConfig:
    """Transformer shape; shared by the policy and reward backbones."""

    n_layers: int = config.MODEL_DEFAULTS["n_layers"]
    d_model: int = config.MODEL_DEFAULTS["d_model"]
    n_heads: int = config.MODEL_DEFAULTS["n_heads"]
    ffn_dim: int = config.MODEL_DEFAULTS["ffn_dim"]
    max_seq_len: int = config.MODEL_DEFAULTS["max_seq_len"]
    vocab_size: int = config.MODEL_DEFAULTS["vocab_size"]
    init_std: float = config.MODEL_DEFAULTS["init_std"]
    seed: int = config.MODEL_DEFAULTS["seed"]

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "ffn_dim", "max_seq_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        if self.vocab_size != len(VOCAB):
            raise ConfigError(f"model.vocab_size must equal {len(VOCAB)}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class PackedBatch:
    """Right-padded prompt+response pairs with teacher-forcing gather indices."""

    ids: np.ndarray            # (B, T) model input
    rows: np.ndarray           # (N,) batch row of each response token
    cols: np.ndarray           # (N,) input position predicting that token
    targets: np.ndarray        # (N,) response token ids
    segment: np.ndarray        # (B, N) 1.0 where token n belongs to row b
    prompt_last: np.ndarray    # (B,) position of the final prompt token
    response_lengths: np.ndarray  # (B,)


def pack_pairs(
    prompts: Sequence[SeqLike],
    responses: Sequence[SeqLike],
    max_seq_len: int,
) -> PackedBatch:
    """
    Lay out prompt+response pairs for one batched teacher-forced pass.

    The input row for a pair is prompt + response[:-1]; the logits at positions
    len(prompt)-1 .. len(prompt)+m-2 predict the m response tokens.
    """
    if len(prompts) != len(responses) or not prompts:
        raise SequenceError("pack_pairs needs equally many non-empty prompts and responses")
    rows, cols, targets, lengths, last = [], [], [], [], []
    inputs = []
    for b, (prompt, response) in enumerate(zip(prompts, responses)):
        p, r = as_ids(prompt), as_ids(response)
        if not p or not r:
            raise SequenceError("prompt and response must be non-empty")
        seq = p + r[:-1]
        if len(seq) > max_seq_len:
            raise SequenceError(f"sequence of length {len(seq)} exceeds max_seq_len={max_seq_len}")
        inputs.append(seq)
        last.append(len(p) - 1)
        lengths.append(len(r))
        for j, tok in enumerate(r):
            rows.append(b)
            cols.append(len(p) - 1 + j)
            targets.append(tok)
    width = max(len(s) for s in inputs)
    ids = np.full((len(inputs), width), Vocab.PAD, dtype=np.int64)
    for b, seq in enumerate(inputs):
        ids[b, : len(seq)] = seq
    rows_arr = np.asarray(rows, dtype=np.int64)
    segment = np.zeros((len(inputs), len(rows)), dtype=np.float64)
    segment[rows_arr, np.arange(len(rows))] = 1.0
    return PackedBatch(
        ids=ids,
        rows=rows_arr,
        cols=np.asarray(cols, dtype=np.int64),
        targets=np.asarray(targets, dtype=np.int64),
        segment=segment,
        prompt_last=np.asarray(last, dtype=np.int64),
        response_lengths=np.asarray(lengths, dtype=np.int64),
    )


def pad_prompts(prompts: Sequence[SeqLike], max_seq_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad prompts; returns (ids, index of each prompt's last token)."""
    seqs = [as_ids(p) for p in prompts]
    if not seqs or any(not s for s in seqs):
        raise SequenceError("prompts must be non-empty")
    width = max(len(s) for s in seqs)
    if width > max_seq_len:
        raise SequenceError(f"prompt of length {width} exceeds max_seq_len={max_seq_len}")
    ids = np.full((len(seqs), width), Vocab.PAD, dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
    return ids, np.asarray([len(s) - 1 for s in seqs], dtype=np.int64)


class Transformer:
    """Pre-norm decoder-only backbone with learned positional embeddings."""

    kind = "backbone"

    def __init__(self, model_config: Optional[ModelConfig] = None):
        self.config = model_config or ModelConfig()
        self.params = ParameterStore()
        rng = np.random.default_rng(self.config.seed)
        self._init_backbone(rng)
        self._init_heads(rng)
        self._masks: Dict[int, Tensor] = {}

    def _normal(self, rng: np.random.Generator, *shape: int) -> np.ndarray:
        return rng.normal(0.0, self.config.init_std, size=shape)

    def _init_backbone(self, rng: np.random.Generator) -> None:
        c = self.config
        self.params.add("tok_emb", self._normal(rng, c.vocab_size, c.d_model))
        self.params.add("pos_emb", self._normal(rng, c.max_seq_len, c.d_model))
        for i in range(c.n_layers):
            p = f"blocks.{i}"
            self.params.add(f"{p}.ln1.g", np.ones(c.d_model))
            self.params.add(f"{p}.ln1.b", np.zeros(c.d_model))
            for w in ("wq", "wk", "wv", "wo"):
                self.params.add(f"{p}.attn.{w}", self._normal(rng, c.d_model, c.d_model))
            self.params.add(f"{p}.ln2.g", np.ones(c.d_model))
            self.params.add(f"{p}.ln2.b", np.zeros(c.d_model))
            self.params.add(f"{p}.ffn.w1", self._normal(rng, c.d_model, c.ffn_dim))
            self.params.add(f"{p}.ffn.b1", np.zeros(c.ffn_dim))
            self.params.add(f"{p}.ffn.w2", self._normal(rng, c.ffn_dim, c.d_model))
            self.params.add(f"{p}.ffn.b2", np.zeros(c.d_model))
        self.params.add("ln_f.g", np.ones(c.d_model))
        self.params.add("ln_f.b", np.zeros(c.d_model))

    def _init_heads(self, rng: np.random.Generator) -> None:
        pass

    def _causal_mask(self, length: int) -> Tensor:
        if length not in self._masks:
            self._masks[length] = Tensor(np.triu(np.full((length, length), config.MASK_VALUE), k=1))
        return self._masks[length]

    def _attention(self, graph: Graph, x: Tensor, prefix: str) -> Tensor:
        c = self.config
        P = self.params
        length = x.shape[-2]
        q = graph.matmul(x, P[f"{prefix}.wq"])
        k = graph.matmul(x, P[f"{prefix}.wk"])
        v = graph.matmul(x, P[f"{prefix}.wv"])
        lead = (slice(None),) * (x.data.ndim - 1)
        scale = 1.0 / np.sqrt(c.head_dim)
        mask = self._causal_mask(length)
        heads = []
        for h in range(c.n_heads):
            cols = lead + (slice(h * c.head_dim, (h + 1) * c.head_dim),)
            qh, kh, vh = graph.slice(q, cols), graph.slice(k, cols), graph.slice(v, cols)
            scores = graph.scale(graph.matmul(qh, kh, transpose_b=True), scale)
            weights = graph.softmax(graph.add(scores, mask))
            heads.append(graph.matmul(weights, vh))
        merged = graph.concat(heads, axis=-1)
        return graph.matmul(merged, P[f"{prefix}.wo"])

    def hidden_states(self, graph: Graph, ids: np.ndarray) -> Tensor:
        """
        Contextualized hidden states for a batch of token ids.

        Args:
            graph: Graph to record on
            ids: Integer array (B, T) or (T,)

        Returns:
            Tensor of shape (B, T, d_model) or (T, d_model)
        """
        ids = np.asarray(ids, dtype=np.int64)
        length = ids.shape[-1]
        if length > self.config.max_seq_len:
            raise SequenceError(
                f"sequence of length {length} exceeds max_seq_len={self.config.max_seq_len}"
            )
        P = self.params
        x = graph.add(
            graph.embedding(P["tok_emb"], ids),
            graph.embedding(P["pos_emb"], np.arange(length)),
        )
        for i in range(self.config.n_layers):
            p = f"blocks.{i}"
            h = graph.layer_norm(x, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
            x = graph.add(x, self._attention(graph, h, f"{p}.attn"))
            h = graph.layer_norm(x, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
            h = graph.gelu(graph.add(graph.matmul(h, P[f"{p}.ffn.w1"]), P[f"{p}.ffn.b1"]))
            h = graph.add(graph.matmul(h, P[f"{p}.ffn.w2"]), P[f"{p}.ffn.b2"])
            x = graph.add(x, h)
        return graph.layer_norm(x, P["ln_f.g"], P["ln_f.b"])

    def pooled(self, graph: Graph, ids: np.ndarray, positions: np.ndarray) -> Tensor:
        """Hidden state (B, d_model) at one position per batch row."""
        hidden = self.hidden_states(graph, ids)
        rows = np.arange(hidden.shape[0])
        return graph.slice(hidden, (rows, np.asarray(positions, dtype=np.int64)))

    def state_dict(self):
        return self.params.state_dict()

    def load_state_dict(self, state) -> None:
        self.params.load_state_dict(state)

    def copy_backbone(self, source: "Transformer") -> None:
        """Overwrite this model's backbone with a copy of source's; heads keep their values."""
        for name, tensor in self.params.items():
            if "_head." in name:
                continue
            if name not in source.params or source.params[name].shape != tensor.shape:
                found = source.params[name].shape if name in source.params else ()
                raise ShapeError(f"copy_backbone {name}", tensor.shape, found)
            tensor.data = source.params[name].data.copy()

    def clone(self):
        twin = type(self)(self.config)
        twin.load_state_dict(self.state_dict())
        return twin


class LanguageModel(Transformer):
    """Policy π_θ: next-token head plus a scalar value head sharing the backbone."""

    kind = "policy"

    def _init_heads(self, rng: np.random.Generator) -> None:
        c = self.config
        self.params.add("lm_head.w", self._normal(rng, c.d_model, c.vocab_size))
        self.params.add("value_head.w", np.zeros((c.d_model, 1)))
        self.params.add("value_head.b", np.zeros(1))

    def logits(self, graph: Graph, ids: np.ndarray) -> Tensor:
        return graph.matmul(self.hidden_states(graph, ids), self.params["lm_head.w"])

    def values(self, graph: Graph, ids: np.ndarray, positions: np.ndarray) -> Tensor:
        """V(X) for each row, read at that row's final prompt position; shape (B,)."""
        pooled = self.pooled(graph, ids, positions)
        out = graph.add(graph.matmul(pooled, self.params["value_head.w"]), self.params["value_head.b"])
        return graph.slice(out, (slice(None), 0))

    def response_token_logits(self, graph: Graph, packed: PackedBatch) -> Tensor:
        """Logits (N, V) at the positions that predict each response token."""
        return graph.slice(self.logits(graph, packed.ids), (packed.rows, packed.cols))

    def heads(self, graph: Graph, packed: PackedBatch) -> Tuple[Tensor, Tensor]:
        """
        Response-token logits (N, V) and V(X) (B,) from one shared forward pass.

        V(X) is read at each row's final prompt position, which causality keeps
        independent of the response tokens that follow it.
        """
        hidden = self.hidden_states(graph, packed.ids)
        logits = graph.matmul(graph.slice(hidden, (packed.rows, packed.cols)), self.params["lm_head.w"])
        rows = np.arange(packed.ids.shape[0])
        pooled = graph.slice(hidden, (rows, packed.prompt_last))
        out = graph.add(graph.matmul(pooled, self.params["value_head.w"]), self.params["value_head.b"])
        return logits, graph.slice(out, (slice(None), 0))

    def sequence_log_probs(self, graph: Graph, packed: PackedBatch) -> Tensor:
        """Σ_j log P(y_j | X, y_<j) per row; shape (B,)."""
        token_logits = self.response_token_logits(graph, packed)
        token_lp = graph.scale(graph.cross_entropy(token_logits, packed.targets), -1.0)
        return graph.sum(graph.mul(token_lp, Tensor(packed.segment)), axis=1)

    # -- public single-sequence API ------------------------------------------------

    def forward_logits(self, prefix: SeqLike) -> np.ndarray:
        """Per-position next-token logits (T, V) for one prefix."""
        ids = np.asarray(as_ids(prefix), dtype=np.int64)
        if ids.size == 0:
            raise SequenceError("Empty prefix")
        return np.array(self.logits(Graph(), ids[None, :]).data[0])

    def sequence_log_prob(self, prompt: SeqLike, response: SeqLike) -> float:
        _check_response(response)
        packed = pack_pairs([prompt], [response], self.config.max_seq_len)
        return float(self.sequence_log_probs(Graph(), packed).data[0])

    def confidence_score(self, prompt: SeqLike, response: SeqLike) -> float:
        """S(Y|X): mean per-token log-probability of the response."""
        _check_response(response)
        return self.sequence_log_prob(prompt, response) / len(as_ids(response))

    def value_estimate(self, prompt: SeqLike) -> float:
        ids, last = pad_prompts([prompt], self.config.max_seq_len)
        return float(self.values(Graph(), ids, last).data[0])

    def decode(
        self,
        prompt: SeqLike,
        mode: str = "greedy",
        temperature: float = 1.0,
        seed: Optional[int] = None,
        max_new: int = 4,
    ) -> TokenSequence:
        return self.decode_batch([prompt], mode, temperature, [seed], max_new)[0]

    def decode_batch(
        self,
        prompts: Sequence[SeqLike],
        mode: str = "greedy",
        temperature: float = 1.0,
        seeds: Optional[Sequence[Optional[int]]] = None,
        max_new: int = 4,
    ) -> List[TokenSequence]:
        """
        Autoregressive decoding for a batch of prompts.

        Each row draws from its own generator, so sampled output does not depend
        on batch composition. Greedy ties resolve to the lowest token id. The
        last of the max_new slots is reserved for EOS: a row that has not
        stopped by then is terminated with a forced EOS.

        Args:
            prompts: Prompt sequences
            mode: 'greedy' or 'sample'
            temperature: Sampling temperature (> 0)
            seeds: Per-row seeds for sample mode
            max_new: Maximum number of generated tokens, EOS included

        Returns:
            EOS-terminated response sequences, one per prompt
        """
        if mode not in ("greedy", "sample"):
            raise ValueError(f"Unknown decode mode: {mode}")
        if max_new < 1:
            raise SequenceError("max_new must be at least 1")
        if mode == "sample" and temperature <= 0:
            raise ValueError("temperature must be positive")
        seqs = [as_ids(p) for p in prompts]
        if not seqs or any(not s for s in seqs):
            raise SequenceError("prompts must be non-empty")
        longest = max(len(s) for s in seqs) + max_new - 1
        if longest > self.config.max_seq_len:
            raise SequenceError(
                f"prompt plus {max_new} new tokens exceeds max_seq_len={self.config.max_seq_len}"
            )
        seeds = list(seeds) if seeds is not None else [None] * len(seqs)
        rngs = [np.random.default_rng(s) for s in seeds]

        width = max(len(s) for s in seqs) + max_new
        buffer = np.full((len(seqs), width), Vocab.PAD, dtype=np.int64)
        for b, s in enumerate(seqs):
            buffer[b, : len(s)] = s
        cursor = np.asarray([len(s) - 1 for s in seqs], dtype=np.int64)
        generated: List[List[int]] = [[] for _ in seqs]
        active = np.ones(len(seqs), dtype=bool)

        for step in range(max_new):
            span = int(cursor[active].max()) + 1
            logits = self.logits(Graph(), buffer[:, :span]).data
            for b in np.flatnonzero(active):
                row = logits[b, cursor[b]]
                if mode == "greedy":
                    token = int(np.argmax(row))
                else:
                    token = _sample_token(row, temperature, rngs[b])
                if step == max_new - 1 and token != Vocab.EOS:
                    token = Vocab.EOS
                generated[b].append(token)
                if token == Vocab.EOS:
                    active[b] = False
                else:
                    cursor[b] += 1
                    buffer[b, cursor[b]] = token
            if not active.any():
                break
        return [TokenSequence(tuple(g), role="response") for g in generated]


def _sample_token(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    scaled = logits / temperature
    probs = np.exp(scaled - scaled.max())
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(cdf) - 1)


def _check_response(response: SeqLike) -> None:
    ids = as_ids(response)
    if not ids:
        raise SequenceError("Empty response")
    if ids[-1] != Vocab.EOS:
        raise SequenceError("Response must end with EOS")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"SALUCKPT\n"


def save_checkpoint(model: Transformer, path: str, extra: Optional[Dict[str, str]] = None) -> None:
    """Write header (version, kind, config) then length-prefixed little-endian f64 tensors."""
    header = {"format_version": str(config.CHECKPOINT_FORMAT_VERSION), "kind": model.kind}
    header.update({k: repr(v) for k, v in asdict(model.config).items()})
    header.update(extra or {})
    with open(path, "wb") as f:
        f.write(_MAGIC)
        for key, value in header.items():
            f.write(f"{key}={value}\n".encode("utf-8"))
        f.write(b"end\n")
        for name, tensor in model.params.items():
            raw_name = name.encode("utf-8")
            payload = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
            f.write(struct.pack("<I", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<I", tensor.data.ndim))
            f.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.shape))
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def read_checkpoint(path: str) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    """Parse a checkpoint into (header, name -> array)."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(_MAGIC):
        raise DataFormatError(path, 1, "not a checkpoint file")
    offset = len(_MAGIC)
    header: Dict[str, str] = {}
    line_no = 1
    while True:
        end = blob.find(b"\n", offset)
        if end < 0:
            raise DataFormatError(path, line_no, "unterminated header")
        line = blob[offset:end].decode("utf-8")
        offset = end + 1
        line_no += 1
        if line == "end":
            break
        key, sep, value = line.partition("=")
        if not sep:
            raise DataFormatError(path, line_no, f"bad header line {line!r}")
        header[key] = value
    if header.get("format_version") != str(config.CHECKPOINT_FORMAT_VERSION):
        raise DataFormatError(path, 2, f"unsupported format_version {header.get('format_version')}")

    tensors: Dict[str, np.ndarray] = {}
    try:
        while offset < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset: offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", blob, offset)
            offset += 8
            if offset + nbytes > len(blob):
                raise struct.error("truncated payload")
            data = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset)
            offset += nbytes
            tensors[name] = data.astype(np.float64).reshape(shape)
    except struct.error as e:
        raise DataFormatError(path, line_no, f"corrupt tensor section: {e}") from None
    return header, tensors


def config_from_header(header: Dict[str, str]) -> ModelConfig:
    values = {}
    for f in fields(ModelConfig):
        if f.name in header:
            values[f.name] = type(f.default)(header[f.name])
    return ModelConfig(**values)


def load_model(path: str, expected_kind: Optional[str] = None):
    """Rebuild a policy or reward model from a checkpoint."""
    header, tensors = read_checkpoint(path)
    kind = header.get("kind")
    if expected_kind and kind != expected_kind:
        raise DataFormatError(path, 2, f"expected kind={expected_kind}, found kind={kind}")
    model_cls = _MODEL_KINDS.get(kind)
    if model_cls is None:
        raise DataFormatError(path, 2, f"unknown checkpoint kind {kind!r}")
    model = model_cls(config_from_header(header))
    model.load_state_dict(tensors)
    logger.info(f"Loaded {kind} checkpoint from {path}")
    return model


_MODEL_KINDS: Dict[str, type] = {"policy": LanguageModel}


def register_model_kind(kind: str, model_cls: type) -> None:
    _MODEL_KINDS[kind] = model_cls
