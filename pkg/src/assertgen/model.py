"""Encoder-decoder transformer and the augmented-input assembler.

The generator is a small sequence-to-sequence transformer trained from
random initialization.  Its encoder doubles as the blueprint for the
retriever encoder, which is an independent parameter copy so the two
gradient paths of joint training stay separate.  Inputs follow the layout
"[CLS] query-focal-test \\n // retrieved-focal-test \\n retrieved-assertion",
and the final-layer hidden state of [CLS] is the sequence embedding used
for retrieval.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .corpus import TestAssertPair
from .nn import Tensor
from .tokenizer import COMMENT_TOKEN, NEWLINE_TOKEN, Tokenizer


@dataclass(frozen=True, slots=True)
class ModelConfig:
    """Architecture hyperparameters plus the reserved special-token ids."""

    vocab_size: int
    d_model: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ff_multiplier: int = 4
    max_input_len: int = 512
    max_output_len: int = 64
    dropout: float = 0.1
    tie_embedding: bool = False
    cls_id: int = 0
    eos_id: int = 1
    pad_id: int = 2

    def __post_init__(self) -> None:
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.max_input_len < 1 or self.max_output_len < 1:
            raise ValueError("sequence length limits must be >= 1")

    @classmethod
    def paper_scale(cls, vocab_size: int) -> "ModelConfig":
        """The full-scale preset (not the default): d=768 with 12+12 layers."""
        return cls(
            vocab_size=vocab_size,
            d_model=768,
            encoder_layers=12,
            decoder_layers=12,
            heads=12,
        )

    def desk_scale(self) -> "ModelConfig":
        return replace(self)


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    """Parameter-free position table: sines on even, cosines on odd channels."""
    cached = _PE_CACHE.get((length, d_model))
    if cached is not None:
        return cached
    positions = np.arange(length, dtype=np.float64)[:, None]
    channels = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, 2.0 * channels / d_model)
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    table.setflags(write=False)
    _PE_CACHE[(length, d_model)] = table
    return table


def _attention_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def encoder_param_names(cfg: ModelConfig) -> list[str]:
    names = ["embed"]
    for i in range(cfg.encoder_layers):
        names.extend(_attention_names(f"enc{i}.attn"))
        names.extend([f"enc{i}.ln1.g", f"enc{i}.ln1.b"])
        names.extend([f"enc{i}.ff.w1", f"enc{i}.ff.b1", f"enc{i}.ff.w2", f"enc{i}.ff.b2"])
        names.extend([f"enc{i}.ln2.g", f"enc{i}.ln2.b"])
    return names


def _init_attention(params: dict[str, Tensor], prefix: str, d: int, rng: np.random.Generator) -> None:
    for w in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{w}"] = Tensor(rng.normal(0.0, 0.02, (d, d)), requires_grad=True)
    for b in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.{b}"] = Tensor(np.zeros(d), requires_grad=True)


def _init_block_tail(params: dict[str, Tensor], prefix: str, cfg: ModelConfig,
                     rng: np.random.Generator, ln_ff: tuple[str, str]) -> None:
    d = cfg.d_model
    hidden = cfg.ff_multiplier * d
    ln_a, ln_b = ln_ff
    params[f"{prefix}.{ln_a}.g"] = Tensor(np.ones(d), requires_grad=True)
    params[f"{prefix}.{ln_a}.b"] = Tensor(np.zeros(d), requires_grad=True)
    params[f"{prefix}.ff.w1"] = Tensor(rng.normal(0.0, 0.02, (d, hidden)), requires_grad=True)
    params[f"{prefix}.ff.b1"] = Tensor(np.zeros(hidden), requires_grad=True)
    params[f"{prefix}.ff.w2"] = Tensor(rng.normal(0.0, 0.02, (hidden, d)), requires_grad=True)
    params[f"{prefix}.ff.b2"] = Tensor(np.zeros(d), requires_grad=True)
    params[f"{prefix}.{ln_b}.g"] = Tensor(np.ones(d), requires_grad=True)
    params[f"{prefix}.{ln_b}.b"] = Tensor(np.zeros(d), requires_grad=True)


def init_encoder_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {
        "embed": Tensor(rng.normal(0.0, 0.02, (cfg.vocab_size, cfg.d_model)), requires_grad=True)
    }
    for i in range(cfg.encoder_layers):
        _init_attention(params, f"enc{i}.attn", cfg.d_model, rng)
        _init_block_tail(params, f"enc{i}", cfg, rng, ("ln1", "ln2"))
    return params


def init_seq2seq_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E2]))
    params = init_encoder_params(cfg, rng)
    for i in range(cfg.decoder_layers):
        _init_attention(params, f"dec{i}.self", cfg.d_model, rng)
        params[f"dec{i}.ln1.g"] = Tensor(np.ones(cfg.d_model), requires_grad=True)
        params[f"dec{i}.ln1.b"] = Tensor(np.zeros(cfg.d_model), requires_grad=True)
        _init_attention(params, f"dec{i}.cross", cfg.d_model, rng)
        _init_block_tail(params, f"dec{i}", cfg, rng, ("ln2", "ln3"))
    if not cfg.tie_embedding:
        params["proj.w"] = Tensor(rng.normal(0.0, 0.02, (cfg.d_model, cfg.vocab_size)), requires_grad=True)
    params["proj.b"] = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)
    return params


def _split_heads(x: Tensor, batch: int, length: int, heads: int, head_dim: int) -> Tensor:
    return nn.transpose(nn.reshape(x, (batch, length, heads, head_dim)), (0, 2, 1, 3))


def _merge_heads(x: Tensor, batch: int, length: int, d_model: int) -> Tensor:
    return nn.reshape(nn.transpose(x, (0, 2, 1, 3)), (batch, length, d_model))


def _attention(params: dict[str, Tensor], prefix: str, query: Tensor, keys: Tensor,
               cfg: ModelConfig, mask: np.ndarray | None) -> Tensor:
    batch, q_len = query.shape[0], query.shape[1]
    k_len = keys.shape[1]
    head_dim = cfg.d_model // cfg.heads
    q = nn.add(nn.matmul(query, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = nn.add(nn.matmul(keys, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = nn.add(nn.matmul(keys, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    q = _split_heads(q, batch, q_len, cfg.heads, head_dim)
    k = _split_heads(k, batch, k_len, cfg.heads, head_dim)
    v = _split_heads(v, batch, k_len, cfg.heads, head_dim)
    scores = nn.mul(nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    if mask is not None:
        scores = nn.add(scores, mask)
    weights = nn.softmax(scores, axis=-1)
    context = _merge_heads(nn.matmul(weights, v), batch, q_len, cfg.d_model)
    return nn.add(nn.matmul(context, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _maybe_dropout(x: Tensor, cfg: ModelConfig, train: bool, rng) -> Tensor:
    if train and cfg.dropout > 0.0:
        return nn.dropout(x, cfg.dropout, rng)
    return x


def encoder_forward(params: dict[str, Tensor], cfg: ModelConfig, ids: np.ndarray,
                    train: bool = False, rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
    """Run the encoder stack over [B, L] ids; returns hidden states and the
    boolean keep-mask marking non-padding positions."""
    ids = np.asarray(ids, dtype=np.int64)
    batch, length = ids.shape
    keep = ids != cfg.pad_id
    mask = nn.additive_mask(keep)[:, None, None, :]
    x = nn.mul(nn.gather(params["embed"], ids), np.sqrt(cfg.d_model))
    x = nn.add(x, sinusoidal_encoding(length, cfg.d_model))
    x = _maybe_dropout(x, cfg, train, rng)
    for i in range(cfg.encoder_layers):
        attended = _attention(params, f"enc{i}.attn", x, x, cfg, mask)
        x = nn.layer_norm(nn.add(x, _maybe_dropout(attended, cfg, train, rng)),
                          params[f"enc{i}.ln1.g"], params[f"enc{i}.ln1.b"])
        ff = nn.matmul(nn.gelu(nn.add(nn.matmul(x, params[f"enc{i}.ff.w1"]), params[f"enc{i}.ff.b1"])),
                       params[f"enc{i}.ff.w2"])
        ff = nn.add(ff, params[f"enc{i}.ff.b2"])
        x = nn.layer_norm(nn.add(x, _maybe_dropout(ff, cfg, train, rng)),
                          params[f"enc{i}.ln2.g"], params[f"enc{i}.ln2.b"])
    return x, keep


def decoder_forward(params: dict[str, Tensor], cfg: ModelConfig, decoder_in: np.ndarray,
                    memory: Tensor, memory_keep: np.ndarray, train: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Causal decoder over [B, T] shifted targets; returns [B, T, V] logits."""
    decoder_in = np.asarray(decoder_in, dtype=np.int64)
    batch, length = decoder_in.shape
    causal = np.triu(np.full((length, length), -np.inf), k=1)[None, None, :, :]
    cross_mask = nn.additive_mask(memory_keep)[:, None, None, :]
    x = nn.mul(nn.gather(params["embed"], decoder_in), np.sqrt(cfg.d_model))
    x = nn.add(x, sinusoidal_encoding(length, cfg.d_model))
    x = _maybe_dropout(x, cfg, train, rng)
    for i in range(cfg.decoder_layers):
        attended = _attention(params, f"dec{i}.self", x, x, cfg, causal)
        x = nn.layer_norm(nn.add(x, _maybe_dropout(attended, cfg, train, rng)),
                          params[f"dec{i}.ln1.g"], params[f"dec{i}.ln1.b"])
        crossed = _attention(params, f"dec{i}.cross", x, memory, cfg, cross_mask)
        x = nn.layer_norm(nn.add(x, _maybe_dropout(crossed, cfg, train, rng)),
                          params[f"dec{i}.ln2.g"], params[f"dec{i}.ln2.b"])
        ff = nn.matmul(nn.gelu(nn.add(nn.matmul(x, params[f"dec{i}.ff.w1"]), params[f"dec{i}.ff.b1"])),
                       params[f"dec{i}.ff.w2"])
        ff = nn.add(ff, params[f"dec{i}.ff.b2"])
        x = nn.layer_norm(nn.add(x, _maybe_dropout(ff, cfg, train, rng)),
                          params[f"dec{i}.ln3.g"], params[f"dec{i}.ln3.b"])
    if cfg.tie_embedding:
        logits = nn.matmul(x, nn.transpose(params["embed"], (1, 0)))
    else:
        logits = nn.matmul(x, params["proj.w"])
    return nn.add(logits, params["proj.b"])


def _pad_batch(sequences: list[list[int]], pad_id: int) -> np.ndarray:
    width = max(len(s) for s in sequences)
    out = np.full((len(sequences), width), pad_id, dtype=np.int64)
    for i, seq in enumerate(sequences):
        out[i, : len(seq)] = seq
    return out


class Seq2SeqModel:
    """Generator parameters plus the forward passes that use them."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int = 0) -> "Seq2SeqModel":
        return cls(cfg, init_seq2seq_params(cfg, seed))

    def encode_with_cls(self, ids: list[int] | np.ndarray) -> tuple[Tensor, Tensor]:
        """Hidden states for one sequence plus the [CLS] position embedding."""
        ids = list(np.asarray(ids, dtype=np.int64))
        if not ids or ids[0] != self.cfg.cls_id:
            raise ValueError("input must start with the [CLS] token")
        if len(ids) > self.cfg.max_input_len:
            raise ValueError(f"input of {len(ids)} tokens exceeds limit {self.cfg.max_input_len}")
        hidden, _ = encoder_forward(self.params, self.cfg, np.asarray([ids]))
        h = hidden[0]
        return h, h[0]

    def sequence_losses(self, inputs: list[list[int]], targets: list[list[int]],
                        train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Per-sequence teacher-forced cross-entropy for aligned id lists."""
        if len(inputs) != len(targets):
            raise ValueError(f"{len(inputs)} inputs vs {len(targets)} targets")
        for t in targets:
            if len(t) == 0:
                raise ValueError("empty target sequence")
            if len(t) > self.cfg.max_output_len:
                raise ValueError(f"target of {len(t)} tokens exceeds limit {self.cfg.max_output_len}")
        src = _pad_batch(inputs, self.cfg.pad_id)
        tgt = _pad_batch(targets, self.cfg.pad_id)
        # Decoder start reuses the PAD id; it never appears inside targets.
        decoder_in = np.roll(tgt, 1, axis=1)
        decoder_in[:, 0] = self.cfg.pad_id
        memory, keep = encoder_forward(self.params, self.cfg, src, train, rng)
        logits = decoder_forward(self.params, self.cfg, decoder_in, memory, keep, train, rng)
        return nn.sequence_cross_entropy(logits, tgt, ignore_id=self.cfg.pad_id)

    def teacher_forced_loss(self, input_ids: list[int], target_ids: list[int],
                            train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        losses = self.sequence_losses([list(input_ids)], [list(target_ids)], train, rng)
        return losses[0]

    # Inference protocol shared with toy scoring models: encode once, then
    # ask for next-token log-probabilities given the emitted prefix.
    def start_inference(self, input_ids: list[int]):
        memory, keep = encoder_forward(self.params, self.cfg, _pad_batch([list(input_ids)], self.cfg.pad_id))
        return memory, keep

    def step_logprobs(self, memo, prefix_ids: list[int]) -> np.ndarray:
        memory, keep = memo
        decoder_in = np.asarray([[self.cfg.pad_id] + list(prefix_ids)], dtype=np.int64)
        logits = decoder_forward(self.params, self.cfg, decoder_in, memory, keep)
        return nn.log_softmax(logits[0][len(prefix_ids)], axis=-1).data

    @property
    def eos_id(self) -> int:
        return self.cfg.eos_id

    @property
    def max_len(self) -> int:
        return self.cfg.max_output_len

    def greedy_decode_batch(self, inputs: list[list[int]], max_len: int | None = None) -> list[list[int]]:
        """Greedy decoding for a batch; returns emitted ids without EOS."""
        limit = self.cfg.max_output_len if max_len is None else max_len
        with nn.no_grad():
            src = _pad_batch(inputs, self.cfg.pad_id)
            memory, keep = encoder_forward(self.params, self.cfg, src)
            batch = len(inputs)
            emitted = np.full((batch, 0), 0, dtype=np.int64)
            done = np.zeros(batch, dtype=bool)
            for _ in range(limit):
                decoder_in = np.concatenate(
                    [np.full((batch, 1), self.cfg.pad_id, dtype=np.int64), emitted], axis=1
                )
                logits = decoder_forward(self.params, self.cfg, decoder_in, memory, keep)
                step = np.argmax(logits.data[:, -1, :], axis=-1)
                step = np.where(done, self.cfg.pad_id, step)
                emitted = np.concatenate([emitted, step[:, None]], axis=1)
                done |= step == self.cfg.eos_id
                if done.all():
                    break
        outputs = []
        for row in emitted:
            ids = []
            for i in row:
                if i == self.cfg.eos_id:
                    break
                if i != self.cfg.pad_id:
                    ids.append(int(i))
            outputs.append(ids)
        return outputs


class RetrieverEncoder:
    """The retriever's transformer encoder: an independent parameter copy
    with the same configuration shape as the generator's encoder."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def from_generator(cls, model: Seq2SeqModel) -> "RetrieverEncoder":
        names = encoder_param_names(model.cfg)
        copied = {
            name: Tensor(model.params[name].data.copy(), requires_grad=True) for name in names
        }
        return cls(model.cfg, copied)

    def frozen_copy(self) -> "RetrieverEncoder":
        copied = {
            name: Tensor(p.data.copy(), requires_grad=False) for name, p in self.params.items()
        }
        return RetrieverEncoder(self.cfg, copied)

    def cls_batch(self, ids_list: list[list[int]]) -> Tensor:
        """[CLS] embeddings for a batch of sequences, shape [B, d]."""
        for ids in ids_list:
            if not ids or ids[0] != self.cfg.cls_id:
                raise ValueError("retriever input must start with the [CLS] token")
        src = _pad_batch(ids_list, self.cfg.pad_id)
        hidden, _ = encoder_forward(self.params, self.cfg, src)
        return hidden[:, 0, :]

    def encode_with_cls(self, ids: list[int]) -> tuple[Tensor, Tensor]:
        if not ids or ids[0] != self.cfg.cls_id:
            raise ValueError("input must start with the [CLS] token")
        hidden, _ = encoder_forward(self.params, self.cfg, np.asarray([list(ids)]))
        h = hidden[0]
        return h, h[0]

    def fingerprint(self) -> int:
        return nn.params_fingerprint(self.params)


def assemble_augmented_input(ft: str, retrieved: TestAssertPair | None) -> str:
    """Lay out the generator input: the query, then the retrieved pair as a
    commented block, or just the bare query when nothing is retrieved."""
    if not ft.strip():
        raise ValueError("focal-test text is empty")
    if retrieved is None:
        return f"[CLS] {ft}"
    return (
        f"[CLS] {ft} {NEWLINE_TOKEN} {COMMENT_TOKEN} {retrieved.focal_test} "
        f"{NEWLINE_TOKEN} {retrieved.assertion}"
    )


def encode_augmented(tok: Tokenizer, ft: str, retrieved: TestAssertPair | None,
                     max_len: int) -> list[int]:
    """Tokenize an assembled input, truncating only the retrieved tail.

    The query focal-test survives whole whenever it fits; the retrieved
    portion absorbs all truncation because it is advisory context.  A query
    longer than the whole window is cut at the window as a last resort.
    """
    query_ids = tok.encode(f"[CLS] {ft}")
    if retrieved is None or len(query_ids) >= max_len:
        return query_ids[:max_len]
    tail = tok.encode(
        f"{NEWLINE_TOKEN} {COMMENT_TOKEN} {retrieved.focal_test} {NEWLINE_TOKEN} {retrieved.assertion}",
        max_len=max_len - len(query_ids),
    )
    return query_ids + tail


def normalize_embedding(cls_vec: Tensor) -> Tensor:
    """Scale an embedding to unit Euclidean norm, differentiably.

    Accepts a single [d] vector or a [B, d] batch of rows.
    """
    sumsq = nn.tensor_sum(nn.mul(cls_vec, cls_vec), axis=-1, keepdims=True)
    if not (sumsq.data > 0).all():
        raise ValueError("cannot normalize a zero embedding")
    return nn.mul(cls_vec, nn.power(sumsq, -0.5))
