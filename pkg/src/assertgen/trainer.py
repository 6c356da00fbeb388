"""Joint training of the assertion generator and its dense retriever.

Each training sample retrieves its top-k neighbours from the codebase, the
generator scores the target assertion once per neighbour-augmented input, and
the per-candidate losses are combined under the retrieval probabilities.
Those probabilities are rebuilt inside the autodiff graph from freshly
embedded query and key texts, which is what lets retrieval quality improve
from generation loss alone.  Ranking, by contrast, always uses the index
snapshot, refreshed once per epoch by default.

Ablation modes swap the retrieval source: a frozen encoder (initial or
fine-tuned), token-overlap Jaccard, seeded random choice, or no retrieval at
all.  Non-dense modes attach uniform probabilities, so their generators train
on the same objective shape with the retriever's influence removed.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import nn
from .corpus import Corpus, TestAssertPair
from .metrics import corpus_bleu
from .model import (
    ModelConfig,
    RetrieverEncoder,
    Seq2SeqModel,
    encode_augmented,
    encoder_param_names,
    normalize_embedding,
)
from .nn import AdamState, Tensor, adam_step, clone_params, zero_grads
from .retriever import (
    Retrieved,
    embed_texts,
    index_codebase,
    jaccard_retrieve,
    random_retrieve,
    retrieve_topk,
)
from .tokenizer import CLS_TOKEN, Tokenizer, tokenizer_fingerprint

RETRIEVER_MODES = ("joint", "frozen-pretrained", "frozen-finetuned", "jaccard", "random", "none")
DENSE_MODES = ("joint", "frozen-pretrained", "frozen-finetuned")


class TrainerError(RuntimeError):
    """Raised for invalid training configuration or a diverged run."""


@dataclass(frozen=True, slots=True)
class TrainConfig:
    """Schedule and objective knobs; the defaults are the reference recipe."""

    batch_size: int = 8
    lr: float = 5e-5
    max_epochs: int = 20
    k: int = 5
    patience: int = 3
    retriever_mode: str = "joint"
    prob_mode: str = "softmax"
    prob_temperature: float = 1.0
    index_refresh_batches: int | None = None
    seed: int = 0
    max_input_len: int = 512
    max_output_len: int = 64

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise TrainerError("batch_size must be at least 1")
        if self.lr <= 0.0:
            raise TrainerError("lr must be positive")
        if self.max_epochs < 1:
            raise TrainerError("max_epochs must be at least 1")
        if self.k < 1:
            raise TrainerError("k must be at least 1")
        if self.patience < 1:
            raise TrainerError("patience must be at least 1")
        if self.retriever_mode not in RETRIEVER_MODES:
            raise TrainerError(
                f"unknown retriever mode {self.retriever_mode!r}; expected one of {RETRIEVER_MODES}"
            )
        if self.index_refresh_batches is not None and self.index_refresh_batches < 1:
            raise TrainerError("index_refresh_batches must be at least 1 when set")


@dataclass(frozen=True, slots=True)
class EpochRecord:
    epoch: int
    loss: float
    valid_bleu: float
    seconds: float


@dataclass
class EarlyStopping:
    """Strict-improvement tracker over validation scores.

    Only a score strictly above the best so far resets the stall counter;
    a run of ``patience`` non-improving epochs stops the schedule.  Scores
    (10, 12, 12, 12, 12) with patience 3 stop after the fifth epoch with
    the second as best.
    """

    patience: int
    best_score: float = -np.inf
    best_epoch: int = 0
    stall: int = 0

    def update(self, epoch: int, score: float) -> tuple[bool, bool]:
        """Feed one epoch's score; returns (improved, should_stop)."""
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.stall = 0
            return True, False
        self.stall += 1
        return False, self.stall >= self.patience


@dataclass(frozen=True, slots=True)
class TrainingHistory:
    records: tuple[EpochRecord, ...]
    best_epoch: int

    def comparable(self) -> tuple:
        """The deterministic projection: everything except wall time."""
        return (tuple((r.epoch, r.loss, r.valid_bleu) for r in self.records), self.best_epoch)


@dataclass(frozen=True, slots=True)
class ModelCheckpoint:
    """Best-epoch parameters plus everything needed to reuse them safely."""

    model_cfg: ModelConfig
    generator: dict[str, Tensor]
    retriever: dict[str, Tensor] | None
    tokenizer_hash: str
    retriever_mode: str
    history: TrainingHistory

    def model(self) -> Seq2SeqModel:
        return Seq2SeqModel(self.model_cfg, self.generator)

    def retriever_encoder(self) -> RetrieverEncoder | None:
        if self.retriever is None:
            return None
        return RetrieverEncoder(self.model_cfg, self.retriever)


@dataclass(slots=True)
class RetrieverState:
    """What joint_loss needs to weight candidates: tokenizer plus, for dense
    modes, the encoder whose embeddings define the probabilities."""

    tok: Tokenizer
    encoder: RetrieverEncoder | None = None
    prob_mode: str = "softmax"
    temperature: float = 1.0
    max_input_len: int = 512


def _live_weights(state: RetrieverState, queries: list[str], keys: list[list[str]]) -> Tensor:
    """In-graph probabilities over each query's k candidates, shape [B, k].

    Query and key texts are embedded fresh through the retriever encoder so
    the weights carry exact gradients; the index snapshot only decided which
    candidates are here.
    """
    batch = len(queries)
    k = len(keys[0])
    texts = list(queries)
    for row in keys:
        texts.extend(row)
    ids = [state.tok.encode(f"{CLS_TOKEN} {t}", max_len=state.max_input_len) for t in texts]
    unit = normalize_embedding(state.encoder.cls_batch(ids))
    d = unit.data.shape[1]
    q = nn.reshape(unit[:batch], (batch, 1, d))
    kk = nn.reshape(unit[batch:], (batch, k, d))
    scores = nn.tensor_sum(nn.mul(q, kk), axis=-1)
    if state.prob_mode == "softmax":
        return nn.softmax(nn.mul(scores, 1.0 / state.temperature), axis=-1)
    if state.prob_mode == "linear":
        if (scores.data <= 0.0).any():
            raise TrainerError("linear probability mode requires strictly positive scores")
        return nn.mul(scores, nn.power(nn.tensor_sum(scores, axis=-1, keepdims=True), -1.0))
    raise TrainerError(f"unknown probability mode {state.prob_mode!r}")


def _target_ids(tok: Tokenizer, assertion: str) -> list[int]:
    return tok.encode(assertion) + [tok.eos_id]


def joint_loss(
    model: Seq2SeqModel,
    state: RetrieverState,
    query: TestAssertPair,
    topk: list[Retrieved],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Probability-weighted sum of per-candidate generation losses.

    With a dense encoder in ``state`` the weights are recomputed inside the
    graph; otherwise the probabilities attached to ``topk`` are used as
    constants.  With a single candidate the weight is exactly one and the
    value reduces bitwise to the plain teacher-forced loss.
    """
    if not topk:
        raise TrainerError("joint_loss requires at least one retrieved candidate")
    k = len(topk)
    target = _target_ids(state.tok, query.assertion)
    inputs = [
        encode_augmented(state.tok, query.focal_test, r.pair, model.cfg.max_input_len) for r in topk
    ]
    ce = model.sequence_losses(inputs, [target] * k, train, rng)
    if state.encoder is not None:
        weights = nn.reshape(
            _live_weights(state, [query.focal_test], [[r.pair.focal_test for r in topk]]), (k,)
        )
    else:
        weights = Tensor(np.array([r.probability for r in topk]))
    return nn.tensor_sum(nn.mul(weights, ce))


def _batch_joint_loss(
    model: Seq2SeqModel,
    state: RetrieverState,
    samples: list[tuple[TestAssertPair, list[Retrieved] | None]],
    train: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    """Mean of per-sample joint losses, with all candidate rows batched into
    one generator forward and all embeddings into one retriever forward."""
    bare = samples[0][1] is None
    if bare:
        inputs = [
            encode_augmented(state.tok, pair.focal_test, None, model.cfg.max_input_len)
            for pair, _ in samples
        ]
        targets = [_target_ids(state.tok, pair.assertion) for pair, _ in samples]
        return nn.mean(model.sequence_losses(inputs, targets, train, rng))
    batch = len(samples)
    k = len(samples[0][1])
    inputs = []
    targets = []
    for pair, topk in samples:
        target = _target_ids(state.tok, pair.assertion)
        for r in topk:
            inputs.append(encode_augmented(state.tok, pair.focal_test, r.pair, model.cfg.max_input_len))
            targets.append(target)
    ce = nn.reshape(model.sequence_losses(inputs, targets, train, rng), (batch, k))
    if state.encoder is not None:
        weights = _live_weights(
            state,
            [pair.focal_test for pair, _ in samples],
            [[r.pair.focal_test for r in topk] for _, topk in samples],
        )
    else:
        weights = Tensor(np.array([[r.probability for r in topk] for _, topk in samples]))
    return nn.mean(nn.tensor_sum(nn.mul(weights, ce), axis=-1))


def select_ablation_retriever(
    mode: str,
    model: Seq2SeqModel,
    finetuned_phi: dict[str, Tensor] | None = None,
) -> RetrieverEncoder | None:
    """The retriever encoder for a mode, or None for the non-dense routes.

    ``frozen-finetuned`` needs the encoder parameters of a generator already
    trained without retrieval; :func:`train` derives them automatically when
    not supplied.
    """
    if mode == "joint":
        return RetrieverEncoder.from_generator(model)
    if mode == "frozen-pretrained":
        return RetrieverEncoder.from_generator(model).frozen_copy()
    if mode == "frozen-finetuned":
        if finetuned_phi is None:
            raise TrainerError("frozen-finetuned mode requires fine-tuned encoder parameters")
        copied = {
            name: Tensor(finetuned_phi[name].data.copy(), requires_grad=False)
            for name in encoder_param_names(model.cfg)
        }
        return RetrieverEncoder(model.cfg, copied)
    if mode in ("jaccard", "random", "none"):
        return None
    raise TrainerError(f"unknown retriever mode {mode!r}")


def _random_seed_for(cfg: TrainConfig, epoch: int, pair_id: int) -> int:
    return cfg.seed * 1_000_003 + epoch * 7_919 + pair_id


def _retrieve_batch(
    cfg: TrainConfig,
    samples: list[TestAssertPair],
    codebase: Corpus,
    index,
    encoder: RetrieverEncoder | None,
    tok: Tokenizer,
    epoch: int,
) -> list[list[Retrieved] | None]:
    mode = cfg.retriever_mode
    if mode == "none":
        return [None] * len(samples)
    if mode == "jaccard":
        return [
            jaccard_retrieve(codebase, pair.focal_test, cfg.k, exclude_id=pair.id)
            for pair in samples
        ]
    if mode == "random":
        return [
            random_retrieve(codebase, cfg.k, _random_seed_for(cfg, epoch, pair.id), exclude_id=pair.id)
            for pair in samples
        ]
    vecs = embed_texts(
        encoder, tok, [pair.focal_test for pair in samples], max_len=cfg.max_input_len
    )
    return [
        retrieve_topk(
            index,
            vec,
            cfg.k,
            exclude_id=pair.id,
            prob_mode=cfg.prob_mode,
            temperature=cfg.prob_temperature,
        )
        for pair, vec in zip(samples, vecs)
    ]


def _validation_inputs(
    cfg: TrainConfig,
    valid: Corpus,
    codebase: Corpus,
    index,
    encoder: RetrieverEncoder | None,
    tok: Tokenizer,
) -> list[list[int]]:
    """Generator inputs for the validation set, augmented with each query's
    single best neighbour under the current retriever."""
    mode = cfg.retriever_mode
    tops: list[TestAssertPair | None]
    if mode == "none":
        tops = [None] * len(valid)
    elif mode == "jaccard":
        tops = [jaccard_retrieve(codebase, p.focal_test, 1)[0].pair for p in valid]
    elif mode == "random":
        # Epoch-independent seeds keep the validation signal comparable
        # across epochs.
        tops = [
            random_retrieve(codebase, 1, _random_seed_for(cfg, 0, p.id))[0].pair for p in valid
        ]
    else:
        vecs = embed_texts(encoder, tok, [p.focal_test for p in valid], max_len=cfg.max_input_len)
        tops = [retrieve_topk(index, vec, 1)[0].pair for vec in vecs]
    return [
        encode_augmented(tok, pair.focal_test, top, cfg.max_input_len)
        for pair, top in zip(valid, tops)
    ]


def _decode_texts(model: Seq2SeqModel, tok: Tokenizer, inputs: list[list[int]], chunk: int = 64) -> list[str]:
    texts = []
    for start in range(0, len(inputs), chunk):
        for ids in model.greedy_decode_batch(inputs[start : start + chunk]):
            texts.append(tok.decode(ids))
    return texts


def train(
    train_corpus: Corpus,
    valid_corpus: Corpus,
    codebase: Corpus,
    tok: Tokenizer,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    run_dir: str | Path | None = None,
    finetuned_phi: dict[str, Tensor] | None = None,
) -> ModelCheckpoint:
    """Run the full schedule and return the best-epoch checkpoint.

    Per epoch: refresh the dense index, iterate seed-shuffled batches, take
    one Adam step per batch on the mean joint loss, then greedy-decode the
    validation set and record its BLEU.  Training stops when the best
    validation BLEU has not improved for ``patience`` consecutive epochs.
    """
    if len(train_corpus) == 0 or len(valid_corpus) == 0:
        raise TrainerError("train and validation splits must be non-empty")
    mode = cfg.retriever_mode
    dense = mode in DENSE_MODES
    if mode != "none" and len(codebase) <= cfg.k:
        raise TrainerError(
            f"codebase of {len(codebase)} pairs cannot serve k={cfg.k} with self-exclusion"
        )
    if model_cfg is None:
        model_cfg = ModelConfig(
            vocab_size=tok.vocab_size,
            max_input_len=cfg.max_input_len,
            max_output_len=cfg.max_output_len,
        )
    model = Seq2SeqModel.initialize(model_cfg, cfg.seed)
    if mode == "frozen-finetuned" and finetuned_phi is None:
        sub_cfg = replace(cfg, retriever_mode="none")
        finetuned_phi = train(train_corpus, valid_corpus, codebase, tok, sub_cfg, model_cfg).generator
    encoder = select_ablation_retriever(mode, model, finetuned_phi)
    state = RetrieverState(
        tok=tok,
        encoder=encoder,
        prob_mode=cfg.prob_mode,
        temperature=cfg.prob_temperature,
        max_input_len=cfg.max_input_len,
    )
    opt_params = {f"gen.{name}": p for name, p in model.params.items()}
    if mode == "joint":
        opt_params.update({f"ret.{name}": p for name, p in encoder.params.items()})
    adam = AdamState.for_params(opt_params, lr=cfg.lr)
    all_tensors = list(model.params.values())
    if encoder is not None:
        all_tensors += list(encoder.params.values())

    records: list[EpochRecord] = []
    stopper = EarlyStopping(patience=cfg.patience)
    best_gen = clone_params(model.params)
    best_phi = clone_params(encoder.params) if encoder is not None else None
    index = None
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        if dense:
            index = index_codebase(codebase, encoder, tok, max_len=cfg.max_input_len)
        shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5F, epoch]))
        dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xDAB, epoch]))
        order = shuffle_rng.permutation(len(train_corpus))
        loss_sum = 0.0
        seen = 0
        batches_since_refresh = 0
        for start in range(0, len(order), cfg.batch_size):
            if (
                dense
                and cfg.index_refresh_batches is not None
                and batches_since_refresh >= cfg.index_refresh_batches
            ):
                index = index_codebase(codebase, encoder, tok, max_len=cfg.max_input_len)
                batches_since_refresh = 0
            samples = [train_corpus[int(i)] for i in order[start : start + cfg.batch_size]]
            topks = _retrieve_batch(cfg, samples, codebase, index, encoder, tok, epoch)
            loss = _batch_joint_loss(
                model, state, list(zip(samples, topks)), train=True, rng=dropout_rng
            )
            if not np.isfinite(loss.data):
                raise TrainerError(
                    f"non-finite loss {float(loss.data)!r} at epoch {epoch}, "
                    f"batch {start // cfg.batch_size}"
                )
            loss.backward()
            grads = {name: p.grad for name, p in opt_params.items() if p.grad is not None}
            adam_step(opt_params, grads, adam)
            zero_grads(all_tensors)
            loss_sum += float(loss.data) * len(samples)
            seen += len(samples)
            batches_since_refresh += 1
        if dense and mode == "joint":
            # Validation retrieval should see the epoch's learned retriever.
            index = index_codebase(codebase, encoder, tok, max_len=cfg.max_input_len)
        valid_inputs = _validation_inputs(cfg, valid_corpus, codebase, index, encoder, tok)
        predictions = _decode_texts(model, tok, valid_inputs)
        bleu = corpus_bleu(predictions, [p.assertion for p in valid_corpus])
        records.append(
            EpochRecord(epoch, loss_sum / seen, bleu, time.perf_counter() - started)
        )
        improved, stop = stopper.update(epoch, bleu)
        if improved:
            best_gen = clone_params(model.params)
            best_phi = clone_params(encoder.params) if encoder is not None else None
        elif stop:
            break
    history = TrainingHistory(tuple(records), stopper.best_epoch)
    checkpoint = ModelCheckpoint(
        model_cfg=model_cfg,
        generator=best_gen,
        retriever=best_phi,
        tokenizer_hash=tokenizer_fingerprint(tok),
        retriever_mode=mode,
        history=history,
    )
    if run_dir is not None:
        final = ModelCheckpoint(
            model_cfg=model_cfg,
            generator=clone_params(model.params),
            retriever=clone_params(encoder.params) if encoder is not None else None,
            tokenizer_hash=checkpoint.tokenizer_hash,
            retriever_mode=mode,
            history=history,
        )
        _write_run_dir(Path(run_dir), cfg, model_cfg, history, checkpoint, final)
    return checkpoint


def _write_run_dir(
    run_dir: Path,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    history: TrainingHistory,
    best: ModelCheckpoint,
    final: ModelCheckpoint,
) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={value}" for key, value in asdict(cfg).items()]
    lines += [f"model.{key}={value}" for key, value in asdict(model_cfg).items()]
    (run_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log = [
        f"{r.epoch} {r.loss!r} {r.valid_bleu!r} {r.seconds:.3f}" for r in history.records
    ]
    log.append(f"best {history.best_epoch}")
    (run_dir / "history.log").write_text("\n".join(log) + "\n", encoding="utf-8")
    save_checkpoint(best, run_dir / "best.ckpt")
    save_checkpoint(final, run_dir / "final.ckpt")


_CHECKPOINT_MAGIC = b"ACKP1\n"


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> None:
    """Write a checkpoint: JSON metadata plus the two parameter archives."""
    header = {
        "model_cfg": asdict(ckpt.model_cfg),
        "tokenizer_hash": ckpt.tokenizer_hash,
        "retriever_mode": ckpt.retriever_mode,
        "history": {
            "best_epoch": ckpt.history.best_epoch,
            "records": [
                [r.epoch, r.loss, r.valid_bleu, r.seconds] for r in ckpt.history.records
            ],
        },
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    gen_blob = nn.serialize_params(ckpt.generator)
    ret_blob = nn.serialize_params(ckpt.retriever) if ckpt.retriever is not None else b""
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(f"header {len(encoded)}\n".encode())
        fh.write(encoded)
        fh.write(f"\ngenerator {len(gen_blob)}\n".encode())
        fh.write(gen_blob)
        fh.write(f"retriever {len(ret_blob)}\n".encode())
        fh.write(ret_blob)


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    blob = Path(path).read_bytes()
    if not blob.startswith(_CHECKPOINT_MAGIC):
        raise TrainerError(f"{path} is not a checkpoint file")
    pos = len(_CHECKPOINT_MAGIC)

    def read_section(expected: str) -> bytes:
        nonlocal pos
        end = blob.index(b"\n", pos)
        tag, size = blob[pos:end].decode().split()
        if tag != expected:
            raise TrainerError(f"checkpoint section {tag!r} where {expected!r} was expected")
        start = end + 1
        section = blob[start : start + int(size)]
        pos = start + int(size)
        return section

    encoded = read_section("header")
    if pos < len(blob) and blob[pos : pos + 1] == b"\n":
        pos += 1
    header = json.loads(encoded.decode("utf-8"))
    gen_blob = read_section("generator")
    ret_blob = read_section("retriever")
    history = TrainingHistory(
        records=tuple(
            EpochRecord(int(e), float(l), float(b), float(s))
            for e, l, b, s in header["history"]["records"]
        ),
        best_epoch=int(header["history"]["best_epoch"]),
    )
    return ModelCheckpoint(
        model_cfg=ModelConfig(**header["model_cfg"]),
        generator=nn.deserialize_params(gen_blob),
        retriever=nn.deserialize_params(ret_blob, requires_grad=False) if ret_blob else None,
        tokenizer_hash=header["tokenizer_hash"],
        retriever_mode=header["retriever_mode"],
        history=history,
    )
