"""Retrieval-augmented assertion generation for unit tests.

The package trains a dense retriever over test-assert pairs together with a
small encoder-decoder generator, so that retrieval probabilities weight the
per-candidate generation losses during joint optimization.
"""

__version__ = "0.1.0"

from .corpus import (
    AssertionType,
    Corpus,
    CorpusError,
    SplitSpec,
    TestAssertPair,
    build_codebase,
    classify_assertion,
    load_corpus,
    split_corpus,
    write_corpus,
)
from .inference import (
    BeamHypothesis,
    GenerationResult,
    InferenceError,
    beam_search,
    generate,
    greedy_decode,
)
from .metrics import (
    MetricsError,
    MetricsReport,
    ParseError,
    bleu,
    codebleu,
    corpus_bleu,
    evaluate,
    exact_match,
    overlap_analysis,
    parse_assertion,
)
from .model import ModelConfig, RetrieverEncoder, Seq2SeqModel, encode_augmented
from .retriever import (
    DenseIndex,
    Retrieved,
    RetrieverError,
    embed_query,
    embed_texts,
    index_codebase,
    jaccard_retrieve,
    load_index,
    random_retrieve,
    retrieval_probs,
    retrieve_topk,
    save_index,
)
from .synthbench import SynthSpec, SynthError, generate_synthetic, oracle_generate, write_synthetic
from .tokenizer import Tokenizer, TokenizerError, load_tokenizer, save_tokenizer, train_bpe
from .trainer import (
    ModelCheckpoint,
    TrainConfig,
    TrainerError,
    TrainingHistory,
    load_checkpoint,
    save_checkpoint,
    train,
)

__all__ = [
    "AssertionType",
    "BeamHypothesis",
    "Corpus",
    "CorpusError",
    "DenseIndex",
    "GenerationResult",
    "InferenceError",
    "MetricsError",
    "MetricsReport",
    "ModelCheckpoint",
    "ModelConfig",
    "ParseError",
    "Retrieved",
    "RetrieverEncoder",
    "RetrieverError",
    "Seq2SeqModel",
    "SplitSpec",
    "SynthError",
    "SynthSpec",
    "TestAssertPair",
    "Tokenizer",
    "TokenizerError",
    "TrainConfig",
    "TrainerError",
    "TrainingHistory",
    "beam_search",
    "bleu",
    "build_codebase",
    "classify_assertion",
    "codebleu",
    "corpus_bleu",
    "embed_query",
    "embed_texts",
    "encode_augmented",
    "evaluate",
    "exact_match",
    "generate",
    "generate_synthetic",
    "greedy_decode",
    "index_codebase",
    "jaccard_retrieve",
    "load_checkpoint",
    "load_corpus",
    "load_index",
    "load_tokenizer",
    "oracle_generate",
    "overlap_analysis",
    "parse_assertion",
    "random_retrieve",
    "retrieval_probs",
    "retrieve_topk",
    "save_checkpoint",
    "save_index",
    "save_tokenizer",
    "split_corpus",
    "train",
    "train_bpe",
    "write_corpus",
    "write_synthetic",
]
