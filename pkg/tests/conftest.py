import numpy as np
import pytest

from assertgen.corpus import Corpus, TestAssertPair, build_codebase
from assertgen.model import ModelConfig, Seq2SeqModel
from assertgen.synthbench import SynthSpec, generate_synthetic
from assertgen.tokenizer import train_bpe


def make_corpus(rows, name="tiny"):
    pairs = tuple(
        TestAssertPair(id=i, focal_test=ft, assertion=a) for i, (ft, a) in enumerate(rows)
    )
    return Corpus(pairs=pairs, name=name)


@pytest.fixture(scope="session")
def copy_bench():
    return generate_synthetic(SynthSpec(n=64, family="copy", seed=0))


@pytest.fixture(scope="session")
def copy_tok(copy_bench):
    return train_bpe(copy_bench.train, vocab_size=200)


@pytest.fixture(scope="session")
def para_bench():
    return generate_synthetic(SynthSpec(n=128, family="paraphrase-retrieval", seed=0))


@pytest.fixture(scope="session")
def para_codebase(para_bench):
    return build_codebase(para_bench.train)


@pytest.fixture(scope="session")
def para_tok(para_bench):
    return train_bpe(para_bench.train, vocab_size=300)


def tiny_model_config(vocab_size, **overrides):
    base = dict(
        vocab_size=vocab_size,
        d_model=16,
        encoder_layers=1,
        decoder_layers=1,
        heads=2,
        ff_multiplier=2,
        max_input_len=48,
        max_output_len=12,
        dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_model(copy_tok):
    cfg = tiny_model_config(copy_tok.vocab_size)
    return Seq2SeqModel.initialize(cfg, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
