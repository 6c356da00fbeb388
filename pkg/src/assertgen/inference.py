"""Beam-search decoding and end-to-end assertion generation.

The decoder works against a small model protocol: ``start_inference`` builds
whatever per-input state the model needs, ``step_logprobs`` scores the next
token given the emitted prefix, and ``eos_id``/``max_len`` describe the
output convention.  Anything implementing that protocol can be decoded, which
keeps the search logic testable against hand-built scoring tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .model import Seq2SeqModel, encode_augmented
from .retriever import DenseIndex, Retrieved, embed_query, retrieve_topk
from .tokenizer import Tokenizer


class InferenceError(ValueError):
    """Raised for inconsistent decode requests, such as a stale index."""


@dataclass(frozen=True, slots=True)
class BeamHypothesis:
    """One candidate: emitted ids (EOS included when finished) and its score."""

    ids: tuple[int, ...]
    logprob: float
    finished: bool


def _ranking_key(hyp: BeamHypothesis, length_normalize: bool):
    score = hyp.logprob / max(len(hyp.ids), 1) if length_normalize else hyp.logprob
    return (-score, hyp.ids)


def beam_search(
    model,
    input_ids: list[int],
    beam: int,
    max_len: int | None = None,
    length_normalize: bool = False,
) -> list[BeamHypothesis]:
    """Length-wise beam expansion keeping the ``beam`` best hypotheses.

    A hypothesis that emits EOS is finalized and keeps competing on its
    frozen score.  The search stops once ``beam`` hypotheses have finished or
    every survivor has reached ``max_len``.  Scores are cumulative token
    log-probabilities, unnormalized unless ``length_normalize`` is set; ties
    break toward lexicographically smaller token ids.
    """
    if beam < 1:
        raise InferenceError("beam width must be at least 1")
    limit = model.max_len if max_len is None else max_len
    if limit < 1:
        raise InferenceError("max_len must be at least 1")
    with nn.no_grad():
        memo = model.start_inference(input_ids)
        eos = model.eos_id
        hypotheses = [BeamHypothesis(ids=(), logprob=0.0, finished=False)]
        for _ in range(limit):
            if sum(h.finished for h in hypotheses) >= beam:
                break
            if all(h.finished for h in hypotheses):
                break
            candidates: list[BeamHypothesis] = []
            for hyp in hypotheses:
                if hyp.finished:
                    candidates.append(hyp)
                    continue
                logprobs = model.step_logprobs(memo, list(hyp.ids))
                for token in range(logprobs.shape[0]):
                    candidates.append(
                        BeamHypothesis(
                            ids=hyp.ids + (token,),
                            logprob=hyp.logprob + float(logprobs[token]),
                            finished=token == eos,
                        )
                    )
            candidates.sort(key=lambda h: _ranking_key(h, length_normalize))
            hypotheses = candidates[:beam]
    hypotheses.sort(key=lambda h: _ranking_key(h, length_normalize))
    return hypotheses


def greedy_decode(model, input_ids: list[int], max_len: int | None = None) -> list[int]:
    """Argmax decoding through the same protocol as the beam (EOS included)."""
    limit = model.max_len if max_len is None else max_len
    with nn.no_grad():
        memo = model.start_inference(input_ids)
        ids: list[int] = []
        for _ in range(limit):
            logprobs = model.step_logprobs(memo, ids)
            token = int(np.argmax(logprobs))
            ids.append(token)
            if token == model.eos_id:
                break
    return ids


@dataclass(frozen=True, slots=True)
class GenerationResult:
    """Final assertion, the retrieval evidence behind it, and all candidates."""

    assertion: str
    retrieved: tuple[Retrieved, ...]
    candidates: tuple[BeamHypothesis, ...]


def generate(
    model: Seq2SeqModel,
    index: DenseIndex | None,
    tok: Tokenizer,
    ft: str,
    k: int = 5,
    beam: int = 10,
    encoder=None,
    prob_mode: str = "softmax",
    temperature: float = 1.0,
    length_normalize: bool = False,
) -> GenerationResult:
    """Generate one assertion for a focal test.

    With an index, the top-k neighbours are fetched and the single best one
    is spliced into the generator input as commented context; the rest are
    reported as provenance only.  Without an index (ablation mode "none") the
    input is the bare focal test.  The best finished hypothesis is
    detokenized; if nothing finished within the length budget, the best
    unfinished one is used.
    """
    if index is not None:
        if encoder is None:
            raise InferenceError("retrieval requires the retriever encoder that built the index")
        if index.encoder_version != encoder.fingerprint():
            raise InferenceError(
                "index was built with different retriever parameters; rebuild the index"
            )
        if len(index) == 0:
            raise InferenceError("cannot retrieve from an empty index")
        query_vec = embed_query(encoder, tok, ft, max_len=model.cfg.max_input_len)
        retrieved = retrieve_topk(index, query_vec, k, prob_mode=prob_mode, temperature=temperature)
        top_pair = retrieved[0].pair
    else:
        retrieved = []
        top_pair = None
    input_ids = encode_augmented(tok, ft, top_pair, model.cfg.max_input_len)
    candidates = beam_search(model, input_ids, beam, length_normalize=length_normalize)
    best = next((h for h in candidates if h.finished), candidates[0])
    text = tok.decode(list(best.ids))
    return GenerationResult(assertion=text, retrieved=tuple(retrieved), candidates=tuple(candidates))


def write_predictions(path: str, texts: list[str]) -> None:
    """One generated assertion per line, aligned to the input order."""
    with open(path, "w", encoding="utf-8") as fh:
        for text in texts:
            fh.write(text + "\n")


def write_provenance(path: str, records: list[dict]) -> None:
    """Line-delimited JSON records describing what conditioned each output."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def provenance_record(query_id: int, result: GenerationResult) -> dict:
    """Flatten one generation's retrieval evidence for the sidecar file."""
    record: dict = {"query_id": query_id, "assertion": result.assertion}
    if result.retrieved:
        top = result.retrieved[0]
        record.update(
            retrieved_id=top.pair.id,
            score=top.score,
            probability=top.probability,
        )
    return record
