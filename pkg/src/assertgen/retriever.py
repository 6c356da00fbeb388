"""Dense and baseline retrieval over a codebase of test-assert pairs.

The dense route embeds every codebase pair once through a retriever encoder,
normalizes the class-token vectors to unit length, and answers queries by
exhaustive inner-product scan.  Scores turn into a probability mass over the
returned neighbours either through a softmax or through direct linear
normalization.  Two non-learned routes, token-overlap Jaccard and seeded
uniform sampling, share the same result shape so callers can swap them in
without branching.
"""

from __future__ import annotations

import random
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .corpus import Corpus, TestAssertPair
from .model import RetrieverEncoder, normalize_embedding
from .tokenizer import CLS_TOKEN, Tokenizer


class RetrieverError(ValueError):
    """Raised for malformed retrieval requests or corrupted index files."""


@dataclass(frozen=True, slots=True)
class Retrieved:
    """One neighbour: the pair, its raw score, and its share of probability."""

    pair: TestAssertPair
    score: float
    probability: float


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product of two embedding vectors."""
    return float(np.dot(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


def retrieval_probs(scores: np.ndarray, mode: str = "softmax", temperature: float = 1.0) -> np.ndarray:
    """Turn raw retrieval scores for the top-k neighbours into probabilities.

    ``softmax`` exponentiates scores divided by ``temperature`` after
    subtracting the maximum.  ``linear`` divides each score by the sum and
    therefore requires every score to be strictly positive.  The output always
    sums to one over exactly the scores given, so a single neighbour receives
    probability one under either mode.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise RetrieverError("retrieval_probs expects a non-empty 1-d score array")
    if mode == "softmax":
        if temperature <= 0.0:
            raise RetrieverError("softmax temperature must be positive")
        z = s / temperature
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()
    if mode == "linear":
        if np.any(s <= 0.0):
            raise RetrieverError(
                "linear probability mode requires strictly positive scores; "
                f"got minimum {s.min():.6g}"
            )
        return s / s.sum()
    raise RetrieverError(f"unknown probability mode {mode!r}; expected 'softmax' or 'linear'")


@dataclass(slots=True)
class DenseIndex:
    """Unit-normalized embeddings for every pair in a codebase.

    ``encoder_version`` fingerprints the encoder parameters the vectors were
    computed with, so stale indexes can be detected after training updates
    the retriever.
    """

    embeddings: np.ndarray
    pair_ids: np.ndarray
    pairs: tuple[TestAssertPair, ...]
    encoder_version: int
    _id_to_row: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.pair_ids = np.asarray(self.pair_ids, dtype=np.int64)
        if self.embeddings.ndim != 2:
            raise RetrieverError("index embeddings must be a 2-d array")
        if self.embeddings.shape[0] != self.pair_ids.shape[0] or len(self.pairs) != self.pair_ids.shape[0]:
            raise RetrieverError("index embeddings, ids, and pairs must all have the same length")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if self.embeddings.shape[0] and not np.allclose(norms, 1.0, atol=1e-9):
            raise RetrieverError("index embeddings must be unit-normalized")
        self._id_to_row = {int(pid): row for row, pid in enumerate(self.pair_ids)}

    def __len__(self) -> int:
        return int(self.pair_ids.shape[0])

    def __contains__(self, pair_id: int) -> bool:
        return int(pair_id) in self._id_to_row

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def row_for_id(self, pair_id: int) -> int:
        try:
            return self._id_to_row[pair_id]
        except KeyError:
            raise RetrieverError(f"pair id {pair_id} is not in the index") from None


def embed_texts(
    encoder: RetrieverEncoder,
    tokenizer: Tokenizer,
    texts: list[str],
    max_len: int = 512,
    batch_size: int = 64,
) -> np.ndarray:
    """Embed focal-test strings to unit rows, shape [N, d], without gradients.

    Each text is rendered with the class token first and the class-position
    vector is unit-normalized.
    """
    rows = []
    rendered = [f"{CLS_TOKEN} {text}" for text in texts]
    with nn.no_grad():
        for start in range(0, len(rendered), batch_size):
            chunk = [
                tokenizer.encode(t, max_len=max_len) for t in rendered[start : start + batch_size]
            ]
            cls = encoder.cls_batch(chunk)
            rows.append(normalize_embedding(cls).data.copy())
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, encoder.cfg.d_model))


def embed_query(encoder: RetrieverEncoder, tokenizer: Tokenizer, text: str, max_len: int = 512) -> np.ndarray:
    """Embed one focal-test string to a unit vector (no gradient tracking)."""
    return embed_texts(encoder, tokenizer, [text], max_len=max_len)[0]


def index_codebase(
    codebase: Corpus,
    encoder: RetrieverEncoder,
    tokenizer: Tokenizer,
    max_len: int = 512,
    batch_size: int = 64,
) -> DenseIndex:
    """Embed every pair of ``codebase`` and build a dense index.

    Training code re-embeds the few pairs it needs live; the index is a
    gradient-free snapshot used only for ranking.
    """
    if len(codebase) == 0:
        raise RetrieverError("cannot index an empty codebase")
    embeddings = embed_texts(
        encoder, tokenizer, [pair.focal_test for pair in codebase], max_len=max_len, batch_size=batch_size
    )
    return DenseIndex(
        embeddings=embeddings,
        pair_ids=np.array([pair.id for pair in codebase], dtype=np.int64),
        pairs=tuple(codebase),
        encoder_version=encoder.fingerprint(),
    )


def retrieve_topk(
    index: DenseIndex,
    query_vec: np.ndarray,
    k: int,
    exclude_id: int | None = None,
    prob_mode: str = "softmax",
    temperature: float = 1.0,
) -> list[Retrieved]:
    """Exhaustively score ``query_vec`` against the index and keep the top k.

    Ties on score resolve toward the smaller pair id.  ``exclude_id`` removes
    one pair (the query itself during training) before ranking.  Probabilities
    are distributed over exactly the k returned neighbours.
    """
    if k < 1:
        raise RetrieverError("k must be at least 1")
    q = np.asarray(query_vec, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise RetrieverError(f"query dimension {q.shape[0]} does not match index dimension {index.dim}")
    scores = index.embeddings @ q
    mask = np.ones(len(index), dtype=bool)
    if exclude_id is not None and exclude_id in index:
        mask[index.row_for_id(exclude_id)] = False
    candidates = np.nonzero(mask)[0]
    if candidates.size < k:
        raise RetrieverError(f"index holds {candidates.size} eligible pairs but k={k} were requested")
    # Sort by score descending, then pair id ascending for exact tie handling.
    order = np.lexsort((index.pair_ids[candidates], -scores[candidates]))
    chosen = candidates[order[:k]]
    probs = retrieval_probs(scores[chosen], mode=prob_mode, temperature=temperature)
    return [
        Retrieved(pair=index.pairs[row], score=float(scores[row]), probability=float(p))
        for row, p in zip(chosen, probs)
    ]


_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def _token_set(text: str) -> frozenset[str]:
    return frozenset(_TOKEN_RE.findall(text))


def jaccard_retrieve(
    codebase: Corpus,
    query_text: str,
    k: int,
    exclude_id: int | None = None,
) -> list[Retrieved]:
    """Rank codebase pairs by Jaccard overlap between focal-test token sets.

    The score is |A intersect B| / |A union B|; two empty sets score zero.
    Probability mass is uniform over the k winners since the overlap scores
    carry no calibrated scale.  Ties resolve toward the smaller pair id.
    """
    if k < 1:
        raise RetrieverError("k must be at least 1")
    query_tokens = _token_set(query_text)
    scored: list[tuple[float, int, TestAssertPair]] = []
    for pair in codebase:
        if exclude_id is not None and pair.id == exclude_id:
            continue
        other = _token_set(pair.focal_test)
        union = len(query_tokens | other)
        score = len(query_tokens & other) / union if union else 0.0
        scored.append((score, pair.id, pair))
    if len(scored) < k:
        raise RetrieverError(f"codebase holds {len(scored)} eligible pairs but k={k} were requested")
    scored.sort(key=lambda item: (-item[0], item[1]))
    uniform = 1.0 / k
    return [Retrieved(pair=pair, score=score, probability=uniform) for score, _, pair in scored[:k]]


def random_retrieve(
    codebase: Corpus,
    k: int,
    seed: int,
    exclude_id: int | None = None,
) -> list[Retrieved]:
    """Sample k distinct pairs uniformly with a seeded generator.

    Scores are reported as zero because no similarity was computed, and the
    probability mass is uniform over the sample.
    """
    if k < 1:
        raise RetrieverError("k must be at least 1")
    eligible = [pair for pair in codebase if exclude_id is None or pair.id != exclude_id]
    if len(eligible) < k:
        raise RetrieverError(f"codebase holds {len(eligible)} eligible pairs but k={k} were requested")
    sample = random.Random(seed).sample(eligible, k)
    uniform = 1.0 / k
    return [Retrieved(pair=pair, score=0.0, probability=uniform) for pair in sample]


_INDEX_MAGIC = b"DIDX1\n"


def save_index(index: DenseIndex, path: str) -> None:
    """Write an index to ``path`` in a fixed little-endian binary layout."""
    with open(path, "wb") as fh:
        fh.write(_INDEX_MAGIC)
        fh.write(struct.pack("<qqq", len(index), index.dim, index.encoder_version))
        fh.write(index.pair_ids.astype("<i8").tobytes())
        fh.write(index.embeddings.astype("<f8").tobytes())


def load_index(path: str, codebase: Corpus) -> DenseIndex:
    """Read an index written by :func:`save_index` and bind it to ``codebase``.

    The stored ids must match the codebase exactly; the embeddings themselves
    are trusted as written but re-checked for unit norm on construction.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_INDEX_MAGIC):
        raise RetrieverError(f"{path} is not a dense index file")
    offset = len(_INDEX_MAGIC)
    count, dim, version = struct.unpack_from("<qqq", blob, offset)
    offset += struct.calcsize("<qqq")
    ids = np.frombuffer(blob, dtype="<i8", count=count, offset=offset).astype(np.int64)
    offset += count * 8
    vectors = np.frombuffer(blob, dtype="<f8", count=count * dim, offset=offset).astype(np.float64)
    embeddings = vectors.reshape(count, dim)
    by_id = {pair.id: pair for pair in codebase}
    if set(by_id) != set(int(i) for i in ids):
        raise RetrieverError("index ids do not match the codebase it is being loaded against")
    pairs = tuple(by_id[int(i)] for i in ids)
    return DenseIndex(embeddings=embeddings, pair_ids=ids, pairs=pairs, encoder_version=int(version))


def index_version_matches(index: DenseIndex, encoder: RetrieverEncoder) -> bool:
    """True when the index was built with exactly this encoder's parameters."""
    return index.encoder_version == encoder.fingerprint()
