"""Corpus handling for test-assert pairs.

A corpus is an ordered collection of TAPs (test-assert pairs): a focal-test,
meaning the focal method concatenated with the test prefix, paired with the
single gold assertion statement it should produce.  Corpora live on disk as
two parallel plain-text files with one sample per line and space-separated
code tokens, so line i of the source file and line i of the target file form
pair i.
"""

from __future__ import annotations

import enum
import random
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path


class CorpusError(ValueError):
    """Raised for malformed corpus files or invalid corpus operations."""


@dataclass(frozen=True, slots=True)
class TestAssertPair:
    """One focal-test paired with its gold assertion.

    ``id`` is the stable index of the pair within its split.  Both text fields
    are single lines of space-separated code tokens.
    """

    id: int
    focal_test: str
    assertion: str

    def __post_init__(self) -> None:
        if not self.focal_test.strip():
            raise CorpusError(f"pair {self.id}: focal_test is empty")
        if not self.assertion.strip():
            raise CorpusError(f"pair {self.id}: assertion is empty")
        if "\n" in self.assertion or "\r" in self.assertion:
            raise CorpusError(f"pair {self.id}: assertion contains a newline")


@dataclass(frozen=True, slots=True)
class Corpus:
    """An ordered, immutable collection of test-assert pairs."""

    pairs: tuple[TestAssertPair, ...]
    name: str

    def __post_init__(self) -> None:
        if len(self.pairs) < 1:
            raise CorpusError(f"corpus {self.name!r} is empty")
        for position, pair in enumerate(self.pairs):
            if pair.id != position:
                raise CorpusError(
                    f"corpus {self.name!r}: pair at position {position} has id {pair.id}"
                )

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, index: int) -> TestAssertPair:
        return self.pairs[index]


class AssertionType(enum.Enum):
    """The nine assertion categories used for per-type reporting.

    A category is keyed on the first canonical JUnit assertion method name
    appearing in the assertion text; everything else falls into OTHER.
    """

    EQUALS = "Equals"
    TRUE = "True"
    THAT = "That"
    NOT_NULL = "NotNull"
    FALSE = "False"
    NULL = "Null"
    ARRAY_EQUALS = "ArrayEquals"
    SAME = "Same"
    OTHER = "Other"


_METHOD_TO_TYPE = {
    "assertEquals": AssertionType.EQUALS,
    "assertTrue": AssertionType.TRUE,
    "assertThat": AssertionType.THAT,
    "assertNotNull": AssertionType.NOT_NULL,
    "assertFalse": AssertionType.FALSE,
    "assertNull": AssertionType.NULL,
    "assertArrayEquals": AssertionType.ARRAY_EQUALS,
    "assertSame": AssertionType.SAME,
}

_IDENTIFIER = re.compile(r"[A-Za-z_$][A-Za-z0-9_$]*")


@dataclass(frozen=True, slots=True)
class SplitSpec:
    """Three split ratios plus the shuffle seed."""

    ratios: tuple[float, float, float]
    seed: int

    def __post_init__(self) -> None:
        if len(self.ratios) != 3:
            raise CorpusError(f"expected 3 ratios, got {len(self.ratios)}")
        if any(r < 0 for r in self.ratios):
            raise CorpusError(f"ratios must be non-negative: {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-12:
            raise CorpusError(f"ratios must sum to 1: {self.ratios}")


def load_corpus(source_path: str | Path, target_path: str | Path, name: str) -> Corpus:
    """Load a corpus from parallel focal-test/assertion files.

    Line i of ``source_path`` is the focal-test of pair i, line i of
    ``target_path`` its assertion.  Ids are assigned sequentially from 0.
    """
    source_lines = Path(source_path).read_text(encoding="utf-8").splitlines()
    target_lines = Path(target_path).read_text(encoding="utf-8").splitlines()
    if len(source_lines) != len(target_lines):
        raise CorpusError(
            f"line-count mismatch: {source_path} has {len(source_lines)} lines, "
            f"{target_path} has {len(target_lines)}"
        )
    pairs = []
    for i, (focal, assertion) in enumerate(zip(source_lines, target_lines)):
        focal = focal.strip()
        assertion = assertion.strip()
        if not focal:
            raise CorpusError(f"{source_path}: line {i + 1} is empty")
        if not assertion:
            raise CorpusError(f"{target_path}: line {i + 1} is empty")
        pairs.append(TestAssertPair(id=i, focal_test=focal, assertion=assertion))
    return Corpus(pairs=tuple(pairs), name=name)


def write_corpus(corpus: Corpus, source_path: str | Path, target_path: str | Path) -> None:
    """Write a corpus back to parallel files; inverse of load_corpus."""
    source = "".join(pair.focal_test + "\n" for pair in corpus)
    target = "".join(pair.assertion + "\n" for pair in corpus)
    Path(source_path).write_text(source, encoding="utf-8", newline="\n")
    Path(target_path).write_text(target, encoding="utf-8", newline="\n")


def split_corpus(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Deterministically shuffle and split a corpus into train/valid/test.

    The first two splits take floor(ratio * N) pairs each and the third takes
    the remainder, so the three splits are disjoint and cover the corpus.
    """
    n = len(corpus)
    if n < 3:
        raise CorpusError(f"corpus {corpus.name!r} has {n} pairs, need at least 3 to split")
    order = list(range(n))
    random.Random(spec.seed).shuffle(order)
    n_first = int(spec.ratios[0] * n)
    n_second = int(spec.ratios[1] * n)
    n_third = n - n_first - n_second
    if min(n_first, n_second, n_third) == 0:
        raise CorpusError(
            f"degenerate split of {n} pairs at ratios {spec.ratios}: "
            f"sizes ({n_first}, {n_second}, {n_third})"
        )
    cuts = (order[:n_first], order[n_first : n_first + n_second], order[n_first + n_second :])
    suffixes = ("train", "valid", "test")
    splits = []
    for indices, suffix in zip(cuts, suffixes):
        pairs = tuple(
            TestAssertPair(
                id=new_id,
                focal_test=corpus[old].focal_test,
                assertion=corpus[old].assertion,
            )
            for new_id, old in enumerate(indices)
        )
        splits.append(Corpus(pairs=pairs, name=f"{corpus.name}-{suffix}"))
    return splits[0], splits[1], splits[2]


def classify_assertion(assertion: str) -> AssertionType:
    """Classify an assertion by its first canonical assertion method name.

    Package qualifiers and non-assertion identifiers are skipped, so
    "org . junit . Assert . assertEquals ( a , b )" classifies as EQUALS.
    """
    for match in _IDENTIFIER.finditer(assertion):
        kind = _METHOD_TO_TYPE.get(match.group())
        if kind is not None:
            return kind
    return AssertionType.OTHER


def type_statistics(corpus: Corpus) -> dict[AssertionType, int]:
    """Count pairs per assertion type; every type appears, absent ones as 0."""
    counts = Counter(classify_assertion(pair.assertion) for pair in corpus)
    return {kind: counts.get(kind, 0) for kind in AssertionType}


def build_codebase(train: Corpus) -> Corpus:
    """Materialize the retrieval codebase from the training split.

    The codebase is the training split itself under a new label; ids are
    preserved so retrieval results can be traced back to training pairs.
    """
    return Corpus(pairs=train.pairs, name=f"{train.name}-codebase")
