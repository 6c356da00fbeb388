"""Deterministic synthetic corpora for desk-scale training experiments.

Three template families cover the behaviors worth measuring.  ``copy`` makes
the assertion a pure function of the focal test, so any competent generator
can overfit it.  The two class families build equivalence classes keyed by a
structural signature: a type keyword plus the equality pattern of the six
identifier slots, which survives any renaming of the identifiers themselves.
The test body's shape follows the pattern's block count, so part of the
class key is visible in the punctuation itself; a freshly initialized
encoder already clusters classes coarsely, and training only has to sharpen
the ranking within a cluster.  Most classes contribute two members to the
training set, so a training query can retrieve its partner and learn to
reuse what the partner's assertion shows.  A quarter of those pairs repeat
the same identifiers, giving the reuse program an unmissable starting
signal.  The renamed rest is graded: half of it keeps all but one block
identifier, a third keeps one, a sixth keeps none.  The overlapping tiers
let a freshly initialized encoder stumble onto the partner often enough for
the reuse signal to reach the retriever, and the disjoint tier keeps
structure, not vocabulary, as the thing worth ranking by.  The remaining
classes are singletons reserved for evaluation: each validation or test
query is a renamed variant of exactly one training pair, with identifiers
drawn from an atom pool disjoint from the training atoms.  Token overlap
with that planted partner is then no better than with any other same-shaped
pair, which defeats lexical retrieval, while the signature still identifies
it.

In the paraphrase family the gold assertion is shared by the whole class: a
method call on a certificate token unique to the class and drawn from a
namespace disjoint from the identifier atoms, appearing nowhere in the
query.  Repeating the matched pair's assertion verbatim is therefore exactly
right, never misleading, so a candidate that shares the class is strictly
more useful than one that does not.  The certificate carries a long random
letter suffix on purpose: reading it out of a retrieved assertion is one
copy, while producing it without retrieval means rote-learning hundreds of
arbitrary strings, so the value of retrieval survives many epochs of
training instead of evaporating as soon as the model starts memorizing.
``edit-one-arg`` appends one argument drawn from the query's own slots, so
the matched assertion must be edited, not echoed.  Generation is a pure
function of the spec: the same spec yields the same corpora, byte for byte.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

from .corpus import Corpus, TestAssertPair, write_corpus

FAMILIES = ("copy", "paraphrase-retrieval", "edit-one-arg")

PATTERN_KEYWORDS = ("void", "int", "long", "boolean", "float", "double", "short", "byte")

ASSERT_CHOICES = (
    "assertArrayEquals", "assertEquals", "assertFalse", "assertNotNull",
    "assertNull", "assertSame", "assertThat", "assertTrue",
)

_SLOT_COUNT = 6
_STRUCTURAL = frozenset("(){},=;.")


class SynthError(ValueError):
    """Raised for specs that cannot produce a well-formed benchmark."""


def default_atoms(count: int = 24) -> tuple[str, ...]:
    """A pool of identifier atoms guaranteed not to collide with keywords."""
    return tuple(f"var{i}" for i in range(count))


def _restricted_growth_strings(length: int) -> list[tuple[int, ...]]:
    """All set partitions of ``length`` slots, in canonical block-label form."""
    results: list[tuple[int, ...]] = []

    def extend(prefix: list[int], top: int) -> None:
        if len(prefix) == length:
            results.append(tuple(prefix))
            return
        for label in range(top + 2):
            prefix.append(label)
            extend(prefix, max(top, label))
            prefix.pop()

    extend([0], 0)
    return results


def _class_partitions() -> list[tuple[int, ...]]:
    """Slot partitions used for classes: at most 4 blocks, so every focal
    test carries at least one repeated identifier as a structural cue."""
    return [rgs for rgs in _restricted_growth_strings(_SLOT_COUNT) if max(rgs) + 1 <= 4]


def _eval_count(n: int) -> int:
    return n // 8


def _singleton_count(n: int) -> int:
    # Two singleton classes per evaluation query (one for valid, one for
    # test), plus one more when parity would leave an unpaired member.
    base = 2 * _eval_count(n)
    return base + (n - base) % 2


def _class_count(n: int) -> int:
    return _singleton_count(n) + (n - _singleton_count(n)) // 2


@dataclass(frozen=True, slots=True)
class SynthSpec:
    """Everything that determines a benchmark: size, family, atoms, seed."""

    n: int
    family: str
    atoms: tuple[str, ...] = default_atoms()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise SynthError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.n < 12:
            raise SynthError(f"n={self.n} is too small; at least 12 pairs are required")
        if len(self.atoms) < 12:
            raise SynthError("at least 12 identifier atoms are required")
        for atom in self.atoms:
            if not atom or any(ch.isspace() for ch in atom):
                raise SynthError(f"atom {atom!r} is empty or contains whitespace")
            if atom in PATTERN_KEYWORDS or set(atom) & _STRUCTURAL:
                raise SynthError(f"atom {atom!r} collides with template tokens")
            if atom.startswith("cert"):
                raise SynthError(f"atom {atom!r} collides with the certificate namespace")
        if self.family != "copy":
            available = len(PATTERN_KEYWORDS) * len(_class_partitions())
            if _class_count(self.n) > available:
                raise SynthError(
                    f"n={self.n} needs {_class_count(self.n)} structural classes "
                    f"but only {available} exist"
                )


@dataclass(frozen=True, slots=True)
class SyntheticBenchmark:
    """Generated splits plus the planted-match bookkeeping for each query."""

    train: Corpus
    valid: Corpus
    test: Corpus
    planted_valid: dict[int, int]
    planted_test: dict[int, int]


# One body shape per block count; "S" marks the six identifier slots.  The
# shapes differ in visible punctuation, so the block count can be read off a
# focal test without knowing any identifier.
_TEMPLATES = (
    "K S ( S , S ) { S = S ( S ) ; }",
    "K S ( S ) { S = S . S ( S ) ; }",
    "K S ( S , S , S ) { S ( S ) ; }",
    "K S ( ) { S = S ( S , S ) ; S ; }",
)
_TEMPLATE_TOKENS = tuple(t.split() for t in _TEMPLATES)
_TEMPLATE_SLOTS = tuple(
    tuple(i for i, tk in enumerate(tokens) if tk == "S") for tokens in _TEMPLATE_TOKENS
)


def _blocks(rgs: tuple[int, ...]) -> int:
    return max(rgs) + 1


def _class_focal_test(keyword: str, rgs: tuple[int, ...], block_atoms: list[str]) -> str:
    slots = iter(block_atoms[label] for label in rgs)
    tokens = [
        keyword if tk == "K" else next(slots) if tk == "S" else tk
        for tk in _TEMPLATE_TOKENS[_blocks(rgs) - 1]
    ]
    return " ".join(tokens)


def _match_template(tokens: list[str]) -> int:
    for index, shape in enumerate(_TEMPLATE_TOKENS):
        if len(tokens) != len(shape):
            continue
        if all(
            tk == expected
            for tk, expected in zip(tokens, shape)
            if expected not in ("K", "S")
        ):
            return index
    raise SynthError(f"no class-family shape matches: {' '.join(tokens)!r}")


def structural_signature(ft: str) -> tuple[str, tuple[int, ...]]:
    """The renaming-invariant class key: keyword plus slot equality pattern."""
    tokens = ft.split()
    template = _match_template(tokens)
    if not tokens or tokens[0] not in PATTERN_KEYWORDS:
        raise SynthError(f"not a class-family focal test: {ft!r}")
    slots = [tokens[i] for i in _TEMPLATE_SLOTS[template]]
    labels: dict[str, int] = {}
    rgs = []
    for atom in slots:
        if atom not in labels:
            labels[atom] = len(labels)
        rgs.append(labels[atom])
    if _blocks(tuple(rgs)) != template + 1:
        raise SynthError(f"shape and slot pattern disagree: {ft!r}")
    return tokens[0], tuple(rgs)


def _slot_atoms(ft: str) -> list[str]:
    tokens = ft.split()
    template = _match_template(tokens)
    return [tokens[i] for i in _TEMPLATE_SLOTS[template]]


def generate_synthetic(spec: SynthSpec) -> SyntheticBenchmark:
    """Build the three splits for ``spec``; valid and test hold n // 8 queries each."""
    rng = random.Random(spec.seed)
    n_eval = spec.n // 8
    if spec.family == "copy":
        return _generate_copy(spec, rng, n_eval)
    return _generate_class_family(spec, rng, n_eval)


def _generate_copy(spec: SynthSpec, rng: random.Random, n_eval: int) -> SyntheticBenchmark:
    def make_pairs(count: int, name: str) -> Corpus:
        pairs = []
        for i in range(count):
            method, left, right = rng.sample(spec.atoms, 3)
            pairs.append(
                TestAssertPair(
                    id=i,
                    focal_test=f"{method} ( {left} , {right} )",
                    assertion=f"assertEquals ( {left} , {right} )",
                )
            )
        return Corpus(tuple(pairs), name=name)

    return SyntheticBenchmark(
        train=make_pairs(spec.n, "copy-train"),
        valid=make_pairs(n_eval, "copy-valid"),
        test=make_pairs(n_eval, "copy-test"),
        planted_valid={},
        planted_test={},
    )


def _generate_class_family(spec: SynthSpec, rng: random.Random, n_eval: int) -> SyntheticBenchmark:
    half = len(spec.atoms) // 2
    train_pool = list(spec.atoms[:half])
    query_pool = list(spec.atoms[half:])
    all_classes = [
        (keyword, rgs) for keyword in PATTERN_KEYWORDS for rgs in _class_partitions()
    ]
    singles = _singleton_count(spec.n)
    paired = (spec.n - singles) // 2
    classes = rng.sample(all_classes, singles + paired)
    edit = spec.family == "edit-one-arg"

    def render(keyword: str, rgs: tuple[int, ...], blocks: list[str]) -> tuple[str, list[str]]:
        ft = _class_focal_test(keyword, rgs, blocks)
        return ft, _slot_atoms(ft)

    renamed_first = paired // 4
    renamed_total = paired - renamed_first

    def shared_blocks(cid: int, count: int) -> int:
        # Graded overlap for the renamed pairs: the first half keeps all but
        # one block identifier, the next third keeps one, the last sixth
        # keeps none.  Front-loading the near-duplicates keeps the partner
        # reachable for a fresh encoder while it still ranks by vocabulary.
        pos = cid - renamed_first
        total = max(renamed_total, 1)
        if 2 * pos < total:
            target = count - 1
        elif 6 * pos < 5 * total:
            target = 1
        else:
            target = 0
        return max(0, min(target, count - 1))

    # Paired classes teach partner reuse during training; singleton classes
    # keep each evaluation query matched to exactly one codebase pair.
    drafts: list[tuple[int, str, str]] = []
    singleton_info = []
    for cid, (keyword, rgs) in enumerate(classes):
        method = rng.choice(ASSERT_CHOICES)
        # The digit prefix alone guarantees uniqueness; the letter tail makes
        # the certificate expensive to memorize but free to copy.
        suffix = "".join(rng.choice("abcdefghijklmnopqrstuvwxyz") for _ in range(8))
        cert = f"cert{cid}{suffix}"
        blocks_a = rng.sample(train_pool, _blocks(rgs))
        ft_a, slots_a = render(keyword, rgs, blocks_a)
        if cid < paired:
            if cid < renamed_first:
                # Echo pair: the partner repeats the same identifiers, so
                # at initialization it is retrieved trivially and its
                # assertion matches the gold verbatim.  These rows teach
                # the reuse program; the renamed pairs below then force the
                # retriever to find partners by structure alone.
                ft_b, slots_b = ft_a, slots_a
            else:
                keep = shared_blocks(cid, len(blocks_a))
                fresh = [atom for atom in train_pool if atom not in blocks_a]
                blocks_b = blocks_a[:keep] + rng.sample(fresh, len(blocks_a) - keep)
                ft_b, slots_b = render(keyword, rgs, blocks_b)
            if edit:
                drafts.append((cid, ft_a, f"{method} ( {cert} , {slots_a[1]} )"))
                drafts.append((cid, ft_b, f"{method} ( {cert} , {slots_b[1]} )"))
            else:
                shared = f"{method} ( {cert} )"
                drafts.append((cid, ft_a, shared))
                drafts.append((cid, ft_b, shared))
        else:
            tail = f" , {slots_a[1]}" if edit else ""
            drafts.append((cid, ft_a, f"{method} ( {cert}{tail} )"))
            singleton_info.append((cid, keyword, rgs, method, cert))
    rng.shuffle(drafts)
    train_pairs = tuple(
        TestAssertPair(id=i, focal_test=ft, assertion=assertion)
        for i, (_, ft, assertion) in enumerate(drafts)
    )
    train_id_of_class = {cid: i for i, (cid, _, _) in enumerate(drafts)}

    def make_queries(chunk, name: str) -> tuple[Corpus, dict[int, int]]:
        pairs = []
        planted = {}
        for qid, (cid, keyword, rgs, method, cert) in enumerate(chunk):
            ft, slots = render(keyword, rgs, rng.sample(query_pool, _blocks(rgs)))
            tail = f" , {slots[1]}" if edit else ""
            pairs.append(
                TestAssertPair(
                    id=qid,
                    focal_test=ft,
                    assertion=f"{method} ( {cert}{tail} )",
                )
            )
            planted[qid] = train_id_of_class[cid]
        return Corpus(tuple(pairs), name=name), planted

    prefix = "paraphrase" if spec.family == "paraphrase-retrieval" else "editarg"
    valid, planted_valid = make_queries(singleton_info[:n_eval], f"{prefix}-valid")
    test, planted_test = make_queries(singleton_info[n_eval : 2 * n_eval], f"{prefix}-test")
    return SyntheticBenchmark(
        train=Corpus(train_pairs, name=f"{prefix}-train"),
        valid=valid,
        test=test,
        planted_valid=planted_valid,
        planted_test=planted_test,
    )


def oracle_generate(spec: SynthSpec, ft: str, codebase: Corpus) -> str:
    """The construction-aware solution, used to certify the task is solvable.

    For ``copy`` the answer is read off the focal test.  For the class
    families the partner is located by structural signature; paraphrase
    reuses its assertion verbatim, edit-one-arg swaps in the query's own
    middle slot.
    """
    tokens = ft.split()
    if spec.family == "copy":
        if len(tokens) != 6:
            raise SynthError(f"not a copy-family focal test: {ft!r}")
        return f"assertEquals ( {tokens[2]} , {tokens[4]} )"
    signature = structural_signature(ft)
    partner = None
    for pair in codebase:
        if structural_signature(pair.focal_test) == signature:
            partner = pair
            break
    if partner is None:
        raise SynthError(f"no codebase pair shares the signature of {ft!r}")
    if spec.family == "paraphrase-retrieval":
        return partner.assertion
    partner_tokens = partner.assertion.split()
    method, cert = partner_tokens[0], partner_tokens[2]
    slots = _slot_atoms(ft)
    return f"{method} ( {cert} , {slots[1]} )"


def write_synthetic(bench: SyntheticBenchmark, directory: str | Path) -> None:
    """Emit the parallel corpus files plus the planted-match sidecars."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in (bench.train, bench.valid, bench.test):
        write_corpus(split, directory / f"{split.name}.source", directory / f"{split.name}.target")
    for corpus, planted in ((bench.valid, bench.planted_valid), (bench.test, bench.planted_test)):
        lines = [f"{qid} {pid}" for qid, pid in sorted(planted.items())]
        path = directory / f"{corpus.name}.planted"
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_planted(path: str | Path) -> dict[int, int]:
    """Parse a planted-match sidecar back into its id map."""
    planted = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            qid, pid = line.split()
            planted[int(qid)] = int(pid)
    return planted
