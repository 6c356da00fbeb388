"""Assertion-quality metrics: exact match, BLEU, and a CodeBLEU variant.

Predictions and references are compared as whitespace-normalized token
sequences so formatting differences never count against a model.  BLEU is the
usual geometric mean of modified n-gram precisions with a brevity penalty.
The CodeBLEU variant adds a keyword-weighted BLEU, a depth-bounded AST
subtree match, and a def-use identifier-pair match, the last two backed by a
small recursive-descent parser for assertion expressions.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

from .corpus import AssertionType, Corpus, classify_assertion

NGRAM_ORDER = 4
KEYWORD_WEIGHT = 5.0
AST_DEPTH_BOUND = 3
DEFAULT_CODEBLEU_WEIGHTS = (0.25, 0.25, 0.25, 0.25)

ASSERT_METHODS = frozenset({
    "assertEquals", "assertTrue", "assertThat", "assertNotNull",
    "assertFalse", "assertNull", "assertArrayEquals", "assertSame",
})

JAVA_KEYWORDS = frozenset({
    "abstract", "assert", "boolean", "break", "byte", "case", "catch",
    "char", "class", "const", "continue", "default", "do", "double",
    "else", "enum", "extends", "final", "finally", "float", "for", "goto",
    "if", "implements", "import", "instanceof", "int", "interface", "long",
    "native", "new", "package", "private", "protected", "public", "return",
    "short", "static", "strictfp", "super", "switch", "synchronized",
    "this", "throw", "throws", "transient", "try", "void", "volatile",
    "while", "true", "false", "null",
})

_SMOOTHING_NOTE = "add-one to numerator and denominator for n >= 2 when any higher-order match count is zero"


class MetricsError(ValueError):
    """Raised for malformed metric inputs such as misaligned prediction sets."""


_WORD_RE = re.compile(r"\w+|[^\w\s]")


def normalize_tokens(text: str) -> list[str]:
    """Split text into words and individual punctuation marks.

    "assertEquals(1, x)" and "assertEquals ( 1 , x )" normalize to the same
    sequence, so spacing conventions cannot affect any score.
    """
    return _WORD_RE.findall(text)


def exact_match(pred: str, gold: str) -> bool:
    """Position-wise equality of the normalized token sequences."""
    return normalize_tokens(pred) == normalize_tokens(gold)


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _clipped_matches(pred: list[str], gold: list[str], n: int) -> tuple[int, int]:
    """Modified n-gram precision counts: clipped matches and candidate total."""
    total = max(len(pred) - n + 1, 0)
    if total == 0:
        return 0, 0
    gold_counts = _ngram_counts(gold, n)
    matched = sum(min(count, gold_counts[gram]) for gram, count in _ngram_counts(pred, n).items())
    return matched, total


def _brevity_penalty(pred_len: int, gold_len: int) -> float:
    if pred_len > gold_len:
        return 1.0
    return math.exp(1.0 - gold_len / pred_len)


def _geometric_bleu(matches: list[int], totals: list[int], pred_len: int, gold_len: int) -> float:
    """Combine per-order counts into a BLEU score.

    The unigram precision is used as-is and a zero there zeroes the score.
    Higher orders are smoothed by adding one to both counts whenever any of
    them has no matches, which keeps the geometric mean defined for short or
    partially matching candidates.
    """
    if pred_len == 0 or matches[0] == 0:
        return 0.0
    smooth = any(m == 0 for m in matches[1:])
    log_sum = math.log(matches[0] / totals[0])
    for m, t in zip(matches[1:], totals[1:]):
        if smooth:
            log_sum += math.log((m + 1.0) / (t + 1.0))
        else:
            log_sum += math.log(m / t)
    score = math.exp(log_sum / len(matches)) * _brevity_penalty(pred_len, gold_len)
    return min(score, 1.0)


def bleu(pred: str, gold: str, max_n: int = NGRAM_ORDER) -> float:
    """Sentence BLEU over normalized tokens, in [0, 1]."""
    gold_tokens = normalize_tokens(gold)
    if not gold_tokens:
        raise MetricsError("bleu requires a non-empty reference")
    pred_tokens = normalize_tokens(pred)
    if not pred_tokens:
        return 0.0
    matches, totals = [], []
    for n in range(1, max_n + 1):
        m, t = _clipped_matches(pred_tokens, gold_tokens, n)
        matches.append(m)
        totals.append(t)
    return _geometric_bleu(matches, totals, len(pred_tokens), len(gold_tokens))


def corpus_bleu(preds: list[str], golds: list[str], max_n: int = NGRAM_ORDER) -> float:
    """Corpus BLEU: n-gram counts and lengths pooled before combining."""
    if len(preds) != len(golds):
        raise MetricsError(f"{len(preds)} predictions cannot score against {len(golds)} references")
    if not preds:
        raise MetricsError("corpus_bleu requires at least one pair")
    matches = [0] * max_n
    totals = [0] * max_n
    pred_len = gold_len = 0
    for pred, gold in zip(preds, golds):
        gold_tokens = normalize_tokens(gold)
        if not gold_tokens:
            raise MetricsError("bleu requires a non-empty reference")
        pred_tokens = normalize_tokens(pred)
        pred_len += len(pred_tokens)
        gold_len += len(gold_tokens)
        for n in range(1, max_n + 1):
            m, t = _clipped_matches(pred_tokens, gold_tokens, n)
            matches[n - 1] += m
            totals[n - 1] += t
    return _geometric_bleu(matches, totals, pred_len, gold_len)


def _token_weight(token: str) -> float:
    if token in ASSERT_METHODS or token in JAVA_KEYWORDS:
        return KEYWORD_WEIGHT
    return 1.0


def weighted_bleu(pred: str, gold: str, max_n: int = NGRAM_ORDER) -> float:
    """BLEU with assertion methods and Java keywords weighted in the unigrams.

    Only the unigram precision is reweighted; higher orders and the brevity
    penalty are identical to plain BLEU.  A missed keyword therefore costs
    five times as much mass as a missed ordinary token.
    """
    gold_tokens = normalize_tokens(gold)
    if not gold_tokens:
        raise MetricsError("weighted_bleu requires a non-empty reference")
    pred_tokens = normalize_tokens(pred)
    if not pred_tokens:
        return 0.0
    gold_counts = Counter(gold_tokens)
    matched_weight = 0.0
    total_weight = 0.0
    for token, count in Counter(pred_tokens).items():
        w = _token_weight(token)
        total_weight += w * count
        matched_weight += w * min(count, gold_counts[token])
    if matched_weight == 0.0:
        return 0.0
    matches, totals = [], []
    for n in range(2, max_n + 1):
        m, t = _clipped_matches(pred_tokens, gold_tokens, n)
        matches.append(m)
        totals.append(t)
    smooth = any(m == 0 for m in matches)
    log_sum = math.log(matched_weight / total_weight)
    for m, t in zip(matches, totals):
        if smooth:
            log_sum += math.log((m + 1.0) / (t + 1.0))
        else:
            log_sum += math.log(m / t)
    score = math.exp(log_sum / max_n) * _brevity_penalty(len(pred_tokens), len(gold_tokens))
    return min(score, 1.0)


# ---------------------------------------------------------------------------
# Assertion expression parsing.


@dataclass(frozen=True, slots=True)
class Identifier:
    name: str

    def children(self) -> tuple:
        return ()

    def label(self) -> str:
        return f"id:{self.name}"


@dataclass(frozen=True, slots=True)
class Literal:
    kind: str
    text: str

    def children(self) -> tuple:
        return ()

    def label(self) -> str:
        return f"lit:{self.kind}:{self.text}"


@dataclass(frozen=True, slots=True)
class FieldAccess:
    base: object
    field: str

    def children(self) -> tuple:
        return (self.base,)

    def label(self) -> str:
        return f"field:{self.field}"


@dataclass(frozen=True, slots=True)
class MethodCall:
    name: str
    receiver: object | None
    args: tuple

    def children(self) -> tuple:
        if self.receiver is None:
            return self.args
        return (self.receiver, *self.args)

    def label(self) -> str:
        return f"call:{self.name}"


@dataclass(frozen=True, slots=True)
class ArrayInit:
    elements: tuple

    def children(self) -> tuple:
        return self.elements

    def label(self) -> str:
        return "array"


class ParseError(ValueError):
    """Syntax error with the 1-based position of the offending token."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at token {position}")
        self.position = position


_LEXER_RE = re.compile(
    r"""
    (?P<string>"(?:\\.|[^"\\])*")
  | (?P<char>'(?:\\.|[^'\\])')
  | (?P<number>\d+(?:\.\d+)?[fFdDlL]?)
  | (?P<ident>[A-Za-z_$][A-Za-z0-9_$]*)
  | (?P<punct>[()\[\]{},.;-])
  | (?P<space>\s+)
    """,
    re.VERBOSE,
)


def _lex(text: str) -> list[tuple[str, str]]:
    tokens: list[tuple[str, str]] = []
    pos = 0
    while pos < len(text):
        match = _LEXER_RE.match(text, pos)
        if match is None:
            raise ParseError(f"unexpected character {text[pos]!r}", len(tokens) + 1)
        pos = match.end()
        kind = match.lastgroup
        if kind == "space":
            continue
        tokens.append((kind, match.group()))
    return tokens


class _Parser:
    """Recursive descent over the lexed token stream.

    Grammar: an assertion is a single method call whose arguments are
    expressions; an expression is a literal, an array initializer, a ``new``
    creation, or an identifier extended by any run of field accesses and
    calls.
    """

    def __init__(self, tokens: list[tuple[str, str]]):
        self.tokens = tokens
        self.pos = 0

    def _peek(self) -> tuple[str, str] | None:
        if self.pos < len(self.tokens):
            return self.tokens[self.pos]
        return None

    def _fail(self, expected: str):
        found = self._peek()
        shown = "end of input" if found is None else repr(found[1])
        raise ParseError(f"expected {expected}, found {shown}", self.pos + 1)

    def _take(self, kind: str, text: str | None = None) -> str:
        found = self._peek()
        if found is None or found[0] != kind or (text is not None and found[1] != text):
            self._fail(text if text is not None else kind)
        self.pos += 1
        return found[1]

    def parse_statement(self) -> MethodCall:
        expr = self.parse_expression()
        if self._peek() == ("punct", ";"):
            self.pos += 1
        if self._peek() is not None:
            self._fail("end of input")
        if not isinstance(expr, MethodCall):
            raise ParseError("assertion must be a method call", 1)
        return expr

    def parse_expression(self):
        return self._parse_postfix(self._parse_primary())

    def _parse_primary(self):
        found = self._peek()
        if found is None:
            self._fail("an expression")
        kind, text = found
        if kind == "string":
            self.pos += 1
            return Literal("string", text)
        if kind == "char":
            self.pos += 1
            return Literal("char", text)
        if kind == "number":
            self.pos += 1
            return Literal("float" if "." in text else "int", text)
        if (kind, text) == ("punct", "-"):
            self.pos += 1
            number = self._take("number")
            return Literal("float" if "." in number else "int", f"-{number}")
        if (kind, text) == ("punct", "{"):
            return self._parse_array_init()
        if kind == "ident":
            self.pos += 1
            if text in ("true", "false"):
                return Literal("bool", text)
            if text == "null":
                return Literal("null", text)
            if text == "new":
                return self._parse_creation()
            return Identifier(text)
        self._fail("an expression")

    def _parse_creation(self):
        """Constructor call or array creation after a consumed ``new``.

        Constructors keep the type in the call name so they never collide
        with a plain call of the same name; array creations drop the type,
        the initializer carries everything the comparison cares about.
        """
        name = self._take("ident")
        while self._peek() == ("punct", "."):
            self.pos += 1
            name = f"{name}.{self._take('ident')}"
        if self._peek() == ("punct", "["):
            while self._peek() == ("punct", "["):
                self.pos += 1
                self._take("punct", "]")
            return self._parse_array_init()
        if self._peek() == ("punct", "("):
            return MethodCall(f"new {name}", None, self._parse_args())
        self._fail("a constructor argument list or array brackets")

    def _parse_postfix(self, expr):
        while True:
            found = self._peek()
            if found == ("punct", "("):
                if not isinstance(expr, Identifier):
                    self._fail("a method name before the call")
                expr = MethodCall(expr.name, None, self._parse_args())
            elif found == ("punct", "."):
                self.pos += 1
                name = self._take("ident")
                if self._peek() == ("punct", "("):
                    expr = MethodCall(name, expr, self._parse_args())
                else:
                    expr = FieldAccess(expr, name)
            else:
                return expr

    def _parse_args(self) -> tuple:
        self._take("punct", "(")
        if self._peek() == ("punct", ")"):
            self.pos += 1
            return ()
        args = [self.parse_expression()]
        while self._peek() == ("punct", ","):
            self.pos += 1
            args.append(self.parse_expression())
        self._take("punct", ")")
        return tuple(args)

    def _parse_array_init(self) -> ArrayInit:
        self._take("punct", "{")
        if self._peek() == ("punct", "}"):
            self.pos += 1
            return ArrayInit(())
        elements = [self.parse_expression()]
        while self._peek() == ("punct", ","):
            self.pos += 1
            elements.append(self.parse_expression())
        self._take("punct", "}")
        return ArrayInit(tuple(elements))


def parse_assertion(text: str) -> MethodCall:
    """Parse one assertion statement into its expression tree.

    The root is always a method call; anything else, trailing junk included,
    is a :class:`ParseError` carrying the 1-based offending token position.
    """
    tokens = _lex(text)
    if not tokens:
        raise ParseError("empty assertion", 1)
    return _Parser(tokens).parse_statement()


def ast_subtrees(root, depth: int = AST_DEPTH_BOUND) -> Counter:
    """Multiset of depth-bounded subtree shapes, one rooted at every node.

    Each node contributes the serialization of its subtree truncated
    ``depth`` levels down, so structural agreement is rewarded even when
    deeper arguments differ.
    """

    def serialize(node, remaining: int) -> str:
        if remaining == 0:
            return "_"
        parts = [serialize(child, remaining - 1) for child in node.children()]
        if not parts:
            return node.label()
        return f"{node.label()}({','.join(parts)})"

    counts: Counter = Counter()
    stack = [root]
    while stack:
        node = stack.pop()
        counts[serialize(node, depth)] += 1
        stack.extend(node.children())
    return counts


def ast_match(pred_root, gold_root, depth: int = AST_DEPTH_BOUND) -> float:
    """Fraction of the reference's depth-bounded subtrees found in the prediction."""
    gold_subtrees = ast_subtrees(gold_root, depth)
    pred_subtrees = ast_subtrees(pred_root, depth)
    total = sum(gold_subtrees.values())
    matched = sum(min(count, pred_subtrees[shape]) for shape, count in gold_subtrees.items())
    return matched / total


def dataflow_identifiers(root) -> list[str]:
    """Value-carrying identifiers in left-to-right order.

    Method names are behavior rather than data and are skipped; receivers,
    field names, and argument identifiers all count.
    """
    names: list[str] = []

    def walk(node):
        if isinstance(node, Identifier):
            names.append(node.name)
        elif isinstance(node, FieldAccess):
            walk(node.base)
            names.append(node.field)
        elif isinstance(node, MethodCall):
            if node.receiver is not None:
                walk(node.receiver)
            for arg in node.args:
                walk(arg)
        elif isinstance(node, ArrayInit):
            for element in node.elements:
                walk(element)

    walk(root)
    return names


def dataflow_pairs(root) -> Counter:
    """Ordered def-use pairs: every identifier with every later identifier."""
    names = dataflow_identifiers(root)
    pairs: Counter = Counter()
    for i, first in enumerate(names):
        for second in names[i + 1 :]:
            pairs[(first, second)] += 1
    return pairs


def dataflow_match(pred_root, gold_root) -> float:
    """Fraction of the reference's def-use pairs found in the prediction.

    A reference with fewer than two identifiers has no pairs to miss, so the
    component is vacuously 1.
    """
    gold_pairs = dataflow_pairs(gold_root)
    total = sum(gold_pairs.values())
    if total == 0:
        return 1.0
    pred_pairs = dataflow_pairs(pred_root)
    matched = sum(min(count, pred_pairs[pair]) for pair, count in gold_pairs.items())
    return matched / total


def codebleu(pred: str, gold: str, weights: tuple[float, float, float, float] = DEFAULT_CODEBLEU_WEIGHTS) -> float:
    """Weighted blend of BLEU, keyword-weighted BLEU, AST, and dataflow match.

    When either side fails to parse, the two tree-based components cannot be
    scored, and their weight is folded back into the n-gram components in
    proportion to their configured weights.
    """
    if len(weights) != 4:
        raise MetricsError("codebleu expects exactly four weights")
    if any(w < 0 for w in weights):
        raise MetricsError("codebleu weights must be non-negative")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise MetricsError(f"codebleu weights must sum to 1, got {sum(weights)!r}")
    alpha, beta, gamma, delta = weights
    ngram = bleu(pred, gold)
    weighted = weighted_bleu(pred, gold)
    try:
        pred_root = parse_assertion(pred)
        gold_root = parse_assertion(gold)
    except ParseError:
        extra = gamma + delta
        base = alpha + beta
        if base > 0.0:
            alpha += extra * alpha / base
            beta += extra * beta / base
        else:
            alpha = beta = extra / 2.0
        return alpha * ngram + beta * weighted
    return (
        alpha * ngram
        + beta * weighted
        + gamma * ast_match(pred_root, gold_root)
        + delta * dataflow_match(pred_root, gold_root)
    )


# ---------------------------------------------------------------------------
# Aggregate reporting.


@dataclass(frozen=True, slots=True)
class SampleRecord:
    id: int
    gold_type: AssertionType
    correct: bool
    bleu: float


@dataclass(frozen=True, slots=True)
class TypeRow:
    count: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.count if self.count else 0.0


@dataclass(frozen=True, slots=True)
class MetricsReport:
    n: int
    accuracy: float
    bleu: float
    codebleu: float
    per_type: dict[AssertionType, TypeRow]
    records: tuple[SampleRecord, ...]
    metadata: dict[str, str] = field(default_factory=dict)


def evaluate(
    preds: list[str],
    golds: Corpus,
    codebleu_weights: tuple[float, float, float, float] = DEFAULT_CODEBLEU_WEIGHTS,
) -> MetricsReport:
    """Score aligned predictions against a corpus and aggregate per type."""
    if len(preds) != len(golds):
        raise MetricsError(f"{len(preds)} predictions cannot score against {len(golds)} references")
    if not len(golds):
        raise MetricsError("cannot evaluate an empty corpus")
    counts = {atype: 0 for atype in AssertionType}
    correct_counts = {atype: 0 for atype in AssertionType}
    records = []
    codebleu_sum = 0.0
    n_correct = 0
    for pred, pair in zip(preds, golds):
        atype = classify_assertion(pair.assertion)
        counts[atype] += 1
        correct = exact_match(pred, pair.assertion)
        if correct:
            n_correct += 1
            correct_counts[atype] += 1
        codebleu_sum += codebleu(pred, pair.assertion, codebleu_weights)
        records.append(SampleRecord(pair.id, atype, correct, bleu(pred, pair.assertion)))
    gold_texts = [pair.assertion for pair in golds]
    return MetricsReport(
        n=len(golds),
        accuracy=n_correct / len(golds),
        bleu=corpus_bleu(preds, gold_texts),
        codebleu=codebleu_sum / len(golds),
        per_type={atype: TypeRow(counts[atype], correct_counts[atype]) for atype in AssertionType},
        records=tuple(records),
        metadata={
            "bleu_smoothing": _SMOOTHING_NOTE,
            "codebleu_weights": ",".join(f"{w:g}" for w in codebleu_weights),
        },
    )


def format_report(report: MetricsReport) -> str:
    """Readable summary: the headline metrics and the per-type table."""
    lines = [
        f"samples          {report.n}",
        f"exact match      {report.accuracy:.4f}",
        f"bleu             {report.bleu:.4f}",
        f"codebleu         {report.codebleu:.4f}",
        "",
        f"{'type':<14} {'count':>8} {'correct':>8} {'accuracy':>9}",
    ]
    for atype, row in report.per_type.items():
        lines.append(f"{atype.value:<14} {row.count:>8} {row.correct:>8} {row.accuracy:>9.4f}")
    return "\n".join(lines)


@dataclass(frozen=True, slots=True)
class OverlapReport:
    n: int
    correct: dict[str, int]
    unique_correct: dict[str, int]
    pairwise: dict[tuple[str, str], int]


def overlap_analysis(systems: dict[str, list[str]], golds: Corpus) -> OverlapReport:
    """Which systems solve which samples: unique wins and pairwise agreement.

    A sample counts as a unique win for a system when that system alone
    produced an exact match for it.
    """
    if not systems:
        raise MetricsError("overlap_analysis requires at least one system")
    for name, preds in systems.items():
        if len(preds) != len(golds):
            raise MetricsError(
                f"system {name!r} has {len(preds)} predictions for {len(golds)} references"
            )
    correct_ids = {
        name: {pair.id for pred, pair in zip(preds, golds) if exact_match(pred, pair.assertion)}
        for name, preds in systems.items()
    }
    unique = {}
    for name, ids in correct_ids.items():
        others: set[int] = set()
        for other_name, other_ids in correct_ids.items():
            if other_name != name:
                others |= other_ids
        unique[name] = len(ids - others)
    names = list(systems)
    pairwise = {}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            pairwise[(a, b)] = len(correct_ids[a] & correct_ids[b])
    return OverlapReport(
        n=len(golds),
        correct={name: len(ids) for name, ids in correct_ids.items()},
        unique_correct=unique,
        pairwise=pairwise,
    )


def format_overlap(report: OverlapReport) -> str:
    lines = [f"{'system':<20} {'correct':>8} {'unique':>8}"]
    for name in report.correct:
        lines.append(f"{name:<20} {report.correct[name]:>8} {report.unique_correct[name]:>8}")
    if report.pairwise:
        lines.append("")
        lines.append(f"{'pair':<41} {'both':>8}")
        for (a, b), count in report.pairwise.items():
            lines.append(f"{a + ' & ' + b:<41} {count:>8}")
    return "\n".join(lines)
