import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from assertgen.corpus import AssertionType
from assertgen.metrics import (
    ArrayInit,
    FieldAccess,
    Identifier,
    Literal,
    MethodCall,
    MetricsError,
    ParseError,
    ast_match,
    ast_subtrees,
    bleu,
    codebleu,
    corpus_bleu,
    dataflow_identifiers,
    dataflow_match,
    dataflow_pairs,
    evaluate,
    exact_match,
    format_overlap,
    format_report,
    normalize_tokens,
    overlap_analysis,
    parse_assertion,
    weighted_bleu,
)
from tests.conftest import make_corpus


# --- independent oracles -----------------------------------------------------


def oracle_bleu_parts(pred_tokens, gold_tokens, max_n):
    """Clipped n-gram counts by direct enumeration, one occurrence at a time."""
    matches, totals = [], []
    for n in range(1, max_n + 1):
        pn = [tuple(pred_tokens[i : i + n]) for i in range(len(pred_tokens) - n + 1)]
        gn = [tuple(gold_tokens[i : i + n]) for i in range(len(gold_tokens) - n + 1)]
        used = []
        hit = 0
        for gram in pn:
            if used.count(gram) < gn.count(gram):
                used.append(gram)
                hit += 1
        matches.append(hit)
        totals.append(len(pn))
    return matches, totals


def oracle_combine(matches, totals, pred_len, gold_len, max_n):
    if pred_len == 0 or matches[0] == 0:
        return 0.0
    smooth = any(m == 0 for m in matches[1:])
    product = matches[0] / totals[0]
    for m, t in zip(matches[1:], totals[1:]):
        product *= (m + 1) / (t + 1) if smooth else m / t
    penalty = 1.0 if pred_len > gold_len else math.exp(1.0 - gold_len / pred_len)
    return min(product ** (1.0 / max_n) * penalty, 1.0)


def oracle_bleu(pred, gold, max_n=4):
    p, g = normalize_tokens(pred), normalize_tokens(gold)
    matches, totals = oracle_bleu_parts(p, g, max_n)
    return oracle_combine(matches, totals, len(p), len(g), max_n)


def oracle_corpus_bleu(preds, golds, max_n=4):
    pooled_m = [0] * max_n
    pooled_t = [0] * max_n
    pred_len = gold_len = 0
    for pred, gold in zip(preds, golds):
        p, g = normalize_tokens(pred), normalize_tokens(gold)
        pred_len += len(p)
        gold_len += len(g)
        matches, totals = oracle_bleu_parts(p, g, max_n)
        pooled_m = [a + b for a, b in zip(pooled_m, matches)]
        pooled_t = [a + b for a, b in zip(pooled_t, totals)]
    return oracle_combine(pooled_m, pooled_t, pred_len, gold_len, max_n)


def oracle_subtree_list(node, depth):
    def serialize(n, remaining):
        if remaining == 0:
            return "_"
        parts = [serialize(child, remaining - 1) for child in n.children()]
        if not parts:
            return n.label()
        return n.label() + "(" + ",".join(parts) + ")"

    collected = []

    def walk(n):
        collected.append(serialize(n, depth))
        for child in n.children():
            walk(child)

    walk(node)
    return collected


def oracle_ast_match(pred_root, gold_root, depth=3):
    gold = oracle_subtree_list(gold_root, depth)
    pred = oracle_subtree_list(pred_root, depth)
    used = []
    hit = 0
    for shape in gold:
        if used.count(shape) < pred.count(shape):
            used.append(shape)
            hit += 1
    return hit / len(gold)


# --- token normalization and exact match ------------------------------------


def test_normalize_merges_spacing_conventions():
    tight = normalize_tokens("assertEquals(1, x.size())")
    spaced = normalize_tokens("assertEquals ( 1 , x . size ( ) )")
    assert tight == spaced
    assert exact_match("assertEquals(1, x)", "assertEquals ( 1 , x )")
    assert not exact_match("assertEquals ( 1 , x )", "assertEquals ( 1 , y )")


# --- BLEU against the oracle -------------------------------------------------

BLEU_CASES = [
    ("assertEquals ( a , b )", "assertEquals ( a , b )"),
    ("assertEquals ( a , b )", "assertEquals ( b , a )"),
    ("assertTrue ( x )", "assertEquals ( a , b )"),
    ("a b c d e f g", "a b c d"),
    ("a b", "a b c d e f"),
    ("a a a a", "a a"),
    ("x", "assertNull ( value )"),
    ("assertSame ( p , q , r )", "assertSame ( p , x , r )"),
]


@pytest.mark.parametrize("pred,gold", BLEU_CASES)
def test_bleu_matches_brute_force(pred, gold):
    assert abs(bleu(pred, gold) - oracle_bleu(pred, gold)) < 1e-9


def test_bleu_identity_and_edges():
    assert bleu("assertEquals ( a , b )", "assertEquals ( a , b )") == 1.0
    assert bleu("", "assertTrue ( x )") == 0.0
    assert bleu("q w e", "a b c") == 0.0
    with pytest.raises(MetricsError):
        bleu("assertTrue ( x )", "")


@settings(max_examples=150, deadline=None)
@given(
    pred=st.lists(st.sampled_from("ab(,"), max_size=8),
    gold=st.lists(st.sampled_from("ab(,"), min_size=1, max_size=8),
)
def test_bleu_matches_brute_force_random(pred, gold):
    p, g = " ".join(pred), " ".join(gold)
    got = bleu(p, g)
    assert abs(got - oracle_bleu(p, g)) < 1e-9
    assert 0.0 <= got <= 1.0


def test_corpus_bleu_pools_counts():
    preds = ["assertEquals ( a , b )", "assertTrue ( x )", "c d"]
    golds = ["assertEquals ( a , c )", "assertTrue ( y )", "c d e f"]
    assert abs(corpus_bleu(preds, golds) - oracle_corpus_bleu(preds, golds)) < 1e-9
    mean_sentence = sum(bleu(p, g) for p, g in zip(preds, golds)) / 3
    assert abs(corpus_bleu(preds, golds) - mean_sentence) > 1e-3


def test_corpus_bleu_validation():
    with pytest.raises(MetricsError):
        corpus_bleu(["a"], ["a", "b"])
    with pytest.raises(MetricsError):
        corpus_bleu([], [])


# --- weighted BLEU -----------------------------------------------------------


def test_weighted_bleu_identity_is_one():
    text = "assertEquals ( foo , bar )"
    assert weighted_bleu(text, text) == 1.0


def test_weighted_bleu_prices_keywords_five_to_one():
    gold = "assertTrue ( x )"
    # A wrong keyword carries weight 5 in the denominator: unigram drops to
    # 3/8 where plain BLEU sees 3/4.  A correct keyword next to a plain miss
    # pulls the other way: 7/8 against 3/4.
    assert weighted_bleu("assertFalse ( x )", gold) < bleu("assertFalse ( x )", gold)
    assert weighted_bleu("assertTrue ( y )", gold) > bleu("assertTrue ( y )", gold)


def test_weighted_bleu_unigram_reweighting():
    gold = "assertTrue ( flag )"
    pred = "assertTrue flag extra"
    # matched 5 + 1 of total 5 + 1 + 1; higher orders all empty-match
    expected_unigram = 6.0 / 7.0
    matches, totals = oracle_bleu_parts(
        normalize_tokens(pred), normalize_tokens(gold), 4
    )
    product = expected_unigram
    for m, t in zip(matches[1:], totals[1:]):
        product *= (m + 1) / (t + 1)
    expected = product ** 0.25 * math.exp(1.0 - 4.0 / 3.0)
    assert abs(weighted_bleu(pred, gold) - expected) < 1e-12


# --- parser ------------------------------------------------------------------


def test_parse_flat_call():
    tree = parse_assertion("assertEquals ( a , b )")
    assert tree == MethodCall("assertEquals", None, (Identifier("a"), Identifier("b")))


def test_parse_literals():
    tree = parse_assertion(
        'assertEquals ( 1 , 2.5 , "s" , \'c\' , true , null , - 3 )'
    )
    kinds = [arg.kind for arg in tree.args]
    assert kinds == ["int", "float", "string", "char", "bool", "null", "int"]
    assert tree.args[6].text == "-3"


def test_parse_receiver_chain_and_fields():
    tree = parse_assertion("assertTrue ( obj . field . isEmpty ( ) )")
    (arg,) = tree.args
    assert arg == MethodCall(
        "isEmpty", FieldAccess(Identifier("obj"), "field"), ()
    )


def test_parse_array_initializer():
    tree = parse_assertion("assertArrayEquals ( { 1 , 2 } , result )")
    assert tree.args[0] == ArrayInit((Literal("int", "1"), Literal("int", "2")))


def test_parse_constructor_and_array_creation():
    ctor = parse_assertion("assertEquals ( new java . math . BigDecimal ( 10 ) , x )")
    assert ctor.args[0] == MethodCall(
        "new java.math.BigDecimal", None, (Literal("int", "10"),)
    )
    arr = parse_assertion("assertArrayEquals ( new int [ ] { 1 , 2 } , out )")
    assert arr.args[0] == ArrayInit((Literal("int", "1"), Literal("int", "2")))


def test_parse_trailing_semicolon_tolerated():
    assert parse_assertion("assertTrue ( x ) ;").name == "assertTrue"


def test_parse_error_positions():
    with pytest.raises(ParseError) as excinfo:
        parse_assertion("assertEquals ( ( )")
    assert excinfo.value.position == 3
    with pytest.raises(ParseError, match="end of input"):
        parse_assertion("assertTrue ( x ) junk")
    with pytest.raises(ParseError, match="method call"):
        parse_assertion("someVariable")
    with pytest.raises(ParseError, match="empty"):
        parse_assertion("   ")
    with pytest.raises(ParseError, match="unexpected character"):
        parse_assertion("assertTrue ( x @ y )")
    with pytest.raises(ParseError):
        parse_assertion("assertEquals ( new Missing , x )")


# --- AST match against the oracle -------------------------------------------

AST_CASES = [
    ("assertEquals ( a , b )", "assertEquals ( a , b )"),
    ("assertEquals ( a , b )", "assertEquals ( b , a )"),
    ("assertEquals ( a , b )", "assertSame ( a , b )"),
    ("assertTrue ( x . get ( ) )", "assertTrue ( y . get ( ) )"),
    ("assertTrue ( a . b . c . d . e )", "assertTrue ( a . b . c . d . f )"),
    ("assertArrayEquals ( { 1 , 2 } , r )", "assertArrayEquals ( { 1 } , r )"),
    ("assertNull ( obj )", "assertThat ( obj , notNullValue ( ) )"),
]


@pytest.mark.parametrize("pred,gold", AST_CASES)
def test_ast_match_matches_enumeration(pred, gold):
    pred_root = parse_assertion(pred)
    gold_root = parse_assertion(gold)
    got = ast_match(pred_root, gold_root)
    assert abs(got - oracle_ast_match(pred_root, gold_root)) < 1e-9


def test_ast_match_identity_and_depth_bound():
    root = parse_assertion("assertTrue ( a . b . c . d . e )")
    assert ast_match(root, root) == 1.0
    # Nodes: call, field q, field p, identifier; the difference sits at the
    # chain's base, so each unit of depth exposes it to one more ancestor.
    pred = parse_assertion("assertTrue ( one . p . q )")
    gold = parse_assertion("assertTrue ( two . p . q )")
    assert ast_match(pred, gold, depth=1) == pytest.approx(3.0 / 4.0)
    assert ast_match(pred, gold, depth=2) == pytest.approx(2.0 / 4.0)
    assert ast_match(pred, gold, depth=3) == pytest.approx(1.0 / 4.0)
    assert ast_match(pred, gold, depth=4) == 0.0


def test_ast_subtrees_counts_every_node():
    root = parse_assertion("assertEquals ( a , b )")
    assert sum(ast_subtrees(root).values()) == 3


# --- dataflow ----------------------------------------------------------------


def test_dataflow_identifiers_skip_method_names():
    root = parse_assertion("assertEquals ( foo , bar . baz . size ( ) )")
    assert dataflow_identifiers(root) == ["foo", "bar", "baz"]


def test_dataflow_pairs_are_ordered():
    root = parse_assertion("assertEquals ( a , b . c )")
    assert dataflow_pairs(root) == {("a", "b"): 1, ("a", "c"): 1, ("b", "c"): 1}


def test_dataflow_match_fraction_and_vacuous_case():
    gold = parse_assertion("assertEquals ( a , b . c )")
    pred = parse_assertion("assertEquals ( a , b )")
    assert dataflow_match(pred, gold) == pytest.approx(1.0 / 3.0)
    single = parse_assertion("assertNotNull ( x )")
    assert dataflow_match(pred, single) == 1.0
    no_ids = parse_assertion("assertTrue ( true )")
    assert dataflow_match(pred, no_ids) == 1.0


# --- codebleu ----------------------------------------------------------------


def test_codebleu_identity_is_one():
    text = "assertEquals ( left , right . size ( ) )"
    assert codebleu(text, text) == pytest.approx(1.0)


def test_codebleu_blends_components():
    pred = "assertEquals ( a , b )"
    gold = "assertEquals ( a , c )"
    expected = (
        0.25 * bleu(pred, gold)
        + 0.25 * weighted_bleu(pred, gold)
        + 0.25 * ast_match(parse_assertion(pred), parse_assertion(gold))
        + 0.25 * dataflow_match(parse_assertion(pred), parse_assertion(gold))
    )
    assert codebleu(pred, gold) == pytest.approx(expected, abs=1e-12)


def test_codebleu_redistributes_weights_when_unparseable():
    pred = "assertEquals ( a ,"
    gold = "assertEquals ( a , b )"
    expected = 0.5 * bleu(pred, gold) + 0.5 * weighted_bleu(pred, gold)
    assert codebleu(pred, gold) == pytest.approx(expected, abs=1e-12)
    lopsided = codebleu(pred, gold, weights=(0.6, 0.2, 0.1, 0.1))
    assert lopsided == pytest.approx(
        0.75 * bleu(pred, gold) + 0.25 * weighted_bleu(pred, gold), abs=1e-12
    )


def test_codebleu_weight_validation():
    with pytest.raises(MetricsError):
        codebleu("a", "a", weights=(0.5, 0.5, 0.0, -0.0 - 1e-3))
    with pytest.raises(MetricsError):
        codebleu("a", "a", weights=(0.5, 0.5, 0.5, 0.5))


# --- aggregate reporting -----------------------------------------------------


def test_evaluate_aggregates_per_type():
    corpus = make_corpus(
        [
            ("m ( )", "assertTrue ( x )"),
            ("m ( )", "assertTrue ( y )"),
            ("m ( )", "assertEquals ( a , b )"),
        ]
    )
    preds = ["assertTrue ( x )", "assertFalse ( y )", "assertEquals ( a , b )"]
    report = evaluate(preds, corpus)
    assert report.n == 3
    assert report.accuracy == pytest.approx(2.0 / 3.0)
    assert report.per_type[AssertionType.TRUE].count == 2
    assert report.per_type[AssertionType.TRUE].correct == 1
    assert report.per_type[AssertionType.EQUALS].correct == 1
    assert [r.id for r in report.records] == [0, 1, 2]
    assert report.records[1].correct is False
    assert "bleu_smoothing" in report.metadata


def test_evaluate_validation():
    corpus = make_corpus([("m ( )", "assertTrue ( x )")])
    with pytest.raises(MetricsError):
        evaluate(["a", "b"], corpus)


def test_format_report_layout():
    corpus = make_corpus([("m ( )", "assertTrue ( x )")])
    text = format_report(evaluate(["assertTrue ( x )"], corpus))
    assert "exact match      1.0000" in text
    assert "True" in text and "Other" in text


def test_overlap_analysis_counts():
    golds = make_corpus(
        [("m ( )", "assertTrue ( a )"), ("m ( )", "assertTrue ( b )"), ("m ( )", "assertTrue ( c )")]
    )
    systems = {
        "joint": ["assertTrue ( a )", "assertTrue ( b )", "wrong"],
        "none": ["assertTrue ( a )", "wrong", "wrong"],
    }
    report = overlap_analysis(systems, golds)
    assert report.correct == {"joint": 2, "none": 1}
    assert report.unique_correct == {"joint": 1, "none": 0}
    assert report.pairwise == {("joint", "none"): 1}
    rendered = format_overlap(report)
    assert "joint & none" in rendered
    with pytest.raises(MetricsError):
        overlap_analysis({}, golds)
    with pytest.raises(MetricsError):
        overlap_analysis({"joint": ["a"]}, golds)
