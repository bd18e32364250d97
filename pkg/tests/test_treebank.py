import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spanparser.treebank import (
    BracketParseError,
    Corpus,
    DisfluencySets,
    EmptySentenceError,
    LabeledSpan,
    ParseTree,
    disfluency_sets,
    expand_composites,
    labeled_spans,
    normalize,
    parse_bracketed,
    preterminal,
    read_corpus,
    read_sentences,
    renumber,
    serialize,
    validate,
    write_corpus,
    write_sentences,
)

NESTED = "(S (EDITED (NP (UNK a))) (NP (UNK a) (UNK b)))"


def test_parse_minimal():
    tree = parse_bracketed("(S (UNK a))")
    assert tree.label == "S"
    assert len(tree.children) == 1
    assert tree.children[0].is_preterminal
    assert tree.children[0].token.surface == "a"
    assert tree.children[0].label == "UNK"


def test_parse_nested_fixture():
    tree = parse_bracketed(NESTED)
    assert tree.words() == ["a", "a", "b"]
    internal = []

    def count(node):
        if not node.is_preterminal:
            internal.append(node.label)
            for child in node.children:
                count(child)

    count(tree)
    assert sorted(internal) == ["EDITED", "NP", "NP", "S"]


def test_parse_whitespace_insensitive():
    assert parse_bracketed("( S   ( UNK   a ) )") == parse_bracketed("(S (UNK a))")


def test_parse_unbalanced_offset():
    with pytest.raises(BracketParseError) as err:
        parse_bracketed("(S (NP a b)")
    assert err.value.offset == 11
    assert "unbalanced" in str(err.value)


def test_parse_extra_close():
    with pytest.raises(BracketParseError) as err:
        parse_bracketed("(S (UNK a)))")
    assert err.value.offset == 11


def test_parse_empty_constituent():
    with pytest.raises(BracketParseError) as err:
        parse_bracketed("(S ())")
    assert err.value.offset in (3, 4)
    with pytest.raises(BracketParseError):
        parse_bracketed("(S)")


def test_parse_bare_token_at_internal_position():
    with pytest.raises(BracketParseError) as err:
        parse_bracketed("(S x (NP (UNK y)))")
    assert "bare token" in str(err.value)
    assert err.value.offset == 3
    with pytest.raises(BracketParseError):
        parse_bracketed("(NP a b)")


def test_tokens_indexed_left_to_right():
    tree = parse_bracketed(NESTED)
    assert [t.index for t in tree.leaves()] == [0, 1, 2]
    validate(tree)


def test_serialize_round_trip():
    for text in ["(S (UNK a))", NESTED]:
        tree = parse_bracketed(text)
        assert parse_bracketed(serialize(tree)) == tree


def test_serialize_composite_label_verbatim():
    tree = ParseTree("S+VP", [preterminal("UNK", "go")])
    assert serialize(tree) == "(S+VP (UNK go))"


def test_serialize_single_token_tree():
    assert serialize(parse_bracketed("(S (UNK a))")) == "(S (UNK a))"


def test_normalize_removes_partials_and_punct():
    tree = parse_bracketed("(S (NP (XX th-) (DT the) (NN dog)) (. .))")
    out = normalize(tree)
    assert out.words() == ["the", "dog"]
    assert all(t.tag == "UNK" for t in out.leaves())


def test_normalize_removes_dash_suffix_words():
    tree = parse_bracketed("(S (NP (DT the) (NN do-)) (VBP runs))")
    out = normalize(tree)
    assert out.words() == ["the", "runs"]


def test_normalize_identity_modulo_tags():
    tree = parse_bracketed("(S (NP (DT the) (NN dog)) (VP (VBZ barks)))")
    out = normalize(tree)
    assert out.words() == ["the", "dog", "barks"]
    assert serialize(out) == "(S (NP (UNK the) (UNK dog)) (VP (UNK barks)))"


def test_normalize_empty_sentence_signal():
    tree = parse_bracketed("(S (. .) (. !))")
    with pytest.raises(EmptySentenceError):
        normalize(tree)


def test_normalize_idempotent():
    tree = parse_bracketed("(S (NP (XX th-) (DT the) (NN dog)) (. .))")
    once = normalize(tree)
    assert normalize(once) == once


def test_labeled_spans_fixture():
    # Hand-computed fenceposts: S covers 0..3, EDITED+NP is the collapsed
    # unary chain over token 0, the second NP covers tokens 1..2.
    tree = parse_bracketed(NESTED)
    assert labeled_spans(tree) == {
        LabeledSpan(0, 3, "S"),
        LabeledSpan(0, 1, "EDITED+NP"),
        LabeledSpan(1, 3, "NP"),
    }


def test_labeled_spans_single_token():
    assert labeled_spans(parse_bracketed("(S (UNK a))")) == {LabeledSpan(0, 1, "S")}


def test_labeled_spans_flat():
    tree = parse_bracketed("(S (UNK a) (UNK b))")
    assert labeled_spans(tree) == {LabeledSpan(0, 2, "S")}


def test_labeled_spans_has_exactly_one_root_span():
    tree = parse_bracketed(NESTED)
    n = len(tree)
    roots = [s for s in labeled_spans(tree) if s.i == 0 and s.j == n]
    assert len(roots) == 1


def test_expand_composites_round_trip():
    tree = ParseTree(
        "S+VP", [preterminal("UNK", "a"), preterminal("UNK", "b")]
    )
    expanded = expand_composites(tree)
    assert expanded.label == "S"
    assert expanded.children[0].label == "VP"
    assert labeled_spans(renumber(expanded)) == {LabeledSpan(0, 2, "S+VP")}


def test_disfluency_sets_figure_shape():
    # Reparandum under EDITED, filler under INTJ, discourse marker under PRN.
    text = (
        "(S (EDITED (NP (UNK the) (UNK first))) (INTJ (UNK uh))"
        " (PRN (UNK i) (UNK mean)) (NP (UNK the) (UNK second)))"
    )
    sets = disfluency_sets(parse_bracketed(text))
    assert sets.w_e == {0, 1}
    assert sets.w_i == {2}
    assert sets.w_p == {3, 4}
    assert sets.w_eip == {0, 1, 2, 3, 4}


def test_disfluency_sets_fluent_tree_empty():
    sets = disfluency_sets(parse_bracketed("(S (NP (UNK a)) (VP (UNK b)))"))
    assert sets.w_e == sets.w_i == sets.w_p == frozenset()


def test_disfluency_sets_nested_edited_counts_once():
    text = "(S (EDITED (EDITED (UNK a)) (UNK b)) (UNK c))"
    sets = disfluency_sets(parse_bracketed(text))
    assert sets.w_e == {0, 1}


def test_disfluency_sets_composite_components_count():
    tree = ParseTree(
        "S",
        [
            ParseTree("EDITED+NP", [preterminal("UNK", "a")]),
            preterminal("UNK", "b"),
        ],
    )
    assert disfluency_sets(renumber(tree)).w_e == {0}


def test_corpus_file_round_trip(tmp_path):
    trees = [parse_bracketed(NESTED), parse_bracketed("(S (UNK a))")]
    path = tmp_path / "corpus.trees"
    write_corpus(path, trees)
    corpus, skipped = read_corpus(path, normalize_trees=False)
    assert skipped == 0
    assert corpus.trees == trees
    assert corpus.provenance == "gold"


def test_read_corpus_skips_emptied_entries(tmp_path):
    path = tmp_path / "corpus.trees"
    path.write_text("(S (. .))\n(S (UNK a))\n")
    corpus, skipped = read_corpus(path)
    assert skipped == 1
    assert len(corpus) == 1


def test_sentence_file_round_trip(tmp_path):
    path = tmp_path / "sents.txt"
    write_sentences(path, [["a", "b"], ["c"]])
    assert read_sentences(path) == [["a", "b"], ["c"]]


# -- property tests ----------------------------------------------------------

LABELS = ["S", "NP", "VP", "PP", "EDITED", "INTJ", "PRN"]
WORDS = ["a", "b", "dog", "uh", "you-know", "o'clock"]


@st.composite
def trees(draw, max_depth=4):
    def node(depth):
        if depth >= max_depth or draw(st.booleans()):
            return preterminal("UNK", draw(st.sampled_from(WORDS)))
        width = draw(st.integers(min_value=1, max_value=3))
        return ParseTree(
            draw(st.sampled_from(LABELS)), [node(depth + 1) for _ in range(width)]
        )

    root = ParseTree(
        draw(st.sampled_from(LABELS)),
        [node(1) for _ in range(draw(st.integers(min_value=1, max_value=3)))],
    )
    return renumber(root)


@given(trees())
@settings(max_examples=200, deadline=None)
def test_property_round_trip(tree):
    assert parse_bracketed(serialize(tree)) == tree


@given(trees())
@settings(max_examples=200, deadline=None)
def test_property_root_span_covers_sentence(tree):
    spans = labeled_spans(tree)
    n = len(tree)
    assert sum(1 for s in spans if (s.i, s.j) == (0, n)) == 1
    assert all(0 <= s.i < s.j <= n for s in spans)


@given(trees())
@settings(max_examples=200, deadline=None)
def test_property_w_eip_is_union(tree):
    sets = disfluency_sets(tree)
    assert sets.w_eip == sets.w_e | sets.w_i | sets.w_p


@given(trees())
@settings(max_examples=100, deadline=None)
def test_property_normalize_idempotent(tree):
    try:
        once = normalize(tree)
    except EmptySentenceError:
        return
    assert normalize(once) == once
