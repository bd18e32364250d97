"""Bracketed parse trees: reading, writing, normalization, span extraction.

Trees are stored n-ary with explicit preterminal nodes; a preterminal
dominates exactly one Token. Unary chains of internal nodes are collapsed
into composite labels (joined with "+") only when extracting labeled spans,
so the tree itself always keeps its full structure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

DISFLUENCY_LABELS = ("EDITED", "INTJ", "PRN")

# Tags treated as punctuation by normalize(); overridable per call.
DEFAULT_PUNCT_TAGS = frozenset({".", ",", "?", "!", ":", "``", "''"})

PARTIAL_WORD_TAG = "XX"
UNK_TAG = "UNK"


class TreebankError(ValueError):
    pass


class BracketParseError(TreebankError):
    """Malformed bracketed text; carries the character offset of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class EmptySentenceError(TreebankError):
    """Normalization removed every token; the entry should be skipped."""


@dataclass(frozen=True)
class Token:
    surface: str
    index: int
    tag: str

    def __post_init__(self):
        if not self.surface:
            raise TreebankError("token surface must be non-empty")


class LabeledSpan(NamedTuple):
    i: int
    j: int
    label: str


class ParseTree:
    """Internal node (label + children) or preterminal (label is the tag,
    token holds the word). The two cases are exclusive."""

    __slots__ = ("label", "children", "token")

    def __init__(self, label, children=(), token=None):
        if not label:
            raise TreebankError("node label must be non-empty")
        if (token is None) == (len(children) == 0):
            raise TreebankError(
                "node must have either children or a token, not both/neither"
            )
        self.label = label
        self.children = tuple(children)
        self.token = token

    @property
    def is_preterminal(self):
        return self.token is not None

    def leaves(self) -> list[Token]:
        if self.is_preterminal:
            return [self.token]
        out = []
        for child in self.children:
            out.extend(child.leaves())
        return out

    def words(self) -> list[str]:
        return [t.surface for t in self.leaves()]

    def __len__(self):
        return len(self.leaves())

    def __eq__(self, other):
        if not isinstance(other, ParseTree):
            return NotImplemented
        if self.label != other.label or self.is_preterminal != other.is_preterminal:
            return False
        if self.is_preterminal:
            return self.token.surface == other.token.surface
        return self.children == other.children

    def __hash__(self):
        if self.is_preterminal:
            return hash((self.label, self.token.surface))
        return hash((self.label, self.children))

    def __repr__(self):
        return f"ParseTree({serialize(self)!r})"


def preterminal(tag, surface, index=0):
    return ParseTree(tag, token=Token(surface, index, tag))


def renumber(tree: ParseTree) -> ParseTree:
    """Rebuild the tree with leaf indices assigned 0..n-1 left to right."""
    counter = iter(range(len(tree.leaves())))

    def rebuild(node):
        if node.is_preterminal:
            return preterminal(node.label, node.token.surface, next(counter))
        return ParseTree(node.label, [rebuild(c) for c in node.children])

    return rebuild(tree)


def validate(tree: ParseTree) -> None:
    """Check the structural invariants; raises TreebankError on violation."""
    leaves = tree.leaves()
    if not leaves:
        raise TreebankError("tree has no leaves")
    for expected, token in enumerate(leaves):
        if token.index != expected:
            raise TreebankError(
                f"leaf indices not contiguous: expected {expected}, got {token.index}"
            )

    def walk(node):
        if node.is_preterminal:
            return
        if not node.children:
            raise TreebankError("internal node with no children")
        for child in node.children:
            walk(child)

    walk(tree)


def _check_balanced(text: str) -> None:
    """Balance is verified before any structure is built, so unbalanced input
    is always reported as such and never as a downstream structural error."""
    depth = 0
    for offset, char in enumerate(text):
        if char == "(":
            depth += 1
        elif char == ")":
            depth -= 1
            if depth < 0:
                raise BracketParseError("unbalanced parentheses", offset)
    if depth != 0:
        raise BracketParseError("unbalanced parentheses", len(text))


def parse_bracketed(text: str) -> ParseTree:
    """Parse one bracketed tree, e.g. "(S (UNK a))".

    Whitespace-insensitive. Preterminals are written as "(TAG word)".
    Raises BracketParseError with a character offset on malformed input.
    """
    _check_balanced(text)
    pos = 0
    n = len(text)

    def skip_ws():
        nonlocal pos
        while pos < n and text[pos].isspace():
            pos += 1

    def read_atom():
        nonlocal pos
        start = pos
        while pos < n and not text[pos].isspace() and text[pos] not in "()":
            pos += 1
        return text[start:pos], start

    def read_node():
        nonlocal pos
        if pos >= n or text[pos] != "(":
            raise BracketParseError("expected '('", pos)
        open_offset = pos
        pos += 1
        skip_ws()
        label, label_offset = read_atom()
        if not label:
            raise BracketParseError("empty constituent label", pos)
        subtrees = []
        words = []  # (surface, offset) pairs
        while True:
            skip_ws()
            if pos >= n:
                raise BracketParseError("unbalanced parentheses", pos)
            if text[pos] == ")":
                pos += 1
                break
            if text[pos] == "(":
                subtrees.append(read_node())
            else:
                word, offset = read_atom()
                words.append((word, offset))
        if subtrees and words:
            raise BracketParseError("bare token at internal position", words[0][1])
        if len(words) > 1:
            raise BracketParseError("bare token at internal position", words[1][1])
        if words:
            return ParseTree(label, token=Token(words[0][0], 0, label))
        if not subtrees:
            raise BracketParseError("empty constituent", open_offset)
        return ParseTree(label, subtrees)

    skip_ws()
    tree = read_node()
    skip_ws()
    if pos != n:
        raise BracketParseError("trailing content after tree", pos)
    return renumber(tree)


def serialize(tree: ParseTree) -> str:
    """Inverse of parse_bracketed; labels (including composites) are emitted
    verbatim."""
    if tree.is_preterminal:
        return f"({tree.label} {tree.token.surface})"
    inner = " ".join(serialize(c) for c in tree.children)
    return f"({tree.label} {inner})"


def normalize(
    tree: ParseTree,
    punct_tags: frozenset[str] = DEFAULT_PUNCT_TAGS,
) -> ParseTree:
    """Drop partial words (tag XX or surface ending in "-") and punctuation
    leaves, prune emptied constituents, renumber tokens, and rewrite every
    preterminal tag to UNK.

    Raises EmptySentenceError when nothing survives.
    """

    def keep(node):
        tag = node.label
        surface = node.token.surface
        if tag == PARTIAL_WORD_TAG or tag in punct_tags:
            return False
        return not surface.endswith("-")

    def rebuild(node):
        if node.is_preterminal:
            if not keep(node):
                return None
            return preterminal(UNK_TAG, node.token.surface)
        children = [c for c in (rebuild(child) for child in node.children) if c]
        if not children:
            return None
        return ParseTree(node.label, children)

    result = rebuild(tree)
    if result is None:
        raise EmptySentenceError("normalization removed every token")
    return renumber(result)


def labeled_spans(tree: ParseTree) -> set[LabeledSpan]:
    """Fencepost spans of the tree with maximal unary chains collapsed into
    "+"-joined composite labels (top-down order). Preterminals are excluded.
    """
    spans = set()

    def visit(node, start):
        if node.is_preterminal:
            return start + 1
        chain = [node.label]
        while len(node.children) == 1 and not node.children[0].is_preterminal:
            node = node.children[0]
            chain.append(node.label)
        end = start
        for child in node.children:
            end = visit(child, end)
        spans.add(LabeledSpan(start, end, "+".join(chain)))
        return end

    visit(tree, 0)
    return spans


def expand_composites(tree: ParseTree) -> ParseTree:
    """Split "+"-joined labels back into nested unary nodes."""
    if tree.is_preterminal:
        return tree
    children = [expand_composites(c) for c in tree.children]
    parts = tree.label.split("+")
    node = ParseTree(parts[-1], children)
    for part in reversed(parts[:-1]):
        node = ParseTree(part, [node])
    return node


@dataclass(frozen=True)
class DisfluencySets:
    """Word positions dominated by EDITED / INTJ / PRN nodes. Composite
    labels count through each "+" component."""

    w_e: frozenset[int]
    w_i: frozenset[int]
    w_p: frozenset[int]

    @property
    def w_eip(self) -> frozenset[int]:
        return self.w_e | self.w_i | self.w_p


def disfluency_sets(tree: ParseTree) -> DisfluencySets:
    w_e, w_i, w_p = set(), set(), set()

    def visit(node, start, under_e, under_i, under_p):
        if node.is_preterminal:
            if under_e:
                w_e.add(start)
            if under_i:
                w_i.add(start)
            if under_p:
                w_p.add(start)
            return start + 1
        parts = node.label.split("+")
        under_e = under_e or "EDITED" in parts
        under_i = under_i or "INTJ" in parts
        under_p = under_p or "PRN" in parts
        for child in node.children:
            start = visit(child, start, under_e, under_i, under_p)
        return start

    visit(tree, 0, False, False, False)
    return DisfluencySets(frozenset(w_e), frozenset(w_i), frozenset(w_p))


@dataclass
class Corpus:
    """An ordered collection of trees carrying a provenance marker."""

    trees: list[ParseTree]
    provenance: str = "gold"  # gold | silver

    def __len__(self):
        return len(self.trees)

    def __iter__(self) -> Iterator[ParseTree]:
        return iter(self.trees)

    def sentences(self) -> list[list[str]]:
        return [t.words() for t in self.trees]


def read_corpus(
    path,
    provenance="gold",
    normalize_trees=True,
    punct_tags=DEFAULT_PUNCT_TAGS,
) -> tuple[Corpus, int]:
    """Load a one-tree-per-line corpus file.

    Returns (corpus, skipped) where skipped counts entries emptied by
    normalization.
    """
    trees = []
    skipped = 0
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            try:
                tree = parse_bracketed(line)
            except BracketParseError as exc:
                raise TreebankError(f"{path}:{lineno}: {exc}") from exc
            if normalize_trees:
                try:
                    tree = normalize(tree, punct_tags)
                except EmptySentenceError:
                    skipped += 1
                    continue
            trees.append(tree)
    return Corpus(trees, provenance), skipped


def write_corpus(path, trees: Iterable[ParseTree]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for tree in trees:
            handle.write(serialize(tree))
            handle.write("\n")


def read_sentences(path) -> list[list[str]]:
    """Load a one-sentence-per-line token file; empty lines yield []."""
    sentences = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            sentences.append(line.split())
    return sentences


def write_sentences(path, sentences: Iterable[Iterable[str]]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for words in sentences:
            handle.write(" ".join(words))
            handle.write("\n")
