import pytest
from hypothesis import given, settings, strategies as st

from mathscribe.corpus import (
    EmptyCorpus,
    FormulaRecord,
    MalformedCommand,
    SPACING_TOKENS,
    UnbalancedBraces,
    Vocabulary,
    detokenize,
    filter_corpus,
    normalize,
    read_corpus_file,
    records_from_lines,
    tokenize,
)
from mathscribe.fixtures import load_sample_corpus, sample_corpus_lines
from mathscribe.rendering import RenderParams, StubRenderer


class TestTokenize:
    def test_empty_input(self):
        assert tokenize("") == []

    def test_superscript(self):
        assert tokenize("x^{2}") == ["x", "^", "{", "2", "}"]

    def test_fraction(self):
        assert tokenize(r"\frac{a}{b}") == ["\\frac", "{", "a", "}", "{", "b", "}"]

    def test_command_followed_by_letter_needs_space(self):
        assert tokenize(r"\alpha x") == ["\\alpha", "x"]
        # without the space the letters extend the command
        assert tokenize(r"\alphax") == ["\\alphax"]

    def test_single_char_commands(self):
        assert tokenize(r"\,a\;") == ["\\,", "a", "\\;"]

    def test_whitespace_never_a_token(self):
        assert tokenize("a  b\tc\n") == ["a", "b", "c"]

    def test_unbalanced_close(self):
        with pytest.raises(UnbalancedBraces) as exc:
            tokenize("ab}c")
        assert exc.value.position == 2

    def test_unbalanced_open(self):
        with pytest.raises(UnbalancedBraces):
            tokenize("{a")

    def test_trailing_backslash(self):
        with pytest.raises(MalformedCommand) as exc:
            tokenize("ab\\")
        assert exc.value.position == 2

    def test_escaped_braces_do_not_count(self):
        assert tokenize(r"\{a\}") == ["\\{", "a", "\\}"]

    def test_rerender_pixel_equality_oracle(self):
        # The round trip through detokenize must re-render identically.
        stub = StubRenderer()
        params = RenderParams(font="mathrm", padding=2, font_size=16)
        for latex in ["x^{2}", r"\frac{a}{b}", r"\alpha+\beta", r"\sqrt{x_{i}}"]:
            direct = stub.render(latex, params)
            round_trip = stub.render(detokenize(tokenize(latex)), params)
            assert (direct == round_trip).all()


class TestNormalize:
    def test_removes_quad(self):
        assert normalize(["a", "\\quad", "b"]) == ["a", "b"]

    def test_identity_without_spacing(self):
        assert normalize(["a", "b"]) == ["a", "b"]

    def test_removes_thin_space(self):
        assert normalize(["\\,", "\\frac", "{", "x", "}", "{", "y", "}"]) == [
            "\\frac", "{", "x", "}", "{", "y", "}"
        ]

    @given(st.lists(st.sampled_from(["a", "1", "\\frac", "{", "}"] + sorted(SPACING_TOKENS))))
    def test_idempotent(self, tokens):
        assert normalize(normalize(tokens)) == normalize(tokens)


_simple_atoms = st.sampled_from(list("abcxyz019+-=()") + ["\\alpha", "\\frac", "\\quad"])


@st.composite
def balanced_formula(draw):
    parts = draw(st.lists(_simple_atoms, min_size=0, max_size=8))
    depth = draw(st.integers(0, 2))
    body = " ".join(parts)
    for _ in range(depth):
        body = "{" + body + "}"
    return body


class TestRoundTrip:
    @given(balanced_formula())
    @settings(max_examples=150)
    def test_tokenize_detokenize_fixed_point(self, latex):
        tokens = tokenize(latex)
        assert tokenize(detokenize(tokens)) == tokens


class TestVocabulary:
    def _records(self, token_lists):
        return [
            FormulaRecord(id=str(i), source_latex="", tokens=list(t))
            for i, t in enumerate(token_lists)
        ]

    def test_specials_plus_one(self):
        vocab = Vocabulary.from_corpus(self._records([["a"]]))
        assert len(vocab) == 5

    def test_lexicographic_assignment(self):
        vocab = Vocabulary.from_corpus(self._records([["b", "a"]]))
        assert vocab.token_to_id("a") == 4
        assert vocab.token_to_id("b") == 5

    def test_bundled_corpus_cardinality(self):
        # Independent scan: distinct normalized tokens counted from scratch.
        records = load_sample_corpus()
        distinct = set()
        for line in sample_corpus_lines():
            distinct.update(normalize(tokenize(line)))
        vocab = Vocabulary.from_corpus(records)
        assert len(vocab) == len(distinct) + 4

    def test_round_trip_all_ids(self):
        vocab = Vocabulary.from_corpus(self._records([["b", "a", "\\frac"]]))
        for i in range(len(vocab)):
            assert vocab.token_to_id(vocab.id_to_token(i)) == i

    def test_unknown_maps_to_unk(self):
        vocab = Vocabulary.from_corpus(self._records([["a"]]))
        assert vocab.token_to_id("zzz") == vocab.unk_id

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            Vocabulary.from_corpus([])

    def test_save_load_round_trip(self, tmp_path):
        vocab = Vocabulary.from_corpus(self._records([["x", "+", "\\alpha"]]))
        vocab.save(tmp_path / "vocab.txt")
        loaded = Vocabulary.load(tmp_path / "vocab.txt")
        assert loaded.tokens == vocab.tokens
        first_four = (tmp_path / "vocab.txt").read_text().splitlines()[:4]
        assert first_four == ["<pad>", "<sos>", "<eos>", "<unk>"]


class TestFilterCorpus:
    def _record(self, n_tokens, tokens=None):
        toks = tokens or ["a"] * n_tokens
        return FormulaRecord(id="r", source_latex="", tokens=toks)

    def test_length_51_excluded(self):
        assert filter_corpus([self._record(51)], max_tokens=50) == []

    def test_length_50_retained(self):
        assert len(filter_corpus([self._record(50)], max_tokens=50)) == 1

    def test_whitelist_excludes(self):
        rec = self._record(1, tokens=["D"])
        assert filter_corpus([rec], max_tokens=50, whitelist={"a", "b"}) == []
        assert len(filter_corpus([rec], max_tokens=50, whitelist={"D"})) == 1

    @given(st.lists(st.integers(0, 8), max_size=20), st.integers(0, 8))
    def test_subsequence_property(self, lengths, k):
        records = [
            FormulaRecord(id=str(i), source_latex="", tokens=["a"] * n)
            for i, n in enumerate(lengths)
        ]
        kept = filter_corpus(records, max_tokens=k)
        ids = [r.id for r in records]
        kept_ids = [r.id for r in kept]
        # order-preserving subsequence
        it = iter(ids)
        assert all(any(x == y for y in it) for x in kept_ids)


class TestCorpusFile:
    def test_read_skips_malformed(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text("a+b\n{unbalanced\nx^{2}\n", encoding="utf-8")
        records, skipped = read_corpus_file(path)
        assert [r.source_latex for r in records] == ["a+b", "x^{2}"]
        assert skipped == 1

    def test_exclusion_predicate_is_config(self):
        records, skipped = records_from_lines(["a", r"\raisebox{1}{x}"], exclude_commands={r"\raisebox"})
        assert len(records) == 1 and skipped == 1

    def test_records_are_normalized(self):
        records, _ = records_from_lines([r"a \quad b"])
        assert records[0].tokens == ["a", "b"]
