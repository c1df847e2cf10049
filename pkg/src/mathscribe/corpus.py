"""LaTeX formula corpus handling: tokenization, normalization, vocabularies.

Formulas are lexed into flat token lists (no macro expansion, no math
semantics).  A token is either a backslash command (``\\frac``, ``\\,``),
a brace, or a single non-whitespace character.  Spacing commands carry no
glyph and are stripped during normalization so that the token sequence
matches what is actually drawn.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

__all__ = [
    "CorpusError",
    "UnbalancedBraces",
    "MalformedCommand",
    "EmptyCorpus",
    "SPACING_TOKENS",
    "tokenize",
    "detokenize",
    "normalize",
    "Vocabulary",
    "FormulaRecord",
    "RENDERED",
    "HANDWRITTEN",
    "DOMAINS",
    "filter_corpus",
    "read_corpus_file",
    "records_from_lines",
]


class CorpusError(ValueError):
    """Base class for formula lexing/corpus errors."""


class UnbalancedBraces(CorpusError):
    def __init__(self, position: int):
        super().__init__(f"unbalanced brace at position {position}")
        self.position = position


class MalformedCommand(CorpusError):
    def __init__(self, position: int):
        super().__init__(f"malformed command at position {position}")
        self.position = position


class EmptyCorpus(CorpusError):
    pass


# Spacing commands produce no glyph; `~` is the non-breaking space.
SPACING_TOKENS = frozenset({r"\,", r"\;", r"\:", r"\!", r"\quad", r"\qquad", "~"})

_LETTERS = frozenset("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ")
_COMMAND_RE = re.compile(r"^\\[A-Za-z]+$")

# Domain labels.  Index order is load-bearing: it is the class id used by the
# discriminator's projection embedding.
RENDERED = "rendered"
HANDWRITTEN = "handwritten"
DOMAINS = (RENDERED, HANDWRITTEN)


def tokenize(latex: str) -> list[str]:
    """Lex a LaTeX math string into tokens.

    Whitespace separates tokens and is never itself a token.  Raises
    :class:`UnbalancedBraces` or :class:`MalformedCommand` with the
    offending character position.
    """
    tokens: list[str] = []
    depth = 0
    i = 0
    n = len(latex)
    while i < n:
        ch = latex[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "\\":
            if i + 1 >= n:
                raise MalformedCommand(i)
            nxt = latex[i + 1]
            if nxt in _LETTERS:
                j = i + 1
                while j < n and latex[j] in _LETTERS:
                    j += 1
                tokens.append(latex[i:j])
                i = j
            elif nxt.isspace():
                raise MalformedCommand(i)
            else:
                tokens.append(latex[i : i + 2])
                i += 2
        else:
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth < 0:
                    raise UnbalancedBraces(i)
            tokens.append(ch)
            i += 1
    if depth != 0:
        raise UnbalancedBraces(n)
    return tokens


def is_command(token: str) -> bool:
    return _COMMAND_RE.match(token) is not None


def detokenize(tokens: Sequence[str]) -> str:
    """Join tokens back into a renderable string.

    A space is required only between a letter command and a following
    letter, otherwise the command would swallow it.
    """
    parts: list[str] = []
    prev = ""
    for tok in tokens:
        if is_command(prev) and tok[0] in _LETTERS:
            parts.append(" ")
        parts.append(tok)
        prev = tok
    return "".join(parts)


def normalize(tokens: Sequence[str]) -> list[str]:
    """Drop glyph-free spacing tokens, preserving everything else in order."""
    return [t for t in tokens if t not in SPACING_TOKENS]


@dataclass
class Vocabulary:
    """Bijective token<->id map with four fixed specials at ids 0-3."""

    PAD = "<pad>"
    SOS = "<sos>"
    EOS = "<eos>"
    UNK = "<unk>"
    SPECIALS = (PAD, SOS, EOS, UNK)

    tokens: list[str] = field(default_factory=list)
    _ids: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.tokens:
            self.tokens = list(self.SPECIALS)
        if tuple(self.tokens[:4]) != self.SPECIALS:
            raise CorpusError("first four vocabulary entries must be the specials")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise CorpusError("duplicate token in vocabulary")

    pad_id = 0
    sos_id = 1
    eos_id = 2
    unk_id = 3

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def token_to_id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def id_to_token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens: Sequence[str], add_markers: bool = False) -> list[int]:
        ids = [self.token_to_id(t) for t in tokens]
        if add_markers:
            return [self.sos_id, *ids, self.eos_id]
        return ids

    def decode(self, ids: Iterable[int], strip_markers: bool = True) -> list[str]:
        toks = [self.tokens[i] for i in ids]
        if strip_markers:
            toks = [t for t in toks if t not in self.SPECIALS]
        return toks

    @classmethod
    def from_corpus(cls, records: Sequence["FormulaRecord"]) -> "Vocabulary":
        """Build a vocabulary from normalized records.

        Ids above the specials are assigned in lexicographic token order so
        repeated builds over the same corpus are identical.
        """
        if not records:
            raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
        seen: set[str] = set()
        for rec in records:
            seen.update(rec.tokens)
        return cls(tokens=list(cls.SPECIALS) + sorted(seen))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tokens=[ln for ln in lines if ln])


@dataclass
class FormulaRecord:
    """One formula: raw source, its normalized tokens, and bookkeeping."""

    id: str
    source_latex: str
    tokens: list[str]
    domain: str = RENDERED
    image_path: str | None = None
    height: int | None = None
    width: int | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise CorpusError(f"unknown domain {self.domain!r}")

    @classmethod
    def from_latex(cls, rec_id: str, latex: str, domain: str = RENDERED) -> "FormulaRecord":
        return cls(id=rec_id, source_latex=latex, tokens=normalize(tokenize(latex)), domain=domain)

    def with_image(self, image_path: str, height: int, width: int) -> "FormulaRecord":
        return replace(self, image_path=image_path, height=height, width=width)


def filter_corpus(
    records: Sequence[FormulaRecord],
    max_tokens: int,
    whitelist: set[str] | None = None,
) -> list[FormulaRecord]:
    """Keep records with at most ``max_tokens`` tokens (inclusive) whose
    tokens all lie in ``whitelist`` when one is given.  Order is preserved."""
    kept = []
    for rec in records:
        if len(rec.tokens) > max_tokens:
            continue
        if whitelist is not None and any(t not in whitelist for t in rec.tokens):
            continue
        kept.append(rec)
    return kept


def records_from_lines(
    lines: Iterable[str],
    domain: str = RENDERED,
    exclude_commands: set[str] | None = None,
    id_prefix: str = "f",
) -> tuple[list[FormulaRecord], int]:
    """Tokenize one formula per line into records.

    Lines that fail to lex, are empty after normalization, or contain a
    command from ``exclude_commands`` are dropped (the count of dropped
    lines is returned alongside).  The exclusion set models renderer
    limitations and is caller configuration, not a built-in list.
    """
    records: list[FormulaRecord] = []
    skipped = 0
    for i, line in enumerate(lines):
        latex = line.strip()
        if not latex:
            continue
        try:
            rec = FormulaRecord.from_latex(f"{id_prefix}{i:06d}", latex, domain=domain)
        except CorpusError:
            skipped += 1
            continue
        if not rec.tokens:
            skipped += 1
            continue
        if exclude_commands and any(t in exclude_commands for t in rec.tokens):
            skipped += 1
            continue
        records.append(rec)
    return records, skipped


def read_corpus_file(
    path: str | Path,
    domain: str = RENDERED,
    exclude_commands: set[str] | None = None,
) -> tuple[list[FormulaRecord], int]:
    """Read a UTF-8 corpus file with one LaTeX formula per line."""
    text = Path(path).read_text(encoding="utf-8")
    return records_from_lines(text.splitlines(), domain=domain, exclude_commands=exclude_commands)
