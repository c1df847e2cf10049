"""Formula-to-image rendering backends.

Two backends implement the same contract: a deterministic in-process stub
(dot-matrix glyphs, no external dependencies) that the test suite treats as
its own oracle, and an HTTP client for the KaTeX render service.  Both
return dark-background float images; ``render`` additionally applies
intensity normalization so downstream code sees one convention.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .corpus import CorpusError, tokenize
from .images import normalize_intensity

__all__ = [
    "FONTS",
    "PADDINGS",
    "FONT_SIZES",
    "RenderParams",
    "sample_render_params",
    "RenderError",
    "RenderFailure",
    "RenderBackendUnavailable",
    "RendererBackend",
    "StubRenderer",
    "HttpRenderer",
    "render",
]

FONTS = ("mathsf", "mathtt", "mathit", "mathbf", "mathrm", "mathnormal", "textstyle")
PADDINGS = tuple(range(0, 16))
FONT_SIZES = tuple(range(16, 51))


@dataclass(frozen=True)
class RenderParams:
    font: str = "mathrm"
    padding: int = 4
    font_size: int = 32

    def __post_init__(self):
        if self.font not in FONTS:
            raise ValueError(f"font must be one of {FONTS}, got {self.font!r}")
        if self.padding not in PADDINGS:
            raise ValueError(f"padding must be in {PADDINGS[0]}..{PADDINGS[-1]}")
        if self.font_size not in FONT_SIZES:
            raise ValueError(f"font_size must be in {FONT_SIZES[0]}..{FONT_SIZES[-1]}")


def sample_render_params(rng: np.random.Generator) -> RenderParams:
    """Draw each render parameter uniformly from its domain."""
    return RenderParams(
        font=FONTS[int(rng.integers(len(FONTS)))],
        padding=int(rng.integers(PADDINGS[0], PADDINGS[-1] + 1)),
        font_size=int(rng.integers(FONT_SIZES[0], FONT_SIZES[-1] + 1)),
    )


class RenderError(Exception):
    pass


class RenderFailure(RenderError):
    """The backend rejected the formula; the record should be excluded."""


class RenderBackendUnavailable(RenderError):
    pass


class RendererBackend(Protocol):
    name: str

    def render(self, latex: str, params: RenderParams) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Stub renderer
# ---------------------------------------------------------------------------

# Hand-drawn 5x7 patterns for tokens whose shape matters visually; all other
# tokens get a deterministic pseudo-random pattern keyed on (font, token).
_EXPLICIT_GLYPHS = {
    "-": ("", "", "", "#####", "", "", ""),
    "=": ("", "", "#####", "", "#####", "", ""),
    "+": ("", "..#", "..#", "#####", "..#", "..#", ""),
    "|": ("..#", "..#", "..#", "..#", "..#", "..#", "..#"),
    ".": ("", "", "", "", "", ".##", ".##"),
}

_GLYPH_CACHE: dict[tuple[str, str], np.ndarray] = {}


def _glyph_bitmap(token: str, font: str) -> np.ndarray:
    """5x7 boolean pattern, fixed per (font, token)."""
    key = (font, token)
    cached = _GLYPH_CACHE.get(key)
    if cached is not None:
        return cached
    if token in _EXPLICIT_GLYPHS:
        rows = _EXPLICIT_GLYPHS[token]
        grid = np.zeros((7, 5), dtype=bool)
        for r, row in enumerate(rows):
            for c, ch in enumerate(row[:5]):
                grid[r, c] = ch == "#"
    else:
        digest = hashlib.blake2b(f"{font}\x00{token}".encode(), digest_size=32).digest()
        bits = np.unpackbits(np.frombuffer(digest, dtype=np.uint8))
        for start in range(0, len(bits) - 35, 7):
            grid = bits[start : start + 35].reshape(7, 5).astype(bool)
            if 8 <= int(grid.sum()) <= 27:
                break
        else:  # pragma: no cover - blake2 output never this degenerate
            grid = np.ones((7, 5), dtype=bool)
    _GLYPH_CACHE[key] = grid
    return grid


class _Box:
    """Rendered fragment: a bitmap plus the row used for vertical alignment."""

    __slots__ = ("bitmap", "anchor")

    def __init__(self, bitmap: np.ndarray, anchor: int):
        self.bitmap = bitmap
        self.anchor = anchor

    @property
    def height(self) -> int:
        return self.bitmap.shape[0]

    @property
    def width(self) -> int:
        return self.bitmap.shape[1]


def _hcat(boxes: list[_Box]) -> _Box:
    above = max(b.anchor for b in boxes)
    below = max(b.height - b.anchor for b in boxes)
    width = sum(b.width for b in boxes)
    canvas = np.zeros((above + below, width), dtype=np.float32)
    col = 0
    for b in boxes:
        top = above - b.anchor
        canvas[top : top + b.height, col : col + b.width] = np.maximum(
            canvas[top : top + b.height, col : col + b.width], b.bitmap
        )
        col += b.width
    return _Box(canvas, above)


class StubRenderer:
    """Deterministic dot-matrix renderer used for offline runs and tests.

    Each atom occupies a font_size-square cell holding its 5x7 glyph;
    ``\\frac`` stacks numerator and denominator over a rule, ``^``/``_``
    attach reduced-size boxes, ``\\sqrt`` draws a hook and an overline.
    Unknown commands render as their fixed pseudo-random glyph, so any
    lexable, balanced formula renders.
    """

    name = "stub"
    version = "1"

    MIN_SCRIPT_SIZE = 8

    def render(self, latex: str, params: RenderParams) -> np.ndarray:
        try:
            tokens = tokenize(latex)
        except CorpusError as exc:
            raise RenderFailure(str(exc)) from exc
        if not tokens:
            raise RenderFailure("empty formula")
        nodes, rest = self._parse_sequence(tokens, 0, stop_at_brace=False)
        if rest != len(tokens):
            raise RenderFailure(f"unexpected token at {rest}")
        if not nodes:
            raise RenderFailure("formula has no drawable content")
        box = self._render_nodes(nodes, params.font, params.font_size)
        p = params.padding
        return np.pad(box.bitmap, p, mode="constant") if p else box.bitmap

    # -- parsing ------------------------------------------------------------

    def _parse_sequence(self, tokens, i, stop_at_brace):
        nodes = []
        while i < len(tokens):
            tok = tokens[i]
            if tok == "}":
                if stop_at_brace:
                    return nodes, i + 1
                raise RenderFailure(f"stray brace at token {i}")
            node, i = self._parse_atom(tokens, i)
            while i < len(tokens) and tokens[i] in ("^", "_"):
                kind = tokens[i]
                script, i = self._parse_atom(tokens, i + 1)
                node = ("script", node, kind, script)
            nodes.append(node)
        if stop_at_brace:
            raise RenderFailure("unterminated group")
        return nodes, i

    def _parse_atom(self, tokens, i):
        if i >= len(tokens):
            raise RenderFailure("formula ends mid-construct")
        tok = tokens[i]
        if tok == "{":
            nodes, i = self._parse_sequence(tokens, i + 1, stop_at_brace=True)
            return ("group", nodes), i
        if tok == "\\frac":
            num, i = self._parse_atom(tokens, i + 1)
            den, i = self._parse_atom(tokens, i)
            return ("frac", num, den), i
        if tok == "\\sqrt":
            child, i = self._parse_atom(tokens, i + 1)
            return ("sqrt", child), i
        if tok in ("^", "_"):
            raise RenderFailure(f"script without base at token {i}")
        return ("glyph", tok), i + 1

    # -- layout -------------------------------------------------------------

    def _render_nodes(self, nodes, font, size) -> _Box:
        boxes = [self._render_node(n, font, size) for n in nodes]
        if not boxes:
            boxes = [_Box(np.zeros((size, max(1, size // 4)), dtype=np.float32), size // 2)]
        return _hcat(boxes)

    def _render_node(self, node, font, size) -> _Box:
        kind = node[0]
        if kind == "glyph":
            return self._glyph_box(node[1], font, size)
        if kind == "group":
            return self._render_nodes(node[1], font, size)
        if kind == "script":
            base = self._render_node(node[1], font, size)
            small = max(self.MIN_SCRIPT_SIZE, int(round(size * 0.6)))
            script = self._render_node(node[3], font, small)
            # Raising the declared anchor makes _hcat paste the box higher.
            shift = int(round(size * 0.35))
            delta = shift if node[2] == "^" else -shift
            return _hcat([base, _Box(script.bitmap, script.anchor + delta)])
        if kind == "frac":
            return self._frac_box(node[1], node[2], font, size)
        if kind == "sqrt":
            return self._sqrt_box(node[1], font, size)
        raise RenderFailure(f"unknown node {kind!r}")  # pragma: no cover

    def _glyph_box(self, token, font, size) -> _Box:
        cell = np.zeros((size, size), dtype=np.float32)
        dot = max(1, size // 8)
        grid = _glyph_bitmap(token, font)
        gh, gw = 7 * dot, 5 * dot
        top, left = (size - gh) // 2, (size - gw) // 2
        for r in range(7):
            for c in range(5):
                if grid[r, c]:
                    rr, cc = top + r * dot, left + c * dot
                    cell[rr : rr + dot, cc : cc + dot] = 1.0
        return _Box(cell, size // 2)

    def _frac_box(self, num_node, den_node, font, size) -> _Box:
        num = self._render_node(num_node, font, size)
        den = self._render_node(den_node, font, size)
        rule = max(1, size // 8)
        gap = max(1, size // 8)
        width = max(num.width, den.width) + 2 * rule
        height = num.height + den.height + rule + 2 * gap
        canvas = np.zeros((height, width), dtype=np.float32)
        canvas[: num.height, (width - num.width) // 2 : (width - num.width) // 2 + num.width] = num.bitmap
        bar_top = num.height + gap
        canvas[bar_top : bar_top + rule, :] = 1.0
        den_top = bar_top + rule + gap
        canvas[den_top : den_top + den.height, (width - den.width) // 2 : (width - den.width) // 2 + den.width] = den.bitmap
        return _Box(canvas, bar_top + rule // 2)

    def _sqrt_box(self, child_node, font, size) -> _Box:
        child = self._render_node(child_node, font, size)
        bar = max(1, size // 8)
        hook_w = 2 * bar
        height = child.height + 2 * bar
        width = child.width + hook_w
        canvas = np.zeros((height, width), dtype=np.float32)
        canvas[2 * bar :, hook_w:] = child.bitmap
        canvas[:bar, :] = 1.0  # overline
        canvas[:, :bar] = 1.0  # hook stem
        return _Box(canvas, child.anchor + 2 * bar)


# ---------------------------------------------------------------------------
# HTTP renderer (client for the render service)
# ---------------------------------------------------------------------------


class HttpRenderer:
    """Client for the ``POST /render`` endpoint of the render service."""

    name = "http"

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def render(self, latex: str, params: RenderParams) -> np.ndarray:
        import requests
        from PIL import Image

        payload = {
            "latex": latex,
            "font": params.font,
            "font_size": params.font_size,
            "padding": params.padding,
        }
        try:
            resp = requests.post(f"{self.base_url}/render", json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise RenderBackendUnavailable(f"render service unreachable: {exc}") from exc
        if resp.status_code == 422:
            raise RenderFailure(f"service rejected formula: {resp.text[:200]}")
        if resp.status_code != 200:
            raise RenderBackendUnavailable(f"render service returned {resp.status_code}")
        with Image.open(io.BytesIO(resp.content)) as im:
            return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def make_backend(spec: str) -> RendererBackend:
    """Build a backend from a ``stub`` or ``http:<url>`` selector."""
    if spec == "stub":
        return StubRenderer()
    if spec.startswith("http:") or spec.startswith("https:"):
        url = spec[len("http:") :] if spec.startswith("http:") and not spec.startswith("http://") else spec
        return HttpRenderer(url)
    raise ValueError(f"unknown renderer {spec!r}; expected 'stub' or 'http:<url>'")


def render(latex: str, params: RenderParams, backend: RendererBackend) -> np.ndarray:
    """Render and normalize a formula image (background ~0, strokes ~1)."""
    raw = backend.render(latex, params)
    if raw.size == 0:
        raise RenderFailure("backend produced an empty image")
    return normalize_intensity(np.clip(raw, 0.0, 1.0).astype(np.float32))
