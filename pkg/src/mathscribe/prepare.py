"""Dataset preparation: formulas in, manifest directories out."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import FormulaRecord, HANDWRITTEN, RENDERED, Vocabulary
from .data import record_seed
from .fixtures import wobble
from .images import normalize_intensity, save_png
from .manifest import write_manifest
from .rendering import RenderFailure, RenderParams, RendererBackend, render, sample_render_params
from .strokes import DegenerateStrokes, parse_inkml, rasterize_strokes

__all__ = ["PrepareStats", "prepare_rendered_dataset", "prepare_synthetic_handwritten", "prepare_inkml_dataset"]


@dataclass
class PrepareStats:
    written: int = 0
    render_failures: int = 0


def _write_records(entries, out_dir, vocab) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for rec, img in entries:
        name = f"images/{rec.id}.png"
        save_png(img, out / name)
        records.append(rec.with_image(name, int(img.shape[0]), int(img.shape[1])))
    write_manifest(records, out, vocab)


def prepare_rendered_dataset(
    records: list[FormulaRecord],
    out_dir,
    backend: RendererBackend,
    seed: int = 0,
    sample_params: bool = True,
    fixed_params: RenderParams | None = None,
    vocab: Vocabulary | None = None,
    workers: int = 1,
) -> PrepareStats:
    """Render each record to a normalized image and write the dataset.

    Formulas the backend rejects are excluded and counted, not fatal.
    Rendering fans out over ``workers`` threads (useful with the HTTP
    backend); per-record seeds keep the result order-independent.
    """

    def _one(rec: FormulaRecord):
        if sample_params:
            params = sample_render_params(np.random.default_rng(record_seed(seed, rec.id)))
        else:
            params = fixed_params or RenderParams()
        try:
            return rec, render(rec.source_latex, params, backend)
        except RenderFailure:
            return rec, None

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(_one, records))
    else:
        results = [_one(r) for r in records]

    stats = PrepareStats()
    entries = [(rec, img) for rec, img in results if img is not None]
    stats.render_failures = len(results) - len(entries)
    vocab = vocab or Vocabulary.from_corpus([rec for rec, _ in entries])
    _write_records(entries, out_dir, vocab)
    stats.written = len(entries)
    return stats


def prepare_synthetic_handwritten(
    records: list[FormulaRecord],
    out_dir,
    backend: RendererBackend,
    seed: int = 0,
    vocab: Vocabulary | None = None,
    font_size: int = 32,
) -> PrepareStats:
    """Fake a handwritten domain: render, then warp with a smooth field."""
    stats = PrepareStats()
    entries = []
    kept = []
    params = RenderParams(font="mathrm", padding=6, font_size=font_size)
    for rec in records:
        rng = np.random.default_rng(record_seed(seed, "hw:" + rec.id))
        try:
            img = render(rec.source_latex, params, backend)
        except RenderFailure:
            stats.render_failures += 1
            continue
        hw = FormulaRecord(
            id=rec.id, source_latex=rec.source_latex, tokens=list(rec.tokens), domain=HANDWRITTEN
        )
        entries.append((hw, normalize_intensity(wobble(img, rng))))
        kept.append(rec)
    vocab = vocab or Vocabulary.from_corpus(kept)
    _write_records(entries, out_dir, vocab)
    stats.written = len(entries)
    return stats


def prepare_inkml_dataset(
    inkml_dir,
    out_dir,
    target_height: int = 128,
    vocab: Vocabulary | None = None,
) -> PrepareStats:
    """Rasterize InkML trace files into a handwritten dataset.

    The ground-truth formula is read from the ``truth`` annotation element;
    files without one (or with degenerate strokes) are skipped.
    """
    import xml.etree.ElementTree as ET

    stats = PrepareStats()
    entries = []
    kept = []
    for path in sorted(Path(inkml_dir).glob("*.inkml")):
        text = path.read_text(encoding="utf-8")
        truth = None
        for elem in ET.fromstring(text).iter():
            if elem.tag.rsplit("}", 1)[-1] == "annotation" and elem.get("type") == "truth":
                truth = (elem.text or "").strip()
                break
        if not truth:
            stats.render_failures += 1
            continue
        try:
            rec = FormulaRecord.from_latex(path.stem, truth, domain=HANDWRITTEN)
            img = rasterize_strokes(parse_inkml(text), target_height=target_height)
        except (DegenerateStrokes, ValueError):
            stats.render_failures += 1
            continue
        entries.append((rec, normalize_intensity(img)))
        kept.append(rec)
    vocab = vocab or Vocabulary.from_corpus(kept)
    _write_records(entries, out_dir, vocab)
    stats.written = len(entries)
    return stats
