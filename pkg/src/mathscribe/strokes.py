"""Pen-stroke handling: InkML-style trace parsing and rasterization."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

__all__ = ["StrokeError", "DegenerateStrokes", "parse_inkml", "stroke_bbox", "rasterize_strokes"]

StrokeSet = list[list[tuple[float, float]]]


class StrokeError(ValueError):
    pass


class DegenerateStrokes(StrokeError):
    pass


def parse_inkml(source: str | Path) -> StrokeSet:
    """Extract polylines from the ``trace`` elements of an InkML document.

    Each trace is a comma-separated list of points whose first two fields
    are x and y; trailing fields (timestamps, pressure) are ignored.
    ``source`` may be a path or the XML text itself.
    """
    text = source if isinstance(source, str) and source.lstrip().startswith("<") else Path(source).read_text(encoding="utf-8")
    root = ET.fromstring(text)
    strokes: StrokeSet = []
    for elem in root.iter():
        if elem.tag.rsplit("}", 1)[-1] != "trace" or not elem.text:
            continue
        points = []
        for chunk in elem.text.strip().split(","):
            fields = chunk.split()
            if len(fields) < 2:
                continue
            points.append((float(fields[0]), float(fields[1])))
        if points:
            strokes.append(points)
    return strokes


def stroke_bbox(strokes: StrokeSet) -> tuple[float, float, float, float]:
    xs = [x for stroke in strokes for x, _ in stroke]
    ys = [y for stroke in strokes for _, y in stroke]
    if not xs:
        raise DegenerateStrokes("no points")
    return min(xs), min(ys), max(xs), max(ys)


def rasterize_strokes(strokes: StrokeSet, target_height: int, line_width: int | None = None) -> np.ndarray:
    """Draw strokes as bright lines on a dark canvas.

    Coordinates are scaled isotropically so the bounding box height equals
    ``target_height``; a flat stroke set falls back to scaling by width.
    Line width defaults to target_height/64, minimum 1 px.
    """
    if not strokes or all(len(s) == 0 for s in strokes):
        raise DegenerateStrokes("empty stroke set")
    x0, y0, x1, y1 = stroke_bbox(strokes)
    bw, bh = x1 - x0, y1 - y0
    if bw == 0.0 and bh == 0.0:
        raise DegenerateStrokes("all points coincide")
    scale = target_height / bh if bh > 0 else target_height / bw

    if line_width is None:
        line_width = max(1, target_height // 64)
    margin = line_width + 1

    width = int(np.ceil(bw * scale)) + 2 * margin
    height = int(np.ceil(bh * scale)) + 2 * margin
    canvas = Image.new("L", (max(width, 1), max(height, 1)), color=0)
    draw = ImageDraw.Draw(canvas)
    r = line_width / 2.0
    for stroke in strokes:
        pts = [((x - x0) * scale + margin, (y - y0) * scale + margin) for x, y in stroke]
        if len(pts) > 1:
            draw.line(pts, fill=255, width=line_width, joint="curve")
        # round caps; PIL leaves thick line ends square and short
        for x, y in (pts[0], pts[-1]):
            draw.ellipse([x - r, y - r, x + r, y + r], fill=255)
    return np.asarray(canvas, dtype=np.float32) / 255.0
