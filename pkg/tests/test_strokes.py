import numpy as np
import pytest

from mathscribe.strokes import DegenerateStrokes, parse_inkml, rasterize_strokes, stroke_bbox

INKML = """<ink xmlns="http://www.w3.org/2003/InkML">
  <annotation type="truth">x+1</annotation>
  <trace>0 0 100, 5 1 120, 10 0 140</trace>
  <trace>2.5 -3, 2.5 3</trace>
</ink>"""


class TestParseInkml:
    def test_traces_and_timestamps(self):
        strokes = parse_inkml(INKML)
        assert len(strokes) == 2
        assert strokes[0] == [(0.0, 0.0), (5.0, 1.0), (10.0, 0.0)]
        assert strokes[1] == [(2.5, -3.0), (2.5, 3.0)]

    def test_from_file(self, tmp_path):
        path = tmp_path / "a.inkml"
        path.write_text(INKML, encoding="utf-8")
        assert parse_inkml(path) == parse_inkml(INKML)


class TestRasterize:
    def test_horizontal_line_width_fallback(self):
        img = rasterize_strokes([[(0.0, 0.0), (10.0, 0.0)]], target_height=40, line_width=3)
        rows = np.nonzero(img.max(axis=1) >= 0.9)[0]
        assert len(rows) > 0
        # lit band is no thicker than the line width plus antialiasing slack
        assert rows.max() - rows.min() <= 4
        assert img.max() >= 0.9

    def test_empty_strokes_degenerate(self):
        with pytest.raises(DegenerateStrokes):
            rasterize_strokes([], target_height=32)

    def test_coincident_points_degenerate(self):
        with pytest.raises(DegenerateStrokes):
            rasterize_strokes([[(1.0, 1.0)], [(1.0, 1.0)]], target_height=32)

    def test_height_matches_target(self):
        img = rasterize_strokes([[(0.0, 0.0), (5.0, 10.0)]], target_height=64, line_width=1)
        lit_rows = np.nonzero(img.max(axis=1) > 0)[0]
        extent = lit_rows.max() - lit_rows.min() + 1
        assert abs(extent - 64) <= 2

    def test_diagonal_matches_independent_line_oracle(self):
        lw = 3
        img = rasterize_strokes([[(0.0, 0.0), (10.0, 10.0)]], target_height=50, line_width=lw)
        h, w = img.shape
        # Oracle: distance from each pixel center to the scaled segment.
        x0, y0, x1, y1 = 4.0, 4.0, 54.0, 54.0  # margin = lw + 1, scale = 5
        ys, xs = np.indices((h, w))
        px, py = xs.astype(float), ys.astype(float)
        t = np.clip(((px - x0) * (x1 - x0) + (py - y0) * (y1 - y0)) / ((x1 - x0) ** 2 + (y1 - y0) ** 2), 0, 1)
        dist = np.hypot(px - (x0 + t * (x1 - x0)), py - (y0 + t * (y1 - y0)))
        oracle = dist <= lw / 2
        lit = img > 0.5

        def dilate(mask):
            out = mask.copy()
            out[1:] |= mask[:-1]
            out[:-1] |= mask[1:]
            out[:, 1:] |= mask[:, :-1]
            out[:, :-1] |= mask[:, 1:]
            return out

        assert not (lit & ~dilate(oracle)).any(), "lit pixels outside dilated oracle"
        assert not (oracle & ~dilate(lit)).any(), "oracle pixels missing from dilated raster"

    def test_bbox(self):
        assert stroke_bbox([[(0, 1), (2, 5)], [(-1, 0)]]) == (-1, 0, 2, 5)
