"""SVG figures of tubes, triangulations and image curves."""
import logging
from typing import Sequence

import drawsvg as draw
import numpy as np

from qcdistort.config import Settings
from qcdistort.services.geometry import TriangulatedMap

logger = logging.getLogger(__name__)

_MAX_CURVE_POINTS = 4096
_PRECISION = 6


class SvgRenderer:
    """World boxes are drawn with y up; every figure fills a canvas `width` pixels wide."""

    def __init__(self, settings: Settings):
        cfg = settings.render_config
        self.width = float(cfg.get("width", 640))
        self.stroke_width = float(cfg.get("stroke_width", 0.6))
        self.tube_fill = cfg.get("tube_fill", "#4a7ab7")
        self.complement_fill = cfg.get("complement_fill", "#e8e8e8")
        self.curve_stroke = cfg.get("curve_stroke", "#b7472a")
        self.background = cfg.get("background", "#ffffff")

    def _canvas(self, bounds: tuple[float, float, float, float]):
        x0, y0, x1, y1 = bounds
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"Degenerate drawing bounds {bounds}")
        scale = self.width / (x1 - x0)
        height = (y1 - y0) * scale
        d = draw.Drawing(self.width, height)
        d.append(draw.Rectangle(0, 0, self.width, height, fill=self.background))

        def project(pts: np.ndarray) -> list[float]:
            pts = np.asarray(pts, dtype=float)
            xy = np.column_stack([(pts[:, 0] - x0) * scale, (y1 - pts[:, 1]) * scale])
            return [float(v) for v in np.round(xy, _PRECISION).ravel()]

        return d, project

    def polygons(self, shapes: Sequence, bounds, fill: str | None = None, grid: tuple[int, int] | None = None):
        """Filled shapely polygons, optionally over a unit cell grid of (cols, rows)."""
        d, project = self._canvas(bounds)
        if grid is not None:
            cols, rows = grid
            for c in range(cols + 1):
                d.append(draw.Lines(*project(np.array([[c, 0], [c, rows]])), stroke="#999999",
                                    stroke_width=self.stroke_width, fill="none"))
            for r in range(rows + 1):
                d.append(draw.Lines(*project(np.array([[0, r], [cols, r]])), stroke="#999999",
                                    stroke_width=self.stroke_width, fill="none"))
        for shape in shapes:
            for poly in getattr(shape, "geoms", [shape]):
                d.append(draw.Lines(*project(np.asarray(poly.exterior.coords)[:-1]), close=True,
                                    fill=fill or self.tube_fill, fill_opacity=0.8,
                                    stroke="#222222", stroke_width=self.stroke_width))
                for hole in poly.interiors:
                    d.append(draw.Lines(*project(np.asarray(hole.coords)[:-1]), close=True,
                                        fill=self.background, stroke="#222222", stroke_width=self.stroke_width))
        return d

    def triangulation(self, tmap: TriangulatedMap, side: str = "image"):
        """Source or image triangles of a PL map, coloured by piece label."""
        if side not in ("source", "image"):
            raise ValueError(f"side must be 'source' or 'image', got {side}")
        tris = tmap.image_triangles if side == "image" else tmap.source_triangles
        x0, y0, x1, y1 = tmap.bounds if side == "source" else (
            float(tris[..., 0].min()), float(tris[..., 1].min()), float(tris[..., 0].max()), float(tris[..., 1].max()))
        d, project = self._canvas((x0, y0, x1, y1))
        for tri, label in zip(tris, tmap.labels):
            fill = self.complement_fill if label == "complement" else self.tube_fill
            d.append(draw.Lines(*project(tri), close=True, fill=fill,
                                stroke="#333333", stroke_width=self.stroke_width * 0.25))
        return d

    def curves(self, curves: Sequence[np.ndarray], bounds=(0.0, 0.0, 1.0, 1.0), frame: bool = True):
        """Polylines, thinned to a bounded number of vertices each."""
        d, project = self._canvas(bounds)
        if frame:
            x0, y0, x1, y1 = bounds
            d.append(draw.Lines(*project(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])), close=True,
                                fill="none", stroke="#999999", stroke_width=self.stroke_width))
        for curve in curves:
            pts = np.asarray(curve, dtype=float)
            if len(pts) > _MAX_CURVE_POINTS:
                keep = np.unique(np.linspace(0, len(pts) - 1, _MAX_CURVE_POINTS).round().astype(int))
                pts = pts[keep]
            d.append(draw.Lines(*project(pts), fill="none", stroke=self.curve_stroke,
                                stroke_width=self.stroke_width))
        return d
