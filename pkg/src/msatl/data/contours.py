"""Polygon rasterization and boundary tracing.

Pixel ``(r, c)`` covers the unit square ``[c, c+1) x [r, r+1)`` and is sampled
at its center ``(c + 0.5, r + 0.5)``.  Vertices are ``(x, y)`` pairs, i.e.
column first.
"""
from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np

from .types import DataError

Polygon = Sequence[Sequence[float]]


def _even_odd(poly: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    xs, ys = poly[:, 0], poly[:, 1]
    xj, yj = np.roll(xs, 1), np.roll(ys, 1)
    for x0, y0, x1, y1 in zip(xs, ys, xj, yj):
        if y0 == y1:
            continue
        straddle = (y0 > py) != (y1 > py)
        x_cross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= straddle & (px < x_cross)
    return inside


def rasterize_contours(polygons: Sequence[Polygon], height: int, width: int) -> np.ndarray:
    """Binary mask of pixels whose center lies inside any polygon (even-odd rule)."""
    mask = np.zeros((height, width), dtype=bool)
    if not polygons:
        return mask.astype(np.uint8)
    py, px = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            raise DataError(f"degenerate polygon with {len(pts)} vertices")
        if (pts[:, 0].min() < 0 or pts[:, 1].min() < 0
                or pts[:, 0].max() > width or pts[:, 1].max() > height):
            raise DataError("polygon vertex outside image bounds")
        mask |= _even_odd(pts, px, py)
    return mask.astype(np.uint8)


# direction vectors (dx, dy) in image coordinates, y pointing down
_RIGHT, _DOWN, _LEFT, _UP = (1, 0), (0, 1), (-1, 0), (0, -1)


def trace_contours(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """Trace the pixel-edge boundary loops of a binary mask.

    Each loop runs along pixel edges with vertices on integer corners, so
    rasterizing the loops reproduces every 4-connected component without
    holes.  Collinear vertices are dropped.
    """
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    padded = np.pad(m, 1)
    # directed boundary edges, foreground kept on the right-hand side
    edges: dict[tuple[int, int], list[tuple[int, int]]] = defaultdict(list)
    rows, cols = np.nonzero(m)
    for r, c in zip(rows.tolist(), cols.tolist()):
        pr, pc = r + 1, c + 1
        if not padded[pr - 1, pc]:
            edges[(c, r)].append((c + 1, r))
        if not padded[pr, pc + 1]:
            edges[(c + 1, r)].append((c + 1, r + 1))
        if not padded[pr + 1, pc]:
            edges[(c + 1, r + 1)].append((c, r + 1))
        if not padded[pr, pc - 1]:
            edges[(c, r + 1)].append((c, r))

    loops = []
    while edges:
        start = min(edges)
        loop = [start]
        cur = start
        prev_dir = None
        while True:
            outs = edges[cur]
            if len(outs) == 1 or prev_dir is None:
                nxt = outs[0]
            else:
                # pinch corner: turn right to stay on the current component
                right = (-prev_dir[1], prev_dir[0])
                want = (cur[0] + right[0], cur[1] + right[1])
                nxt = want if want in outs else outs[0]
            outs.remove(nxt)
            if not outs:
                del edges[cur]
            prev_dir = (nxt[0] - cur[0], nxt[1] - cur[1])
            cur = nxt
            if cur == start:
                break
            loop.append(cur)
        loops.append(_drop_collinear(loop))
    return loops


def _drop_collinear(loop: list[tuple[int, int]]) -> list[tuple[int, int]]:
    n = len(loop)
    out = []
    for k in range(n):
        a, b, c = loop[k - 1], loop[k], loop[(k + 1) % n]
        if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) != 0:
            out.append(b)
    return out
