"""Synthetic scans and brute-force oracles shared by the test modules."""
import math

import numpy as np

from cryoprobe.instrument import Axis, ScanGrid, ScanPlan


def line_scan(centers, slope=0.0, width=1.5, n_sweep=101, n_step=41, sweep=(0.2, 0.6),
              step=(0.5, 1.0), amp=1.0, first_rows=None, noise=0.0, offset=0.0, seed=0):
    """Plunger-vs-barrier raster with sech^2 lines.

    ``centers`` are line positions in sweep pixels at row 0; each line moves
    by ``slope`` pixels per row and is absent below its ``first_rows`` entry.
    """
    plan = ScanPlan("plunger-vs-barriers", (Axis("P1", *sweep),), (Axis("B1", *step),),
                    n_sweep, n_step)
    cols = np.arange(n_sweep)[None, :]
    rows = np.arange(n_step)[:, None]
    z = np.zeros((n_step, n_sweep))
    first_rows = first_rows or [0] * len(centers)
    for c, r0 in zip(centers, first_rows):
        line = amp / np.cosh((cols - c - slope * rows) / width) ** 2
        z += np.where(rows >= r0, line, 0.0)
    if noise:
        z = z + np.random.default_rng(seed).normal(0, noise, z.shape)
    return ScanGrid(plan, z + offset)


def _nearest(points, i, cands):
    best, key = -1, None
    pi = points[i]
    for j in cands:
        q = points[j]
        k = (math.hypot(q[0] - pi[0], q[1] - pi[1]), abs(q[0] - pi[0]), q[1])
        if key is None or k < key:
            best, key = j, k
    return best


def chain_oracle(points, slope_window, min_length, max_gap=2):
    """Segments as connected components of the mutual-nearest link graph."""
    pts = sorted(set(points))
    n = len(pts)
    edges = set()
    for i in range(n):
        up = [j for j in range(n) if pts[i][0] < pts[j][0] <= pts[i][0] + max_gap]
        j = _nearest(pts, i, up)
        if j < 0:
            continue
        dn = [k for k in range(n) if pts[j][0] - max_gap <= pts[k][0] < pts[j][0]]
        if _nearest(pts, j, dn) != i:
            continue
        slope = (pts[j][1] - pts[i][1]) / (pts[j][0] - pts[i][0])
        if slope_window[0] <= slope <= slope_window[1]:
            edges.add((i, j))
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            a = parent[a]
        return a

    for a, b in edges:
        parent[find(a)] = find(b)
    comps = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(pts[i])
    out = set()
    for comp in comps.values():
        rows = [p[0] for p in comp]
        if max(rows) - min(rows) + 1 >= min_length:
            out.add(frozenset(comp))
    return out


def mutual_nearest(points, a, b, max_gap=2):
    """True if ``b`` (above) and ``a`` (below) pick each other as nearest."""
    pts = sorted(set(points))
    ia, ib = pts.index(a), pts.index(b)
    up = [j for j in range(len(pts)) if a[0] < pts[j][0] <= a[0] + max_gap]
    dn = [k for k in range(len(pts)) if b[0] - max_gap <= pts[k][0] < b[0]]
    return _nearest(pts, ia, up) == ib and _nearest(pts, ib, dn) == ia
