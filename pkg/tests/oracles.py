"""Brute-force reference implementations used only by the tests.

Nothing here imports tileselect; each oracle is written the slow, obvious
way so it can check the vectorised code independently.
"""

import itertools
import math
from collections import deque


def naive_max_pool(fmap, g):
    h, w, c = len(fmap), len(fmap[0]), len(fmap[0][0])
    bh, bw = h // g, w // g
    out = [[[0.0] * c for _ in range(g)] for _ in range(g)]
    for i in range(g):
        for j in range(g):
            for ch in range(c):
                best = -math.inf
                for r in range(i * bh, (i + 1) * bh):
                    for s in range(j * bw, (j + 1) * bw):
                        v = fmap[r][s][ch]
                        if v > best:
                            best = v
                out[i][j][ch] = best
    return out


def naive_avg_pool(fmap):
    h, w, c = len(fmap), len(fmap[0]), len(fmap[0][0])
    out = []
    for ch in range(c):
        total = 0.0
        for r in range(h):
            for s in range(w):
                total += float(fmap[r][s][ch])
        out.append(total / (h * w))
    return out


def two_pass_variance_score(stack):
    """Mean over pixels of the population variance over maps, plain floats."""
    t = len(stack)
    h, w = len(stack[0]), len(stack[0][0])
    acc = 0.0
    for r in range(h):
        for s in range(w):
            vals = [float(stack[k][r][s]) for k in range(t)]
            mean = sum(vals) / t
            acc += sum((v - mean) ** 2 for v in vals) / t
    return acc / (h * w)


def flood_fill_partition(mask, connectivity=8):
    """Set of frozensets of (row, col) pixels, one per connected component."""
    h, w = len(mask), len(mask[0])
    if connectivity == 8:
        steps = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    else:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    seen = set()
    parts = set()
    for r in range(h):
        for c in range(w):
            if not mask[r][c] or (r, c) in seen:
                continue
            comp = {(r, c)}
            seen.add((r, c))
            queue = deque([(r, c)])
            while queue:
                a, b = queue.popleft()
                for dr, dc in steps:
                    x, y = a + dr, b + dc
                    if 0 <= x < h and 0 <= y < w and mask[x][y] and (x, y) not in seen:
                        seen.add((x, y))
                        comp.add((x, y))
                        queue.append((x, y))
            parts.add(frozenset(comp))
    return parts


def _dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def kcenter_optimum(points, k):
    best = math.inf
    for centers in itertools.combinations(range(len(points)), k):
        radius = max(min(_dist(p, points[c]) for c in centers) for p in points)
        best = min(best, radius)
    return best


def robust_kcenter_optimum(points, k, n_outliers):
    """Min over center sets of the radius after dropping the worst points."""
    best = math.inf
    n = len(points)
    for centers in itertools.combinations(range(n), k):
        d = sorted(min(_dist(p, points[c]) for c in centers) for p in points)
        keep = n - n_outliers
        best = min(best, d[keep - 1] if keep > 0 else 0.0)
    return best


def robust_radius(points, centers, n_outliers):
    d = sorted(min(_dist(p, points[c]) for c in centers) for p in points)
    keep = len(points) - n_outliers
    return d[keep - 1] if keep > 0 else 0.0


def mst_cut_partition(points, k):
    """Single-linkage clusters: Prim's MST minus its k-1 heaviest edges."""
    n = len(points)
    in_tree = {0}
    edges = []
    while len(in_tree) < n:
        best = None
        for i in in_tree:
            for j in range(n):
                if j in in_tree:
                    continue
                d = _dist(points[i], points[j])
                if best is None or d < best[0]:
                    best = (d, i, j)
        edges.append(best)
        in_tree.add(best[2])
    edges.sort()
    kept = edges[: n - k]
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    for _, i, j in kept:
        parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return {frozenset(g) for g in groups.values()}


def ward_best_pair(points):
    """Pair (i, j) of points with the smallest Ward merge increment."""
    best = None
    for i, j in itertools.combinations(range(len(points)), 2):
        inc = 0.5 * sum((a - b) ** 2 for a, b in zip(points[i], points[j]))
        if best is None or inc < best[0]:
            best = (inc, i, j)
    return best[1], best[2]


def partition_of(labels):
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), set()).add(i)
    return {frozenset(g) for g in groups.values()}
