"""Independent reference implementations used to check the package.

Nothing here imports the code under test except plain data containers, so
a bug in the package cannot also hide in its oracle.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


# ---------------------------------------------------------------------------
# shortest paths by exhaustive enumeration
# ---------------------------------------------------------------------------

def brute_force_shortest(n: int, edges: dict[tuple[int, int], float], s: int, t: int) -> float | None:
    """Minimum cost over every simple path from ``s`` to ``t`` (depth-first enumeration)."""
    if s == t:
        return 0.0
    out: dict[int, list[tuple[int, float]]] = {}
    for (u, v), w in edges.items():
        out.setdefault(u, []).append((v, w))
    best = math.inf
    stack = [(s, 0.0, frozenset([s]))]
    while stack:
        u, cost, seen = stack.pop()
        for v, w in out.get(u, []):
            if v in seen:
                continue
            c = cost + w
            if v == t:
                best = min(best, c)
            else:
                stack.append((v, c, seen | {v}))
    return None if math.isinf(best) else best


def brute_force_from(n: int, edges: dict[tuple[int, int], float], s: int) -> dict[int, float]:
    """Minimum simple-path cost from ``s`` to every reachable vertex, by one exhaustive DFS."""
    out: dict[int, list[tuple[int, float]]] = {}
    for (u, v), w in edges.items():
        out.setdefault(u, []).append((v, w))
    best = {s: 0.0}
    stack = [(s, 0.0, 1 << s)]
    while stack:
        u, cost, seen = stack.pop()
        for v, w in out.get(u, []):
            if seen >> v & 1:
                continue
            c = cost + w
            if c < best.get(v, math.inf):
                best[v] = c
            stack.append((v, c, seen | 1 << v))
    return best


def floyd_warshall(n: int, edges: dict[tuple[int, int], float]) -> np.ndarray:
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for (u, v), w in edges.items():
        d[u, v] = min(d[u, v], w)
    for k in range(n):
        d = np.minimum(d, d[:, k : k + 1] + d[k : k + 1, :])
    return d


def random_edges(rng: np.random.Generator, n: int, density: float, integer: bool = False) -> dict:
    edges = {}
    for u in range(n):
        for v in range(n):
            if u != v and rng.random() < density:
                w = rng.integers(1, 5) if integer else rng.uniform(0.1, 3.0)
                edges[(u, v)] = float(np.float32(w))  # graphs store float32 weights
    return edges


def all_small_digraphs(n: int):
    """Every directed graph on ``n`` labelled vertices with weights drawn from {1, 2}."""
    pairs = [(u, v) for u in range(n) for v in range(n) if u != v]
    for mask in itertools.product((0, 1, 2), repeat=len(pairs)):
        yield {p: float(m) for p, m in zip(pairs, mask) if m}


def bfs_hops(n: int, edges: dict, s: int) -> dict[int, int]:
    adj: dict[int, list[int]] = {}
    for u, v in edges:
        adj.setdefault(u, []).append(v)
    hops = {s: 0}
    frontier = [s]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj.get(u, []):
                if v not in hops:
                    hops[v] = hops[u] + 1
                    nxt.append(v)
        frontier = nxt
    return hops


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def segments_intersect(p1, p2, q1, q2) -> bool:
    """Closed-segment intersection test by orientation signs."""
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-15 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return min(a[0], b[0]) - 1e-15 <= c[0] <= max(a[0], b[0]) + 1e-15 and \
            min(a[1], b[1]) - 1e-15 <= c[1] <= max(a[1], b[1]) + 1e-15

    o1, o2, o3, o4 = orient(p1, p2, q1), orient(p1, p2, q2), orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return any(o == 0 and on_seg(a, b, c) for o, a, b, c in
               ((o1, p1, p2, q1), (o2, p1, p2, q2), (o3, q1, q2, p1), (o4, q1, q2, p2)))


def segment_hits_rect(p, q, rect) -> bool:
    xmin, ymin, xmax, ymax = rect
    inside = lambda a: xmin <= a[0] <= xmax and ymin <= a[1] <= ymax
    if inside(p) or inside(q):
        return True
    corners = [(xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)]
    return any(segments_intersect(p, q, corners[i], corners[(i + 1) % 4]) for i in range(4))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def directional_fd(f, x: np.ndarray, u: np.ndarray, h: float = 1e-3) -> float:
    """Central difference of scalar ``f`` at ``x`` along ``u``."""
    return (f(x + h * u) - f(x - h * u)) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def smooth_l1_reference(x: np.ndarray, beta: float = 1.0) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def adam_reference(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam with bias correction over a sequence of gradients."""
    theta = np.array(theta, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * mh / (np.sqrt(vh) + eps)
    return theta


def queue_bfs(n: int, adjacency: list[list[int]], v: int, k: int):
    """Textbook FIFO BFS to depth ``k``: (discovery order, parents, vertices expanded)."""
    from collections import deque

    parents = {v: -1}
    order = []
    queue = deque([(v, 0)])
    expanded = 0
    while queue:
        u, depth = queue.popleft()
        if depth == k:
            continue
        expanded += 1
        for w in adjacency[u]:
            if w not in parents:
                parents[w] = u
                order.append(w)
                queue.append((w, depth + 1))
    return order, parents, expanded
