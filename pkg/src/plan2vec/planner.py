"""Shortest-path search over a :class:`~plan2vec.graph.TransitionGraph`.

Every search counts expansions: a vertex is expanded when it is settled
(Dijkstra, A*) or when its out-edges are enumerated (BFS lookahead).
Ties in the priority queue are broken by the smaller vertex id.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ALL = None  # target sentinel: search the whole reachable component


@dataclass
class Plan:
    vertices: list[int]
    cost: float

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def n_steps(self) -> int:
        return len(self.vertices) - 1


@dataclass
class SearchStats:
    expansions: int = 0
    peak_frontier: int = 0
    settled_distances: dict[int, float] = field(default_factory=dict)
    parents: dict[int, int] = field(default_factory=dict)
    suboptimality_ratio: float | None = None
    moves: int = 0
    cycles: int = 0


def path_cost(g, vertices: list[int]) -> float:
    adj = g.adjacency()
    total = 0.0
    for u, v in zip(vertices[:-1], vertices[1:]):
        tg, ws = adj[u]
        try:
            total += ws[tg.index(v)]
        except ValueError:
            raise ValueError(f"no edge {u} -> {v}") from None
    return total


def validate_plan(g, plan: Plan, tol: float = 1e-5) -> bool:
    """Consecutive vertices are joined by edges and ``plan.cost`` re-sums within ``tol``."""
    try:
        return abs(path_cost(g, plan.vertices) - plan.cost) <= tol
    except ValueError:
        return False


def _backtrack(parents: dict[int, int], t: int) -> list[int]:
    path = [t]
    while parents.get(path[-1], -1) != -1:
        path.append(parents[path[-1]])
    path.reverse()
    return path


def dijkstra(g, s: int, t: int | None = ALL) -> tuple[Plan | None, SearchStats]:
    """Exact single-source search; with ``t=ALL`` settles the whole reachable set."""
    adj = g.adjacency()
    inf = math.inf
    dist = {s: 0.0}
    parents = {s: -1}
    settled: dict[int, float] = {}
    heap = [(0.0, s)]
    peak = 1
    pop, push = heapq.heappop, heapq.heappush
    while heap:
        d, u = pop(heap)
        if u in settled:
            continue
        settled[u] = d
        if u == t:
            break
        tg, ws = adj[u]
        for v, w in zip(tg, ws):
            if v in settled:
                continue
            nd = d + w
            if nd < dist.get(v, inf):
                dist[v] = nd
                parents[v] = u
                push(heap, (nd, v))
        if len(heap) > peak:
            peak = len(heap)
    stats = SearchStats(expansions=len(settled), peak_frontier=peak, settled_distances=settled,
                        parents={v: parents[v] for v in settled})
    if t is ALL or t not in settled:
        return None, stats
    return Plan(_backtrack(parents, t), settled[t]), stats


def distances_to(g, goal: int, reverse=None) -> np.ndarray:
    """Vector of exact distances from every vertex to ``goal`` (``inf`` if unreachable).

    Runs Dijkstra from ``goal`` on the reversed graph; pass ``reverse`` to
    reuse a precomputed reversal.
    """
    rg = g.reversed() if reverse is None else reverse
    _, stats = dijkstra(rg, goal, ALL)
    out = np.full(g.n_vertices, np.inf)
    out[list(stats.settled_distances)] = list(stats.settled_distances.values())
    return out


class Heuristic:
    """Cost-to-goal estimate ``h(v)`` for A*."""

    ZERO = "zero"
    EUCLIDEAN = "euclidean_ground_truth"
    LEARNED = "learned_global"

    def __init__(self, kind: str, goal: int, fn: Callable[[int], float]):
        self.kind = kind
        self.goal = goal
        self._fn = fn
        self._cache: dict[int, float] = {}

    def __call__(self, v: int) -> float:
        h = self._cache.get(v)
        if h is None:
            h = self._cache[v] = float(self._fn(v))
        return h

    @classmethod
    def zero(cls, goal: int) -> "Heuristic":
        return cls(cls.ZERO, goal, lambda v: 0.0)

    @classmethod
    def euclidean(cls, positions: np.ndarray, goal: int, scale: float) -> "Heuristic":
        """``scale * |p_v - p_goal|`` from ground-truth positions (evaluation only)."""
        pos = np.asarray(positions, dtype=np.float64)
        pg = pos[goal]
        return cls(cls.EUCLIDEAN, goal, lambda v: scale * math.hypot(*(pos[v] - pg)))

    @classmethod
    def learned(cls, embeddings: np.ndarray, goal: int, p: float = 2.0, scale: float = 1.0) -> "Heuristic":
        """``scale * ||z_v - z_goal||_p`` over cached embeddings; ``z_goal`` is read once."""
        z = np.asarray(embeddings, dtype=np.float64)
        zg = z[goal].copy()
        return cls(cls.LEARNED, goal, lambda v: scale * float(np.sum(np.abs(z[v] - zg) ** p) ** (1.0 / p)))


def euclidean_scale(g, positions: np.ndarray) -> float:
    """Largest ``c`` with ``c * |p_u - p_v| <= w(u, v)`` on every edge; makes the
    Euclidean heuristic consistent."""
    pos = np.asarray(positions, dtype=np.float64)
    src = g.sources()
    length = np.hypot(*(pos[src] - pos[g.indices]).T)
    moving = length > 0
    if not moving.any():
        return 0.0
    return float(np.min(g.weights[moving].astype(np.float64) / length[moving]))


def astar(g, s: int, t: int, h: Heuristic, reference_cost: float | None = None) -> tuple[Plan | None, SearchStats]:
    """A* without re-opening settled vertices.

    With an admissible, consistent ``h`` the result is optimal. Otherwise the
    plan is valid but possibly longer; ``stats.suboptimality_ratio`` is filled
    in when ``reference_cost`` is given, or computed with Dijkstra for a
    learned heuristic.
    """
    adj = g.adjacency()
    inf = math.inf
    gcost = {s: 0.0}
    parents = {s: -1}
    closed: dict[int, float] = {}
    heap = [(h(s), s)]
    peak = 1
    pop, push = heapq.heappop, heapq.heappush
    while heap:
        _, u = pop(heap)
        if u in closed:
            continue
        closed[u] = gcost[u]
        if u == t:
            break
        gu = gcost[u]
        tg, ws = adj[u]
        for v, w in zip(tg, ws):
            if v in closed:
                continue
            ng = gu + w
            if ng < gcost.get(v, inf):
                gcost[v] = ng
                parents[v] = u
                push(heap, (ng + h(v), v))
        if len(heap) > peak:
            peak = len(heap)
    stats = SearchStats(expansions=len(closed), peak_frontier=peak, settled_distances=closed,
                        parents={v: parents[v] for v in closed})
    if t not in closed:
        return None, stats
    plan = Plan(_backtrack(parents, t), closed[t])
    if reference_cost is None and h.kind == Heuristic.LEARNED:
        ref, _ = dijkstra(g, s, t)
        reference_cost = ref.cost
    if reference_cost is not None:
        stats.suboptimality_ratio = plan.cost / reference_cost if reference_cost > 0 else 1.0
    return plan, stats


def bfs_tree(g, v: int, k: int) -> tuple[list[int], dict[int, int], int]:
    """Unweighted BFS to depth ``k``: (discovered vertices in BFS order, parents, expansions).

    Expands one whole level at a time over the CSR arrays.  Within a level, neighbours are
    scanned frontier-vertex by frontier-vertex in adjacency order and the first scan to reach
    a vertex becomes its parent -- the same order and parents as a queue-based BFS.
    """
    if k < 1:
        raise ValueError(f"lookahead depth must be >= 1, got {k}")
    indptr, indices = g.indptr, g.indices
    seen = np.zeros(g.n_vertices, dtype=bool)
    seen[v] = True
    frontier = np.array([v], dtype=np.int64)
    order: list[int] = []
    parents = {v: -1}
    expansions = 0
    for _ in range(k):
        if frontier.size == 0:
            break
        expansions += int(frontier.size)
        starts = indptr[frontier]
        deg = indptr[frontier + 1] - starts
        total = int(deg.sum())
        if total == 0:
            break
        flat = np.repeat(starts - (np.cumsum(deg) - deg), deg) + np.arange(total)
        nb = indices[flat].astype(np.int64)
        src = np.repeat(frontier, deg)
        fresh = ~seen[nb]
        nb, src = nb[fresh], src[fresh]
        _, first = np.unique(nb, return_index=True)
        first.sort()
        frontier, par = nb[first], src[first]
        seen[frontier] = True
        order.extend(frontier.tolist())
        parents.update(zip(frontier.tolist(), par.tolist()))
    return order, parents, expansions


def bfs_neighborhood(g, v: int, k: int) -> set[int]:
    """Vertices reachable from ``v`` in at most ``k`` hops, excluding ``v``."""
    return set(bfs_tree(g, v, k)[0])


def bfs_path(parents: dict[int, int], target: int) -> list[int]:
    return _backtrack(parents, target)


ValueFn = Callable[[np.ndarray, int], np.ndarray]


def budget_limited_search(
    g,
    s: int,
    t: int,
    value: ValueFn,
    k: int = 1,
    frontier_cap: int = 1,
    step_limit: int = 50,
    success: Callable[[int], bool] | None = None,
) -> tuple[Plan | None, SearchStats]:
    """Best-first search with lookahead ``k`` and a frontier of at most ``frontier_cap`` vertices.

    Each move enumerates ``N(current, k)``, scores unvisited candidates with
    ``value(candidates, t)`` (higher is better), keeps the ``frontier_cap``
    best and moves to the top one. The goal is taken as soon as it appears in
    the lookahead. ``success`` may accept a vertex other than ``t`` (e.g. one
    inside a ground-truth radius). With ``k = frontier_cap = 1`` this is the
    greedy reactive policy.
    """
    if k < 1 or frontier_cap < 1:
        raise ValueError("need k >= 1 and frontier_cap >= 1")
    done = (lambda v: v == t) if success is None else (lambda v: v == t or success(v))
    stats = SearchStats()
    tree: dict[int, list[int]] = {s: [s]}  # vertex -> BFS subpath from the centre that reached it
    visited = {s}
    frontier: list[tuple[float, int, list[int]]] = []
    in_frontier: set[int] = set()
    current = s

    def finish(v):
        chain = [v]
        while chain[-1] != s:
            chain.extend(reversed(tree[chain[-1]][:-1]))
        chain.reverse()
        verts = [chain[0]]
        for u in chain[1:]:
            if u != verts[-1]:
                verts.append(u)
        return Plan(verts, path_cost(g, verts)), stats

    if done(s):
        return finish(s)
    for _ in range(step_limit):
        order, parents, expansions = bfs_tree(g, current, k)
        stats.expansions += expansions
        if t in parents and t not in visited:
            chosen, path = t, bfs_path(parents, t)
        else:
            cands = [u for u in order if u not in visited and u not in in_frontier]
            if cands:
                scores = np.asarray(value(np.asarray(cands, dtype=np.int64), t), dtype=np.float64)
                for sc, u in zip(scores.tolist(), cands):
                    frontier.append((-sc, u, bfs_path(parents, u)))
                    in_frontier.add(u)
                frontier.sort(key=lambda e: (e[0], e[1]))
                for _, u, _ in frontier[frontier_cap:]:
                    in_frontier.discard(u)
                del frontier[frontier_cap:]
            stats.peak_frontier = max(stats.peak_frontier, len(frontier))
            if not frontier:
                return None, stats
            _, chosen, path = frontier.pop(0)
            in_frontier.discard(chosen)
        stats.moves += 1
        tree[chosen] = path
        visited.update(path)
        current = chosen
        if done(chosen):
            return finish(chosen)
    return None, stats
