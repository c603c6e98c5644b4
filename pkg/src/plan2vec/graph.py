"""Weighted directed graph over dataset observations.

Consecutive frames of a rollout are joined by ``Dataset`` edges of weight 1.
Every other pair whose local-metric score falls in ``(0, d0]`` gets a pair
of ``Inferred`` edges weighted by that score. Where both kinds would join
the same ordered pair, the dataset edge is kept.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import SCHEMA_VERSION, ArtifactError, atomic_write_bytes, atomic_write_json, check_schema, read_json

DATASET = 0
INFERRED = 1
ORIGIN_NAMES = {DATASET: "dataset", INFERRED: "inferred"}
DEFAULT_D0 = 1.5
BLOCK = 1024

EDGE_DTYPE = np.dtype([("source", "<u4"), ("target", "<u4"), ("weight", "<f4"), ("origin", "u1")])


@dataclass
class TransitionGraph:
    """CSR adjacency: out-edges of ``v`` are ``indptr[v]:indptr[v+1]``, sorted by target."""

    n_vertices: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    origin: np.ndarray
    d0: float = DEFAULT_D0
    _adj: list | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_edges(cls, n_vertices: int, source, target, weight, origin, d0: float = DEFAULT_D0) -> "TransitionGraph":
        source = np.asarray(source, dtype=np.int64)
        target = np.asarray(target, dtype=np.int64)
        weight = np.asarray(weight, dtype=np.float32)
        origin = np.asarray(origin, dtype=np.uint8)
        if source.size and (source.min() < 0 or max(source.max(), target.max()) >= n_vertices):
            raise ValueError("edge endpoint out of range")
        keep = source != target
        source, target, weight, origin = source[keep], target[keep], weight[keep], origin[keep]
        if np.any(weight <= 0):
            raise ValueError("edge weights must be positive")
        # sort by (source, target, origin) so a dataset edge precedes its inferred duplicate
        order = np.lexsort((origin, target, source))
        source, target, weight, origin = source[order], target[order], weight[order], origin[order]
        first = np.ones(source.size, dtype=bool)
        first[1:] = (source[1:] != source[:-1]) | (target[1:] != target[:-1])
        source, target, weight, origin = source[first], target[first], weight[first], origin[first]
        indptr = np.zeros(n_vertices + 1, dtype=np.int64)
        np.add.at(indptr, source + 1, 1)
        return cls(n_vertices, np.cumsum(indptr), target, weight, origin, float(d0))

    @property
    def n_edges(self) -> int:
        return int(self.indices.size)

    def counts_by_origin(self) -> dict[str, int]:
        return {name: int(np.sum(self.origin == code)) for code, name in ORIGIN_NAMES.items()}

    def sources(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_vertices), np.diff(self.indptr))

    def adjacency(self) -> list[tuple[list[int], list[float]]]:
        """Per-vertex ``(targets, weights)`` as Python lists, built once."""
        if self._adj is None:
            tgt = self.indices.tolist()
            w = self.weights.astype(np.float64).tolist()
            ptr = self.indptr.tolist()
            self._adj = [(tgt[ptr[v] : ptr[v + 1]], w[ptr[v] : ptr[v + 1]]) for v in range(self.n_vertices)]
        return self._adj

    def neighbors(self, v: int) -> list[int]:
        return self.adjacency()[v][0]

    def edge(self, u: int, v: int) -> tuple[float, int] | None:
        """``(weight, origin)`` of edge ``u -> v`` or ``None``."""
        lo, hi = self.indptr[u], self.indptr[u + 1]
        k = lo + np.searchsorted(self.indices[lo:hi], v)
        if k < hi and self.indices[k] == v:
            return float(self.weights[k]), int(self.origin[k])
        return None

    def reversed(self) -> "TransitionGraph":
        return TransitionGraph.from_edges(
            self.n_vertices, self.indices, self.sources(), self.weights, self.origin, self.d0
        )

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        rec = np.empty(self.n_edges, dtype=EDGE_DTYPE)
        rec["source"] = self.sources()
        rec["target"] = self.indices
        rec["weight"] = self.weights
        rec["origin"] = self.origin
        atomic_write_bytes(directory / "edges.bin", rec.tobytes())
        atomic_write_json(directory / "graph.json", {
            "schema_version": SCHEMA_VERSION,
            "n_vertices": self.n_vertices,
            "n_edges": self.n_edges,
            "d0": self.d0,
            "counts_by_origin": self.counts_by_origin(),
        })

    @classmethod
    def load(cls, directory: str | Path) -> "TransitionGraph":
        directory = Path(directory)
        header = read_json(directory / "graph.json", "graph header")
        check_schema(header, directory / "graph.json")
        path = directory / "edges.bin"
        if not path.exists():
            raise ArtifactError(f"missing graph edges: expected {path}", path)
        rec = np.frombuffer(path.read_bytes(), dtype=EDGE_DTYPE)
        if rec.size != header["n_edges"]:
            raise ArtifactError(f"{path} holds {rec.size} edges, header says {header['n_edges']}", path)
        return cls.from_edges(header["n_vertices"], rec["source"], rec["target"], rec["weight"],
                              rec["origin"], header["d0"])


def dataset_edges(rollouts) -> tuple[np.ndarray, np.ndarray]:
    src = [np.arange(s, s + n - 1) for s, n in rollouts if n > 1]
    if not src:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    s = np.concatenate(src)
    return s, s + 1


def build_graph(dataset, metric, d0: float = DEFAULT_D0, block: int = BLOCK) -> TransitionGraph:
    """Dataset edges plus symmetric inferred edges for every pair with ``0 < d <= d0``.

    ``metric`` must provide ``scorer(observations)`` returning a callable that
    maps (row indices, column indices) to a block of scores.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot build a graph over an empty dataset")
    if d0 <= 0:
        raise ValueError(f"d0 must be positive, got {d0}")
    score = metric.scorer(dataset.observations)
    src, dst, w = [], [], []
    for r0 in range(0, n, block):
        rows = np.arange(r0, min(r0 + block, n))
        for c0 in range(r0, n, block):
            cols = np.arange(c0, min(c0 + block, n))
            d = np.asarray(score(rows, cols), dtype=np.float32)
            hit = (d <= d0) & (d > 0)
            if c0 == r0:
                hit &= rows[:, None] < cols[None, :]
            i, j = np.nonzero(hit)
            src.append(rows[i])
            dst.append(cols[j])
            w.append(d[i, j])
    isrc, idst, iw = (np.concatenate(x) for x in (src, dst, w))
    ds, dt = dataset_edges(dataset.rollouts)
    return TransitionGraph.from_edges(
        n,
        np.concatenate([ds, isrc, idst]),
        np.concatenate([dt, idst, isrc]),
        np.concatenate([np.ones(ds.size, np.float32), iw, iw]),
        np.concatenate([np.full(ds.size, DATASET), np.full(2 * isrc.size, INFERRED)]),
        d0,
    )


def shortest_path_distance_oracle(g: TransitionGraph, s: int, t: int) -> float | None:
    """Exact shortest-path cost from ``s`` to ``t``; ``None`` when unreachable."""
    from .planner import dijkstra

    plan, _ = dijkstra(g, s, t)
    return None if plan is None else plan.cost
