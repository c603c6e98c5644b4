"""Distill shortest-path distances on the graph into an embedding metric.

``D(a, b) = ||phi(a) - phi(b)||_p`` and the goal-conditioned value is
``V = -D``. Two training regimes are provided:

* amortized search: exact Dijkstra distances to sampled goals are the
  regression targets, and every settled vertex of a search is reused;
* fitted value iteration: greedy rollouts with BFS lookahead ``k`` on the
  current metric, regressed toward the accumulated path length plus a
  target-network bootstrap.

Targets are divided by ``target_scale`` (by default the median goal distance)
so the regression works on O(1) numbers.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from .artifacts import atomic_write_text
from .graph import TransitionGraph
from .maze import TrajectoryDataset
from .nn import MLP, load_checkpoint, save_checkpoint
from .planner import ALL, bfs_path, bfs_tree, dijkstra, distances_to, path_cost

log = logging.getLogger(__name__)

AMORTIZED = "amortized"
FITTED_VI = "fitted_vi"


class TrainingError(RuntimeError):
    pass


class GlobalMetric:
    """Siamese embedding with an l_p head."""

    def __init__(self, input_dim: int, hidden=(256, 256), latent_dim: int = 2, p: float = 2.0,
                 seed: int = 0, scale: float = 1.0, net: MLP | None = None):
        if not 1.0 <= p <= 2.0:
            raise ValueError(f"p must lie in [1, 2], got {p}")
        self.p = float(p)
        self.scale = float(scale)
        self.net = net if net is not None else MLP([input_dim, *hidden, latent_dim], seed=seed)

    @property
    def latent_dim(self) -> int:
        return self.net.sizes[-1]

    @property
    def parameters(self) -> list[ad.Tensor]:
        return self.net.parameters

    @staticmethod
    def _flat(x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        return x.reshape(len(x), -1) if x.ndim > 2 else x

    def embed(self, x) -> np.ndarray:
        return self.net.forward_numpy(self._flat(x))

    def distance(self, a, b) -> ad.Tensor:
        """Differentiable ``D`` for aligned batches."""
        za = self.net(ad.Tensor(self._flat(a)))
        zb = self.net(ad.Tensor(self._flat(b)))
        return ad.lp_norm(za - zb, self.p)

    def latent_distance(self, za: np.ndarray, zb: np.ndarray) -> np.ndarray:
        diff = np.abs(np.asarray(za, dtype=np.float64) - np.asarray(zb, dtype=np.float64))
        if self.p == 2.0:
            return np.sqrt((diff * diff).sum(axis=-1))
        if self.p == 1.0:
            return diff.sum(axis=-1)
        return (diff**self.p).sum(axis=-1) ** (1.0 / self.p)

    def pair_distance(self, a, b) -> np.ndarray:
        """Tape-free ``D`` for aligned batches (scaled units)."""
        return self.latent_distance(self.embed(a), self.embed(b))

    def value(self, a, b) -> np.ndarray:
        return -self.pair_distance(a, b)

    def snapshot(self) -> "GlobalMetric":
        """Frozen copy, used as the target network."""
        twin = GlobalMetric(1, p=self.p, scale=self.scale, net=MLP(self.net.sizes))
        twin.net.load_state(self.net.state())
        return twin

    def save(self, directory: str | Path) -> None:
        save_checkpoint(directory, self.net, {
            "kind": "global_metric", "p": self.p, "latent_dim": self.latent_dim, "target_scale": self.scale,
        })

    @classmethod
    def load(cls, directory: str | Path) -> "GlobalMetric":
        net, meta = load_checkpoint(directory)
        return cls(1, p=meta["p"], scale=meta["target_scale"], net=net)


@dataclass
class TrainConfig:
    mode: str = AMORTIZED
    iterations: int = 100
    batch_rollouts: int = 20
    steps_per_rollout: int = 20
    opt_epochs: int = 6
    minibatch: int = 32
    lr: float = 1e-3
    target_scale: float | None = None
    lookahead: int = 1
    step_limit: int = 20
    target_sync_interval: int = 50
    goal_pool: int | None = 1000
    targets: str = "path"
    latent_dim: int = 2
    hidden: tuple[int, ...] = (256, 256)
    p: float = 2.0
    probe_pairs: int = 1000
    probe_goals: int = 50
    probe_every: int = 10
    min_reachable_fraction: float = 0.5
    seed: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class TrainResult:
    metric: GlobalMetric
    history: list[dict] = field(default_factory=list)
    probe: "Probe | None" = None

    @property
    def final_spearman(self) -> float:
        return self.history[-1]["spearman_probe"] if self.history else math.nan


# ---------------------------------------------------------------------------
# targets and probes
# ---------------------------------------------------------------------------

def make_value_targets_amortized(g: TransitionGraph, goal: int,
                                 reverse: TransitionGraph | None = None) -> list[tuple[int, float]]:
    """Every vertex that can reach ``goal`` with its exact distance, sorted by vertex id."""
    rg = g.reversed() if reverse is None else reverse
    _, stats = dijkstra(rg, goal, ALL)
    return sorted(stats.settled_distances.items())


@dataclass
class Probe:
    starts: np.ndarray
    goals: np.ndarray
    distances: np.ndarray
    reachable_fraction: float

    def spearman(self, metric: GlobalMetric, observations: np.ndarray, z: np.ndarray | None = None) -> float:
        if z is None:
            z = metric.embed(observations)
        pred = metric.latent_distance(z[self.starts], z[self.goals])
        rho = spearmanr(pred, self.distances).statistic
        return float(rho) if np.isfinite(rho) else 0.0


def make_probe(g: TransitionGraph, n_pairs: int = 1000, n_goals: int = 50, seed: int = 0,
               reverse: TransitionGraph | None = None) -> Probe:
    """Random reachable (start, goal) pairs with graph-truth distances."""
    rng = np.random.default_rng([seed, 101])
    rg = g.reversed() if reverse is None else reverse
    n_goals = max(1, min(n_goals, g.n_vertices))
    goals = rng.choice(g.n_vertices, size=n_goals, replace=False)
    per = math.ceil(n_pairs / n_goals)
    starts, gs, ds = [], [], []
    tried = reached = 0
    for goal in goals:
        dist = distances_to(g, int(goal), rg)
        cand = rng.choice(g.n_vertices, size=per, replace=True)
        tried += per
        ok = cand[np.isfinite(dist[cand]) & (cand != goal)]
        reached += len(ok)
        starts.append(ok)
        gs.append(np.full(len(ok), goal))
        ds.append(dist[ok])
    starts, gs, ds = (np.concatenate(x)[:n_pairs] for x in (starts, gs, ds))
    return Probe(starts.astype(np.int64), gs.astype(np.int64), ds, reached / max(tried, 1))


def estimate_target_scale(g: TransitionGraph, seed: int = 0, n_goals: int = 5,
                          reverse: TransitionGraph | None = None) -> float:
    """Median finite goal distance over a few random goals."""
    rng = np.random.default_rng([seed, 202])
    rg = g.reversed() if reverse is None else reverse
    vals = []
    for goal in rng.choice(g.n_vertices, size=min(n_goals, g.n_vertices), replace=False):
        d = distances_to(g, int(goal), rg)
        vals.append(d[np.isfinite(d) & (d > 0)])
    vals = np.concatenate(vals)
    return float(np.median(vals)) if vals.size else 1.0


# ---------------------------------------------------------------------------
# optimisation helpers
# ---------------------------------------------------------------------------

def _fit(metric: GlobalMetric, opt: ad.Adam, obs: np.ndarray, starts, goals, targets,
         epochs: int, minibatch: int, rng: np.random.Generator, on_update=None) -> float:
    n = len(targets)
    total, count = 0.0, 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, minibatch):
            idx = order[i : i + minibatch]
            opt.zero_grad()
            with ad.Tape() as tape:
                d = metric.distance(obs[starts[idx]], obs[goals[idx]])
                loss = ad.smooth_l1(d, targets[idx].astype(np.float32))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"loss became {value} after {count} updates")
            ad.backward(tape, loss)
            opt.step()
            total += value
            count += 1
            if on_update is not None:
                on_update()
    return total / max(count, 1)


def _setup(g: TransitionGraph, dataset: TrajectoryDataset, cfg: TrainConfig):
    if g.n_vertices != len(dataset):
        raise ValueError(f"graph has {g.n_vertices} vertices but the dataset has {len(dataset)} observations")
    rg = g.reversed()
    probe = make_probe(g, cfg.probe_pairs, cfg.probe_goals, cfg.seed, rg)
    if probe.reachable_fraction < cfg.min_reachable_fraction:
        raise TrainingError(
            f"only {probe.reachable_fraction:.1%} of sampled pairs are reachable "
            f"(need {cfg.min_reachable_fraction:.0%}); the graph is too fragmented"
        )
    scale = cfg.target_scale or estimate_target_scale(g, cfg.seed, reverse=rg)
    obs = dataset.flat
    metric = GlobalMetric(obs.shape[1], cfg.hidden, cfg.latent_dim, cfg.p, cfg.seed, scale)
    opt = ad.Adam(metric.parameters, lr=cfg.lr)
    return rg, probe, obs, metric, opt


def _log_row(history, it, loss, probe, metric, obs, extra=None):
    row = {
        "epoch": it,
        "loss": loss,
        "spearman_probe": probe.spearman(metric, obs),
        "reachable_fraction": probe.reachable_fraction,
    }
    row.update(extra or {})
    history.append(row)
    log.info("plan2vec iter %d loss %.4f spearman %.3f", it, loss, row["spearman_probe"])


def _write_history(path, history):
    if path is not None:
        atomic_write_text(path, "".join(json.dumps(h, sort_keys=True) + "\n" for h in history))


# ---------------------------------------------------------------------------
# amortized search
# ---------------------------------------------------------------------------

def _tree_arrays(g: TransitionGraph, goal: int, rg: TransitionGraph):
    """Dense distance-to-goal and next-hop arrays from one backward Dijkstra tree."""
    _, stats = dijkstra(rg, goal, ALL)
    dist = np.full(g.n_vertices, np.inf)
    nxt = np.full(g.n_vertices, -1, np.int32)
    verts = np.fromiter(stats.settled_distances, np.int64, len(stats.settled_distances))
    dist[verts] = np.fromiter(stats.settled_distances.values(), np.float64, len(verts))
    nxt[verts] = np.fromiter((stats.parents[v] for v in verts.tolist()), np.int64, len(verts))
    return dist, nxt


def _path_to_goal(nxt: np.ndarray, start: int) -> list[int]:
    path = [start]
    while nxt[path[-1]] != -1:
        path.append(int(nxt[path[-1]]))
    return path


def sample_amortized_targets(dist, nxt, goal: int, n: int, mode: str, rng: np.random.Generator):
    """Training vertices for one goal: up to ``n`` settled vertices with their distance to ``goal``.

    ``"tree"`` draws them uniformly from the whole search tree.  ``"path"`` plays a planning
    trajectory: it starts from a random settled vertex and keeps every vertex of the
    shortest path to the goal (evenly thinned to ``n``), so each trajectory covers the
    whole range of remaining distances down to the goal itself.
    """
    verts = np.flatnonzero(np.isfinite(dist))
    if mode == "tree":
        pick = verts[rng.choice(len(verts), size=min(n, len(verts)), replace=False)]
    elif mode == "path":
        path = np.array(_path_to_goal(nxt, int(verts[rng.integers(len(verts))])), np.int64)
        if len(path) > n:
            path = path[np.round(np.linspace(0, len(path) - 1, n)).astype(np.int64)]
        pick = path
    else:
        raise ValueError(f"unknown amortized target mode {mode!r}; choose 'path' or 'tree'")
    return pick, dist[pick]


def train_amortized(g: TransitionGraph, dataset: TrajectoryDataset, cfg: TrainConfig | None = None,
                    metrics_path: str | Path | None = None) -> TrainResult:
    """Regress ``D(x_v, x_goal)`` toward exact graph distances from Dijkstra search trees."""
    cfg = cfg or TrainConfig()
    rg, probe, obs, metric, opt = _setup(g, dataset, cfg)
    rng = np.random.default_rng([cfg.seed, 303])
    pool = None
    if cfg.goal_pool:
        pool = np.sort(rng.choice(g.n_vertices, size=min(cfg.goal_pool, g.n_vertices), replace=False))
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    history: list[dict] = []
    for it in range(cfg.iterations):
        goals = rng.choice(pool, cfg.batch_rollouts) if pool is not None else rng.integers(0, g.n_vertices, cfg.batch_rollouts)
        starts, gs, ts = [], [], []
        for goal in sorted(int(x) for x in goals):
            if goal not in cache:
                cache[goal] = _tree_arrays(g, goal, rg)
            pick, dist = sample_amortized_targets(*cache[goal], goal, cfg.steps_per_rollout, cfg.targets, rng)
            starts.append(pick)
            gs.append(np.full(len(pick), goal))
            ts.append(dist / metric.scale)
        starts, gs, ts = (np.concatenate(x) for x in (starts, gs, ts))
        loss = _fit(metric, opt, obs, starts, gs, ts, cfg.opt_epochs, cfg.minibatch, rng)
        if (it + 1) % cfg.probe_every == 0 or it == cfg.iterations - 1:
            _log_row(history, it, loss, probe, metric, obs)
    _write_history(metrics_path, history)
    return TrainResult(metric, history, probe)


# ---------------------------------------------------------------------------
# fitted value iteration
# ---------------------------------------------------------------------------

@dataclass
class Rollout:
    waypoints: list[int]
    lengths: list[float]  # accumulated path length at each waypoint
    plan: list[int]
    reached_goal: bool
    cycled: bool


def greedy_rollout(g: TransitionGraph, z: np.ndarray, metric: GlobalMetric, start: int, goal: int,
                   k: int, step_limit: int) -> Rollout:
    """Greedy descent on ``D`` over ``N(v, k)``; each hop follows the BFS subplan.

    ``step_limit`` bounds the aggregated plan (edges traversed), not the number
    of greedy hops, so rollouts at every lookahead depth cover similar ground.
    """
    v, length = start, 0.0
    waypoints, lengths, plan = [start], [0.0], [start]
    seen = {start}
    cycled = False
    while v != goal and len(plan) - 1 < step_limit:
        order, parents, _ = bfs_tree(g, v, k)
        if not order:
            break
        cand = np.asarray(order, dtype=np.int64)
        d = metric.latent_distance(z[cand], z[goal])
        best = cand[np.lexsort((cand, d))[0]]
        sub = bfs_path(parents, int(best))
        length += path_cost(g, sub)
        v = int(best)
        cycled |= v in seen
        seen.update(sub)
        plan.extend(sub[1:])
        waypoints.append(v)
        lengths.append(length)
    return Rollout(waypoints, lengths, plan, v == goal, cycled)


def candidate_set(g: TransitionGraph, v: int, k: int) -> set[int]:
    """Vertices a k-lookahead greedy step chooses among."""
    return set(bfs_tree(g, v, k)[0])


def fvi_targets(rollout: Rollout, goal: int, bootstrap: float, scale: float):
    """Bootstrapped targets for every waypoint of a rollout (scaled units).

    The bootstrap is dropped when the rollout reached the goal.
    """
    total = rollout.lengths[-1]
    tail = 0.0 if rollout.reached_goal else bootstrap
    out = []
    for v, l in zip(rollout.waypoints[:-1], rollout.lengths[:-1]):
        out.append((v, goal, (total - l) / scale + tail))
    return out


def train_fitted_vi(g: TransitionGraph, dataset: TrajectoryDataset, cfg: TrainConfig | None = None,
                    metrics_path: str | Path | None = None) -> TrainResult:
    """Fitted value iteration with k-step BFS lookahead and a periodically synced target network."""
    cfg = cfg or TrainConfig(mode=FITTED_VI)
    if cfg.lookahead < 1 or cfg.step_limit < 1:
        raise ValueError("fitted value iteration needs lookahead >= 1 and step_limit >= 1")
    rg, probe, obs, metric, opt = _setup(g, dataset, cfg)
    rng = np.random.default_rng([cfg.seed, 404])
    target = metric.snapshot()
    z_target = target.embed(obs)
    updates = 0

    def on_update():
        nonlocal updates, target, z_target
        updates += 1
        if updates % cfg.target_sync_interval == 0:
            target = metric.snapshot()
            z_target = target.embed(obs)

    history: list[dict] = []
    for it in range(cfg.iterations):
        z = metric.embed(obs)
        samples = []
        cycles = 0
        for _ in range(cfg.batch_rollouts):
            s, goal = (int(x) for x in rng.integers(0, g.n_vertices, 2))
            r = greedy_rollout(g, z, metric, s, goal, cfg.lookahead, cfg.step_limit)
            cycles += r.cycled
            boot = float(metric.latent_distance(z_target[r.waypoints[-1]], z_target[goal]))
            samples += fvi_targets(r, goal, boot, metric.scale)
        loss = math.nan
        if samples:
            starts = np.array([s for s, _, _ in samples], np.int64)
            goals = np.array([gg for _, gg, _ in samples], np.int64)
            ts = np.array([t for _, _, t in samples])
            loss = _fit(metric, opt, obs, starts, goals, ts, cfg.opt_epochs, cfg.minibatch, rng, on_update)
        if (it + 1) % cfg.probe_every == 0 or it == cfg.iterations - 1:
            _log_row(history, it, loss, probe, metric, obs, {"cycle_rate": cycles / cfg.batch_rollouts})
    _write_history(metrics_path, history)
    return TrainResult(metric, history, probe)


def train(g, dataset, cfg: TrainConfig, metrics_path=None) -> TrainResult:
    if cfg.mode == AMORTIZED:
        return train_amortized(g, dataset, cfg, metrics_path)
    if cfg.mode == FITTED_VI:
        return train_fitted_vi(g, dataset, cfg, metrics_path)
    raise ValueError(f"unknown training mode {cfg.mode!r}")


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_embedding(metric: GlobalMetric, dataset: TrajectoryDataset) -> list[tuple]:
    """Rows of ``(id, z_1..z_n, gt_x, gt_y)``; positions are for plotting only."""
    z = metric.embed(dataset.flat)
    return [(i, *map(float, z[i]), float(dataset.positions[i, 0]), float(dataset.positions[i, 1]))
            for i in range(len(dataset))]


def embedding_csv(rows: list[tuple], latent_dim: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", *(f"z{j}" for j in range(latent_dim)), "gt_x", "gt_y"])
    for row in rows:
        w.writerow([row[0], *(f"{x:.9g}" for x in row[1:])])
    return buf.getvalue()
