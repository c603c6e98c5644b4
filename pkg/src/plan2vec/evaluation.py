"""Goal-reaching success rates, lookahead sweeps, planning cost and embedding diagnostics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr
from statsmodels.stats.proportion import proportion_confint

from .graph import TransitionGraph
from .maze import TrajectoryDataset
from .planner import (ALL, Heuristic, astar, bfs_tree, budget_limited_search, dijkstra, distances_to,
                      euclidean_scale)

PLAN2VEC = "Plan2vecValue"
LOCAL_GREEDY = "LocalMetricGreedy"
ORACLE = "GraphTruthOracle"
RANDOM = "Random"
METHODS = (PLAN2VEC, LOCAL_GREEDY, ORACLE, RANDOM)

DIJKSTRA = "dijkstra"
ASTAR_EUCLIDEAN = "astar_euclidean"
ASTAR_LEARNED = "astar_learned"
REACTIVE = "reactive_plan2vec"
PLANNERS = (DIJKSTRA, ASTAR_EUCLIDEAN, ASTAR_LEARNED, REACTIVE)


@dataclass(frozen=True)
class EvalTask:
    start: int
    goal: int
    success_radius: float = 0.15
    step_budget: int = 50
    connected: bool = True


def wilson_interval(successes: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    lo, hi = proportion_confint(successes, n, alpha=alpha, method="wilson")
    p = successes / n
    # the closed form can overshoot p or [0, 1] by a rounding error at s = 0 or s = n
    return float(min(max(lo, 0.0), p)), float(min(max(hi, p), 1.0))


@dataclass
class MethodResult:
    successes: int
    tasks: int
    rate: float
    ci_low: float
    ci_high: float
    stderr: float
    mean_expansions: float
    mean_moves: float
    outcomes: list[bool] = field(default_factory=list)

    @classmethod
    def from_outcomes(cls, outcomes: list[bool], expansions: list[int], moves: list[int]) -> "MethodResult":
        n, s = len(outcomes), int(sum(outcomes))
        rate = s / n if n else 0.0
        lo, hi = wilson_interval(s, n)
        return cls(s, n, rate, lo, hi, math.sqrt(rate * (1 - rate) / n) if n else 0.0,
                   float(np.mean(expansions)) if expansions else 0.0,
                   float(np.mean(moves)) if moves else 0.0, list(outcomes))


@dataclass
class EvalReport:
    k: int
    frontier_cap: int
    n_tasks: int
    seed: int
    methods: dict[str, MethodResult]

    def to_dict(self, with_outcomes: bool = False) -> dict:
        out = {"k": self.k, "frontier_cap": self.frontier_cap, "n_tasks": self.n_tasks, "seed": self.seed,
               "methods": {}}
        for name, r in self.methods.items():
            d = asdict(r)
            if not with_outcomes:
                d.pop("outcomes")
            out["methods"][name] = d
        return out


# ---------------------------------------------------------------------------
# tasks and value functions
# ---------------------------------------------------------------------------

def sample_tasks(g: TransitionGraph, dataset: TrajectoryDataset, n_tasks: int, seed: int = 0,
                 max_hops: int = 50, success_radius: float = 0.15, step_budget: int = 50) -> list[EvalTask]:
    """Start uniform over vertices; goal uniform among vertices within ``max_hops`` edges
    whose ground-truth position lies outside the success radius."""
    rng = np.random.default_rng([seed, 505])
    pos = dataset.positions.astype(np.float64)
    tasks: list[EvalTask] = []
    attempts = 0
    while len(tasks) < n_tasks:
        attempts += 1
        if attempts > 50 * n_tasks + 100:
            raise RuntimeError("could not sample enough connected tasks; the graph is too sparse")
        s = int(rng.integers(g.n_vertices))
        ball = np.asarray(bfs_tree(g, s, max_hops)[0], dtype=np.int64)
        if ball.size == 0:
            continue
        far = ball[np.hypot(*(pos[ball] - pos[s]).T) > success_radius]
        if far.size == 0:
            continue
        tasks.append(EvalTask(s, int(rng.choice(far)), success_radius, step_budget))
    return tasks


class ValueFunctions:
    """Value ``V(candidates, goal)`` (higher is better) for each evaluation method."""

    def __init__(self, g: TransitionGraph, dataset: TrajectoryDataset, global_metric=None, local_metric=None):
        self.g = g
        self.dataset = dataset
        self.global_metric = global_metric
        self.local_metric = local_metric
        self._z_global = None
        self._z_local = None
        self._reverse = None
        self._dist_cache: dict[int, np.ndarray] = {}

    def z_global(self) -> np.ndarray:
        if self._z_global is None:
            if self.global_metric is None:
                raise ValueError(f"{PLAN2VEC} needs a trained global metric")
            self._z_global = self.global_metric.embed(self.dataset.flat)
        return self._z_global

    def distances_to(self, goal: int) -> np.ndarray:
        if goal not in self._dist_cache:
            if self._reverse is None:
                self._reverse = self.g.reversed()
            self._dist_cache[goal] = distances_to(self.g, goal, self._reverse)
        return self._dist_cache[goal]

    def get(self, method: str, rng: np.random.Generator | None = None):
        if method == PLAN2VEC:
            z, m = self.z_global(), self.global_metric
            return lambda c, goal: -m.latent_distance(z[c], z[goal])
        if method == LOCAL_GREEDY:
            lm = self.local_metric
            if lm is None:
                raise ValueError(f"{LOCAL_GREEDY} needs a local metric")
            if lm.variant == "siamese":
                if self._z_local is None:
                    self._z_local = lm.encode(self.dataset.observations).astype(np.float64)
                zl = self._z_local
                return lambda c, goal: -np.sqrt(((zl[c] - zl[goal]) ** 2).sum(axis=1))
            obs = self.dataset.observations
            return lambda c, goal: -lm.scores(obs[c], np.repeat(obs[goal][None], len(c), axis=0))
        if method == ORACLE:
            return lambda c, goal: -self.distances_to(goal)[c]
        if method == RANDOM:
            rng = rng or np.random.default_rng(0)
            return lambda c, goal: rng.random(len(c))
        raise ValueError(f"unknown evaluation method {method!r}; choose from {METHODS}")


def _run_task(g, dataset, values: ValueFunctions, method: str, task: EvalTask, k: int, frontier_cap: int,
              seed: int, index: int):
    pos = dataset.positions.astype(np.float64)
    gp = pos[task.goal]
    rng = np.random.default_rng([seed, index, 606])
    success = lambda v: math.hypot(pos[v, 0] - gp[0], pos[v, 1] - gp[1]) <= task.success_radius
    plan, stats = budget_limited_search(g, task.start, task.goal, values.get(method, rng), k, frontier_cap,
                                        task.step_budget, success)
    return plan is not None and task.connected, stats


def run_success_eval(g: TransitionGraph, dataset: TrajectoryDataset, methods, n_tasks: int = 200, k: int = 1,
                     seed: int = 0, global_metric=None, local_metric=None, frontier_cap: int = 1,
                     success_radius: float = 0.15, step_budget: int = 50, tasks: list[EvalTask] | None = None,
                     values: ValueFunctions | None = None) -> EvalReport:
    """Success rate of budget-limited greedy search driven by each method's value function."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown evaluation method {m!r}; choose from {METHODS}")
    if tasks is None:
        tasks = sample_tasks(g, dataset, n_tasks, seed, success_radius=success_radius, step_budget=step_budget)
    values = values or ValueFunctions(g, dataset, global_metric, local_metric)
    results = {}
    for method in methods:
        outcomes, expansions, moves = [], [], []
        for i, task in enumerate(tasks):
            ok, stats = _run_task(g, dataset, values, method, task, k, frontier_cap, seed, i)
            outcomes.append(bool(ok))
            expansions.append(stats.expansions)
            moves.append(stats.moves)
        results[method] = MethodResult.from_outcomes(outcomes, expansions, moves)
    return EvalReport(k, frontier_cap, len(tasks), seed, results)


def run_lookahead_sweep(g: TransitionGraph, dataset: TrajectoryDataset, method: str, k_values, n_tasks: int = 200,
                        seed: int = 0, global_metric=None, local_metric=None, frontier_cap: int = 1,
                        success_radius: float = 0.15, step_budget: int = 50) -> list[dict]:
    """Success rate at each lookahead depth on one shared task sample."""
    tasks = sample_tasks(g, dataset, n_tasks, seed, success_radius=success_radius, step_budget=step_budget)
    values = ValueFunctions(g, dataset, global_metric, local_metric)
    curve = []
    for k in k_values:
        r = run_success_eval(g, dataset, [method], k=k, seed=seed, frontier_cap=frontier_cap, tasks=tasks,
                             values=values).methods[method]
        curve.append({"method": method, "k": int(k), "rate": r.rate, "successes": r.successes, "tasks": r.tasks,
                      "stderr": r.stderr, "ci_low": r.ci_low, "ci_high": r.ci_high,
                      "mean_expansions": r.mean_expansions})
    return curve


# ---------------------------------------------------------------------------
# planning cost
# ---------------------------------------------------------------------------

def _hop_counts(parents: dict[int, int]) -> dict[int, int]:
    hops: dict[int, int] = {}
    for v in parents:
        chain = []
        u = v
        while u not in hops and parents[u] != -1:
            chain.append(u)
            u = parents[u]
        base = hops.get(u, 0)
        for w in reversed(chain):
            base += 1
            hops[w] = base
        hops.setdefault(v, base if chain else hops.get(v, 0))
    return hops


def sample_cost_queries(g: TransitionGraph, plan_lengths, n_queries: int, seed: int = 0) -> list[tuple[int, int, int]]:
    """``(start, goal, optimal plan length)`` triples, ``n_queries`` per requested length."""
    rng = np.random.default_rng([seed, 707])
    wanted = {int(L): n_queries for L in plan_lengths}
    out = []
    attempts = 0
    while any(wanted.values()) and attempts < 20 * n_queries * len(wanted) + 50:
        attempts += 1
        s = int(rng.integers(g.n_vertices))
        _, stats = dijkstra(g, s, ALL)
        hops = _hop_counts(stats.parents)
        by_len: dict[int, list[int]] = {}
        for v, h in hops.items():
            if h in wanted:
                by_len.setdefault(h, []).append(v)
        for L in sorted(by_len):
            if wanted[L]:
                cands = sorted(by_len[L])
                out.append((s, int(cands[rng.integers(len(cands))]), L))
                wanted[L] -= 1
    return sorted(out, key=lambda q: (q[2], q[0], q[1]))


def run_planning_cost(g: TransitionGraph, dataset: TrajectoryDataset, planners, plan_lengths, n_queries: int = 10,
                      seed: int = 0, global_metric=None, step_limit_factor: int = 4) -> list[dict]:
    """Expansions of each planner on queries bucketed by optimal plan length."""
    for p in planners:
        if p not in PLANNERS:
            raise ValueError(f"unknown planner {p!r}; choose from {PLANNERS}")
    queries = sample_cost_queries(g, plan_lengths, n_queries, seed)
    values = ValueFunctions(g, dataset, global_metric)
    escale = euclidean_scale(g, dataset.positions) if ASTAR_EUCLIDEAN in planners else 0.0
    rows = []
    for qid, (s, t, L) in enumerate(queries):
        ref, ref_stats = dijkstra(g, s, t)
        for name in planners:
            if name == DIJKSTRA:
                plan, stats = ref, ref_stats
            elif name == ASTAR_EUCLIDEAN:
                plan, stats = astar(g, s, t, Heuristic.euclidean(dataset.positions, t, escale), ref.cost)
            elif name == ASTAR_LEARNED:
                m = global_metric
                plan, stats = astar(g, s, t, Heuristic.learned(values.z_global(), t, m.p, m.scale), ref.cost)
            else:
                plan, stats = budget_limited_search(g, s, t, values.get(PLAN2VEC), 1, 1, step_limit_factor * L + 10)
            success = plan is not None
            rows.append({
                "query_id": qid,
                "planner": name,
                "plan_length": L,
                "cost": plan.cost if success else math.nan,
                "steps": plan.n_steps if success else math.nan,
                "expansions": stats.expansions,
                "peak_frontier": stats.peak_frontier,
                "suboptimality_ratio": (plan.cost / ref.cost if ref.cost > 0 else 1.0) if success else math.nan,
                "success": success,
            })
    return rows


def scaling_exponent(rows: list[dict], planner: str) -> float:
    """Least-squares slope of log(expansions) on log(plan length), successful queries only."""
    pts = [(r["plan_length"], r["expansions"]) for r in rows
           if r["planner"] == planner and r["success"] and r["plan_length"] > 0 and r["expansions"] > 0]
    if len({L for L, _ in pts}) < 2:
        return math.nan
    x = np.log([L for L, _ in pts])
    y = np.log([e for _, e in pts])
    return float(np.polyfit(x, y, 1)[0])


def expansions_per_step(rows: list[dict], planner: str) -> float:
    vals = [r["expansions"] / r["plan_length"] for r in rows
            if r["planner"] == planner and r["success"] and r["plan_length"] > 0]
    return float(np.mean(vals)) if vals else math.nan


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def spearman(a, b) -> float:
    rho = spearmanr(a, b).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def run_embedding_diagnostics(global_metric, local_metric, dataset: TrajectoryDataset, g: TransitionGraph,
                              seed: int = 0, n_scatter: int = 5000, probe=None, heldout=None) -> dict:
    """Local-score scatter, embedding scatter, distillation Spearman and local accuracy."""
    from .local_metric import heldout_pairs, pair_accuracy, split_rollouts
    from .trainer import make_probe

    rng = np.random.default_rng([seed, 808])
    pos = dataset.positions.astype(np.float64)
    a = rng.integers(0, len(dataset), n_scatter)
    b = rng.integers(0, len(dataset), n_scatter)
    gt = np.hypot(*(pos[a] - pos[b]).T)
    score = local_metric.scores(dataset.observations[a], dataset.observations[b])
    local_scatter = [{"a": int(i), "b": int(j), "gt_distance": float(x), "score": float(s)}
                     for i, j, x, s in zip(a, b, gt, score)]

    z = global_metric.embed(dataset.flat)
    embedding_scatter = [{"id": i, **{f"z{j}": float(z[i, j]) for j in range(z.shape[1])},
                          "gt_x": float(pos[i, 0]), "gt_y": float(pos[i, 1])} for i in range(len(dataset))]

    probe = probe or make_probe(g, 1000, 50, seed)
    rho = probe.spearman(global_metric, dataset.flat, z)

    if heldout is None:
        _, held = split_rollouts(dataset, 0.1, seed)
        heldout = heldout_pairs(dataset, held, 2000, seed)
    accuracy = pair_accuracy(local_metric, dataset, heldout, 1.5)
    return {
        "local_scatter": local_scatter,
        "embedding_scatter": embedding_scatter,
        "spearman": rho,
        "local_accuracy": accuracy,
        "probe_pairs": int(len(probe.starts)),
    }
