"""Command-line pipeline driver.

Every stage reads its inputs from, and writes its artifacts into, one run
directory. The run's flat JSON config is saved there before any stage runs,
and each stage appends a record (duration, input and output hashes) to
``run.jsonl``.

Exit codes: 0 success, 2 precondition failure (missing or mismatched
artifacts, bad arguments), 1 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import evaluation as ev
from . import graph as graph_mod
from . import local_metric as lm
from . import maze, plots
from . import trainer as tr
from .artifacts import (SCHEMA_VERSION, ArtifactError, atomic_write_json, atomic_write_text, config_hash,
                        dir_sha256, file_sha256, read_json)

log = logging.getLogger("plan2vec")

OUTPUT_ROOT_ENV = "PLAN2VEC_OUTPUT_ROOT"

# fields that change where or how fast a run executes, not what it computes
_UNHASHED = {"out", "workers"}


@dataclass
class RunConfig:
    layout: str = "c-maze"
    resolution: int = 16
    # dataset
    n_rollouts: int = 1000
    horizon: int = 10
    n_policies: int = 20
    step_size: float = maze.DEFAULT_STEP
    # local metric
    lm_objective: str = "regression"
    lm_variant: str = lm.SIAMESE
    lm_epochs: int = 40
    lm_lr: float = 1e-3
    lm_embed_dim: int = 32
    lm_hinge_far: bool = True
    lm_k_negatives: int = 4
    d0: float = graph_mod.DEFAULT_D0
    # global metric
    mode: str = tr.AMORTIZED
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
    amortized_targets: str = "path"
    latent_dim: int = 8
    p: float = 2.0
    # evaluation
    eval_tasks: int = 200
    eval_k: int = 1
    frontier_cap: int = 1
    success_radius: float = 0.15
    step_budget: int = 50
    lookahead_ks: list[int] = field(default_factory=lambda: [1, 2, 4])
    cost_lengths: list[int] = field(default_factory=lambda: [2, 4, 6, 8, 12, 16])
    cost_queries: int = 8
    seed: int = 0
    workers: int = 1
    out: str = ""

    def hashed(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if k not in _UNHASHED}

    @property
    def hash(self) -> str:
        return config_hash(self.hashed())

    def local_metric_config(self) -> lm.LocalMetricConfig:
        return lm.LocalMetricConfig(epochs=self.lm_epochs, lr=self.lm_lr, variant=self.lm_variant,
                                    embed_dim=self.lm_embed_dim, threshold=self.d0, hinge_far=self.lm_hinge_far,
                                    k_negatives=self.lm_k_negatives, seed=self.seed)

    def train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(mode=self.mode, iterations=self.iterations, batch_rollouts=self.batch_rollouts,
                              steps_per_rollout=self.steps_per_rollout, opt_epochs=self.opt_epochs,
                              minibatch=self.minibatch, lr=self.lr, target_scale=self.target_scale,
                              lookahead=self.lookahead, step_limit=self.step_limit,
                              target_sync_interval=self.target_sync_interval, goal_pool=self.goal_pool,
                              targets=self.amortized_targets,
                              latent_dim=self.latent_dim, p=self.p, seed=self.seed)


CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional(conv):
    return lambda text: None if text.lower() in ("none", "null", "") else conv(text)


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


_CONVERTERS = {
    "bool": _parse_bool, "int": int, "float": float, "str": str,
    "float | None": _optional(float), "int | None": _optional(int), "list[int]": _int_list,
}


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    parser.add_argument("--config", help="flat JSON config; flags given on the command line override it")
    for name, f in CONFIG_FIELDS.items():
        if name == "out":
            continue
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, type=_CONVERTERS[str(f.type)],
                            default=None, metavar=str(f.type).split(" ")[0].upper())
    parser.add_argument("--out", dest="out", default=None,
                        help=f"run directory (default: ${OUTPUT_ROOT_ENV} or ./runs, plus <layout>-seed<seed>)")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < saved run config < ``--config`` file < explicit flags."""
    values: dict = {}
    if args.config:
        values.update(read_json(args.config, "config file"))
    flags = {k: getattr(args, k) for k in CONFIG_FIELDS if getattr(args, k, None) is not None}
    out = flags.get("out") or values.get("out")
    if out:
        saved = Path(out) / "config.json"
        if saved.exists():
            values = {**json.loads(saved.read_text()), **values}
    values.update(flags)
    unknown = set(values) - set(CONFIG_FIELDS) - {"schema_version", "config_hash"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    values = {k: v for k, v in values.items() if k in CONFIG_FIELDS}
    cfg = RunConfig(**values)
    if not cfg.out:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        cfg.out = str(Path(root) / f"{maze.get_layout(cfg.layout).name}-seed{cfg.seed}")
    maze.get_layout(cfg.layout)  # validate early
    return cfg


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.out)

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    data = property(lambda self: self.path("data"))
    local = property(lambda self: self.path("local_metric"))
    graph = property(lambda self: self.path("graph"))
    model = property(lambda self: self.path("plan2vec"))

    def save_config(self) -> None:
        atomic_write_json(self.path("config.json"),
                          {**dataclasses.asdict(self.cfg), "schema_version": SCHEMA_VERSION,
                           "config_hash": self.cfg.hash})

    def require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise ArtifactError(f"{what} not found: expected {path} (run the producing stage first)", path)
        return path

    def record(self, stage: str, started: float, inputs: list[Path], outputs: list[Path]) -> None:
        def digest(p: Path) -> str:
            return dir_sha256(p) if p.is_dir() else file_sha256(p)

        rec = {
            "stage": stage,
            "duration_s": round(time.time() - started, 3),
            "config_hash": self.cfg.hash,
            "inputs": {str(p.relative_to(self.dir)): digest(p) for p in inputs if p.exists()},
            "outputs": {str(p.relative_to(self.dir)): digest(p) for p in outputs if p.exists()},
        }
        path = self.path("run.jsonl")
        prev = path.read_text() if path.exists() else ""
        atomic_write_text(path, prev + json.dumps(rec, sort_keys=True) + "\n")

    def provenance(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "config_hash": self.cfg.hash}


def _csv_text(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_gen_data(run: Run) -> None:
    cfg, t0 = run.cfg, time.time()
    layout = maze.get_layout(cfg.layout)
    ds = maze.generate_rollouts(layout, cfg.n_rollouts, cfg.horizon, cfg.n_policies, cfg.seed, cfg.resolution,
                                cfg.step_size, workers=cfg.workers)
    ds.meta.update(run.provenance())
    ds.save(run.data)
    log.info("dataset: %d observations in %d rollouts", len(ds), len(ds.rollouts))
    run.record("gen-data", t0, [], [run.data])


def _load_dataset(run: Run) -> maze.TrajectoryDataset:
    run.require(run.data / "manifest.json", "dataset manifest")
    return maze.TrajectoryDataset.load(run.data)


def stage_train_local(run: Run) -> None:
    cfg, t0 = run.cfg, time.time()
    ds = _load_dataset(run)
    metrics = run.local / "local_metric_metrics.jsonl"
    fn = lm.train_local_metric_nce if cfg.lm_objective == "nce" else lm.train_local_metric
    if cfg.lm_objective not in ("regression", "nce"):
        raise ValueError(f"unknown local-metric objective {cfg.lm_objective!r}")
    res = fn(ds, cfg.local_metric_config(), metrics)
    res.metric.save(run.local)
    meta = read_json(run.local / "model.json")
    meta.update({**run.provenance(), "heldout_accuracy": res.heldout_accuracy,
                 "train_config": lm.config_dict(cfg.local_metric_config())})
    atomic_write_json(run.local / "model.json", meta)
    log.info("local metric held-out accuracy %.4f", res.heldout_accuracy)
    run.record("train-local", t0, [run.data], [run.local])


def stage_build_graph(run: Run) -> None:
    cfg, t0 = run.cfg, time.time()
    ds = _load_dataset(run)
    run.require(run.local / "model.json", "local metric checkpoint")
    metric = lm.LocalMetric.load(run.local)
    g = graph_mod.build_graph(ds, metric, cfg.d0)
    g.save(run.graph)
    header = read_json(run.graph / "graph.json")
    atomic_write_json(run.graph / "graph.json", {**header, **run.provenance()})
    log.info("graph: %d vertices, %s", g.n_vertices, g.counts_by_origin())
    run.record("build-graph", t0, [run.data, run.local], [run.graph])


def _load_graph(run: Run) -> graph_mod.TransitionGraph:
    run.require(run.graph / "graph.json", "graph artifact graph.json")
    return graph_mod.TransitionGraph.load(run.graph)


def stage_train_plan2vec(run: Run) -> None:
    cfg, t0 = run.cfg, time.time()
    g = _load_graph(run)
    ds = _load_dataset(run)
    res = tr.train(g, ds, cfg.train_config(), run.model / "plan2vec_metrics.jsonl")
    res.metric.save(run.model)
    meta = read_json(run.model / "model.json")
    meta.update({**run.provenance(), "train_config": cfg.train_config().to_dict(),
                 "final_spearman": res.final_spearman})
    atomic_write_json(run.model / "model.json", meta)
    log.info("plan2vec final Spearman %.4f", res.final_spearman)
    run.record("train-plan2vec", t0, [run.data, run.graph], [run.model])


def _load_global(run: Run) -> tr.GlobalMetric:
    run.require(run.model / "model.json", "plan2vec checkpoint")
    return tr.GlobalMetric.load(run.model)


def stage_export_embedding(run: Run) -> None:
    t0 = time.time()
    ds = _load_dataset(run)
    m = _load_global(run)
    atomic_write_text(run.path("embedding.csv"), tr.embedding_csv(tr.export_embedding(m, ds), m.latent_dim))
    run.record("export-embedding", t0, [run.data, run.model], [run.path("embedding.csv")])


def stage_evaluate(run: Run) -> None:
    cfg, t0 = run.cfg, time.time()
    ds = _load_dataset(run)
    g = _load_graph(run)
    m = _load_global(run)
    run.require(run.local / "model.json", "local metric checkpoint")
    local = lm.LocalMetric.load(run.local)
    values = ev.ValueFunctions(g, ds, m, local)
    tasks = ev.sample_tasks(g, ds, cfg.eval_tasks, cfg.seed, success_radius=cfg.success_radius,
                            step_budget=cfg.step_budget)
    report = ev.run_success_eval(g, ds, list(ev.METHODS), k=cfg.eval_k, seed=cfg.seed,
                                 frontier_cap=cfg.frontier_cap, tasks=tasks, values=values)
    curve = []
    for method in (ev.PLAN2VEC, ev.LOCAL_GREEDY):
        for k in cfg.lookahead_ks:
            r = ev.run_success_eval(g, ds, [method], k=k, seed=cfg.seed, frontier_cap=cfg.frontier_cap,
                                    tasks=tasks, values=values).methods[method]
            curve.append({"method": method, "k": k, "rate": r.rate, "successes": r.successes, "tasks": r.tasks,
                          "stderr": r.stderr, "ci_low": r.ci_low, "ci_high": r.ci_high,
                          "mean_expansions": r.mean_expansions})
    atomic_write_text(run.path("lookahead_curve.csv"), _csv_text(curve, list(curve[0])))

    _, held = lm.split_rollouts(ds, lm.LocalMetricConfig().holdout_fraction, cfg.seed)
    diag = ev.run_embedding_diagnostics(m, local, ds, g, cfg.seed,
                                        heldout=lm.heldout_pairs(ds, held, lm.LocalMetricConfig().eval_pairs,
                                                                 cfg.seed))
    ddir = run.path("diagnostics")
    atomic_write_text(ddir / "local_scatter.csv", _csv_text(diag["local_scatter"], list(diag["local_scatter"][0])))
    atomic_write_text(ddir / "embedding_scatter.csv",
                      _csv_text(diag["embedding_scatter"], list(diag["embedding_scatter"][0])))
    out = {
        **run.provenance(),
        "success": report.to_dict(),
        "lookahead_curve": curve,
        "spearman": diag["spearman"],
        "local_accuracy": diag["local_accuracy"],
        "probe_pairs": diag["probe_pairs"],
    }
    atomic_write_json(run.path("eval_report.json"), out)
    for name, r in report.methods.items():
        log.info("%-18s success %.3f [%.3f, %.3f]", name, r.rate, r.ci_low, r.ci_high)
    run.record("evaluate", t0, [run.data, run.graph, run.model, run.local],
               [run.path("eval_report.json"), run.path("lookahead_curve.csv"), ddir])


COST_COLUMNS = ["query_id", "planner", "plan_length", "cost", "steps", "expansions", "peak_frontier",
                "suboptimality_ratio", "success"]


def stage_plan_cost(run: Run) -> None:
    cfg, t0 = run.cfg, time.time()
    ds = _load_dataset(run)
    g = _load_graph(run)
    m = _load_global(run)
    rows = ev.run_planning_cost(g, ds, list(ev.PLANNERS), cfg.cost_lengths, cfg.cost_queries, cfg.seed, m)
    atomic_write_text(run.path("planning_cost.csv"), _csv_text(rows, COST_COLUMNS))
    exponents = {p: ev.scaling_exponent(rows, p) for p in ev.PLANNERS}
    per_step = {p: ev.expansions_per_step(rows, p) for p in ev.PLANNERS}
    for p in ev.PLANNERS:
        log.info("%-18s exponent %.3f  expansions/step %.2f", p, exponents[p], per_step[p])
    finite = lambda d: {k: (v if math.isfinite(v) else None) for k, v in d.items()}  # JSON has no NaN
    atomic_write_json(run.path("planning_cost_summary.json"),
                      {**run.provenance(), "exponents": finite(exponents), "expansions_per_step": finite(per_step)})
    run.record("plan-cost", t0, [run.data, run.graph, run.model],
               [run.path("planning_cost.csv"), run.path("planning_cost_summary.json")])


PLOT_SOURCES = ["embedding.csv", "lookahead_curve.csv", "planning_cost.csv", "diagnostics/local_scatter.csv"]


def stage_plot(run: Run, csv_paths: list[str] | None = None, output: str | None = None, kind: str | None = None):
    t0 = time.time()
    if csv_paths:
        if output and len(csv_paths) > 1:
            raise ValueError("--output needs exactly one CSV")
        made = []
        for p in csv_paths:
            if not Path(p).exists():
                raise ArtifactError(f"CSV not found: expected {p}", p)
            made.append(plots.plot_csv(p, output, kind))
        return made
    made = []
    for name in PLOT_SOURCES:
        src = run.path(name)
        if src.exists():
            made.append(plots.plot_csv(src, run.path("plots", Path(name).with_suffix(".svg").name)))
    if not made:
        raise ArtifactError(f"no CSV artifacts to plot under {run.dir}", run.dir)
    run.record("plot", t0, [run.path(n) for n in PLOT_SOURCES], made)
    return made


PIPELINE = [
    ("gen-data", stage_gen_data),
    ("train-local", stage_train_local),
    ("build-graph", stage_build_graph),
    ("train-plan2vec", stage_train_plan2vec),
    ("export-embedding", stage_export_embedding),
    ("evaluate", stage_evaluate),
    ("plan-cost", stage_plan_cost),
    ("plot", stage_plot),
]
STAGES = dict(PIPELINE)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plan2vec", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, _ in PIPELINE:
        p = sub.add_parser(name)
        add_config_flags(p)
        if name == "plot":
            p.add_argument("csv", nargs="*", help="CSV files to plot (default: every CSV artifact of the run)")
            p.add_argument("--output", help="SVG path (single CSV only)")
            p.add_argument("--kind", choices=plots.KINDS)
    p = sub.add_parser("pipeline", help="run every stage in order")
    add_config_flags(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        run = Run(cfg)
        if args.command == "plot" and args.csv:
            for p in stage_plot(run, args.csv, args.output, args.kind):
                print(p)
            return 0
        run.save_config()
        stages = PIPELINE if args.command == "pipeline" else [(args.command, STAGES[args.command])]
        for name, fn in stages:
            log.info("stage %s", name)
            fn(run)
        print(run.dir)
        return 0
    except (ArtifactError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
