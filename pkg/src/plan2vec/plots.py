"""SVG figures rendered from the CSV artifacts.

Every scatter keeps its markers inside a ``<g id="points">`` group with one
``<use>`` element per point, so the point count of an emitted figure can be
checked by parsing the SVG.
"""
from __future__ import annotations

import csv
import io
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .artifacts import atomic_write_text  # noqa: E402

POINTS_GID = "points"
KINDS = ("embedding", "lookahead", "planning_cost", "local_scatter")

plt.rcParams["svg.hashsalt"] = "plan2vec"  # stable element ids across runs
plt.rcParams["svg.fonttype"] = "none"


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def guess_kind(path: str | Path) -> str:
    name = Path(path).name
    for stem, kind in (("embedding", "embedding"), ("lookahead", "lookahead"),
                       ("planning_cost", "planning_cost"), ("local_scatter", "local_scatter")):
        if name.startswith(stem):
            return kind
    raise ValueError(f"cannot tell what to plot from {name!r}; pass one of {KINDS}")


def _save(fig, path: str | Path) -> None:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    atomic_write_text(path, buf.getvalue())


def _scatter(ax, x, y, **kw):
    pts = ax.scatter(x, y, **kw)
    pts.set_gid(POINTS_GID)
    return pts


def project_2d(z: np.ndarray) -> np.ndarray:
    """First two principal components (latents of dimension <= 2 are returned padded, unrotated)."""
    if z.shape[1] <= 2:
        return np.pad(z, ((0, 0), (0, 2 - z.shape[1])))
    centred = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    proj = centred @ vt[:2].T
    # fix the sign of each component so the picture does not flip between runs
    flip = np.sign(proj[np.argmax(np.abs(proj), axis=0), [0, 1]])
    return proj * np.where(flip == 0, 1.0, flip)


def plot_embedding(rows: list[dict], path) -> None:
    zcols = sorted((c for c in rows[0] if c.startswith("z") and c[1:].isdigit()), key=lambda c: int(c[1:])) if rows else []
    z = np.array([[float(r[c]) for c in zcols] for r in rows]).reshape(len(rows), len(zcols))
    z = project_2d(z)
    gt = np.array([[float(r["gt_x"]), float(r["gt_y"])] for r in rows]).reshape(-1, 2)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.2))
    colour = np.arctan2(gt[:, 1], gt[:, 0])
    _scatter(axes[0], z[:, 0], z[:, 1], c=colour, s=2, cmap="hsv", linewidths=0)
    axes[0].set_title("learned embedding" if len(zcols) <= 2 else f"learned embedding (top-2 PCA of {len(zcols)}-d)")
    axes[0].set_aspect("equal", adjustable="datalim")
    axes[1].scatter(gt[:, 0], gt[:, 1], c=colour, s=2, cmap="hsv", linewidths=0)
    axes[1].set_title("ground-truth position (colour key)")
    axes[1].set_aspect("equal")
    _save(fig, path)


def plot_lookahead(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for method in sorted({r["method"] for r in rows}):
        sub = sorted((r for r in rows if r["method"] == method), key=lambda r: int(r["k"]))
        k = [int(r["k"]) for r in sub]
        rate = np.array([float(r["rate"]) for r in sub])
        lo = np.array([float(r["ci_low"]) for r in sub])
        hi = np.array([float(r["ci_high"]) for r in sub])
        ax.errorbar(k, rate, yerr=[rate - lo, hi - rate], marker="o", capsize=3, label=method)
    ax.set_xlabel("lookahead depth k")
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_planning_cost(rows: list[dict], path) -> None:
    ok = [r for r in rows if r["success"] in ("True", "true", "1")]
    planners = sorted({r["planner"] for r in ok})
    lengths = sorted({int(r["plan_length"]) for r in ok})
    fig, ax = plt.subplots(figsize=(6, 3.8))
    width = 0.8 / max(len(planners), 1)
    for i, name in enumerate(planners):
        means = []
        for L in lengths:
            vals = [float(r["expansions"]) / L for r in ok if r["planner"] == name and int(r["plan_length"]) == L]
            means.append(np.mean(vals) if vals else 0.0)
        ax.bar(np.arange(len(lengths)) + i * width, means, width, label=name)
    ax.set_xticks(np.arange(len(lengths)) + 0.4 - width / 2, [str(L) for L in lengths])
    ax.set_yscale("log")
    ax.set_xlabel("optimal plan length (edges)")
    ax.set_ylabel("expansions per plan step")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_local_scatter(rows: list[dict], path, threshold: float = 1.5) -> None:
    gt = [float(r["gt_distance"]) for r in rows]
    sc = [float(r["score"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    _scatter(ax, gt, sc, s=2, alpha=0.4, linewidths=0)
    ax.axhline(threshold, color="red", lw=0.8)
    ax.set_xlabel("ground-truth distance")
    ax.set_ylabel("local metric score")
    _save(fig, path)


PLOTTERS = {
    "embedding": plot_embedding,
    "lookahead": plot_lookahead,
    "planning_cost": plot_planning_cost,
    "local_scatter": plot_local_scatter,
}


def plot_csv(csv_path: str | Path, svg_path: str | Path | None = None, kind: str | None = None) -> Path:
    kind = kind or guess_kind(csv_path)
    if kind not in PLOTTERS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {KINDS}")
    svg_path = Path(svg_path) if svg_path else Path(csv_path).with_suffix(".svg")
    PLOTTERS[kind](read_csv(csv_path), svg_path)
    return svg_path


def count_points(svg_text: str) -> int:
    """Number of markers inside the ``points`` group of an SVG figure."""
    m = re.search(rf'<g id="{POINTS_GID}"[^>]*>(.*?)</g>\s*</g>', svg_text, flags=re.S)
    if m is None:
        m = re.search(rf'<g id="{POINTS_GID}"[^>]*>(.*?)</g>', svg_text, flags=re.S)
    if m is None:
        return 0
    return len(re.findall(r"<use\b", m.group(1)))
