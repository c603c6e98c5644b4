import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from plan2vec import plots

SVG = "{http://www.w3.org/2000/svg}"


def xml_point_count(svg_path):
    """Independent count: parse the SVG tree and count <use> elements under the points group."""
    root = ET.parse(svg_path).getroot()
    groups = [g for g in root.iter(f"{SVG}g") if g.get("id") == plots.POINTS_GID]
    assert len(groups) == 1
    return sum(1 for _ in groups[0].iter(f"{SVG}use"))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


@pytest.mark.parametrize("n", [1, 7, 250])
def test_embedding_points_match_rows(tmp_path, n):
    rng = np.random.default_rng(n)
    rows = [(i, *rng.normal(size=2), *rng.uniform(-1, 1, 2)) for i in range(n)]
    src = write_csv(tmp_path / "embedding.csv", ["id", "z0", "z1", "gt_x", "gt_y"], rows)
    out = plots.plot_csv(src)
    assert out == tmp_path / "embedding.svg"
    assert xml_point_count(out) == n == plots.count_points(out.read_text())


def test_local_scatter_points(tmp_path):
    rows = [(i, i + 1, 0.1 * i, 0.3 * i) for i in range(40)]
    src = write_csv(tmp_path / "local_scatter.csv", ["a", "b", "gt_distance", "score"], rows)
    out = plots.plot_csv(src, tmp_path / "s.svg")
    assert xml_point_count(out) == 40


def test_curves_and_bars_render(tmp_path):
    lk = write_csv(tmp_path / "lookahead_curve.csv",
                   ["method", "k", "rate", "successes", "tasks", "stderr", "ci_low", "ci_high", "mean_expansions"],
                   [("Plan2vecValue", k, 0.5, 10, 20, 0.1, 0.3, 0.7, 3.0) for k in (1, 2, 4)])
    pc = write_csv(tmp_path / "planning_cost.csv",
                   ["query_id", "planner", "plan_length", "cost", "steps", "expansions", "peak_frontier",
                    "suboptimality_ratio", "success"],
                   [(q, p, L, L, L, L * e, 1, 1.0, True) for q, L in enumerate((2, 4))
                    for p, e in (("dijkstra", 50), ("reactive_plan2vec", 1))])
    for src in (lk, pc):
        out = plots.plot_csv(src)
        ET.parse(out)  # well-formed
        assert out.read_text().lstrip().startswith("<?xml")


def test_output_is_byte_stable(tmp_path):
    src = write_csv(tmp_path / "embedding.csv", ["id", "z0", "z1", "gt_x", "gt_y"], [(0, 1, 2, 0.1, 0.2)])
    a = plots.plot_csv(src, tmp_path / "a.svg").read_bytes()
    b = plots.plot_csv(src, tmp_path / "b.svg").read_bytes()
    assert a == b


def test_kind_guessing():
    assert plots.guess_kind("x/embedding.csv") == "embedding"
    assert plots.guess_kind("planning_cost.csv") == "planning_cost"
    with pytest.raises(ValueError, match="cannot tell"):
        plots.guess_kind("results.csv")


def test_explicit_kind_overrides_name(tmp_path):
    src = write_csv(tmp_path / "mine.csv", ["id", "z0", "z1", "gt_x", "gt_y"], [(0, 1, 2, 0.1, 0.2)] * 3)
    assert xml_point_count(plots.plot_csv(src, tmp_path / "m.svg", kind="embedding")) == 3


def test_count_points_without_group():
    assert plots.count_points("<svg></svg>") == 0


def test_high_dimensional_embedding_is_projected(tmp_path):
    rng = np.random.default_rng(0)
    rows = [(i, *rng.normal(size=5), 0.0, 0.0) for i in range(30)]
    src = write_csv(tmp_path / "embedding.csv", ["id", *(f"z{j}" for j in range(5)), "gt_x", "gt_y"], rows)
    assert xml_point_count(plots.plot_csv(src)) == 30


def test_projection_preserves_planar_geometry():
    rng = np.random.default_rng(1)
    flat = rng.normal(size=(50, 2)) * [3.0, 1.0]
    basis, _ = np.linalg.qr(rng.normal(size=(6, 2)))
    z = flat @ basis.T + 5.0
    p = plots.project_2d(z)
    pd = lambda a: np.linalg.norm(a[:, None] - a[None], axis=-1)
    np.testing.assert_allclose(pd(p), pd(flat), atol=1e-9)
    np.testing.assert_array_equal(plots.project_2d(z[:, :1])[:, 1], 0.0)
