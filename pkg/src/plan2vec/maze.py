"""Top-down 2D navigation rooms and random-policy trajectory datasets.

The arena is the square ``[-1, 1]^2``. Obstacles are axis-aligned
rectangles. The agent is a point for collision purposes and a filled disk
when rendered. Ground-truth positions are stored alongside the images but
are meant for evaluation only.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .artifacts import SCHEMA_VERSION, ArtifactError, atomic_write_bytes, atomic_write_json, check_schema, read_json

ARENA = 1.0
CONTACT_EPS = 1e-3
DEFAULT_STEP = 0.1
DISK_RADIUS = 3.0 / 32.0  # 3 px at 64x64
SUPERSAMPLE_SAMPLES = 256  # sub-samples across the arena width, per axis
WALL_HALF_WIDTH = 0.125
# the camera sees one disk radius past the arena edge (drawn dark), so an agent
# pressed against the boundary is never clipped out of the image
VIEW_HALF_WIDTH = ARENA + DISK_RADIUS


class Rect(NamedTuple):
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax


@dataclass(frozen=True)
class MazeLayout:
    name: str
    obstacles: tuple[Rect, ...] = ()

    def __post_init__(self):
        for r in self.obstacles:
            if not (-ARENA <= r.xmin < r.xmax <= ARENA and -ARENA <= r.ymin < r.ymax <= ARENA):
                raise ValueError(f"obstacle {r} of layout {self.name!r} leaves the arena")

    def is_free(self, x: float, y: float) -> bool:
        if not (-ARENA <= x <= ARENA and -ARENA <= y <= ARENA):
            return False
        return not any(r.contains(x, y) for r in self.obstacles)


OPEN = MazeLayout("open")
TABLE = MazeLayout("table", (Rect(-0.4, -0.4, 0.4, 0.4),))
# wall along x = 0 from the bottom edge up to y = 0.5; the corridors join at the top
CMAZE = MazeLayout("c-maze", (Rect(-WALL_HALF_WIDTH, -1.0, WALL_HALF_WIDTH, 0.5),))

LAYOUTS = {"open": OPEN, "table": TABLE, "c-maze": CMAZE}
_ALIASES = {"cmaze": "c-maze", "c_maze": "c-maze", "wall": "c-maze"}


def get_layout(name: str) -> MazeLayout:
    key = name.lower()
    key = _ALIASES.get(key, key)
    if key not in LAYOUTS:
        raise ValueError(f"unknown layout {name!r}; choose from {sorted(LAYOUTS)}")
    return LAYOUTS[key]


class AgentState(NamedTuple):
    x: float
    y: float


class Observation(NamedTuple):
    pixels: np.ndarray
    id: int


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def _ray_rect_entry(x, y, dx, dy, r: Rect, length: float) -> float:
    """Parameter at which the segment first touches ``r``, or ``inf``."""
    t0, t1 = -math.inf, math.inf
    for p, d, lo, hi in ((x, dx, r.xmin, r.xmax), (y, dy, r.ymin, r.ymax)):
        if d == 0.0:
            if p < lo or p > hi:
                return math.inf
            continue
        a, b = (lo - p) / d, (hi - p) / d
        if a > b:
            a, b = b, a
        t0, t1 = max(t0, a), min(t1, b)
    if t0 > t1 or t1 < 0 or t0 > length:
        return math.inf
    return max(t0, 0.0)


def step(
    layout: MazeLayout,
    s: AgentState,
    direction: float,
    step_size: float = DEFAULT_STEP,
    eps: float = CONTACT_EPS,
) -> AgentState:
    """Move ``step_size`` along ``direction`` (radians), stopping short of the first contact."""
    if step_size <= 0:
        raise ValueError(f"step_size must be positive, got {step_size}")
    x, y = float(s[0]), float(s[1])
    dx, dy = math.cos(direction), math.sin(direction)
    contact = math.inf
    for p, d in ((x, dx), (y, dy)):
        if d > 0:
            contact = min(contact, (ARENA - p) / d)
        elif d < 0:
            contact = min(contact, (-ARENA - p) / d)
    for r in layout.obstacles:
        contact = min(contact, _ray_rect_entry(x, y, dx, dy, r, step_size))
    t = step_size if contact > step_size else max(0.0, contact - eps)
    nx, ny = x + t * dx, y + t * dy
    if not layout.is_free(nx, ny):
        return AgentState(x, y)
    return AgentState(nx, ny)


def sample_free_state(layout: MazeLayout, rng: np.random.Generator) -> AgentState:
    while True:
        x, y = rng.uniform(-ARENA, ARENA, size=2)
        if layout.is_free(x, y):
            return AgentState(float(x), float(y))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _sample_coords(resolution: int, supersample: int) -> np.ndarray:
    n = resolution * supersample
    # symmetric about 0 bit-exactly: u[k] == -u[n-1-k]
    return VIEW_HALF_WIDTH * (2.0 * np.arange(n) + 1.0 - n) / n


_BACKGROUND_CACHE: dict[tuple, np.ndarray] = {}


def default_supersample(resolution: int) -> int:
    return max(4, SUPERSAMPLE_SAMPLES // resolution)


def background(layout: MazeLayout, resolution: int, supersample: int | None = None) -> np.ndarray:
    supersample = supersample or default_supersample(resolution)
    key = (layout, resolution, supersample)
    if key not in _BACKGROUND_CACHE:
        u = _sample_coords(resolution, supersample)
        xs, ys = u[None, :], -u[:, None]
        blocked = (np.abs(xs) > ARENA) | (np.abs(ys) > ARENA)
        for r in layout.obstacles:
            blocked |= (xs >= r.xmin) & (xs <= r.xmax) & (ys >= r.ymin) & (ys <= r.ymax)
        cover = blocked.reshape(resolution, supersample, resolution, supersample).mean(axis=(1, 3))
        _BACKGROUND_CACHE[key] = (1.0 - cover).astype(np.float32)
    return _BACKGROUND_CACHE[key]


def render(
    layout: MazeLayout,
    s: AgentState,
    resolution: int = 64,
    disk_radius: float = DISK_RADIUS,
    supersample: int | None = None,
) -> np.ndarray:
    """Rasterise the room with the agent as a gray (0.5) disk; returns ``(res, res)`` floats.

    Obstacles and the band outside the arena are dark (0), free space light (1).
    """
    if resolution < 8:
        raise ValueError(f"resolution must be at least 8, got {resolution}")
    supersample = supersample or default_supersample(resolution)
    img = background(layout, resolution, supersample).copy()
    px, py = float(s[0]), float(s[1])
    u = _sample_coords(resolution, supersample)
    scale = resolution / (2 * VIEW_HALF_WIDTH)
    c0 = max(int(math.floor((px - disk_radius + VIEW_HALF_WIDTH) * scale)) - 1, 0)
    c1 = min(int(math.ceil((px + disk_radius + VIEW_HALF_WIDTH) * scale)) + 1, resolution)
    r0 = max(int(math.floor((VIEW_HALF_WIDTH - py - disk_radius) * scale)) - 1, 0)
    r1 = min(int(math.ceil((VIEW_HALF_WIDTH - py + disk_radius) * scale)) + 1, resolution)
    if c0 >= c1 or r0 >= r1:
        return img
    xs = u[c0 * supersample : c1 * supersample][None, :]
    ys = -u[r0 * supersample : r1 * supersample][:, None]
    inside = (xs - px) ** 2 + (ys - py) ** 2 <= disk_radius**2
    cover = inside.reshape(r1 - r0, supersample, c1 - c0, supersample).mean(axis=(1, 3))
    patch = img[r0:r1, c0:c1]
    img[r0:r1, c0:c1] = (patch * (1.0 - cover) + 0.5 * cover).astype(np.float32)
    return img


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryDataset:
    layout: str
    resolution: int
    observations: np.ndarray  # (N, H, W) float32
    rollouts: list[tuple[int, int]]  # (start, length)
    positions: np.ndarray  # (N, 2) float32, evaluation only
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.observations)
        if len(self.positions) != n:
            raise ValueError("positions and observations differ in length")
        cursor = 0
        for start, length in self.rollouts:
            if start != cursor or length < 1:
                raise ValueError(f"rollout span ({start}, {length}) breaks contiguity")
            cursor += length
        if cursor != n:
            raise ValueError(f"rollout spans cover {cursor} of {n} observations")

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def flat(self) -> np.ndarray:
        return self.observations.reshape(len(self), -1)

    def observation(self, i: int) -> Observation:
        return Observation(self.observations[i], int(i))

    def rollout_of(self) -> np.ndarray:
        """Rollout index for every observation."""
        out = np.empty(len(self), dtype=np.int64)
        for r, (start, length) in enumerate(self.rollouts):
            out[start : start + length] = r
        return out

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(directory / "observations.f32", self.observations.astype("<f4").tobytes())
        atomic_write_bytes(directory / "positions.f32", self.positions.astype("<f4").tobytes())
        atomic_write_json(directory / "rollouts.json", [list(r) for r in self.rollouts])
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "layout": self.layout,
            "resolution": self.resolution,
            "n_observations": len(self),
            "positions_evaluation_only": True,
            **self.meta,
        }
        atomic_write_json(directory / "manifest.json", manifest)

    @classmethod
    def load(cls, directory: str | Path) -> "TrajectoryDataset":
        directory = Path(directory)
        manifest = read_json(directory / "manifest.json", "dataset manifest")
        check_schema(manifest, directory / "manifest.json")
        res = manifest["resolution"]
        n = manifest["n_observations"]
        obs = np.fromfile(directory / "observations.f32", dtype="<f4")
        if obs.size != n * res * res:
            raise ArtifactError(f"{directory / 'observations.f32'} has the wrong size", directory)
        pos = np.fromfile(directory / "positions.f32", dtype="<f4").reshape(n, 2)
        spans = [tuple(s) for s in json.loads((directory / "rollouts.json").read_text())]
        meta = {
            k: v
            for k, v in manifest.items()
            if k not in {"schema_version", "layout", "resolution", "n_observations", "positions_evaluation_only"}
        }
        return cls(manifest["layout"], res, obs.reshape(n, res, res).astype(np.float32), spans, pos, meta)


def _rollout_states(args) -> list[AgentState]:
    layout, horizon, seed, index, step_size = args
    rng = np.random.default_rng([seed, index])
    s = sample_free_state(layout, rng)
    states = [s]
    for _ in range(horizon):
        s = step(layout, s, rng.uniform(0.0, 2.0 * math.pi), step_size)
        states.append(s)
    return states


def generate_rollouts(
    layout: MazeLayout,
    n_rollouts: int = 1000,
    horizon: int = 10,
    n_policies: int = 20,
    seed: int = 0,
    resolution: int = 64,
    step_size: float = DEFAULT_STEP,
    workers: int = 1,
) -> TrajectoryDataset:
    """Uniform-random-direction rollouts of ``horizon`` steps (``horizon + 1`` frames each).

    Each rollout draws from its own generator seeded by ``(seed, index)``, so
    the result does not depend on ``workers``. Rollouts are assigned to
    ``n_policies`` policies in contiguous blocks; the assignment is recorded
    in the metadata only.
    """
    if n_rollouts < 1 or horizon < 2:
        raise ValueError("need n_rollouts >= 1 and horizon >= 2")
    if n_policies < 1:
        raise ValueError("need n_policies >= 1")
    jobs = [(layout, horizon, seed, r, step_size) for r in range(n_rollouts)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            all_states = list(pool.map(_rollout_states, jobs, chunksize=16))
    else:
        all_states = [_rollout_states(j) for j in jobs]

    per_policy = math.ceil(n_rollouts / n_policies)
    states = [s for rollout in all_states for s in rollout]
    positions = np.array(states, dtype=np.float32).reshape(-1, 2)
    observations = np.stack([render(layout, s, resolution) for s in states]).astype(np.float32)
    spans = [(r * (horizon + 1), horizon + 1) for r in range(n_rollouts)]
    meta = {
        "n_rollouts": n_rollouts,
        "horizon": horizon,
        "n_policies": n_policies,
        "policy_of_rollout": [r // per_policy for r in range(n_rollouts)],
        "seed": seed,
        "step_size": step_size,
    }
    return TrajectoryDataset(layout.name, resolution, observations, spans, positions, meta)


def free_space_grid(layout: MazeLayout, n: int = 64) -> np.ndarray:
    """Boolean ``(n, n)`` grid of free cell centres."""
    c = (2.0 * np.arange(n) + 1.0 - n) / n
    free = np.ones((n, n), dtype=bool)
    xs, ys = c[None, :], -c[:, None]
    for r in layout.obstacles:
        free &= ~((xs >= r.xmin) & (xs <= r.xmax) & (ys >= r.ymin) & (ys <= r.ymax))
    return free


def n_free_components(layout: MazeLayout, n: int = 64) -> int:
    _, count = ndimage.label(free_space_grid(layout, n))
    return int(count)
