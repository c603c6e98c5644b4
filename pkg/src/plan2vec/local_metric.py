"""One-step reachability distance learned from in-trajectory context.

Pairs are labelled with a nominal distance: 0 for an observation paired with
itself, 1 for consecutive frames of a rollout and 2 for two frames drawn
at random from the dataset. The default model is a Siamese MLP whose
distance is the l2 norm between embeddings, so ``d(x, x) = 0`` and
symmetry hold by construction.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .artifacts import atomic_write_text
from .maze import TrajectoryDataset
from .nn import MLP, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

SIAMESE = "siamese"
TRUNK = "trunk"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PairBatch:
    anchor: np.ndarray  # dataset indices
    other: np.ndarray
    label: np.ndarray  # 0, 1 or 2

    def __len__(self) -> int:
        return len(self.label)


@dataclass
class LocalMetricConfig:
    epochs: int = 40
    lr: float = 1e-4
    ratio: tuple[int, int, int] = (1, 1, 2)
    batch: int = 32
    variant: str = SIAMESE
    hidden: tuple[int, ...] = (256, 128)
    embed_dim: int = 32
    threshold: float = 1.5
    hinge_far: bool = False
    k_negatives: int = 4
    holdout_fraction: float = 0.1
    eval_pairs: int = 2000
    seed: int = 0


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class LocalMetric:
    """Pairwise scorer ``d(a, b) >= 0`` over flattened observations."""

    def __init__(self, resolution: int, variant: str = SIAMESE, hidden=(256, 128), embed_dim: int = 32,
                 threshold: float = 1.5, seed: int = 0, net: MLP | None = None):
        if variant not in (SIAMESE, TRUNK):
            raise ValueError(f"unknown local metric variant {variant!r}")
        self.resolution = resolution
        self.variant = variant
        self.threshold = threshold
        dim = resolution * resolution
        if net is not None:
            self.net = net
        elif variant == SIAMESE:
            self.net = MLP([dim, *hidden, embed_dim], seed=seed)
        else:
            self.net = MLP([2 * dim, *hidden, 1], seed=seed, final_activation="softplus")

    @property
    def parameters(self) -> list[ad.Tensor]:
        return self.net.parameters

    def _flat(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim >= 2 and x.shape[-2:] == (self.resolution, self.resolution):
            return x.reshape(*x.shape[:-2], -1)
        if x.shape[-1] != self.resolution * self.resolution:
            raise ValueError(
                f"observation shape {x.shape} does not match metric resolution {self.resolution}"
            )
        return x

    def distance(self, a: np.ndarray, b: np.ndarray) -> ad.Tensor:
        """Differentiable distances for batches ``a`` and ``b``."""
        a, b = self._flat(a), self._flat(b)
        if self.variant == SIAMESE:
            za = self.net(ad.Tensor(a))
            zb = self.net(ad.Tensor(b))
            return ad.lp_norm(za - zb, 2.0)
        out = self.net(ad.Tensor(np.concatenate([a, b], axis=-1)))
        return ad.reshape(out, (-1,))

    def encode(self, x: np.ndarray) -> np.ndarray:
        if self.variant != SIAMESE:
            raise TypeError("only the Siamese local metric has an embedding")
        return self.net.forward_numpy(self._flat(x))

    def scores(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Tape-free ``d`` for aligned batches."""
        if self.variant == SIAMESE:
            return _rowwise_l2(self.encode(a), self.encode(b))
        return self.net.forward_numpy(np.concatenate([self._flat(a), self._flat(b)], axis=-1))[:, 0]

    def scorer(self, observations: np.ndarray) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        """Block scorer over a fixed observation set; embeddings are computed once."""
        flat = self._flat(observations)
        if self.variant == SIAMESE:
            z = self.encode(flat).astype(np.float64)

            def block(rows, cols):
                return cdist(z[rows], z[cols]).astype(np.float32)

            return block

        def block(rows, cols):
            rows, cols = np.atleast_1d(np.arange(len(flat))[rows]), np.atleast_1d(np.arange(len(flat))[cols])
            a = np.repeat(flat[rows], len(cols), axis=0)
            b = np.tile(flat[cols], (len(rows), 1))
            return self.scores(a, b).reshape(len(rows), len(cols))

        return block

    def save(self, directory: str | Path) -> None:
        save_checkpoint(directory, self.net, {
            "kind": "local_metric",
            "variant": self.variant,
            "resolution": self.resolution,
            "threshold": self.threshold,
            "p": 2.0,
            "latent_dim": self.net.sizes[-1] if self.variant == SIAMESE else None,
        })

    @classmethod
    def load(cls, directory: str | Path) -> "LocalMetric":
        net, meta = load_checkpoint(directory)
        return cls(meta["resolution"], meta["variant"], threshold=meta["threshold"], net=net)


def _rowwise_l2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    return np.sqrt((diff * diff).sum(axis=-1))


def local_distance(metric: LocalMetric, a, b) -> float:
    """Score a single pair of observations (pixel arrays or ``Observation`` tuples)."""
    a = getattr(a, "pixels", a)
    b = getattr(b, "pixels", b)
    a, b = np.asarray(a), np.asarray(b)
    for x in (a, b):
        if x.shape[-2:] != (metric.resolution, metric.resolution):
            raise ValueError(
                f"observation of shape {x.shape} does not match metric resolution {metric.resolution}"
            )
    return float(metric.scores(a[None], b[None])[0])


# ---------------------------------------------------------------------------
# pair sampling
# ---------------------------------------------------------------------------

def split_rollouts(dataset: TrajectoryDataset, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (train, held-out) rollout index arrays."""
    n = len(dataset.rollouts)
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_hold = max(1, int(round(holdout_fraction * n))) if n > 1 else 0
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def _ratio_counts(ratio, batch: int) -> list[int]:
    total = sum(ratio)
    if total <= 0 or any(r < 0 for r in ratio):
        raise ValueError(f"invalid ratio {ratio}")
    if batch < total:
        raise ValueError(f"batch {batch} is smaller than the ratio sum {total}")
    counts = [batch * r // total for r in ratio]
    last = max(i for i, r in enumerate(ratio) if r > 0)
    counts[last] += batch - sum(counts)
    return counts


def sample_pairs(dataset: TrajectoryDataset, ratio=(1, 1, 2), batch: int = 32, seed=0,
                 rollout_ids: np.ndarray | None = None) -> PairBatch:
    """Draw ``batch`` labelled pairs in the proportions given by ``ratio``.

    ``seed`` may be an int or a ``numpy.random.Generator``. Far pairs are two
    uniform draws from the selected rollouts; accidental near pairs are kept.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_same, n_next, n_far = _ratio_counts(ratio, batch)
    if rollout_ids is None:
        rollout_ids = np.arange(len(dataset.rollouts))
    if len(dataset.rollouts) < 2 and n_far:
        raise ValueError("far-pair sampling needs at least two rollouts")
    spans = np.asarray(dataset.rollouts)[rollout_ids]
    starts, lengths = spans[:, 0], spans[:, 1]
    pool = np.concatenate([np.arange(s, s + n) for s, n in spans])

    same = rng.choice(pool, size=n_same)
    r = rng.integers(0, len(spans), size=n_next)
    t = starts[r] + (rng.random(n_next) * (lengths[r] - 1)).astype(np.int64)
    swap = rng.random(n_next) < 0.5
    na, nb = np.where(swap, t + 1, t), np.where(swap, t, t + 1)
    fa, fb = rng.choice(pool, size=n_far), rng.choice(pool, size=n_far)

    return PairBatch(
        anchor=np.concatenate([same, na, fa]).astype(np.int64),
        other=np.concatenate([same, nb, fb]).astype(np.int64),
        label=np.concatenate([np.zeros(n_same), np.ones(n_next), np.full(n_far, 2.0)]).astype(np.float32),
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def regression_loss(d: ad.Tensor, label: np.ndarray, hinge_far: bool = False) -> ad.Tensor:
    """Sum over classes of the mean smooth-L1 between ``d`` and the nominal distance."""
    terms = []
    for c in (0.0, 1.0, 2.0):
        idx = np.flatnonzero(label == c)
        if idx.size == 0:
            continue
        dc = ad.getitem(d, idx)
        if c == 2.0 and hinge_far:
            # only distances below the far label are penalised
            terms.append(ad.smooth_l1(ad.relu(ad.sub(np.full(idx.size, c, np.float32), dc)),
                                      np.zeros(idx.size, np.float32)))
        else:
            terms.append(ad.smooth_l1(dc, np.full(idx.size, c, np.float32)))
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss


def heldout_pairs(dataset: TrajectoryDataset, rollout_ids: np.ndarray, n_pairs: int, seed: int) -> PairBatch:
    """Balanced neighbour / far pairs for accuracy evaluation."""
    return sample_pairs(dataset, (0, 1, 1), max(2, n_pairs), np.random.default_rng([seed, 11]), rollout_ids)


def pair_accuracy(metric: LocalMetric, dataset: TrajectoryDataset, pairs: PairBatch,
                  threshold: float | None = None) -> float:
    """Fraction of pairs classified correctly as neighbour (``d < threshold``) or not."""
    thr = metric.threshold if threshold is None else threshold
    d = metric.scores(dataset.observations[pairs.anchor], dataset.observations[pairs.other])
    return float(np.mean((d < thr) == (pairs.label <= 1)))


@dataclass
class LocalMetricResult:
    metric: LocalMetric
    history: list[dict] = field(default_factory=list)
    heldout_accuracy: float = math.nan
    train_rollouts: np.ndarray | None = None
    heldout_rollouts: np.ndarray | None = None


def _check_finite(loss: ad.Tensor, epoch: int, batch: int) -> None:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at epoch {epoch}, batch {batch}")


def _write_history(path, history) -> None:
    if path is not None:
        atomic_write_text(path, "".join(json.dumps(h, sort_keys=True) + "\n" for h in history))


def _train_loop(dataset, cfg: LocalMetricConfig, metrics_path, loss_fn) -> LocalMetricResult:
    metric = LocalMetric(dataset.resolution, cfg.variant, cfg.hidden, cfg.embed_dim, cfg.threshold, cfg.seed)
    train_ids, held_ids = split_rollouts(dataset, cfg.holdout_fraction, cfg.seed)
    if len(train_ids) < 2:
        raise ValueError("local metric training needs at least two training rollouts")
    eval_pairs = heldout_pairs(dataset, held_ids if len(held_ids) else train_ids, cfg.eval_pairs, cfg.seed)
    n_train = sum(dataset.rollouts[i][1] for i in train_ids)
    steps = max(1, n_train // cfg.batch)
    opt = ad.Adam(metric.parameters, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 3])
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for b in range(steps):
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = loss_fn(metric, rng, train_ids)
            _check_finite(loss, epoch, b)
            ad.backward(tape, loss)
            opt.step()
            total += loss.item()
        record = {
            "epoch": epoch,
            "loss": total / steps,
            "heldout_accuracy": pair_accuracy(metric, dataset, eval_pairs),
        }
        history.append(record)
        log.info("local metric epoch %d loss %.4f acc %.4f", epoch, record["loss"], record["heldout_accuracy"])
    _write_history(metrics_path, history)
    return LocalMetricResult(metric, history, history[-1]["heldout_accuracy"] if history else math.nan,
                             train_ids, held_ids)


def train_local_metric(dataset: TrajectoryDataset, cfg: LocalMetricConfig | None = None,
                       metrics_path: str | Path | None = None) -> LocalMetricResult:
    """Regress ``d`` toward the nominal distances {0, 1, 2} with smooth-L1."""
    cfg = cfg or LocalMetricConfig()
    obs = dataset.observations

    def loss_fn(metric, rng, train_ids):
        pairs = sample_pairs(dataset, cfg.ratio, cfg.batch, rng, train_ids)
        d = metric.distance(obs[pairs.anchor], obs[pairs.other])
        return regression_loss(d, pairs.label, cfg.hinge_far)

    return _train_loop(dataset, cfg, metrics_path, loss_fn)


def train_local_metric_nce(dataset: TrajectoryDataset, cfg: LocalMetricConfig | None = None,
                           metrics_path: str | Path | None = None) -> LocalMetricResult:
    """Contrastive alternative: similarity ``S = -d``, consecutive frames as positives."""
    cfg = cfg or LocalMetricConfig()
    obs = dataset.observations
    k = cfg.k_negatives

    def loss_fn(metric, rng, train_ids):
        pos = sample_pairs(dataset, (0, 1, 0), cfg.batch, rng, train_ids)
        spans = np.asarray(dataset.rollouts)[train_ids]
        pool = np.concatenate([np.arange(s, s + n) for s, n in spans])
        negs = rng.choice(pool, size=(cfg.batch, k))
        s_pos = metric.distance(obs[pos.anchor], obs[pos.other]) * -1.0
        s_neg = metric.distance(np.repeat(obs[pos.anchor], k, axis=0), obs[negs.reshape(-1)]) * -1.0
        return ad.nce_loss(s_pos, ad.reshape(s_neg, (cfg.batch, k)))

    return _train_loop(dataset, cfg, metrics_path, loss_fn)


def config_dict(cfg: LocalMetricConfig) -> dict:
    out = asdict(cfg)
    out["ratio"] = list(cfg.ratio)
    out["hidden"] = list(cfg.hidden)
    return out
