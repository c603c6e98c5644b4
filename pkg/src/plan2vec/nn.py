"""MLP building blocks on top of :mod:`plan2vec.autodiff`, plus checkpoint I/O."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .artifacts import SCHEMA_VERSION, ArtifactError, atomic_write_bytes, atomic_write_json, check_schema, read_json


class MLP:
    """Fully connected ReLU network; the last layer is linear.

    Weights are He-uniform initialised from ``seed`` so two networks built
    with the same arguments are bit-identical.
    """

    def __init__(self, sizes: Sequence[int], seed: int = 0, final_activation: str | None = None):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least an input and an output size")
        self.sizes = [int(s) for s in sizes]
        self.final_activation = final_activation
        rng = np.random.default_rng(seed)
        self.weights: list[ad.Tensor] = []
        self.biases: list[ad.Tensor] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(ad.Tensor(w, requires_grad=True))
            self.biases.append(ad.Tensor(np.zeros(fan_out), requires_grad=True))

    @property
    def parameters(self) -> list[ad.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.linear(x, w, b)
            if i < n - 1:
                x = ad.relu(x)
        if self.final_activation == "softplus":
            x = ad.softplus(x)
        return x

    def forward_numpy(self, x: np.ndarray, batch: int = 4096) -> np.ndarray:
        """Tape-free forward pass in chunks, for caching embeddings."""
        x = np.asarray(x, dtype=ad.DTYPE)
        outs = []
        for i in range(0, len(x), batch):
            outs.append(self(ad.Tensor(x[i : i + batch])).data)
        if not outs:
            return np.zeros((0, self.sizes[-1]), dtype=ad.DTYPE)
        return np.concatenate(outs, axis=0)

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if a.shape != p.shape:
                raise ValueError(f"parameter shape {p.shape} does not match {a.shape}")
            p.data[...] = a

    def describe(self) -> dict:
        return {"type": "mlp", "sizes": self.sizes, "final_activation": self.final_activation}


def save_checkpoint(directory: str | Path, net: MLP, meta: dict) -> None:
    """Write ``model.json`` and ``weights.f32`` (parameters in declaration order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = b"".join(p.astype("<f4").tobytes() for p in net.state())
    atomic_write_bytes(directory / "weights.f32", blob)
    atomic_write_json(directory / "model.json", {"schema_version": SCHEMA_VERSION, "architecture": net.describe(), **meta})


def load_checkpoint(directory: str | Path) -> tuple[MLP, dict]:
    directory = Path(directory)
    meta = read_json(directory / "model.json", "model checkpoint")
    check_schema(meta, directory / "model.json")
    if not (directory / "weights.f32").exists():
        raise ArtifactError(f"missing model weights: expected {directory / 'weights.f32'}", directory / "weights.f32")
    arch = meta["architecture"]
    net = MLP(arch["sizes"], final_activation=arch.get("final_activation"))
    flat = np.frombuffer((directory / "weights.f32").read_bytes(), dtype="<f4")
    arrays, offset = [], 0
    for p in net.parameters:
        arrays.append(flat[offset : offset + p.size].reshape(p.shape))
        offset += p.size
    if offset != flat.size:
        raise ValueError(f"weights.f32 holds {flat.size} floats, architecture needs {offset}")
    net.load_state(arrays)
    return net, meta
