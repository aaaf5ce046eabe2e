"""The ranking predictor v(u, z).

Two jointly trained towers: phi embeds raw task samples and mean-aggregates
them into permutation-invariant meta-features z; rho consumes the
architecture encoding concatenated with z and emits a scalar ranking score.
Mean (not sum) aggregation keeps z comparable across batch sizes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tape, Var
from .tasks import TaskDataset, sample_batch

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class RankerConfig:
    d_in: int
    u_dim: int
    phi_sizes: tuple[int, ...] = (50, 50)
    rho_sizes: tuple[int, ...] = (50, 10)
    meta_batch_size: int = 256
    n_meta_batches: int = 10

    @property
    def z_dim(self) -> int:
        return self.phi_sizes[-1]

    def to_dict(self) -> dict:
        return {
            "d_in": self.d_in,
            "u_dim": self.u_dim,
            "phi_sizes": list(self.phi_sizes),
            "rho_sizes": list(self.rho_sizes),
            "meta_batch_size": self.meta_batch_size,
            "n_meta_batches": self.n_meta_batches,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankerConfig":
        return cls(
            d_in=int(d["d_in"]),
            u_dim=int(d["u_dim"]),
            phi_sizes=tuple(int(s) for s in d["phi_sizes"]),
            rho_sizes=tuple(int(s) for s in d["rho_sizes"]),
            meta_batch_size=int(d["meta_batch_size"]),
            n_meta_batches=int(d["n_meta_batches"]),
        )


class RankerWeights:
    """All trainable tensors of phi and rho, keyed by dotted names."""

    def __init__(self, config: RankerConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors
        self._check_shapes()

    @staticmethod
    def _layer_dims(config: RankerConfig):
        phi = list(zip([config.d_in, *config.phi_sizes[:-1]], config.phi_sizes))
        rho_in = config.u_dim + config.z_dim
        rho = list(zip([rho_in, *config.rho_sizes[:-1]], config.rho_sizes))
        rho.append((config.rho_sizes[-1], 1))  # scalar score head
        return phi, rho

    def _check_shapes(self):
        phi, rho = self._layer_dims(self.config)
        for tower, dims in (("phi", phi), ("rho", rho)):
            for i, (fan_in, fan_out) in enumerate(dims):
                w = self.tensors[f"{tower}.{i}.W"]
                b = self.tensors[f"{tower}.{i}.b"]
                if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                    raise ValueError(
                        f"{tower}.{i}: shapes {w.shape}/{b.shape} inconsistent with config"
                    )
                nm.check_finite(w, f"{tower}.{i}.W")
                nm.check_finite(b, f"{tower}.{i}.b")

    @classmethod
    def init(cls, config: RankerConfig, seed: int = 0, scale: float = 0.05) -> "RankerWeights":
        """Uniform(-scale, scale) init for every tensor."""
        rng = np.random.default_rng(seed)
        phi, rho = cls._layer_dims(config)
        tensors = {}
        for tower, dims in (("phi", phi), ("rho", rho)):
            for i, (fan_in, fan_out) in enumerate(dims):
                tensors[f"{tower}.{i}.W"] = rng.uniform(-scale, scale, size=(fan_out, fan_in))
                tensors[f"{tower}.{i}.b"] = rng.uniform(-scale, scale, size=fan_out)
        return cls(config, tensors)

    def copy(self) -> "RankerWeights":
        return RankerWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def num_phi_layers(self) -> int:
        return len(self.config.phi_sizes)

    def num_rho_layers(self) -> int:
        return len(self.config.rho_sizes) + 1

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        payload = {
            "version": CHECKPOINT_VERSION,
            "kind": "ranker",
            "config": self.config.to_dict(),
            "tensors": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                for k, v in sorted(self.tensors.items())
            },
        }
        with open(path, "w") as f:
            json.dump(payload, f)

    @classmethod
    def load(cls, path) -> "RankerWeights":
        with open(path) as f:
            payload = json.load(f)
        if payload.get("kind") != "ranker" or payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} ranker checkpoint")
        tensors = {
            k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in payload["tensors"].items()
        }
        return cls(RankerConfig.from_dict(payload["config"]), tensors)

    def __eq__(self, other):
        if not isinstance(other, RankerWeights):
            return NotImplemented
        return (
            self.config == other.config
            and sorted(self.tensors) == sorted(other.tensors)
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )


def weight_vars(tape: Tape, weights: RankerWeights) -> dict[str, Var]:
    return {k: tape.param(v, k) for k, v in weights.tensors.items()}


# ---------------------------------------------------------------------------
# forward paths (tape and plain)
# ---------------------------------------------------------------------------

def _phi_var(wv: dict[str, Var], X: Var, n_layers: int) -> Var:
    h = X
    for i in range(n_layers):
        h = nm.relu(nm.affine(h, wv[f"phi.{i}.W"], wv[f"phi.{i}.b"]))
    return h


def _rho_var(wv: dict[str, Var], H: Var, n_layers: int) -> Var:
    h = H
    for i in range(n_layers - 1):
        h = nm.relu(nm.affine(h, wv[f"rho.{i}.W"], wv[f"rho.{i}.b"]))
    return nm.affine(h, wv[f"rho.{n_layers - 1}.W"], wv[f"rho.{n_layers - 1}.b"])


def meta_features_var(wv: dict[str, Var], X: Var, weights: RankerWeights) -> Var:
    """z = mean_x phi(x) over a sample batch, on the tape."""
    return nm.mean_rows(_phi_var(wv, X, weights.num_phi_layers()))


def score_batch_var(wv: dict[str, Var], U: Var, z: Var, weights: RankerWeights) -> Var:
    """Scores of a batch of encodings under one task embedding, on the tape."""
    n = U.value.shape[0]
    H = nm.concat_cols(U, nm.repeat_rows(z, n))
    return nm.squeeze_cols(_rho_var(wv, H, weights.num_rho_layers()))


def score_var(wv: dict[str, Var], u: Var, z: Var, weights: RankerWeights) -> Var:
    """Scalar score rho(concat(u, z)) on the tape; differentiable in u too."""
    h = nm.concat([u, z])
    out = _rho_var(wv, h, weights.num_rho_layers())
    return out  # shape [1]


def meta_features(weights: RankerWeights, samples: np.ndarray) -> np.ndarray:
    """Permutation-invariant task embedding of a sample batch [n, d_in]."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"meta_features expects a nonempty [n, d_in] batch, got {X.shape}")
    if X.shape[1] != weights.config.d_in:
        raise nm.DimensionMismatch(
            f"sample dim {X.shape[1]} != configured d_in {weights.config.d_in}"
        )
    h = X
    for i in range(weights.num_phi_layers()):
        h = np.maximum(h @ weights.tensors[f"phi.{i}.W"].T + weights.tensors[f"phi.{i}.b"], 0.0)
    return h.mean(axis=0)


def score(weights: RankerWeights, u: np.ndarray, z: np.ndarray) -> float:
    """Ranking score of one encoding given task meta-features."""
    u = np.asarray(u, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if u.shape != (weights.config.u_dim,) or z.shape != (weights.config.z_dim,):
        raise nm.DimensionMismatch(
            f"score expects u[{weights.config.u_dim}] and z[{weights.config.z_dim}], "
            f"got {u.shape} and {z.shape}"
        )
    return float(score_batch(weights, u[None, :], z)[0])


def score_batch(weights: RankerWeights, U: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Vectorized scores for encodings U [n, u_dim] under one embedding z."""
    U = np.asarray(U, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    h = np.hstack([U, np.broadcast_to(z, (U.shape[0], z.shape[0]))])
    n_rho = weights.num_rho_layers()
    for i in range(n_rho - 1):
        h = np.maximum(h @ weights.tensors[f"rho.{i}.W"].T + weights.tensors[f"rho.{i}.b"], 0.0)
    h = h @ weights.tensors[f"rho.{n_rho - 1}.W"].T + weights.tensors[f"rho.{n_rho - 1}.b"]
    return h[:, 0]


# ---------------------------------------------------------------------------
# task embeddings from data
# ---------------------------------------------------------------------------

def task_embedding(
    weights: RankerWeights,
    task: TaskDataset,
    n_batches: int,
    batch_size: int,
    rng,
    split: str = "train",
) -> np.ndarray:
    """Mean meta-features over several random batches of one task's split."""
    zs = [
        meta_features(weights, sample_batch(task, split, batch_size, rng)[0])
        for _ in range(n_batches)
    ]
    return np.mean(zs, axis=0)


def task_embedding_distance(
    weights: RankerWeights,
    task_a: TaskDataset,
    task_b: TaskDataset,
    n_batches: int = 10,
    batch_size: int = 256,
    rng=None,
) -> float:
    """Euclidean distance between batch-averaged task embeddings."""
    rng = np.random.default_rng(0) if rng is None else rng
    za = task_embedding(weights, task_a, n_batches, batch_size, rng)
    zb = task_embedding(weights, task_b, n_batches, batch_size, rng)
    return float(np.linalg.norm(za - zb))
