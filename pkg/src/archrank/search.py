"""Online phase: gradient ascent over architecture encodings for a new task.

The trained predictor is frozen; its score is maximized in the encoding
space with plain fixed-step gradient ascent, started from the best recorded
architectures of the training tasks closest to the new task in embedding
space. No child model is ever trained here -- this module has no access to
a performance backend at all.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .expdb import ExperimentDB
from .numerics import NonFiniteError, Tape
from .ranker import RankerWeights, score_var, task_embedding, weight_vars
from .tasks import TaskDataset


@dataclass(frozen=True)
class SearchConfig:
    step_size: float = 0.01
    max_iters: int = 500
    tol: float = 1e-6           # stop when the update norm drops below this
    n_warm_tasks: int = 2
    n_top_per_task: int = 5
    n_z_batches: int = 10
    z_batch_size: int = 256

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >=1, got {self.max_iters}")


@dataclass
class Trajectory:
    origin: str
    start: np.ndarray
    u_final: np.ndarray | None
    v_start: float
    v_final: float
    iters: int
    converged: bool
    monotone: bool
    failed: bool = False

    def summary(self) -> dict:
        return {
            "origin": self.origin,
            "iters": self.iters,
            "v_start": self.v_start,
            "v_final": self.v_final,
            "converged": self.converged,
            "monotone": self.monotone,
            "failed": self.failed,
        }


@dataclass
class SearchResult:
    best_encoding: np.ndarray
    best_score: float
    trajectories: list[Trajectory] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "best_encoding": self.best_encoding.tolist(),
                "best_score": self.best_score,
                "trajectories": [t.summary() for t in self.trajectories],
            }
        )


def warm_starts(
    weights: RankerWeights,
    db: ExperimentDB,
    training_tasks: list[TaskDataset],
    test_task: TaskDataset,
    cfg: SearchConfig,
    rng,
) -> list[tuple[np.ndarray, str]]:
    """Top recorded architectures of the nearest training tasks.

    Distances are measured between batch-averaged task embeddings; from each
    of the nearest tasks the best-performing records are taken (fewer if a
    task has fewer records than asked).
    """
    z_test = task_embedding(weights, test_task, cfg.n_z_batches, cfg.z_batch_size, rng)
    dists = []
    for t in training_tasks:
        z_t = task_embedding(weights, t, cfg.n_z_batches, cfg.z_batch_size, rng)
        dists.append((float(np.linalg.norm(z_test - z_t)), t.task_id))
    dists.sort()
    starts = []
    for _dist, tid in dists[: cfg.n_warm_tasks]:
        recs = sorted(db.records_for(tid), key=lambda r: -r.performance)
        for rank, rec in enumerate(recs[: cfg.n_top_per_task]):
            starts.append((rec.encoding.copy(), f"{tid}#top{rank + 1}"))
    return starts


def _score_and_grad(weights: RankerWeights, z: np.ndarray, u: np.ndarray):
    tape = Tape()
    wv = {k: tape.const(v) for k, v in weights.tensors.items()}
    u_var = tape.param(u, "u")
    out = score_var(wv, u_var, tape.const(z), weights)
    v = nm.sum_all(out)  # [1] -> scalar
    tape.backward(v)
    g = u_var.grad if u_var.grad is not None else np.zeros_like(u)
    return float(v.value), g


def ascend(fn, u0: np.ndarray, cfg: SearchConfig):
    """Fixed-step gradient ascent of a callable u -> (value, gradient).

    Stops when the update norm falls below cfg.tol or after cfg.max_iters.
    Returns (u_final, v_final, iters, monotone, converged); raises
    NonFiniteError if the gradient turns non-finite.
    """
    u = np.array(u0, dtype=np.float64)
    v_prev, g = fn(u)
    monotone = True
    converged = False
    iters = 0
    for _ in range(cfg.max_iters):
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient during ascent")
        du = cfg.step_size * g
        u = u + du
        iters += 1
        v, g = fn(u)
        if v < v_prev - 1e-12:
            monotone = False
        v_prev = v
        if np.linalg.norm(du) < cfg.tol:
            converged = True
            break
    return u, v_prev, iters, monotone, converged


def gradient_ascent(
    weights: RankerWeights,
    z: np.ndarray,
    u0: np.ndarray,
    cfg: SearchConfig = SearchConfig(),
):
    """Ascend the predictor score in u with frozen weights and embedding."""
    if np.asarray(u0).shape != (weights.config.u_dim,):
        raise nm.DimensionMismatch(
            f"start point shape {np.asarray(u0).shape} != ({weights.config.u_dim},)"
        )
    return ascend(lambda u: _score_and_grad(weights, z, u), u0, cfg)


def search(
    weights: RankerWeights,
    db: ExperimentDB,
    training_tasks: list[TaskDataset],
    test_task: TaskDataset,
    cfg: SearchConfig = SearchConfig(),
    rng=None,
) -> SearchResult:
    """Multi-start ascent from warm starts; returns the argmax trajectory."""
    rng = np.random.default_rng(0) if rng is None else rng
    z = task_embedding(weights, test_task, cfg.n_z_batches, cfg.z_batch_size, rng)
    starts = warm_starts(weights, db, training_tasks, test_task, cfg, rng)
    if not starts:
        raise RuntimeError("no warm starts available (no records in the nearest tasks)")

    trajectories = []
    for u0, origin in starts:
        v0, _ = _score_and_grad(weights, z, u0)
        try:
            u_f, v_f, iters, monotone, converged = gradient_ascent(weights, z, u0, cfg)
        except NonFiniteError:
            trajectories.append(
                Trajectory(origin, u0, None, v0, float("nan"), 0, False, False, failed=True)
            )
            continue
        trajectories.append(Trajectory(origin, u0, u_f, v0, v_f, iters, converged, monotone))

    alive = [t for t in trajectories if not t.failed]
    if not alive:
        raise RuntimeError("every ascent start aborted on a non-finite gradient")
    best = max(alive, key=lambda t: t.v_final)
    return SearchResult(
        best_encoding=best.u_final.copy(), best_score=best.v_final, trajectories=trajectories
    )
