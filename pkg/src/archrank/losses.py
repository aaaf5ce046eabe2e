"""Pairwise ranking losses with margin and uncertainty-gap filtering.

A pair of records from one task enters the loss only when its ground-truth
performances differ by more than the uncertainty gap; the pair is oriented
so the better-performing record comes first. The linear loss hinges on the
score difference, the quadratic loss squares the hinge and divides by the
margin so it does not scale quadratically with it. An L2 regression loss on
(score, performance) serves as the baseline. ``train_ranker`` is the offline
phase: joint SGD-momentum training of both predictor towers against a
database of experiments.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import numerics as nm
from .expdb import ExperimentDB
from .numerics import MomentumState, Tape, Var, sgd_momentum_step
from .ranker import (
    RankerConfig,
    RankerWeights,
    meta_features_var,
    score_batch_var,
    weight_vars,
)
from .tasks import TaskDataset, sample_batch

LOSS_KINDS = ("l2", "linear_rank", "quadratic_rank")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "linear_rank"
    margin: float = 0.3
    gap: float = 0.01

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.gap < 0:
            raise ValueError(f"gap must be nonnegative, got {self.gap}")


@dataclass(frozen=True)
class ScoredPair:
    """Scores and ground truth for two same-task records, better one first."""

    v_i: float
    p_i: float
    v_j: float
    p_j: float

    def __post_init__(self):
        if not self.p_i > self.p_j:
            raise ValueError(f"pair must be oriented with p_i > p_j, got {self.p_i} <= {self.p_j}")


_TRIU_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _triu(n: int):
    if n not in _TRIU_CACHE:
        _TRIU_CACHE[n] = np.triu_indices(n, k=1)
    return _TRIU_CACHE[n]


def pair_index_arrays(perf: np.ndarray, gap: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices (i, j) of every unordered pair with perf[i] - perf[j] > gap.

    Each unordered pair appears at most once, oriented so i is the better
    record; the comparison is strict.
    """
    perf = np.asarray(perf, dtype=np.float64)
    n = len(perf)
    iu, ju = _triu(n)
    diff = perf[iu] - perf[ju]
    keep = np.abs(diff) > gap
    iu, ju, diff = iu[keep], ju[keep], diff[keep]
    swap = diff < 0
    i_idx = np.where(swap, ju, iu)
    j_idx = np.where(swap, iu, ju)
    return i_idx.astype(np.intp), j_idx.astype(np.intp)


def filter_pairs(records_with_scores, gap: float) -> list[ScoredPair]:
    """Gap-filtered oriented pairs from a sequence of (score, performance)."""
    pairs = []
    for (va, pa), (vb, pb) in combinations(records_with_scores, 2):
        if abs(pa - pb) > gap:
            if pa > pb:
                pairs.append(ScoredPair(va, pa, vb, pb))
            else:
                pairs.append(ScoredPair(vb, pb, va, pa))
    return pairs


# ---------------------------------------------------------------------------
# per-pair losses
# ---------------------------------------------------------------------------

def linear_rank_loss(pair: ScoredPair, margin: float) -> float:
    """max(0, m - (v_i - v_j)); zero iff the score difference clears the margin."""
    return float(max(0.0, margin - (pair.v_i - pair.v_j)))


def quadratic_rank_loss(pair: ScoredPair, margin: float) -> float:
    """max(0, m - (v_i - v_j))^2 / m."""
    if margin <= 0:
        raise ValueError(f"quadratic loss needs a positive margin, got {margin}")
    h = max(0.0, margin - (pair.v_i - pair.v_j))
    return float(h * h / margin)


def l2_loss(v: float, p: float) -> float:
    return float((v - p) ** 2)


def closed_form_grads(
    scores: np.ndarray,
    i_idx: np.ndarray,
    j_idx: np.ndarray,
    margin: float,
    kind: str,
    reduction: str = "sum",
) -> np.ndarray:
    """Per-score gradients of the batch ranking loss, in closed form.

    For the pairs still violating the margin (v_i - v_j < m): the linear loss
    contributes -1 to the better score and +1 to the worse one; the quadratic
    loss contributes the same signs scaled by (2/m)(m - (v_i - v_j)).
    ``reduction="mean"`` divides by the number of gap-passing pairs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    g = np.zeros_like(scores)
    if len(i_idx) == 0:
        return g
    d = scores[i_idx] - scores[j_idx]
    viol = d < margin
    if kind == "linear_rank":
        np.add.at(g, i_idx[viol], -1.0)
        np.add.at(g, j_idx[viol], 1.0)
    elif kind == "quadratic_rank":
        coef = (2.0 / margin) * (margin - d[viol])
        np.add.at(g, i_idx[viol], -coef)
        np.add.at(g, j_idx[viol], coef)
    else:
        raise ValueError(f"closed-form gradients exist for ranking losses, not {kind!r}")
    if reduction == "mean":
        g /= len(i_idx)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return g


# ---------------------------------------------------------------------------
# batch losses on the tape
# ---------------------------------------------------------------------------

def batch_loss_var(
    scores: Var,
    perf: np.ndarray,
    cfg: LossConfig,
    reduction: str = "mean",
) -> tuple[Var | None, int]:
    """Loss node over one record batch; (None, 0) when no pair passes the gap.

    Ranking losses average (or sum) over the gap-passing pairs; the L2 loss
    averages over the records themselves.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if cfg.kind == "l2":
        d = nm.sub(scores, scores.tape.const(np.asarray(perf, dtype=np.float64)))
        sq = d.square()
        return (sq.mean() if reduction == "mean" else sq.sum()), 0
    i_idx, j_idx = pair_index_arrays(perf, cfg.gap)
    if len(i_idx) == 0:
        return None, 0
    d = nm.sub(nm.gather(scores, i_idx), nm.gather(scores, j_idx))
    hinge = (cfg.margin - d).relu()
    if cfg.kind == "quadratic_rank":
        hinge = hinge.square() * (1.0 / cfg.margin)
    loss = hinge.mean() if reduction == "mean" else hinge.sum()
    return loss, len(i_idx)


# ---------------------------------------------------------------------------
# offline training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    lr: float = 1e-4
    momentum: float = 0.5
    record_batch_size: int = 32
    meta_batch_size: int = 256
    init_scale: float = 0.05


def train_ranker(
    db: ExperimentDB,
    tasks: list[TaskDataset],
    loss_cfg: LossConfig,
    train_cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    metrics_path=None,
) -> RankerWeights:
    """Train the predictor on the experiment records of the given tasks.

    Each step samples one task, a record mini-batch, and a fresh task-sample
    batch for the meta-features, then backpropagates the configured loss
    through both towers and applies one momentum update. Deterministic given
    the seed. A step whose batch yields no gap-passing pair contributes a
    zero gradient (the momentum update still runs).
    """
    if len(tasks) < 2:
        raise ValueError(f"need at least 2 training tasks, got {len(tasks)}")
    d_ins = {t.d_in for t in tasks}
    if len(d_ins) != 1:
        raise ValueError(f"tasks disagree on input dimension: {sorted(d_ins)}")
    u_dims = set()
    for t in tasks:
        recs = db.records_for(t.task_id)
        if len(recs) < 2:
            raise ValueError(f"task {t.task_id} has {len(recs)} records, need >=2")
        u_dims.add(recs[0].encoding.shape[0])
    if len(u_dims) != 1:
        raise ValueError(f"records disagree on encoding dimension: {sorted(u_dims)}")

    config = RankerConfig(
        d_in=d_ins.pop(), u_dim=u_dims.pop(), meta_batch_size=train_cfg.meta_batch_size
    )
    init_ss, loop_ss = np.random.SeedSequence(seed).spawn(2)
    weights = RankerWeights.init(config, seed=init_ss, scale=train_cfg.init_scale)
    rng = np.random.default_rng(loop_ss)
    state = MomentumState(mu=train_cfg.momentum, eta=train_cfg.lr)

    # records are fixed for the whole run: pre-stack encodings and
    # performances per task and sample row indices instead of record lists
    task_arrays = {t.task_id: db.encodings_and_perfs(t.task_id) for t in tasks}

    writer = None
    log_file = None
    if metrics_path is not None:
        log_file = open(metrics_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "task_id", "loss", "n_pairs"])

    zero_pair_steps = 0
    try:
        for step in range(train_cfg.steps):
            task = tasks[int(rng.integers(len(tasks)))]
            U_all, p_all = task_arrays[task.task_id]
            if len(p_all) <= train_cfg.record_batch_size:
                U, perf = U_all, p_all
            else:
                pick = rng.choice(len(p_all), size=train_cfg.record_batch_size, replace=False)
                U, perf = U_all[pick], p_all[pick]
            Xb, _ = sample_batch(task, "train", train_cfg.meta_batch_size, rng)

            tape = Tape()
            wv = weight_vars(tape, weights)
            z = meta_features_var(wv, tape.const(Xb), weights)
            scores = score_batch_var(wv, tape.const(U), z, weights)
            loss_var, n_pairs = batch_loss_var(scores, perf, loss_cfg)

            if loss_var is None:
                zero_pair_steps += 1
                loss_val = 0.0
                grads = {k: np.zeros_like(v) for k, v in weights.tensors.items()}
            else:
                tape.backward(loss_var)
                loss_val = float(loss_var.value)
                grads = {
                    k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                    for k, v in wv.items()
                }
            sgd_momentum_step(weights.tensors, grads, state)
            if writer is not None:
                writer.writerow([step, task.task_id, repr(loss_val), n_pairs])
    finally:
        if log_file is not None:
            log_file.close()

    if loss_cfg.kind != "l2" and train_cfg.steps > 0 and zero_pair_steps == train_cfg.steps:
        warnings.warn(
            "every training step produced zero gap-passing pairs; "
            "the ranker was effectively not trained",
            RuntimeWarning,
            stacklevel=2,
        )
    return weights
