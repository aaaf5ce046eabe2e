"""Leave-one-out evaluation: rank correlations, search quality, PCA export.

Each task is held out in turn; the predictor is retrained from scratch on
the remaining tasks (several repeats with fresh seeds), scored against the
held-out task's recorded experiments, and used to drive an architecture
search whose result is measured by the configured backend. Correlations use
average ranks for ties; aggregate dispersion is the n-1 standard deviation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .child import AnalyticBackend, RealTrainBackend
from .expdb import ExperimentDB
from .losses import LossConfig, TrainConfig, train_ranker
from .ranker import RankerWeights, meta_features, score_batch, task_embedding
from .search import SearchConfig, search
from .tasks import TaskDataset, sample_batch


class ConstantInputError(ValueError):
    """Correlation of a constant vector is undefined."""


class DataLeakError(RuntimeError):
    """The held-out task's records reached the training slice."""


def average_ranks(x) -> np.ndarray:
    """Ranks 1..n with ties assigned the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _validate_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"expected equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError(f"need at least 2 points, got {len(x)}")
    return x, y


def pearson(x, y) -> float:
    """Pearson correlation; raises ConstantInputError on zero variance."""
    x, y = _validate_pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    if sx == 0.0 or sy == 0.0:
        raise ConstantInputError("correlation undefined for a constant vector")
    return float(np.sum(xc * yc) / (sx * sy))


def spearman(x, y) -> float:
    """Rank correlation: Pearson on average ranks."""
    x, y = _validate_pair(x, y)
    return pearson(average_ranks(x), average_ranks(y))


# ---------------------------------------------------------------------------
# leave-one-out harness
# ---------------------------------------------------------------------------

@dataclass
class EvalCell:
    """Aggregates for one (held-out task, loss kind) pair."""

    task_id: str
    loss_kind: str
    n_repeats: int
    spearman_mean: float = math.nan
    spearman_std: float = math.nan
    pearson_mean: float = math.nan
    pearson_std: float = math.nan
    search_perf_mean: float = math.nan
    search_perf_std: float = math.nan
    n_failed: int = 0
    error: str | None = None


CSV_COLUMNS = [
    "task_id",
    "loss_kind",
    "n_repeats",
    "spearman_mean",
    "spearman_std",
    "pearson_mean",
    "pearson_std",
    "search_perf_mean",
    "search_perf_std",
    "n_failed",
    "error",
]


@dataclass
class EvalReport:
    rows: list[EvalCell] = field(default_factory=list)

    def cell(self, task_id: str, loss_kind: str) -> EvalCell:
        for r in self.rows:
            if r.task_id == task_id and r.loss_kind == loss_kind:
                return r
        raise KeyError(f"no cell for ({task_id}, {loss_kind})")

    def loss_kinds(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.loss_kind not in seen:
                seen.append(r.loss_kind)
        return seen

    def task_ids(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.task_id not in seen:
                seen.append(r.task_id)
        return seen

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow(
                    [
                        r.task_id,
                        r.loss_kind,
                        r.n_repeats,
                        repr(r.spearman_mean),
                        repr(r.spearman_std),
                        repr(r.pearson_mean),
                        repr(r.pearson_std),
                        repr(r.search_perf_mean),
                        repr(r.search_perf_std),
                        r.n_failed,
                        r.error or "",
                    ]
                )

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        rows = []
        with open(path, newline="") as f:
            for rec in csv.DictReader(f):
                rows.append(
                    EvalCell(
                        task_id=rec["task_id"],
                        loss_kind=rec["loss_kind"],
                        n_repeats=int(rec["n_repeats"]),
                        spearman_mean=float(rec["spearman_mean"]),
                        spearman_std=float(rec["spearman_std"]),
                        pearson_mean=float(rec["pearson_mean"]),
                        pearson_std=float(rec["pearson_std"]),
                        search_perf_mean=float(rec["search_perf_mean"]),
                        search_perf_std=float(rec["search_perf_std"]),
                        n_failed=int(rec["n_failed"]),
                        error=rec["error"] or None,
                    )
                )
        return cls(rows)

    def format_table(self, metric: str = "spearman") -> str:
        """Aligned text table: task rows, loss columns, mean +/- std cells."""
        kinds = self.loss_kinds()
        tasks = self.task_ids()
        header = ["task"] + kinds
        lines = []
        for tid in tasks:
            cells = [tid]
            for kind in kinds:
                try:
                    r = self.cell(tid, kind)
                except KeyError:
                    cells.append("-")
                    continue
                mean = getattr(r, f"{metric}_mean")
                std = getattr(r, f"{metric}_std")
                if r.error is not None or math.isnan(mean):
                    cells.append("failed" if r.error else "-")
                elif math.isnan(std):
                    cells.append(f"{mean:.4f}")
                else:
                    cells.append(f"{mean:.4f} +/- {std:.4f}")
            lines.append(cells)
        widths = [max(len(row[c]) for row in [header] + lines) for c in range(len(header))]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        out = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
        out += [fmt.format(*row) for row in lines]
        return "\n".join(out)


def _agg(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if len(arr) > 1 else math.nan
    return mean, std


def _score_task_records(weights: RankerWeights, task, db, n_batches, batch_size, rng):
    """Scores of the held-out task's records under z from that task's data."""
    U, perf = db.encodings_and_perfs(task.task_id)
    z = task_embedding(weights, task, n_batches, batch_size, rng)
    return score_batch(weights, U, z), perf


def _measure_found(backend, encoding, task: TaskDataset, rng) -> float:
    """Search-quality metric: noiseless surrogate value, or test accuracy."""
    if isinstance(backend, AnalyticBackend):
        return backend.true_value(encoding, task.task_id)
    if isinstance(backend, RealTrainBackend):
        return backend.measure_split(encoding, task, rng, "test")
    raise TypeError(f"unsupported backend {type(backend).__name__}")


def leave_one_out(
    tasks: list[TaskDataset],
    db: ExperimentDB,
    loss_cfgs: list[LossConfig],
    backend,
    n_repeats: int = 10,
    train_cfg: TrainConfig = TrainConfig(),
    search_cfg: SearchConfig = SearchConfig(),
    seed: int = 0,
    progress=None,
) -> EvalReport:
    """Hold out each task in turn; retrain, correlate, search, measure.

    Every (task, loss, repeat) cell gets its own seed derived up front, so
    results do not depend on execution order. Failed repeats are counted and
    the remaining ones aggregated; a cell where everything failed carries an
    error message instead of numbers.
    """
    if len(tasks) < 3:
        raise ValueError(f"leave-one-out needs at least 3 tasks, got {len(tasks)}")
    root = np.random.SeedSequence(seed)
    cell_seeds = {}
    for t in tasks:
        for cfg in loss_cfgs:
            for r in range(n_repeats):
                cell_seeds[(t.task_id, cfg.kind, r)] = root.spawn(1)[0]

    report = EvalReport()
    for held in tasks:
        train_tasks = [t for t in tasks if t.task_id != held.task_id]
        db_slice = db.without_task(held.task_id)
        if held.task_id in db_slice.task_ids:
            raise DataLeakError(
                f"records of held-out task {held.task_id} leaked into the training slice"
            )
        for cfg in loss_cfgs:
            sp_vals, pe_vals, sr_vals = [], [], []
            n_failed = 0
            last_error = None
            for r in range(n_repeats):
                ss = cell_seeds[(held.task_id, cfg.kind, r)]
                train_seed, eval_seed = [int(c.generate_state(1)[0]) for c in ss.spawn(2)]
                try:
                    weights = train_ranker(db_slice, train_tasks, cfg, train_cfg, seed=train_seed)
                    rng = np.random.default_rng(eval_seed)
                    scores, perf = _score_task_records(
                        weights, held, db,
                        weights.config.n_meta_batches, train_cfg.meta_batch_size, rng,
                    )
                    try:
                        sp_vals.append(spearman(scores, perf))
                        pe_vals.append(pearson(scores, perf))
                    except ConstantInputError as e:
                        n_failed += 1
                        last_error = f"correlation: {e}"
                    result = search(weights, db_slice, train_tasks, held, search_cfg, rng)
                    sr_vals.append(_measure_found(backend, result.best_encoding, held, rng))
                except Exception as e:  # propagate per cell, not across the run
                    n_failed += 1
                    last_error = f"{type(e).__name__}: {e}"
                if progress is not None:
                    progress(held.task_id, cfg.kind, r)
            cell = EvalCell(task_id=held.task_id, loss_kind=cfg.kind, n_repeats=n_repeats)
            cell.spearman_mean, cell.spearman_std = _agg(sp_vals)
            cell.pearson_mean, cell.pearson_std = _agg(pe_vals)
            cell.search_perf_mean, cell.search_perf_std = _agg(sr_vals)
            cell.n_failed = n_failed
            if not sp_vals and not sr_vals:
                cell.error = last_error or "all repeats failed"
            report.rows.append(cell)
    return report


# ---------------------------------------------------------------------------
# meta-feature diagnostics
# ---------------------------------------------------------------------------

def pca_meta_features(
    weights: RankerWeights,
    tasks: list[TaskDataset],
    n_batches: int = 10,
    batch_size: int = 256,
    seed: int = 0,
    csv_path=None,
):
    """Project per-batch task embeddings onto the top-2 principal components.

    Returns (rows, explained_variances) where rows are
    (task_id, batch_index, pc1, pc2). Rank-deficient cases zero-pad the
    missing components.
    """
    rng = np.random.default_rng(seed)
    labels = []
    zs = []
    for t in tasks:
        for b in range(n_batches):
            X, _ = sample_batch(t, "train", min(batch_size, len(t.split_indices("train"))), rng)
            zs.append(meta_features(weights, X))
            labels.append((t.task_id, b))
    Z = np.stack(zs)
    if Z.shape[0] < 2:
        raise ValueError("PCA needs at least 2 meta-feature vectors")
    Zc = Z - Z.mean(axis=0)
    cov = (Zc.T @ Zc) / (Z.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    comps = []
    variances = []
    for k in range(2):
        if k < len(evals) and evals[k] > 1e-12:
            comps.append(evecs[:, k])
            variances.append(float(evals[k]))
        else:
            comps.append(np.zeros(Z.shape[1]))
            variances.append(0.0)
    proj = Zc @ np.stack(comps, axis=1)
    rows = [
        (tid, b, float(proj[i, 0]), float(proj[i, 1])) for i, (tid, b) in enumerate(labels)
    ]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task_id", "batch_index", "pc1", "pc2"])
            for tid, b, p1, p2 in rows:
                w.writerow([tid, b, repr(p1), repr(p2)])
    return rows, variances


def meta_feature_stability(
    weights: RankerWeights,
    tasks: list[TaskDataset],
    n_batches: int = 10,
    batch_size: int = 256,
    seed: int = 0,
) -> dict:
    """Within-task z dispersion vs between-task centroid distances.

    Returns per-task mean pairwise distance among its batch embeddings, the
    mean distance between different tasks' centroids, and whether every
    task's dispersion is below that between-task mean.
    """
    rng = np.random.default_rng(seed)
    dispersion = {}
    centroids = {}
    for t in tasks:
        zs = np.stack(
            [
                meta_features(weights, sample_batch(t, "train", batch_size, rng)[0])
                for _ in range(n_batches)
            ]
        )
        diffs = zs[:, None, :] - zs[None, :, :]
        dists = np.sqrt((diffs ** 2).sum(-1))
        iu = np.triu_indices(n_batches, k=1)
        dispersion[t.task_id] = float(dists[iu].mean())
        centroids[t.task_id] = zs.mean(axis=0)
    ids = [t.task_id for t in tasks]
    between = [
        float(np.linalg.norm(centroids[a] - centroids[b]))
        for i, a in enumerate(ids)
        for b in ids[i + 1:]
    ]
    between_mean = float(np.mean(between)) if between else math.nan
    return {
        "dispersion": dispersion,
        "between_mean": between_mean,
        "all_stable": all(d < between_mean for d in dispersion.values()),
    }
