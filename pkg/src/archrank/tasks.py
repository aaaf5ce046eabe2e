"""Synthetic task families: Gaussian-mixture classification datasets.

Each task is a small labelled dataset with train/val/test splits, standing in
for a real tabular/text classification problem. A low-dimensional latent
vector drives every distributional property of a task (class means,
covariance scale, difficulty) through family-level random maps, so tasks
with nearby latents look alike -- both to a classifier and to anything that
embeds the task from its raw samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TaskFamilyConfig:
    """Generation parameters for one family of related tasks."""

    num_tasks: int = 6
    d_in: int = 16
    num_classes: tuple[int, int] = (2, 4)          # inclusive range
    samples_per_task: tuple[int, int] = (600, 2000)  # inclusive range
    cluster_spread: float = 2.0
    label_noise: float = 0.05
    latent_dim: int = 2
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.num_tasks < 1:
            problems.append(f"num_tasks must be >=1, got {self.num_tasks}")
        if self.d_in < 1:
            problems.append(f"d_in must be >=1, got {self.d_in}")
        if not (2 <= self.num_classes[0] <= self.num_classes[1]):
            problems.append(f"num_classes range invalid: {self.num_classes}")
        if not (1 <= self.samples_per_task[0] <= self.samples_per_task[1]):
            problems.append(f"samples_per_task range invalid: {self.samples_per_task}")
        if self.num_classes[1] > self.samples_per_task[0]:
            problems.append(
                "infeasible: up to "
                f"{self.num_classes[1]} classes but as few as "
                f"{self.samples_per_task[0]} samples"
            )
        if self.cluster_spread <= 0:
            problems.append(f"cluster_spread must be positive, got {self.cluster_spread}")
        if not 0.0 <= self.label_noise <= 1.0:
            problems.append(f"label_noise must be in [0, 1], got {self.label_noise}")
        if self.latent_dim < 1:
            problems.append(f"latent_dim must be >=1, got {self.latent_dim}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or self.split_fractions[0] <= 0:
            problems.append(f"split_fractions must sum to 1 with positive train share")
        if problems:
            raise ValueError("invalid TaskFamilyConfig: " + "; ".join(problems))


@dataclass
class TaskDataset:
    """One labelled task with immutable samples and index splits."""

    task_id: str
    X: np.ndarray                  # [n, d_in] float64
    y: np.ndarray                  # [n] int64 class indices
    splits: dict[str, np.ndarray]  # split name -> index array
    num_classes: int
    latent: np.ndarray | None = None  # generative parameters, used by surrogate backends

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d_in(self) -> int:
        return self.X.shape[1]

    def split_indices(self, split: str) -> np.ndarray:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r} for task {self.task_id}")
        return self.splits[split]

    def split_arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.split_indices(split)
        return self.X[idx], self.y[idx]

    def validate(self) -> None:
        if not np.isfinite(self.X).all():
            raise ValueError(f"task {self.task_id}: non-finite samples")
        seen = np.concatenate([self.splits[s] for s in SPLITS])
        if len(np.unique(seen)) != self.n or len(seen) != self.n:
            raise ValueError(f"task {self.task_id}: splits must be disjoint and cover all samples")
        train_classes = set(self.y[self.splits["train"]].tolist())
        if train_classes != set(range(self.num_classes)):
            raise ValueError(f"task {self.task_id}: every class must appear in the train split")

    def __eq__(self, other):
        if not isinstance(other, TaskDataset):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and self.num_classes == other.num_classes
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and all(np.array_equal(self.splits[s], other.splits[s]) for s in SPLITS)
            and (
                (self.latent is None and other.latent is None)
                or (
                    self.latent is not None
                    and other.latent is not None
                    and np.array_equal(self.latent, other.latent)
                )
            )
        )


def _stratified_splits(y: np.ndarray, fractions, rng) -> dict[str, np.ndarray]:
    """Per-class 80/10/10-style split; guarantees each class lands in train."""
    parts = {s: [] for s in SPLITS}
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = rng.permutation(idx)
        n_c = len(idx)
        n_train = max(1, int(round(fractions[0] * n_c)))
        n_val = int(round(fractions[1] * n_c))
        n_train = min(n_train, n_c)
        n_val = min(n_val, n_c - n_train)
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    return {
        s: np.sort(np.concatenate(parts[s])) if parts[s] else np.empty(0, dtype=np.intp)
        for s in SPLITS
    }


def generate_tasks(cfg: TaskFamilyConfig) -> list[TaskDataset]:
    """Generate the task family; a pure function of the config (bit-reproducible)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    c_max = cfg.num_classes[1]

    # family-level structure shared by all tasks: fixed per-class anchor
    # directions plus smooth maps from the task latent to means / scales
    anchors = rng.standard_normal((c_max, cfg.d_in))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    mean_maps = rng.standard_normal((c_max, cfg.d_in, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
    difficulty_dir = rng.standard_normal(cfg.latent_dim) / np.sqrt(cfg.latent_dim)
    scale_map = rng.standard_normal((cfg.d_in, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)

    tasks = []
    for k in range(cfg.num_tasks):
        latent = rng.standard_normal(cfg.latent_dim)
        n_classes = int(rng.integers(cfg.num_classes[0], cfg.num_classes[1] + 1))
        n = int(rng.integers(cfg.samples_per_task[0], cfg.samples_per_task[1] + 1))
        if n_classes > n:
            raise ValueError(f"task {k}: {n_classes} classes > {n} samples")

        means = cfg.cluster_spread * (
            anchors[:n_classes] + 0.5 * mean_maps[:n_classes] @ latent
        )
        sigma = float(np.exp(0.3 * difficulty_dir @ latent))
        axis_scales = np.exp(0.2 * scale_map @ latent)

        y = rng.integers(0, n_classes, size=n)
        y[:n_classes] = np.arange(n_classes)  # every class occurs at least once
        X = means[y] + sigma * axis_scales * rng.standard_normal((n, cfg.d_in))

        if cfg.label_noise > 0:
            flip = rng.random(n) < cfg.label_noise
            flip[:n_classes] = False  # keep one pristine sample per class
            shift = rng.integers(1, n_classes, size=n)
            y = np.where(flip, (y + shift) % n_classes, y)

        splits = _stratified_splits(y, cfg.split_fractions, rng)
        task = TaskDataset(
            task_id=f"task{k:02d}",
            X=X,
            y=y.astype(np.int64),
            splits=splits,
            num_classes=n_classes,
            latent=latent,
        )
        task.validate()
        tasks.append(task)
    return tasks


def sample_batch(task: TaskDataset, split: str, batch_size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Uniform sample without replacement from one split; (X, y) arrays."""
    idx = task.split_indices(split)
    if batch_size > len(idx):
        raise ValueError(
            f"batch_size {batch_size} exceeds {split} split size {len(idx)} "
            f"of task {task.task_id}"
        )
    pick = rng.choice(idx, size=batch_size, replace=False)
    return task.X[pick], task.y[pick]


# ---------------------------------------------------------------------------
# JSON-lines persistence
# ---------------------------------------------------------------------------
# One metadata line per task ({"task_id", "num_classes", "latent"}) followed by
# one line per sample ({"task_id", "split", "x", "y"}).

def save_tasks(tasks: list[TaskDataset], path) -> None:
    with open(path, "w") as f:
        for t in tasks:
            meta = {
                "task_id": t.task_id,
                "num_classes": t.num_classes,
                "latent": None if t.latent is None else t.latent.tolist(),
            }
            f.write(json.dumps(meta) + "\n")
            split_of = np.empty(t.n, dtype=object)
            for s in SPLITS:
                split_of[t.splits[s]] = s
            for i in range(t.n):
                row = {
                    "task_id": t.task_id,
                    "split": split_of[i],
                    "x": t.X[i].tolist(),
                    "y": int(t.y[i]),
                }
                f.write(json.dumps(row) + "\n")


def load_tasks(path) -> list[TaskDataset]:
    order: list[str] = []
    meta: dict[str, dict] = {}
    samples: dict[str, list] = {}
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: corrupt JSON at line {ln}: {e}") from None
            tid = row["task_id"]
            if "split" not in row:
                order.append(tid)
                meta[tid] = row
                samples[tid] = []
            else:
                if tid not in samples:
                    raise ValueError(f"{path}: line {ln}: sample before task metadata")
                samples[tid].append(row)

    tasks = []
    for tid in order:
        rows = samples[tid]
        X = np.array([r["x"] for r in rows], dtype=np.float64)
        y = np.array([r["y"] for r in rows], dtype=np.int64)
        splits = {
            s: np.flatnonzero(np.array([r["split"] for r in rows], dtype=object) == s)
            for s in SPLITS
        }
        latent = meta[tid]["latent"]
        task = TaskDataset(
            task_id=tid,
            X=X,
            y=y,
            splits=splits,
            num_classes=int(meta[tid]["num_classes"]),
            latent=None if latent is None else np.array(latent, dtype=np.float64),
        )
        task.validate()
        tasks.append(task)
    return tasks
