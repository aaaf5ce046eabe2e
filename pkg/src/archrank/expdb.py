"""Database of model-training experiments.

One record per (task, architecture encoding, measured performance). Stored
as JSON lines: a header object with the arch-space fingerprint, then one
record object per line. Floats round-trip exactly (shortest-repr encoding).
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .child import ArchSpace
from .tasks import TaskDataset

logger = logging.getLogger(__name__)

DB_FORMAT_VERSION = 1


@dataclass
class ExperimentRecord:
    task_id: str
    encoding: np.ndarray  # flat u vector
    performance: float    # p in [0, 1]
    seed: int
    backend: str
    created_at: str

    def __post_init__(self):
        self.encoding = np.asarray(self.encoding, dtype=np.float64)
        if not 0.0 <= self.performance <= 1.0:
            raise ValueError(f"performance {self.performance} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(
            {
                "task_id": self.task_id,
                "encoding": self.encoding.tolist(),
                "performance": self.performance,
                "seed": self.seed,
                "backend": self.backend,
                "created_at": self.created_at,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        return cls(
            task_id=d["task_id"],
            encoding=np.array(d["encoding"], dtype=np.float64),
            performance=float(d["performance"]),
            seed=int(d["seed"]),
            backend=d["backend"],
            created_at=d["created_at"],
        )

    def __eq__(self, other):
        if not isinstance(other, ExperimentRecord):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and np.array_equal(self.encoding, other.encoding)
            and self.performance == other.performance
            and self.seed == other.seed
            and self.backend == other.backend
            and self.created_at == other.created_at
        )


class ExperimentDB:
    """Records grouped by task, all sharing one arch-space fingerprint."""

    def __init__(self, fingerprint: str | None = None):
        self.fingerprint = fingerprint
        self._by_task: dict[str, list[ExperimentRecord]] = {}

    @property
    def task_ids(self) -> list[str]:
        return sorted(self._by_task)

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_task.values())

    def add(self, record: ExperimentRecord) -> None:
        self._by_task.setdefault(record.task_id, []).append(record)

    def records_for(self, task_id: str) -> list[ExperimentRecord]:
        if task_id not in self._by_task:
            raise KeyError(f"no records for task {task_id!r}")
        return self._by_task[task_id]

    def all_records(self) -> list[ExperimentRecord]:
        return [r for tid in self.task_ids for r in self._by_task[tid]]

    def without_task(self, task_id: str) -> "ExperimentDB":
        """Shallow copy excluding one task's records."""
        out = ExperimentDB(self.fingerprint)
        for tid, recs in self._by_task.items():
            if tid != task_id:
                out._by_task[tid] = list(recs)
        return out

    def encodings_and_perfs(self, task_id: str) -> tuple[np.ndarray, np.ndarray]:
        recs = self.records_for(task_id)
        U = np.stack([r.encoding for r in recs])
        p = np.array([r.performance for r in recs])
        return U, p

    def __eq__(self, other):
        if not isinstance(other, ExperimentDB):
            return NotImplemented
        return (
            self.fingerprint == other.fingerprint
            and self.task_ids == other.task_ids
            and all(self._by_task[t] == other._by_task[t] for t in self.task_ids)
        )


def _measure_one(backend, encoding, task, record_seed):
    try:
        return backend.measure(encoding, task, np.random.default_rng(record_seed))
    except Exception as e:  # skipped with a warning by the caller
        return e


def populate(
    tasks: list[TaskDataset],
    arch_space: ArchSpace,
    backend,
    n_per_task: int,
    seed: int = 0,
    jobs: int = 1,
) -> ExperimentDB:
    """Measure n_per_task random architectures per task.

    Encodings are i.i.d. standard-normal logits. Each record carries its own
    derived seed, so results do not depend on worker scheduling when jobs>1.
    A failing measurement is skipped with a warning; fewer than two survivors
    for a task is an error.
    """
    if n_per_task < 2:
        raise ValueError(f"n_per_task must be >=2, got {n_per_task}")
    db = ExperimentDB(arch_space.fingerprint())
    dim = arch_space.encoding_dim
    task_seeds = np.random.SeedSequence(seed).spawn(len(tasks))

    planned = []  # (task, encoding, record_seed)
    for task, ss in zip(tasks, task_seeds):
        rng = np.random.default_rng(ss)
        encodings = rng.standard_normal((n_per_task, dim))
        record_seeds = rng.integers(0, 2**63 - 1, size=n_per_task)
        for enc, rseed in zip(encodings, record_seeds):
            planned.append((task, enc, int(rseed)))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(
                    _measure_one,
                    [backend] * len(planned),
                    [e for _, e, _ in planned],
                    [t for t, _, _ in planned],
                    [s for _, _, s in planned],
                    chunksize=8,
                )
            )
    else:
        results = [_measure_one(backend, e, t, s) for t, e, s in planned]

    now = datetime.now(timezone.utc).isoformat()
    survivors: dict[str, int] = {t.task_id: 0 for t in tasks}
    for (task, enc, rseed), outcome in zip(planned, results):
        if isinstance(outcome, Exception):
            logger.warning("skipping record for %s: measurement failed: %s", task.task_id, outcome)
            continue
        try:
            p = float(outcome)
        except (TypeError, ValueError):
            logger.warning("skipping record for %s: bad measurement %r", task.task_id, outcome)
            continue
        if not np.isfinite(p) or not 0.0 <= p <= 1.0:
            logger.warning("skipping record for %s: performance %r out of range", task.task_id, p)
            continue
        db.add(
            ExperimentRecord(
                task_id=task.task_id,
                encoding=enc,
                performance=p,
                seed=rseed,
                backend=backend.kind,
                created_at=now,
            )
        )
        survivors[task.task_id] += 1

    for tid, n_ok in survivors.items():
        if n_ok < 2:
            raise RuntimeError(f"task {tid}: only {n_ok} measurements survived, need >=2")
    return db


def batch_for_task(db: ExperimentDB, task_id: str, batch_size: int, rng) -> list[ExperimentRecord]:
    """Uniform sample without replacement; all records when fewer than asked."""
    recs = db.records_for(task_id)
    if len(recs) <= batch_size:
        return list(recs)
    pick = rng.choice(len(recs), size=batch_size, replace=False)
    return [recs[i] for i in pick]


def save(db: ExperimentDB, path, arch_space: ArchSpace | None = None) -> None:
    header = {"version": DB_FORMAT_VERSION, "fingerprint": db.fingerprint}
    if arch_space is not None:
        header["arch_space"] = arch_space.to_dict()
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for rec in db.all_records():
            f.write(rec.to_json() + "\n")


def load(path, expected_space: ArchSpace | None = None) -> ExperimentDB:
    with open(path) as f:
        lines = f.readlines()
    if not lines:
        db = ExperimentDB(None if expected_space is None else expected_space.fingerprint())
        return db
    try:
        header = json.loads(lines[0])
        if not isinstance(header, dict) or "fingerprint" not in header:
            raise ValueError("first line is not a header object")
    except (json.JSONDecodeError, ValueError) as e:
        raise ValueError(f"{path}: corrupt header at line 1: {e}") from None
    if expected_space is not None and header["fingerprint"] != expected_space.fingerprint():
        raise ValueError(
            f"{path}: arch-space fingerprint {header['fingerprint']} does not match "
            f"configured space {expected_space.fingerprint()}"
        )
    db = ExperimentDB(header["fingerprint"])
    for ln, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        try:
            db.add(ExperimentRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}: corrupt record at line {ln}: {e}") from None
    return db
