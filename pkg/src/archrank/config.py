"""Run configuration: one JSON document with namespaced sections.

Every pipeline default lives here under its module's namespace. Parsing is
strict -- unknown sections or keys are rejected with a list of every
offending key -- and validation happens before any work. The master seed
fully determines every stochastic choice downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .child import AnalyticBackend, ArchSpace, FeatureModules, RealTrainBackend
from .losses import LOSS_KINDS, LossConfig, TrainConfig
from .search import SearchConfig
from .tasks import TaskFamilyConfig

PRESET_NAMES = ("desk", "paper-shape")


@dataclass
class TasksSection:
    num_tasks: int = 6
    d_in: int = 16
    num_classes: tuple = (2, 4)
    samples_per_task: tuple = (600, 2000)
    cluster_spread: float = 2.0
    label_noise: float = 0.05
    latent_dim: int = 2


@dataclass
class ArchSection:
    num_feature_modules: int = 3
    num_layers: int = 3
    base_sizes: tuple = (8, 16)
    base_acts: tuple = ("relu", "tanh")
    common_width: int = 32


@dataclass
class DbSection:
    records_per_task: int = 300
    backend: str = "analytic"
    tau: float = 2.0
    noise: float = 0.01
    latent_scale: float = 1.5
    epochs: int = 30          # real_train only
    lr: float = 0.05
    batch_size: int = 32


@dataclass
class RankerSection:
    meta_batch_size: int = 256
    n_meta_batches: int = 10
    init_scale: float = 0.05


@dataclass
class LossSection:
    kind: str = "linear_rank"
    margin: float = 0.3
    gap: float = 0.01


@dataclass
class OptSection:
    lr: float = 1e-4
    momentum: float = 0.5
    steps: int = 20_000
    record_batch_size: int = 32


@dataclass
class SearchSection:
    eta: float = 0.01
    max_iters: int = 500
    tol: float = 1e-6
    n_warm_tasks: int = 2
    n_top_per_task: int = 5


@dataclass
class EvalSection:
    n_repeats: int = 10
    loss_kinds: tuple = ("l2", "linear_rank", "quadratic_rank")


@dataclass
class PathsSection:
    out_dir: str = "runs"


_SECTIONS = {
    "tasks": TasksSection,
    "arch": ArchSection,
    "db": DbSection,
    "ranker": RankerSection,
    "loss": LossSection,
    "opt": OptSection,
    "search": SearchSection,
    "eval": EvalSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    tasks: TasksSection = field(default_factory=TasksSection)
    arch: ArchSection = field(default_factory=ArchSection)
    db: DbSection = field(default_factory=DbSection)
    ranker: RankerSection = field(default_factory=RankerSection)
    loss: LossSection = field(default_factory=LossSection)
    opt: OptSection = field(default_factory=OptSection)
    search: SearchSection = field(default_factory=SearchSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> None:
        """Build every derived config, surfacing value errors before any work."""
        self.task_family_config()
        self.arch_space()
        self.loss_config()
        self.train_config()
        self.search_config()
        if self.db.backend not in ("analytic", "real_train"):
            raise ValueError(f"db.backend must be analytic or real_train, got {self.db.backend!r}")
        if self.db.records_per_task < 2:
            raise ValueError(f"db.records_per_task must be >=2, got {self.db.records_per_task}")
        if self.eval.n_repeats < 1:
            raise ValueError(f"eval.n_repeats must be >=1, got {self.eval.n_repeats}")
        for k in self.eval.loss_kinds:
            if k not in LOSS_KINDS:
                raise ValueError(f"eval.loss_kinds contains unknown kind {k!r}")

    # -- derived component configs -----------------------------------------

    def derived_seeds(self) -> dict[str, int]:
        kids = np.random.SeedSequence(self.seed).spawn(4)
        names = ("tasks", "backend", "db", "eval")
        return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}

    def task_family_config(self) -> TaskFamilyConfig:
        t = self.tasks
        cfg = TaskFamilyConfig(
            num_tasks=t.num_tasks,
            d_in=t.d_in,
            num_classes=tuple(t.num_classes),
            samples_per_task=tuple(t.samples_per_task),
            cluster_spread=t.cluster_spread,
            label_noise=t.label_noise,
            latent_dim=t.latent_dim,
            seed=self.derived_seeds()["tasks"],
        )
        cfg.validate()
        return cfg

    def arch_space(self) -> ArchSpace:
        a = self.arch
        return ArchSpace(
            num_feature_modules=a.num_feature_modules,
            num_layers=a.num_layers,
            base_sizes=tuple(a.base_sizes),
            base_acts=tuple(a.base_acts),
            common_width=a.common_width,
        )

    def make_backend(self, space: ArchSpace, tasks):
        seed = self.derived_seeds()["backend"]
        if self.db.backend == "analytic":
            return AnalyticBackend.for_tasks(
                space,
                tasks,
                seed=seed,
                tau=self.db.tau,
                noise=self.db.noise,
                latent_scale=self.db.latent_scale,
            )
        if self.db.backend == "real_train":
            fm = FeatureModules(space, self.tasks.d_in, seed=seed)
            return RealTrainBackend(
                space,
                fm,
                epochs=self.db.epochs,
                lr=self.db.lr,
                batch_size=self.db.batch_size,
            )
        raise ValueError(f"unknown backend {self.db.backend!r}")

    def loss_config(self, kind: str | None = None) -> LossConfig:
        return LossConfig(
            kind=kind or self.loss.kind, margin=self.loss.margin, gap=self.loss.gap
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.opt.steps,
            lr=self.opt.lr,
            momentum=self.opt.momentum,
            record_batch_size=self.opt.record_batch_size,
            meta_batch_size=self.ranker.meta_batch_size,
            init_scale=self.ranker.init_scale,
        )

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            step_size=self.search.eta,
            max_iters=self.search.max_iters,
            tol=self.search.tol,
            n_warm_tasks=self.search.n_warm_tasks,
            n_top_per_task=self.search.n_top_per_task,
            n_z_batches=self.ranker.n_meta_batches,
            z_batch_size=self.ranker.meta_batch_size,
        )


def _coerce(cls, raw: dict, prefix: str, unknown: list[str]):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            unknown.append(f"{prefix}.{key}")
            continue
        default = known[key].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(doc: dict) -> RunConfig:
    """Strict parse: every unknown section or key is collected and rejected."""
    if not isinstance(doc, dict):
        raise ValueError("config document must be a JSON object")
    unknown: list[str] = []
    kwargs = {}
    for key, value in doc.items():
        if key == "seed":
            kwargs["seed"] = int(value)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"section {key!r} must be an object")
            kwargs[key] = _coerce(_SECTIONS[key], value, key, unknown)
        else:
            unknown.append(key)
    if unknown:
        raise ValueError("unknown config keys: " + ", ".join(sorted(unknown)))
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path_or_name) -> RunConfig:
    """Load a config file, or a bundled preset by name ('desk', 'paper-shape')."""
    p = Path(path_or_name)
    if p.exists():
        text = p.read_text()
    elif str(path_or_name) in PRESET_NAMES:
        text = (
            resources.files("archrank").joinpath("presets", f"{path_or_name}.cfg").read_text()
        )
    else:
        raise FileNotFoundError(
            f"no such config file or preset: {path_or_name!r} "
            f"(presets: {', '.join(PRESET_NAMES)})"
        )
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path_or_name}: not valid JSON: {e}") from None
    return config_from_dict(doc)
