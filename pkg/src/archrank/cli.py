"""Command-line pipeline: generate tasks, populate the DB, train, search, evaluate.

Every command is deterministic given its inputs and --seed, never mutates its
input files, and exits nonzero with a one-line diagnostic on failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import expdb
from .config import RunConfig, load_config
from .evaluation import EvalReport, leave_one_out, pca_meta_features
from .losses import LossConfig, train_ranker
from .ranker import RankerWeights
from .search import search
from .tasks import generate_tasks, load_tasks, save_tasks

LOSS_FLAG_MAP = {"l2": "l2", "linear": "linear_rank", "quadratic": "quadratic_rank"}
BACKEND_FLAG_MAP = {"analytic": "analytic", "real-train": "real_train"}


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "loss", None) is not None:
        cfg.loss.kind = LOSS_FLAG_MAP[args.loss]
    if getattr(args, "backend", None) is not None:
        cfg.db.backend = BACKEND_FLAG_MAP[args.backend]
    cfg.validate()
    return cfg


def _load_pipeline_inputs(cfg: RunConfig, tasks_path, db_path=None):
    tasks = load_tasks(tasks_path)
    space = cfg.arch_space()
    db = None
    if db_path is not None:
        db = expdb.load(db_path, expected_space=space)
    return tasks, space, db


def cmd_gen_tasks(cfg: RunConfig, out_path) -> None:
    tasks = generate_tasks(cfg.task_family_config())
    save_tasks(tasks, out_path)
    print(f"wrote {len(tasks)} tasks to {out_path}")


def cmd_populate_db(cfg: RunConfig, tasks_path, out_path, jobs: int = 1) -> None:
    tasks, space, _ = _load_pipeline_inputs(cfg, tasks_path)
    backend = cfg.make_backend(space, tasks)
    db = expdb.populate(
        tasks, space, backend, cfg.db.records_per_task, seed=cfg.derived_seeds()["db"], jobs=jobs
    )
    expdb.save(db, out_path, arch_space=space)
    print(f"wrote {len(db)} records ({cfg.db.records_per_task}/task) to {out_path}")


def cmd_train(cfg: RunConfig, tasks_path, db_path, test_task_id, out_path, metrics_path=None):
    tasks, _, db = _load_pipeline_inputs(cfg, tasks_path, db_path)
    ids = [t.task_id for t in tasks]
    if test_task_id not in ids:
        raise ValueError(f"unknown test task {test_task_id!r}; tasks: {', '.join(ids)}")
    train_tasks = [t for t in tasks if t.task_id != test_task_id]
    weights = train_ranker(
        db.without_task(test_task_id),
        train_tasks,
        cfg.loss_config(),
        cfg.train_config(),
        seed=cfg.derived_seeds()["eval"],
        metrics_path=metrics_path,
    )
    weights.save(out_path)
    print(f"wrote ranker weights to {out_path}")


def cmd_search(cfg: RunConfig, tasks_path, db_path, weights_path, test_task_id, out_path=None):
    tasks, _, db = _load_pipeline_inputs(cfg, tasks_path, db_path)
    by_id = {t.task_id: t for t in tasks}
    if test_task_id not in by_id:
        raise ValueError(f"unknown test task {test_task_id!r}")
    weights = RankerWeights.load(weights_path)
    training_tasks = [t for t in tasks if t.task_id != test_task_id]
    result = search(
        weights,
        db.without_task(test_task_id),
        training_tasks,
        by_id[test_task_id],
        cfg.search_config(),
        np.random.default_rng(cfg.derived_seeds()["eval"]),
    )
    payload = result.to_json()
    if out_path is not None:
        with open(out_path, "w") as f:
            f.write(payload + "\n")
    print(payload)


def cmd_eval_loo(cfg: RunConfig, out_path, jobs: int = 1, pca_out=None, verbose=False):
    """Full pipeline from the config alone: tasks, DB, leave-one-out, report."""
    seeds = cfg.derived_seeds()
    tasks = generate_tasks(cfg.task_family_config())
    space = cfg.arch_space()
    backend = cfg.make_backend(space, tasks)
    db = expdb.populate(tasks, space, backend, cfg.db.records_per_task, seed=seeds["db"], jobs=jobs)

    progress = None
    if verbose:
        total = len(tasks) * len(cfg.eval.loss_kinds) * cfg.eval.n_repeats
        done = [0]

        def progress(task_id, kind, repeat):
            done[0] += 1
            print(f"[{done[0]}/{total}] {task_id} {kind} repeat {repeat}", file=sys.stderr)

    report = leave_one_out(
        tasks,
        db,
        [cfg.loss_config(kind=k) for k in cfg.eval.loss_kinds],
        backend,
        n_repeats=cfg.eval.n_repeats,
        train_cfg=cfg.train_config(),
        search_cfg=cfg.search_config(),
        seed=seeds["eval"],
        progress=progress,
    )
    report.to_csv(out_path)
    if pca_out is not None:
        weights = train_ranker(
            db.without_task(tasks[0].task_id),
            tasks[1:],
            cfg.loss_config(),
            cfg.train_config(),
            seed=seeds["eval"],
        )
        pca_meta_features(
            weights,
            tasks,
            n_batches=cfg.ranker.n_meta_batches,
            batch_size=cfg.ranker.meta_batch_size,
            seed=seeds["eval"],
            csv_path=pca_out,
        )
    print(f"wrote leave-one-out report to {out_path}")
    _print_report(report)


def _print_report(report: EvalReport) -> None:
    for metric, title in (
        ("spearman", "Spearman rank correlation"),
        ("pearson", "Pearson correlation"),
        ("search_perf", "Search: found-architecture performance"),
    ):
        print(f"\n{title} (mean +/- std over repeats)")
        print(report.format_table(metric))


def cmd_report(report_path) -> None:
    _print_report(EvalReport.from_csv(report_path))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="archrank",
        description="Task-aware architecture ranking: offline training and online search.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(s, needs_config=True):
        if needs_config:
            s.add_argument("--config", required=True, help="config file or preset name")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--loss", choices=sorted(LOSS_FLAG_MAP), default=None)
        s.add_argument("--backend", choices=sorted(BACKEND_FLAG_MAP), default=None)

    s = sub.add_parser("gen-tasks", help="generate the task family as JSON lines")
    common(s)
    s.add_argument("--out", required=True)

    s = sub.add_parser("populate-db", help="measure random architectures per task")
    common(s)
    s.add_argument("--tasks", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("train", help="train one ranker with a task held out")
    common(s)
    s.add_argument("--tasks", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--test-task", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", default=None, help="optional training-metrics CSV")

    s = sub.add_parser("search", help="gradient-ascent search for a held-out task")
    common(s)
    s.add_argument("--tasks", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--test-task", required=True)
    s.add_argument("--out", default=None)

    s = sub.add_parser("eval-loo", help="full leave-one-out evaluation from a config")
    common(s)
    s.add_argument("--out", required=True, help="report CSV path")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--pca-out", default=None, help="optional meta-feature PCA CSV")
    s.add_argument("--verbose", action="store_true")

    s = sub.add_parser("report", help="render tables from a report CSV")
    s.add_argument("--report", required=True)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.report)
            return 0
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "gen-tasks":
            cmd_gen_tasks(cfg, args.out)
        elif args.command == "populate-db":
            cmd_populate_db(cfg, args.tasks, args.out, jobs=args.jobs)
        elif args.command == "train":
            cmd_train(cfg, args.tasks, args.db, args.test_task, args.out, args.metrics)
        elif args.command == "search":
            cmd_search(cfg, args.tasks, args.db, args.weights, args.test_task, args.out)
        elif args.command == "eval-loo":
            cmd_eval_loo(cfg, args.out, jobs=args.jobs, pca_out=args.pca_out, verbose=args.verbose)
        return 0
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
