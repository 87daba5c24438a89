"""Config-driven runs: datasets, grid, pool, trainer, artifacts."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import check_config, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .data import Dataset, full_data_subsets, holdout_split, load_csv, load_idx, partition, synth_blobs
from .engine import CollabTrainer, DistillConfig, EpochMetrics, RampUpSchedule, select_best_student
from .errors import CheckpointError, ConfigurationError
from .routing import (ModuleGrid, SharingConstraint, StudentPool, accuracy, build_pool, independent_pool,
                      read_structure, write_structure)

logger = logging.getLogger(__name__)


@dataclass
class Datasets:
    train: Dataset
    holdout: Dataset
    test: Dataset | None


@dataclass
class Run:
    config: RunConfig
    data: Datasets
    grid: ModuleGrid
    pool: StudentPool
    trainer: CollabTrainer
    metrics: list = field(default_factory=list)

    def best(self):
        return select_best_student(self.pool, self.grid, self.data.holdout)

    def eval_set(self, split="test"):
        if split == "test" and self.data.test is not None:
            return self.data.test
        if split in ("test", "holdout"):
            return self.data.holdout
        if split == "train":
            return self.data.train
        raise ConfigurationError(f"unknown split {split!r}")

    def test_accuracy(self, k):
        ds = self.eval_set("test")
        return accuracy(self.grid, self.pool.paths[k], ds.features, ds.labels)

    def summary(self) -> dict:
        best, hold = self.best()
        return {
            "best_student": best,
            "best_holdout_acc": hold,
            "best_test_acc": self.test_accuracy(best),
            "test_acc": [self.test_accuracy(k) for k in range(self.pool.K)],
        }


def load_datasets(cfg: RunConfig) -> Datasets:
    d = cfg.data
    if d.kind == "blobs":
        full = synth_blobs(d.n_per_class, d.n_classes, d.dim, d.spread, [cfg.seed, 1], d.radius, "blobs")
        test = (synth_blobs(d.test_per_class, d.n_classes, d.dim, d.spread, [cfg.seed, 2], d.radius, "blobs-test")
                if d.test_per_class > 0 else None)
    elif d.kind == "csv":
        full = load_csv(d.train_path, d.label_column)
        test = load_csv(d.test_path, d.label_column, n_classes=full.n_classes) if d.test_path else None
    else:
        full = load_idx(d.train_images, d.train_labels)
        test = (load_idx(d.test_images, d.test_labels, n_classes=full.n_classes)
                if d.test_images and d.test_labels else None)
    train, hold = holdout_split(full, d.holdout_fraction, cfg.seed)
    return Datasets(train, hold, test)


def build_grid(cfg: RunConfig, in_dim, n_classes) -> ModuleGrid:
    M = cfg.pool.K if cfg.pool.independent else cfg.grid.M
    rng = np.random.default_rng([cfg.seed, 5])
    return ModuleGrid.build(rng, in_dim, n_classes, cfg.grid.L, M, cfg.grid.width)


def build_student_pool(cfg: RunConfig) -> StudentPool:
    p = cfg.pool
    if p.structure_file:
        pool = read_structure(p.structure_file)
        if pool.K != p.K or pool.L != cfg.grid.L or pool.M != cfg.grid.M:
            raise ConfigurationError(
                f"structure file {p.structure_file} is K={pool.K}, {pool.L}x{pool.M}; "
                f"config expects K={p.K}, {cfg.grid.L}x{cfg.grid.M}"
            )
        return pool
    if p.independent:
        return independent_pool(p.K, cfg.grid.L)
    rng = np.random.default_rng([cfg.seed, 6])
    return build_pool(rng, (cfg.grid.L, cfg.grid.M), p.K, SharingConstraint(frozenset(p.forced_layers)),
                      distinct=p.distinct, seed=cfg.seed)


def build_subsets(cfg: RunConfig, train: Dataset, K: int):
    pt = cfg.partition
    if pt.full_data:
        return full_data_subsets(len(train), K)
    part = partition(train, K, cfg.seed, pt.mode, pt.overlap)
    return [part.subset_indices(k) for k in range(K)]


def build_run(cfg: RunConfig, datasets: Datasets | None = None, pool: StudentPool | None = None) -> Run:
    data = datasets or load_datasets(cfg)
    grid = build_grid(cfg, data.train.dim, data.train.n_classes)
    pool = pool or build_student_pool(cfg)
    subsets = build_subsets(cfg, data.train, pool.K)
    ds = cfg.distill
    distill = DistillConfig(ds.temperature, ds.p, ds.aggregation, ds.include_self, ds.detach_teacher,
                            ds.loss_reduction, ds.t_squared)
    schedule = RampUpSchedule(cfg.schedule.ramp_start, cfg.ramp_end, cfg.train.epochs)
    t = cfg.train
    repartition = ({"mode": cfg.partition.mode, "overlap": cfg.partition.overlap}
                   if cfg.partition.repartition and not cfg.partition.full_data else None)
    trainer = CollabTrainer(grid, pool, data.train, subsets, distill, schedule, batch_size=t.batch_size,
                            lr=t.lr, seed=cfg.seed, holdout=data.holdout, parallel=t.parallel,
                            workers=t.workers or None, lr_milestones=t.lr_milestones, lr_factor=t.lr_factor,
                            repartition=repartition)
    return Run(cfg, data, grid, pool, trainer)


def restore_run(cfg: RunConfig, checkpoint_path, force=False, datasets=None) -> Run:
    ckpt = load_checkpoint(checkpoint_path)
    check_config(ckpt, cfg.to_dict(), force)
    saved = ckpt.meta["trainer"]["schedule"]
    window = (cfg.schedule.ramp_start, cfg.ramp_end)
    if (saved["start"], saved["end"]) != window and not force:
        # ramp_end defaults to a fraction of train.epochs, so extending a run can move it
        raise CheckpointError(
            f"effective ramp-up window {window} differs from the checkpoint's "
            f"({saved['start']}, {saved['end']}); set schedule.ramp_end explicitly or use --force"
        )
    run = build_run(cfg, datasets, pool=ckpt.pool())
    run.trainer.load_state_dict(ckpt.trainer_state())
    return run


# --------------------------------------------------------------- metrics I/O


def metrics_header(K):
    return (["epoch", "phi"] + [f"ce_{k}" for k in range(K)] + [f"kl_{k}" for k in range(K)]
            + [f"holdout_acc_{k}" for k in range(K)] + ["fwd_steps", "bwd_steps"])


def metrics_row(m: EpochMetrics):
    return [m.epoch, repr(m.phi)] + [repr(float(v)) for v in m.ce + m.kl + m.holdout_acc] + [
        m.forward_steps, m.backward_steps]


def metrics_csv(metrics, K) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header(K))
    for m in metrics:
        w.writerow(metrics_row(m))
    return buf.getvalue()


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class ArtifactWriter:
    """Streams per-epoch metrics and checkpoints into a run directory.

    ``metrics.csv`` holds only deterministic columns; wall-clock time goes to
    ``timing.csv`` so replays stay byte-identical.
    """

    def __init__(self, run: Run, out_dir, append=False):
        self.run = run
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        K = run.pool.K
        self.metrics_path = self.out / "metrics.csv"
        self.timing_path = self.out / "timing.csv"
        if not append or not self.metrics_path.exists():
            self.metrics_path.write_text(",".join(metrics_header(K)) + "\n")
            self.timing_path.write_text("epoch,wall_seconds\n")
        (self.out / "config.yaml").write_text(dump_config(run.config))
        write_structure(self.out / "structure.txt", run.pool)

    def __call__(self, trainer, m: EpochMetrics):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(metrics_row(m))
        with self.metrics_path.open("a") as fh:
            fh.write(buf.getvalue())
        with self.timing_path.open("a") as fh:
            fh.write(f"{m.epoch},{m.wall_seconds:.6f}\n")
        every = self.run.config.train.checkpoint_every
        if every and trainer.epoch % every == 0:
            self.checkpoint(self.out / f"epoch_{trainer.epoch:04d}.ckpt")

    def checkpoint(self, path):
        save_checkpoint(path, self.run.trainer, self.run.config.to_dict())

    def finish(self):
        self.checkpoint(self.out / "final.ckpt")
        summary = self.run.summary()
        lines = ["student,holdout_acc,test_acc"]
        hold = self.run.trainer.holdout_accuracies()
        for k in range(self.run.pool.K):
            lines.append(f"{k},{hold[k]!r},{summary['test_acc'][k]!r}")
        (self.out / "students.csv").write_text("\n".join(lines) + "\n")
        return summary


def execute(cfg: RunConfig, out_dir=None, datasets=None, pool=None, resume=None, force=False,
            epochs=None) -> Run:
    """Train ``cfg`` (optionally resuming) and, with ``out_dir``, write artifacts."""
    run = restore_run(cfg, resume, force, datasets) if resume else build_run(cfg, datasets, pool)
    remaining = cfg.train.epochs - run.trainer.epoch if epochs is None else epochs
    writer = ArtifactWriter(run, out_dir, append=bool(resume)) if out_dir is not None else None
    run.metrics = run.trainer.train(max(0, remaining), on_epoch=writer)
    if writer is not None:
        writer.finish()
    return run


def baseline_config(cfg: RunConfig) -> RunConfig:
    """Single random-path student trained on all data with cross-entropy only."""
    return cfg.replace(**{"pool.K": 1, "distill.p": 0.0, "partition.full_data": True,
                          "pool.forced_layers": [], "pool.independent": False, "pool.structure_file": None})
