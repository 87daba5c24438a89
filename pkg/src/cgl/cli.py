"""``cgl`` command line: train, eval, ablate, analyze, gen-data.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from .checkpoint import check_config, load_checkpoint
from .config import RunConfig, from_dict, load_config
from .data import load_csv, save_csv, synth_blobs
from .engine import exact_expected_cost, select_best_student
from .errors import CheckpointError, ConfigurationError, DataError, InvariantError
from .experiment import Datasets, build_run, execute, load_datasets, read_metrics_csv
from .routing import accuracy, build_pool, read_structure, write_structure

logger = logging.getLogger("cgl")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (ConfigurationError, DataError, CheckpointError, InvariantError)

ABLATIONS = {
    "none": {},
    "rr": {"pool.independent": True, "pool.forced_layers": []},
    "sdl": {"partition.full_data": True},
    "sgi": {"distill.p": 1.0},
}

DEFAULT_P_VALUES = [0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0]
DEFAULT_SIGMAS = [0.0, 0.01, 0.02, 0.05, 0.1]

ANALYZE_HELP = """\
CSV schemas written by each subcommand:
  diversity      diversity.csv      student_a,student_b,distance (+ mean printed)
  perturb        perturbation.csv   seed,model,sigma,mean_acc,drop,base_acc,trials
  sweep-p        sweep_p.csv        p,mean_acc,std_acc,mean_diversity,std_diversity,n_seeds
                 sweep_p_seeds.csv  p,seed,best,holdout_acc,test_acc,diversity
  sweep-sharing  sweep_sharing.csv  setting,M,forced_layers,sharing_ratio,mean_acc,std_acc,mean_diversity,n_seeds
  transfer       transfer.csv       structure,score_a,rank_a,score_b,rank_b
  subsets        subsets.csv        seed,with_subsets,without_subsets
  cost           cost.csv           n_batches,K,p,rough_cost,exact_cost,collaborative_baseline
                                    (+ measured_forward,measured_backward,measured_expected with --measure)
"""


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _seeds(text):
    """``0,1,2`` or ``0-4``."""
    if "-" in text and "," not in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return _ints(text)


def _config(args) -> RunConfig:
    return load_config(args.config, args.set or ())


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _plot(args, fn, *a, **kw):
    if getattr(args, "no_plot", False):
        return None
    from . import plotting  # matplotlib only loads when a figure is wanted

    return getattr(plotting, fn)(*a, **kw)


def _split(data: Datasets, name):
    if name == "test":
        return data.test if data.test is not None else data.holdout
    return data.holdout if name == "holdout" else data.train


def _out_dir(args, cfg, name):
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(cfg.output_dir) / name


# --------------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.parallel:
        cfg = cfg.replace(**{"train.parallel": True})
    out = Path(args.out) if args.out else Path(cfg.output_dir) / cfg.run_id()
    run = execute(cfg, out_dir=out, resume=args.resume, force=args.force)
    summary = run.summary()
    hold = run.trainer.holdout_accuracies()
    for k in range(run.pool.K):
        print(f"student {k}: holdout_acc={hold[k]:.4f} test_acc={summary['test_acc'][k]:.4f}")
    print(f"best student {summary['best_student']}: holdout_acc={summary['best_holdout_acc']:.4f} "
          f"test_acc={summary['best_test_acc']:.4f}")
    print(f"artifacts: {out}")
    if args.plot:
        _plot(args, "plot_training", read_metrics_csv(out / "metrics.csv"), out / "training.png")
    return EXIT_OK


# ---------------------------------------------------------------------- eval


def _eval_datasets(args, cfg: RunConfig) -> Datasets:
    if args.data_csv:
        ds = load_csv(args.data_csv, args.label_column)
        return Datasets(ds, ds, ds)
    return load_datasets(cfg)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.config is None:
        raise CheckpointError(f"{args.checkpoint}: checkpoint carries no configuration")
    saved = from_dict(ckpt.config)
    if args.config or args.set:
        check_config(ckpt, _config(args).to_dict(), args.force)
    grid, pool = ckpt.grid(), ckpt.pool()
    data = _eval_datasets(args, saved)
    K = pool.K
    if args.student == "best":
        k, _ = select_best_student(pool, grid, data.holdout)
    elif args.student == "random":
        k = int(np.random.default_rng([args.seed, 909]).integers(K))
    else:
        try:
            k = int(args.student)
        except ValueError:
            raise ConfigurationError(f"--student must be best, random or an index, got {args.student!r}") from None
        if not 0 <= k < K:
            raise ConfigurationError(f"--student {k} out of range for a pool of K={K} students")
    split = _split(data, args.split)
    acc = accuracy(grid, pool.paths[k], split.features, split.labels)
    print(f"student {k} ({args.student}) {args.split} top-1 accuracy: {acc:.4f}")
    row = [{"checkpoint": str(args.checkpoint), "student": k, "selection": args.student, "split": args.split,
            "n": len(split), "accuracy": acc}]
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.csv")
    _write(out, analysis.to_csv(row))
    return EXIT_OK


# -------------------------------------------------------------------- ablate


def ablation_config(cfg: RunConfig, off: str) -> RunConfig:
    if off not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation {off!r}; choose from {', '.join(ABLATIONS)}")
    return cfg.replace(**ABLATIONS[off])


def run_ablation(cfg: RunConfig, off: str, seed: int) -> dict:
    c = ablation_config(cfg, off).replace(seed=int(seed))
    run = build_run(c)
    peers = []
    run.trainer.draw_subgroups = _recording(run.trainer.draw_subgroups, peers)
    run.metrics = run.trainer.train(c.train.epochs)
    best, hold = run.best()
    samples = [len(run.trainer.student_indices(k, 0)) for k in range(run.pool.K)]
    return {
        "variant": off, "seed": int(seed), "K": run.pool.K, "best_student": best,
        "holdout_acc": hold, "test_acc": run.test_accuracy(best),
        "mean_samples_per_student": float(np.mean(samples)),
        "min_samples_per_student": int(min(samples)),
        "n_train": len(run.data.train),
        "mean_selected_peers": float(np.mean(peers)) if peers else 0.0,
        "distinct_parameters": int(sum(t.data.size for t in run.grid.parameters())),
    }


def _recording(draw, sink):
    def wrapped():
        groups = draw()
        sink.extend(len(g) for g in groups)
        return groups

    return wrapped


def cmd_ablate(args) -> int:
    cfg = _config(args)
    variants = args.off or list(ABLATIONS)
    rows = [run_ablation(cfg, v, s) for v in variants for s in _seeds(args.seeds)]
    for r in rows:
        print(f"{r['variant']:>4} seed {r['seed']}: test_acc={r['test_acc']:.4f} "
              f"samples/student={r['mean_samples_per_student']:.0f} peers={r['mean_selected_peers']:.2f}")
    out = _out_dir(args, cfg, "ablate")
    _write(out / "ablation.csv", analysis.to_csv(rows))
    _plot(args, "plot_ablation", rows, out / "ablation.png")
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


# ------------------------------------------------------------------- analyze


def _analyze_diversity(args, cfg, out):
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        cfg = from_dict(ckpt.config) if ckpt.config else cfg
        grid, pool = ckpt.grid(), ckpt.pool()
        data = load_datasets(cfg)
    else:
        run = build_run(cfg)
        if args.epochs:
            run.trainer.train(args.epochs)
        grid, pool, data = run.grid, run.pool, run.data
    eval_set = _split(data, args.split)
    rep = analysis.diversity(grid, pool, eval_set)
    _write(out / "diversity.csv", analysis.to_csv(rep.rows()))
    _plot(args, "plot_diversity", rep.matrix, out / "diversity.png", title=f"mean {rep.mean:.4f}")
    print(f"mean diversity ({args.split}, n={len(eval_set)}): {rep.mean:.6f}")


def _analyze_perturb(args, cfg, out):
    seeds = _seeds(args.seeds)
    pairs = analysis.paired_perturbation(cfg, seeds, args.sigmas, args.trials)
    rows = []
    for pr in pairs:
        for label in ("cgl", "baseline"):
            rows += [{"seed": pr["seed"], **r} for r in pr[label].rows(label)]
    _write(out / "perturbation.csv", analysis.to_csv(rows))
    _plot(args, "plot_perturbation", rows, out / "perturbation.png")
    for i, s in enumerate(args.sigmas):
        wins = sum(pr["cgl"].drop[i] <= pr["baseline"].drop[i] for pr in pairs)
        print(f"sigma={s}: cgl drop <= baseline drop in {wins}/{len(pairs)} seeds")


def _analyze_sweep_p(args, cfg, out):
    res = analysis.sweep_imitation(cfg, args.p_values, _seeds(args.seeds))
    _write(out / "sweep_p.csv", analysis.to_csv(res.rows))
    _write(out / "sweep_p_seeds.csv", analysis.to_csv(res.per_seed))
    _plot(args, "plot_sweep_p", res.rows, out / "sweep_p.png")
    for r in res.rows:
        print(f"p={r['p']}: acc={r['mean_acc']:.4f} diversity={r['mean_diversity']:.4f}")
    print("stats: " + ", ".join(f"{k}={v}" for k, v in res.stats.items()))


def _analyze_sharing(args, cfg, out):
    settings = analysis.sharing_settings(args.modules, args.forced)
    if not settings:
        raise ConfigurationError("sweep-sharing needs --modules and/or --forced")
    res = analysis.sweep_sharing(cfg, settings, _seeds(args.seeds))
    _write(out / "sweep_sharing.csv", analysis.to_csv(res.rows))
    _plot(args, "plot_sharing", res.rows, out / "sweep_sharing.png")
    for r in res.rows:
        print(f"{r['setting']}: sharing={r['sharing_ratio']:.3f} acc={r['mean_acc']:.4f}")


def _analyze_transfer(args, cfg, out):
    if args.structures:
        structures = [read_structure(p) for p in args.structures]
    else:
        rng = np.random.default_rng([cfg.seed, 606])
        structures = [build_pool(rng, (cfg.grid.L, cfg.grid.M), cfg.pool.K, seed=cfg.seed)
                      for _ in range(args.n_structures)]
        for i, s in enumerate(structures):
            write_structure(out / f"structure_{i}.txt", s)
    # task B starts from task A's settings unless given its own file
    if args.config_b:
        cfg_b = load_config(args.config_b, args.set_b or ())
    else:
        cfg_b = load_config(args.config, [*(args.set or ()), *(args.set_b or ())])
    res = analysis.structure_transfer(structures, cfg, cfg_b, _seeds(args.seeds))
    _write(out / "transfer.csv", analysis.to_csv(res.rows()))
    _plot(args, "plot_transfer", res.rows(), out / "transfer.png")
    print(f"top-3 overlap: {res.top3_overlap}/3, spearman: {res.spearman:.4f}")


def _analyze_subsets(args, cfg, out):
    rows = analysis.subset_diversity_comparison(cfg, _seeds(args.seeds), args.split)
    _write(out / "subsets.csv", analysis.to_csv(rows))
    _plot(args, "plot_paired", rows, out / "subsets.png")
    wins = sum(r["with_subsets"] > r["without_subsets"] for r in rows)
    print(f"diversity higher with sub-sets in {wins}/{len(rows)} seeds")


def _analyze_cost(args, cfg, out):
    rep = analysis.cost_report(args.n_batches, args.K, args.p, args.include_self)
    if args.measure:
        c = cfg.replace(**{"pool.K": args.K, "distill.p": args.p, "distill.include_self": args.include_self})
        run = build_run(c)
        measured = analysis.measure_cost(run.trainer, args.measure)
        rep["measured_forward"] = measured["mean_forward"]
        rep["measured_backward"] = measured["mean_backward"]
        # backward steps with a detached teacher equal the batches each student saw
        per_student = measured["mean_backward"] * args.K
        rep["measured_expected"] = exact_expected_cost(per_student, args.K, args.p, args.include_self)
    _write(out / "cost.csv", analysis.to_csv([rep]))
    print(f"{rep['rough_cost']:g}")
    if args.measure:
        print(f"measured forward steps per student-epoch: {rep['measured_forward']:.4f} "
              f"(expected {rep['measured_expected']:.4f})")


ANALYZERS = {
    "diversity": _analyze_diversity,
    "perturb": _analyze_perturb,
    "sweep-p": _analyze_sweep_p,
    "sweep-sharing": _analyze_sharing,
    "transfer": _analyze_transfer,
    "subsets": _analyze_subsets,
    "cost": _analyze_cost,
}


def cmd_analyze(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, f"analyze-{args.what}")
    out.mkdir(parents=True, exist_ok=True)
    ANALYZERS[args.what](args, cfg, out)
    return EXIT_OK


# ------------------------------------------------------------------ gen-data


BLOB_KEYS = ("n_per_class", "test_per_class", "n_classes", "dim", "spread", "radius", "seed")


def generate_blobs(params: dict, out: Path) -> dict:
    p = dict(params)
    train = synth_blobs(p["n_per_class"], p["n_classes"], p["dim"], p["spread"], [p["seed"], 1], p["radius"])
    paths = {"train": out / "train.csv"}
    save_csv(train, paths["train"])
    if p["test_per_class"] > 0:
        test = synth_blobs(p["test_per_class"], p["n_classes"], p["dim"], p["spread"], [p["seed"], 2],
                           p["radius"])
        paths["test"] = out / "test.csv"
        save_csv(test, paths["test"])
    meta = {"kind": "blobs", "format": "csv", "label_column": "label", "params": p,
            "files": {k: v.name for k, v in paths.items()}}
    (out / "metadata.yaml").write_text(yaml.safe_dump(meta, sort_keys=False))
    return paths


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.from_metadata:
        meta = yaml.safe_load(Path(args.from_metadata).read_text())
        if not isinstance(meta, dict) or meta.get("kind") != "blobs":
            raise DataError(f"{args.from_metadata}: not a blobs metadata file")
        params = {k: meta["params"][k] for k in BLOB_KEYS}
    else:
        params = {k: getattr(args, k) for k in BLOB_KEYS}
    for k in ("n_per_class", "n_classes", "dim"):
        if params[k] < 1:
            raise ConfigurationError(f"{k} must be >= 1, got {params[k]}")
    if params["test_per_class"] < 0 or not params["spread"] > 0:
        raise ConfigurationError("test_per_class must be >= 0 and spread > 0")
    out.mkdir(parents=True, exist_ok=True)
    paths = generate_blobs(params, out)
    for split, path in paths.items():
        print(f"{split}: {path}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted override, e.g. distill.p=0.25 (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-plot", action="store_true", help="skip PNG figures")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cgl", description="Collaborative group learning experiments.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a student pool")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--force", action="store_true", help="resume even if the configuration differs")
    p.add_argument("--parallel", action="store_true", help="compute students concurrently")
    p.add_argument("--plot", action="store_true", help="also render training curves")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of one student from a checkpoint")
    p.add_argument("checkpoint")
    _common(p)
    p.add_argument("--student", default="best", help="best, random or a 0-based index")
    p.add_argument("--seed", type=int, default=0, help="seed for --student random")
    p.add_argument("--split", choices=("test", "holdout", "train"), default="test")
    p.add_argument("--data-csv", help="evaluate on this CSV instead of the checkpoint's data")
    p.add_argument("--label-column", default="label")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train with one component switched off")
    _common(p)
    p.add_argument("--off", action="append", choices=list(ABLATIONS),
                   help="component to disable (repeatable; default: all four variants)")
    p.add_argument("--seeds", default="0", help="e.g. 0,1,2 or 0-4")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="analysis reports", epilog=ANALYZE_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("what", choices=list(ANALYZERS))
    _common(p)
    p.add_argument("--seeds", default="0")
    p.add_argument("--checkpoint", help="diversity: analyze a trained checkpoint")
    p.add_argument("--epochs", type=int, default=0, help="diversity: train this many epochs first")
    p.add_argument("--split", choices=("test", "holdout", "train"), default="holdout")
    p.add_argument("--sigmas", type=_floats, default=DEFAULT_SIGMAS)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--p-values", type=_floats, default=DEFAULT_P_VALUES)
    p.add_argument("--modules", type=_ints, default=[], help="sweep-sharing: M values")
    p.add_argument("--forced", type=_ints, default=[], help="sweep-sharing: numbers of forced layers")
    p.add_argument("--structures", nargs="*", help="transfer: structure descriptor files")
    p.add_argument("--n-structures", type=int, default=5)
    p.add_argument("--config-b", help="transfer: configuration of the second task (default: the first task's)")
    p.add_argument("--set-b", action="append", metavar="KEY=VALUE")
    p.add_argument("--n-batches", type=int, default=16)
    p.add_argument("-K", type=int, default=8)
    p.add_argument("-p", type=float, default=0.25)
    p.add_argument("--include-self", action="store_true")
    p.add_argument("--measure", type=int, default=0, metavar="EPOCHS",
                   help="cost: also count forward steps over this many training epochs")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV plus metadata")
    p.add_argument("kind", choices=("blobs",))
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", dest="n_per_class", type=int, default=500)
    p.add_argument("--test-per-class", dest="test_per_class", type=int, default=0)
    p.add_argument("--classes", dest="n_classes", type=int, default=8)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--spread", type=float, default=1.2)
    p.add_argument("--radius", type=float, default=3.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--from-metadata", help="regenerate from a metadata.yaml sidecar")
    p.set_defaults(func=cmd_gen_data)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - top-level boundary
        print(f"error during {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
