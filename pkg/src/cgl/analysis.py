"""Diversity, perturbation robustness, sweeps, structure transfer and cost."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .config import RunConfig
from .data import Dataset
from .engine import exact_expected_cost, expected_cost
from .errors import ConfigurationError
from .experiment import baseline_config, execute, load_datasets
from .nn import softmax
from .routing import ModuleGrid, PathMatrix, StudentPool, accuracy, mean_sharing_ratio, predict


def to_csv(rows, columns=None) -> str:
    if not rows:
        return ""
    columns = columns or list(rows[0])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _mean_std(values):
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def spearman(x, y) -> float:
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(stats.spearmanr(x, y).statistic)


# ------------------------------------------------------------------ diversity


@dataclass
class DiversityReport:
    matrix: np.ndarray
    mean: float
    eval_set: str

    def rows(self):
        K = len(self.matrix)
        return [{"student_a": a, "student_b": b, "distance": float(self.matrix[a, b])}
                for a, b in itertools.combinations(range(K), 2)]


def student_probabilities(grid, pool, features):
    return [softmax(predict(grid, p, features)).data for p in pool.paths]


def diversity(grid: ModuleGrid, pool: StudentPool, eval_set: Dataset) -> DiversityReport:
    """Mean over samples of the L2 distance between two students' predicted
    distributions, for every pair; the scalar is the average over pairs."""
    if pool.K < 2:
        raise ConfigurationError("diversity needs at least two students")
    if len(eval_set) == 0:
        raise ConfigurationError("diversity needs a non-empty evaluation set")
    probs = student_probabilities(grid, pool, eval_set.features)
    K = pool.K
    mat = np.zeros((K, K))
    for a, b in itertools.combinations(range(K), 2):
        mat[a, b] = mat[b, a] = np.linalg.norm(probs[a] - probs[b], axis=1).mean()
    pairs = mat[np.triu_indices(K, 1)]
    return DiversityReport(mat, float(pairs.mean()), eval_set.name)


# --------------------------------------------------------------- perturbation


@dataclass
class PerturbationCurve:
    sigmas: list
    mean_acc: list
    drop: list
    base_acc: float
    trials: int
    seed: int

    def rows(self, label=""):
        return [{"model": label, "sigma": s, "mean_acc": a, "drop": d, "base_acc": self.base_acc,
                 "trials": self.trials}
                for s, a, d in zip(self.sigmas, self.mean_acc, self.drop)]


def perturb_and_eval(grid: ModuleGrid, path: PathMatrix, test_set: Dataset, sigmas, trials=10, seed=0):
    """Add i.i.d. N(0, sigma^2) noise to every parameter on ``path`` of a copy
    of ``grid`` and record the mean accuracy drop per sigma.

    Noise for (sigma index i, trial t) comes from a generator keyed by
    ``(seed, i, t)``, so two models with the same layer shapes see identical noise.
    """
    sigmas = [float(s) for s in sigmas]
    if any(s < 0 for s in sigmas) or sigmas != sorted(sigmas):
        raise ConfigurationError(f"sigmas must be ascending and >= 0, got {sigmas}")
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    model = grid.copy()
    params = model.path_parameters(path)
    clean = [t.data.copy() for t in params]
    base = accuracy(model, path, test_set.features, test_set.labels)
    means, drops = [], []
    for i, sigma in enumerate(sigmas):
        if sigma == 0:
            means.append(base)
            drops.append(0.0)
            continue
        accs = []
        for trial in range(trials):
            rng = np.random.default_rng([seed, i, trial, 505])
            for t, c in zip(params, clean):
                t.data = c + sigma * rng.standard_normal(c.shape)
            accs.append(accuracy(model, path, test_set.features, test_set.labels))
            for t, c in zip(params, clean):
                t.data = c.copy()
        m = float(np.mean(accs))
        means.append(m)
        drops.append(base - m)
    return PerturbationCurve(sigmas, means, drops, base, trials, seed)


# --------------------------------------------------------------------- sweeps


def _run_and_score(cfg: RunConfig, datasets=None, pool=None, split="holdout"):
    run = execute(cfg, datasets=datasets, pool=pool)
    best, hold = run.best()
    div = diversity(run.grid, run.pool, run.eval_set(split)).mean if run.pool.K > 1 else float("nan")
    return run, {"best": best, "holdout_acc": hold, "test_acc": run.test_accuracy(best), "diversity": div}


@dataclass
class SweepResult:
    rows: list
    stats: dict = field(default_factory=dict)
    per_seed: list = field(default_factory=list)


def sweep_imitation(cfg: RunConfig, p_values, seeds) -> SweepResult:
    """Fresh runs per (p, seed); reports mean test accuracy and mean diversity."""
    p_values = [float(p) for p in p_values]
    if any(not 0 <= p <= 1 for p in p_values):
        raise ConfigurationError(f"p values must lie in [0, 1], got {p_values}")
    rows, per_seed = [], []
    for p in p_values:
        accs, divs = [], []
        for seed in seeds:
            _, score = _run_and_score(cfg.replace(**{"distill.p": p, "seed": int(seed)}))
            accs.append(score["test_acc"])
            divs.append(score["diversity"])
            per_seed.append({"p": p, "seed": int(seed), **score})
        acc_mean, acc_std = _mean_std(accs)
        div_mean, div_std = _mean_std(divs)
        rows.append({"p": p, "mean_acc": acc_mean, "std_acc": acc_std, "mean_diversity": div_mean,
                     "std_diversity": div_std, "n_seeds": len(seeds)})
    ps = [r["p"] for r in rows]
    accs = [r["mean_acc"] for r in rows]
    rho = spearman(ps, [r["mean_diversity"] for r in rows])
    top = ps[int(np.argmax(accs))]
    stats_ = {
        "spearman_p_diversity": rho,
        "diversity_decreasing": bool(rho < 0) if not math.isnan(rho) else False,
        "best_p": top,
        "interior_peak": bool(min(ps) < top < max(ps)),
        "acc_at_max_p": accs[int(np.argmax(ps))],
        "best_interior_acc": max((a for p, a in zip(ps, accs) if p < max(ps)), default=float("nan")),
    }
    return SweepResult(rows, stats_, per_seed)


def sharing_settings(modules=(), forced=()):
    out = [{"label": f"M={m}", "M": int(m), "forced": 0} for m in modules]
    out += [{"label": f"forced={n}", "M": None, "forced": int(n)} for n in forced]
    return out


def sweep_sharing(cfg: RunConfig, settings, seeds) -> SweepResult:
    """Vary sharing by modules per layer (``M``) or by pinning the first
    ``forced`` layers to module 0 for every student."""
    rows, per_seed = [], []
    for s in settings:
        M = s.get("M") or cfg.grid.M
        forced = list(range(int(s.get("forced", 0))))
        if len(forced) > cfg.grid.L:
            raise ConfigurationError(f"cannot force {len(forced)} of {cfg.grid.L} layers")
        cap = M ** (cfg.grid.L - len(forced))
        over = {"grid.M": M, "pool.forced_layers": forced, "pool.distinct": cfg.pool.K <= cap}
        accs, ratios, divs = [], [], []
        for seed in seeds:
            run, score = _run_and_score(cfg.replace(**over, seed=int(seed)))
            ratio = mean_sharing_ratio(run.pool)
            accs.append(score["test_acc"])
            ratios.append(ratio)
            divs.append(score["diversity"])
            per_seed.append({"setting": s["label"], "seed": int(seed), "sharing_ratio": ratio, **score})
        acc_mean, acc_std = _mean_std(accs)
        rows.append({"setting": s["label"], "M": M, "forced_layers": len(forced),
                     "sharing_ratio": float(np.mean(ratios)), "mean_acc": acc_mean, "std_acc": acc_std,
                     "mean_diversity": float(np.mean(divs)), "n_seeds": len(seeds)})
    order = np.argsort([r["sharing_ratio"] for r in rows], kind="stable")
    accs = [rows[i]["mean_acc"] for i in order]
    stats_ = {}
    if len(rows) >= 3:
        interior = max(accs[1:-1])
        stats_ = {"interior_beats_extremes": bool(interior > accs[0] and interior > accs[-1]),
                  "best_setting": rows[order[int(np.argmax(accs))]]["setting"]}
    return SweepResult(rows, stats_, per_seed)


# ----------------------------------------------------------- structure transfer


@dataclass
class StructureRanking:
    dataset: str
    entries: list  # (structure index, score, rank)

    def top(self, n):
        return [i for i, _, r in self.entries if r <= n]


def rank_scores(scores, dataset="") -> StructureRanking:
    """Rank 1 = highest score; ties go to the lower structure index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    rank = {i: r + 1 for r, i in enumerate(order)}
    return StructureRanking(dataset, [(i, float(scores[i]), rank[i]) for i in range(len(scores))])


@dataclass
class TransferResult:
    ranking_a: StructureRanking
    ranking_b: StructureRanking
    top3_overlap: int
    spearman: float

    def rows(self):
        out = []
        for (i, sa, ra), (_, sb, rb) in zip(self.ranking_a.entries, self.ranking_b.entries):
            out.append({"structure": i, "score_a": sa, "rank_a": ra, "score_b": sb, "rank_b": rb})
        return out


def structure_transfer(structures, cfg_a: RunConfig, cfg_b: RunConfig, seeds) -> TransferResult:
    """Train every structure on both tasks, rank by mean best-holdout accuracy
    and compare rankings (top-3 overlap and Spearman correlation)."""
    if len(structures) < 2:
        raise ConfigurationError("structure transfer needs at least two structures")

    def scores(cfg):
        out = []
        for pool in structures:
            accs = []
            for seed in seeds:
                c = cfg.replace(seed=int(seed), **{"pool.K": pool.K})
                run = execute(c, pool=pool)
                accs.append(run.best()[1])
            out.append(float(np.mean(accs)))
        return out

    ra = rank_scores(scores(cfg_a), "a")
    rb = rank_scores(scores(cfg_b), "b")
    overlap = len(set(ra.top(3)) & set(rb.top(3)))
    rho = spearman([r for _, _, r in ra.entries], [r for _, _, r in rb.entries])
    return TransferResult(ra, rb, overlap, rho)


# ----------------------------------------------------- paired seed experiments


def subset_diversity_comparison(cfg: RunConfig, seeds, split="holdout"):
    """Diversity with and without sub-set data learning, sub-group imitation
    revoked in both arms (every student imitates all peers)."""
    rows = []
    for seed in seeds:
        row = {"seed": int(seed)}
        for label, full in (("with_subsets", False), ("without_subsets", True)):
            c = cfg.replace(seed=int(seed), **{"distill.p": 1.0, "partition.full_data": full})
            _, score = _run_and_score(c, split=split)
            row[label] = score["diversity"]
        rows.append(row)
    return rows


def paired_perturbation(cfg: RunConfig, seeds, sigmas, trials=10):
    """Perturbation curves for the best CGL student and the single-path baseline
    under shared noise, one pair per seed."""
    out = []
    for seed in seeds:
        c = cfg.replace(seed=int(seed))
        data = load_datasets(c)
        cgl = execute(c, datasets=data)
        base = execute(baseline_config(c), datasets=data)
        test = cgl.eval_set("test")
        best, _ = cgl.best()
        out.append({
            "seed": int(seed),
            "cgl": perturb_and_eval(cgl.grid, cgl.pool.paths[best], test, sigmas, trials, seed),
            "baseline": perturb_and_eval(base.grid, base.pool.paths[0], test, sigmas, trials, seed),
            "cgl_test_acc": cgl.test_accuracy(best),
            "baseline_test_acc": base.test_accuracy(0),
        })
    return out


# ----------------------------------------------------------------------- cost


def cost_report(n_batches, K, p, include_self=False) -> dict:
    return {
        "n_batches": n_batches, "K": K, "p": p,
        "rough_cost": expected_cost(n_batches, K, p),
        "exact_cost": exact_expected_cost(n_batches, K, p, include_self),
        "collaborative_baseline": n_batches * K,
    }


def measure_cost(trainer, epochs) -> dict:
    """Run ``epochs`` epochs and report mean per-student forward/backward steps per epoch."""
    f0 = trainer.counter.forward.copy()
    b0 = trainer.counter.backward.copy()
    trainer.train(epochs)
    fwd = (trainer.counter.forward - f0) / epochs
    bwd = (trainer.counter.backward - b0) / epochs
    return {"mean_forward": float(fwd.mean()), "mean_backward": float(bwd.mean()),
            "per_student_forward": fwd.tolist(), "epochs": epochs}
