"""Collaborative group training: subset cross-entropy, sub-group imitation,
ramp-up weighting, one shared Adam step per iteration, cost accounting and
best-student selection."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, batches, partition
from .errors import ConfigurationError, InvariantError, NumericalError
from .nn import AdamState, Tensor, add_all, adam_step, backward, distill_kl, softmax_cross_entropy, sum_gradients
from .routing import ModuleGrid, StudentPool, accuracy, forward_student

logger = logging.getLogger(__name__)

AGGREGATION_MODES = ("actual_count", "expected_count")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 3.0
    p: float = 0.5
    aggregation: str = "actual_count"
    include_self: bool = False
    detach_teacher: bool = True
    loss_reduction: str = "sum"
    # multiply the imitation term by T^2 so its gradient scale does not shrink as T grows
    t_squared: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"imitation probability must lie in [0, 1], got {self.p}")
        if self.aggregation not in AGGREGATION_MODES:
            raise ConfigurationError(f"aggregation must be one of {AGGREGATION_MODES}, got {self.aggregation!r}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigurationError(f"loss_reduction must be 'sum' or 'mean', got {self.loss_reduction!r}")


@dataclass(frozen=True)
class RampUpSchedule:
    start: int
    end: int
    total_epochs: int

    def __post_init__(self):
        if not 0 <= self.start <= self.end <= self.total_epochs:
            raise ConfigurationError(
                f"ramp-up needs 0 <= start <= end <= total_epochs, got "
                f"start={self.start}, end={self.end}, total_epochs={self.total_epochs}"
            )

    @classmethod
    def fraction(cls, total_epochs, fraction=0.2, start=0):
        return cls(start, start + int(round(fraction * total_epochs)), total_epochs)

    @classmethod
    def disabled(cls, total_epochs):
        # start == end == 0: epoch 0 sits at the window's end (phi = 1), every later epoch is outside
        return cls(0, 0, total_epochs)


def rampup_phi(t, sched: RampUpSchedule) -> float:
    """Weight of the imitation term at epoch ``t``: 1 outside the window,
    ``exp(-5 (1 - lam)^2)`` inside it with ``lam`` rising linearly 0 -> 1."""
    if not 0 <= t < max(sched.total_epochs, 1):
        raise ConfigurationError(f"epoch {t} outside [0, {sched.total_epochs})")
    if t < sched.start or t > sched.end:
        return 1.0
    lam = 1.0 if sched.end == sched.start else (t - sched.start) / (sched.end - sched.start)
    return math.exp(-5.0 * (1.0 - lam) ** 2)


def select_subgroup(k, K, p, rng: np.random.Generator, include_self=False) -> list:
    """Peers that student ``k`` imitates this iteration, each kept with probability ``p``.

    Always consumes ``K`` uniforms so the stream position does not depend on ``p``.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"imitation probability must lie in [0, 1], got {p}")
    keep = rng.random(K) < p
    return [j for j in range(K) if keep[j] and (include_self or j != k)]


def aggregate_teacher(peer_logits, mode="actual_count", p=None, K=None, include_self=False):
    """Teacher logits from the selected peers, or ``None`` for an empty sub-group.

    ``actual_count`` averages the realised sub-group; ``expected_count`` divides
    the sum by the expected sub-group size ``p (K - 1)`` (``p K`` with self).
    """
    if not peer_logits:
        return None
    shapes = {t.shape for t in peer_logits}
    if len(shapes) != 1:
        raise InvariantError(f"peer logits differ in shape: {sorted(shapes)}")
    total = add_all(list(peer_logits)) if len(peer_logits) > 1 else peer_logits[0]
    if mode == "actual_count":
        divisor = len(peer_logits)
    elif mode == "expected_count":
        divisor = p * (K if include_self else K - 1)
    else:
        raise ConfigurationError(f"aggregation must be one of {AGGREGATION_MODES}, got {mode!r}")
    return total * (1.0 / divisor)


def student_kl_loss(z_t, z_k, T, reduction="sum", detach=True, t_squared=False) -> Tensor:
    if detach and isinstance(z_t, Tensor):
        z_t = z_t.detach()
    loss = distill_kl(z_t, z_k, T, reduction)
    return loss * (T * T) if t_squared else loss


def expected_cost(n_batches, K, p) -> float:
    """Per-student (forward, backward) steps per epoch in the rough form
    ``(N/K)(1 + K p)``, counting imitation forwards as if all ``K`` were eligible."""
    if min(n_batches, K, p) < 0:
        raise ConfigurationError("expected_cost arguments must be >= 0")
    return n_batches / K * (1 + K * p)


def exact_expected_cost(n_batches, K, p, include_self=False) -> float:
    """Expected forwards per student per epoch when only ``K - 1`` peers are eligible."""
    peers = K if include_self else K - 1
    return n_batches / K * (1 + peers * p)


@dataclass
class LossBreakdown:
    ce: list
    kl: list
    phi: float
    total: float

    @classmethod
    def compose(cls, ce, kl, phi):
        total = sum(c + phi * k for c, k in zip(ce, kl))
        return cls(list(ce), list(kl), phi, total)


@dataclass
class StepCounter:
    forward: np.ndarray
    backward: np.ndarray

    @classmethod
    def zeros(cls, K):
        return cls(np.zeros(K, dtype=np.int64), np.zeros(K, dtype=np.int64))

    @property
    def total_forward(self):
        return int(self.forward.sum())

    @property
    def total_backward(self):
        return int(self.backward.sum())


@dataclass
class EpochMetrics:
    epoch: int
    phi: float
    ce: list
    kl: list
    holdout_acc: list
    forward_steps: int
    backward_steps: int
    iterations: int
    wall_seconds: float = field(default=0.0, compare=False)


def select_best_student(pool: StudentPool, grid: ModuleGrid, holdout: Dataset):
    """Student with the highest holdout top-1 accuracy; ties go to the lowest index."""
    if len(holdout) == 0:
        raise ConfigurationError("holdout set is empty")
    accs = [accuracy(grid, p, holdout.features, holdout.labels) for p in pool.paths]
    best = int(np.argmax(accs))
    return best, accs[best]


class CollabTrainer:
    """Trains every student of ``pool`` jointly on the shared ``grid``.

    ``subsets[j]`` lists the training indices of data subset ``j``; student
    ``k`` reads ``subsets[pool.subset_binding[k]]``.
    """

    def __init__(self, grid: ModuleGrid, pool: StudentPool, train_set: Dataset, subsets,
                 distill: DistillConfig, schedule: RampUpSchedule, *, batch_size=64, lr=1e-3,
                 seed=0, holdout: Dataset | None = None, parallel=False, workers=None,
                 lr_milestones=(), lr_factor=0.5, repartition=None):
        if (pool.L, pool.M) != (grid.L, grid.M):
            raise ConfigurationError(f"pool paths are {pool.L}x{pool.M} but grid is {grid.L}x{grid.M}")
        if len(subsets) != pool.K:
            raise ConfigurationError(f"{len(subsets)} data subsets for {pool.K} students")
        if batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
        if train_set.dim != grid.in_dim or train_set.n_classes != grid.n_classes:
            raise ConfigurationError(
                f"data has dim {train_set.dim} / {train_set.n_classes} classes, "
                f"grid expects {grid.in_dim} / {grid.n_classes}"
            )
        self.grid = grid
        self.pool = pool
        self.train_set = train_set
        self.subsets = [np.asarray(s, dtype=np.int64) for s in subsets]
        for j, s in enumerate(self.subsets):
            if s.size == 0:
                raise ConfigurationError(f"data subset {j} is empty")
        self.distill = distill
        self.schedule = schedule
        self.batch_size = batch_size
        self.base_lr = lr
        self.seed = seed
        self.holdout = holdout
        self.parallel = parallel
        self.workers = workers or pool.K
        self.lr_milestones = tuple(sorted(lr_milestones))
        self.lr_factor = lr_factor
        self.repartition = repartition
        self.params = grid.parameters()
        self.param_names = [t.name for t in self.params]
        self.adam = AdamState.zeros_like([t.data for t in self.params], lr=lr)
        self.rng = np.random.default_rng([seed, 404])
        self.epoch = 0
        self.counter = StepCounter.zeros(pool.K)
        self.history: list[EpochMetrics] = []

    @property
    def K(self):
        return self.pool.K

    def lr_at(self, epoch):
        return self.base_lr * self.lr_factor ** sum(1 for m in self.lr_milestones if epoch >= m)

    def student_indices(self, k, epoch):
        if self.repartition:
            part = partition(self.train_set, self.K, (self.seed, epoch), **self.repartition)
            return part.subset_indices(self.pool.subset_binding[k])
        return self.subsets[self.pool.subset_binding[k]]

    def epoch_plan(self, epoch):
        """Per-student batch lists for ``epoch``, deterministic in (seed, epoch, k)."""
        return [batches(self.student_indices(k, epoch), self.batch_size, self.seed, epoch, stream=k)
                for k in range(self.K)]

    # ---------------------------------------------------------------- steps

    def _student_step(self, k, idx, peers, phi):
        d = self.distill
        x = self.train_set.features[idx]
        y = self.train_set.labels[idx]
        path = self.pool.paths[k]
        z_k = forward_student(self.grid, path, x)
        ce = softmax_cross_entropy(z_k, y, d.loss_reduction)
        fwd, bwd = 1, 1
        kl_value = 0.0
        loss = ce
        if peers:
            track = not d.detach_teacher
            peer_logits = [forward_student(self.grid, self.pool.paths[j], x, track=track) for j in peers]
            fwd += len(peers)
            if track:
                bwd += len(peers)
            z_t = aggregate_teacher(peer_logits, d.aggregation, d.p, self.K, d.include_self)
            kl = student_kl_loss(z_t, z_k, d.temperature, d.loss_reduction, d.detach_teacher, d.t_squared)
            kl_value = kl.item()
            loss = ce + kl * phi
        grads = backward(loss)
        return ce.item(), kl_value, grads, fwd, bwd

    def student_loss(self, k, idx, peers, phi) -> Tensor:
        """The scalar loss of student ``k`` as a live graph (for gradient checks)."""
        d = self.distill
        x = self.train_set.features[idx]
        z_k = forward_student(self.grid, self.pool.paths[k], x)
        loss = softmax_cross_entropy(z_k, self.train_set.labels[idx], d.loss_reduction)
        if peers:
            peer_logits = [forward_student(self.grid, self.pool.paths[j], x, track=not d.detach_teacher)
                           for j in peers]
            z_t = aggregate_teacher(peer_logits, d.aggregation, d.p, self.K, d.include_self)
            kl = student_kl_loss(z_t, z_k, d.temperature, d.loss_reduction, d.detach_teacher, d.t_squared)
            loss = loss + kl * phi
        return loss

    def draw_subgroups(self):
        d = self.distill
        return [select_subgroup(k, self.K, d.p, self.rng, d.include_self) for k in range(self.K)]

    def train_iteration(self, epoch, it, plan=None, subgroups=None) -> LossBreakdown:
        """One joint update: every student with a batch at position ``it``
        contributes its loss; gradients are summed in student order and a single
        Adam step is taken."""
        plan = plan if plan is not None else self.epoch_plan(epoch)
        phi = rampup_phi(epoch, self.schedule)
        if subgroups is None:
            subgroups = self.draw_subgroups()
        active = [k for k in range(self.K) if it < len(plan[k])]

        def run(k):
            return self._student_step(k, plan[k][it], subgroups[k], phi)

        if self.parallel and len(active) > 1:
            with ThreadPoolExecutor(max_workers=min(self.workers, len(active))) as ex:
                results = list(ex.map(run, active))
        else:
            results = [run(k) for k in active]

        ce = [0.0] * self.K
        kl = [0.0] * self.K
        for k, (c, l, _, fwd, bwd) in zip(active, results):
            ce[k], kl[k] = c, l
            self.counter.forward[k] += fwd
            self.counter.backward[k] += bwd
        breakdown = LossBreakdown.compose(ce, kl, phi)
        if not math.isfinite(breakdown.total):
            raise NumericalError(f"non-finite loss at epoch {epoch}, batch {it}: {breakdown}")

        grads = sum_gradients([r[2] for r in results])
        grad_arrays = [grads.get(t, np.zeros_like(t.data)) for t in self.params]
        self.adam.lr = self.lr_at(epoch)
        try:
            new, self.adam = adam_step([t.data for t in self.params], grad_arrays, self.adam, self.param_names)
        except NumericalError as err:
            raise NumericalError(f"epoch {epoch}, batch {it}: {err}") from None
        for t, a in zip(self.params, new):
            t.data = a
        return breakdown

    def holdout_accuracies(self):
        if self.holdout is None or len(self.holdout) == 0:
            return [float("nan")] * self.K
        return [accuracy(self.grid, p, self.holdout.features, self.holdout.labels) for p in self.pool.paths]

    def run_epoch(self, on_iteration=None) -> EpochMetrics:
        epoch = self.epoch
        start = time.perf_counter()
        fwd0, bwd0 = self.counter.total_forward, self.counter.total_backward
        plan = self.epoch_plan(epoch)
        n_iter = max(len(b) for b in plan)
        ce = np.zeros(self.K)
        kl = np.zeros(self.K)
        phi = rampup_phi(epoch, self.schedule)
        for it in range(n_iter):
            br = self.train_iteration(epoch, it, plan)
            ce += br.ce
            kl += br.kl
            if on_iteration is not None:
                on_iteration(epoch, it, br)
        self.epoch += 1
        metrics = EpochMetrics(
            epoch=epoch,
            phi=phi,
            ce=ce.tolist(),
            kl=kl.tolist(),
            holdout_acc=self.holdout_accuracies(),
            forward_steps=self.counter.total_forward - fwd0,
            backward_steps=self.counter.total_backward - bwd0,
            iterations=n_iter,
            wall_seconds=time.perf_counter() - start,
        )
        self.history.append(metrics)
        return metrics

    def train(self, epochs, on_epoch=None, on_iteration=None) -> list:
        """Run ``epochs`` more epochs; ``on_epoch(trainer, metrics)`` is called after each."""
        out = []
        for _ in range(epochs):
            m = self.run_epoch(on_iteration)
            logger.info("epoch %d phi=%.4f ce=%.4f kl=%.4f best_holdout=%.4f", m.epoch, m.phi,
                        sum(m.ce), sum(m.kl), max(m.holdout_acc))
            out.append(m)
            if on_epoch is not None:
                on_epoch(self, m)
        return out

    def best_student(self, holdout=None):
        return select_best_student(self.pool, self.grid, holdout if holdout is not None else self.holdout)

    # ----------------------------------------------------------- state I/O

    def state_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "params": [t.data.copy() for t in self.params],
            "adam_m": [m.copy() for m in self.adam.first_moment],
            "adam_v": [v.copy() for v in self.adam.second_moment],
            "adam_step": self.adam.step_count,
            "adam_hyper": {"lr": self.adam.lr, "beta1": self.adam.beta1, "beta2": self.adam.beta2,
                           "epsilon": self.adam.epsilon},
            "rng_state": self.rng.bit_generator.state,
            "counter_forward": self.counter.forward.copy(),
            "counter_backward": self.counter.backward.copy(),
            "subsets": [s.copy() for s in self.subsets],
            "distill": asdict(self.distill),
            "schedule": asdict(self.schedule),
            "seed": self.seed,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "lr_milestones": list(self.lr_milestones),
            "lr_factor": self.lr_factor,
            "repartition": self.repartition,
        }

    def load_state_dict(self, state):
        for t, a in zip(self.params, state["params"]):
            if a.shape != t.shape:
                raise ConfigurationError(f"{t.name}: checkpoint shape {a.shape} != {t.shape}")
            t.data = np.array(a, dtype=np.float64)
        hyper = state["adam_hyper"]
        self.adam = AdamState([np.array(m) for m in state["adam_m"]], [np.array(v) for v in state["adam_v"]],
                              int(state["adam_step"]), **hyper)
        self.rng.bit_generator.state = state["rng_state"]
        self.counter = StepCounter(np.array(state["counter_forward"]), np.array(state["counter_backward"]))
        self.epoch = int(state["epoch"])

