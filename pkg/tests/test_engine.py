import math

import numpy as np
import pytest

from cgl.engine import (DistillConfig, LossBreakdown, RampUpSchedule, aggregate_teacher, exact_expected_cost,
                        expected_cost, rampup_phi, select_best_student, select_subgroup, student_kl_loss)
from cgl.errors import ConfigurationError, InvariantError, NumericalError
from cgl.experiment import build_run
from cgl.nn import Tensor, backward
from cgl.routing import ModuleGrid, PathMatrix, StudentPool


class TestRampUp:
    sched = RampUpSchedule(2, 6, 10)

    def test_start(self):
        assert rampup_phi(2, self.sched) == pytest.approx(0.00673795, abs=1e-8)

    def test_mid(self):
        assert rampup_phi(4, self.sched) == pytest.approx(0.286505, abs=1e-6)

    def test_end(self):
        assert rampup_phi(6, self.sched) == 1.0

    @pytest.mark.parametrize("t", [0, 1, 7, 9])
    def test_outside(self, t):
        assert rampup_phi(t, self.sched) == 1.0

    def test_non_decreasing_inside(self):
        vals = [rampup_phi(t, RampUpSchedule(0, 20, 30)) for t in range(21)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_epoch_out_of_range(self):
        with pytest.raises(ConfigurationError):
            rampup_phi(10, self.sched)

    def test_invalid_window(self):
        with pytest.raises(ConfigurationError):
            RampUpSchedule(5, 3, 10)

    def test_fraction_and_disabled(self):
        assert RampUpSchedule.fraction(50) == RampUpSchedule(0, 10, 50)
        assert all(rampup_phi(t, RampUpSchedule.disabled(5)) == 1.0 for t in range(5))


class TestSubgroup:
    def test_all(self):
        assert select_subgroup(2, 5, 1.0, np.random.default_rng(0)) == [0, 1, 3, 4]

    def test_none(self):
        assert select_subgroup(2, 5, 0.0, np.random.default_rng(0)) == []

    def test_include_self(self):
        assert select_subgroup(2, 5, 1.0, np.random.default_rng(0), include_self=True) == [0, 1, 2, 3, 4]

    def test_mean_size(self):
        rng = np.random.default_rng(1)
        sizes = [len(select_subgroup(0, 5, 0.5, rng)) for _ in range(10_000)]
        assert 1.9 <= np.mean(sizes) <= 2.1

    def test_stream_independent_of_p(self):
        a, b = np.random.default_rng(3), np.random.default_rng(3)
        select_subgroup(0, 6, 0.1, a)
        select_subgroup(0, 6, 0.9, b)
        assert a.random() == b.random()

    def test_bad_p(self):
        with pytest.raises(ConfigurationError):
            select_subgroup(0, 3, 1.5, np.random.default_rng(0))


class TestAggregate:
    def test_singleton(self):
        z = Tensor(np.array([[1.5, -2.0]]))
        np.testing.assert_array_equal(aggregate_teacher([z]).data, z.data)

    def test_mean(self):
        out = aggregate_teacher([Tensor(np.array([[2.0, 0.0]])), Tensor(np.array([[0.0, 2.0]]))])
        np.testing.assert_array_equal(out.data, [[1.0, 1.0]])

    def test_expected_count(self):
        peers = [Tensor(np.array([[2.0, 0.0]])), Tensor(np.array([[0.0, 2.0]]))]
        out = aggregate_teacher(peers, "expected_count", p=0.5, K=5)
        np.testing.assert_array_equal(out.data, [[1.0, 1.0]])

    def test_empty(self):
        assert aggregate_teacher([]) is None

    def test_shape_mismatch(self):
        with pytest.raises(InvariantError):
            aggregate_teacher([Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3)))])


class TestStudentKl:
    def test_equal_logits(self):
        z = np.array([[0.3, 1.0, -2.0]])
        assert student_kl_loss(z, z, 3.0).item() == 0.0

    def test_closed_form(self):
        val = student_kl_loss(np.array([[2.0, 0.0]]), np.array([[0.0, 2.0]]), 1.0).item()
        # teacher probs [e^2, 1]/Z against the mirror image; log-ratio is +-2
        assert val == pytest.approx(2 * math.tanh(1.0), rel=1e-13)

    def test_temperature_softens(self):
        zt, zk = np.array([[2.0, 0.0]]), np.array([[0.0, 2.0]])
        assert student_kl_loss(zt, zk, 4.0).item() < student_kl_loss(zt, zk, 1.0).item()

    def test_t_squared(self):
        zt, zk = np.array([[2.0, 0.0]]), np.array([[0.0, 1.0]])
        assert student_kl_loss(zt, zk, 3.0, t_squared=True).item() == pytest.approx(
            9 * student_kl_loss(zt, zk, 3.0).item(), rel=1e-14)

    def test_detached_teacher(self):
        zt = Tensor(np.array([[1.0, 0.0]]), requires_grad=True)
        zk = Tensor(np.array([[0.0, 1.0]]), requires_grad=True)
        grads = backward(student_kl_loss(zt, zk, 2.0))
        assert zt not in grads and zk in grads
        grads = backward(student_kl_loss(zt, zk, 2.0, detach=False))
        assert zt in grads


class TestCost:
    def test_rough_value(self):
        assert expected_cost(16, 8, 0.25) == 6

    def test_no_imitation(self):
        assert expected_cost(16, 8, 0.0) == 2

    def test_exact(self):
        assert exact_expected_cost(16, 8, 0.25) == pytest.approx(5.5)
        assert exact_expected_cost(16, 8, 0.25, include_self=True) == 6


class TestConfigTypes:
    def test_distill_validation(self):
        with pytest.raises(ConfigurationError):
            DistillConfig(temperature=0.0)
        with pytest.raises(ConfigurationError):
            DistillConfig(p=-0.1)

    def test_breakdown_identity(self):
        br = LossBreakdown.compose([1.0, 2.0], [0.5, 0.25], 0.5)
        assert br.total == pytest.approx(1 + 2 + 0.5 * 0.75, abs=1e-12)


class TestBestStudent:
    def _pool(self, indices):
        return StudentPool([PathMatrix.from_indices(i, 2) for i in indices])

    def test_single(self, toy):
        run = build_run(toy(**{"pool.K": 1}))
        assert run.best()[0] == 0

    def test_tie_lower_index(self, toy):
        run = build_run(toy())
        pool = self._pool([[1, 0], [1, 0]])
        assert select_best_student(pool, run.grid, run.data.holdout)[0] == 0

    def test_matches_recomputed(self, toy):
        run = build_run(toy())
        run.trainer.train(3)
        k, acc = run.best()
        ho = run.data.holdout
        pred = run.grid.modules  # recompute by hand through the chosen path
        h = ho.features
        for layer, m in zip(pred, run.pool.paths[k].indices):
            blk = layer[m]
            h = h @ blk.weight.data + blk.bias.data
            if blk.activation == "relu":
                h = np.maximum(h, 0)
        assert acc == pytest.approx((h.argmax(1) == ho.labels).mean(), abs=0)


class TestTrainer:
    def test_zero_epochs(self, toy):
        run = build_run(toy())
        before = [t.data.copy() for t in run.trainer.params]
        assert run.trainer.train(0) == []
        assert all(np.array_equal(a, t.data) for a, t in zip(before, run.trainer.params))

    def test_p_zero_total_is_ce(self, toy):
        run = build_run(toy(**{"distill.p": 0.0}))
        t = run.trainer
        plan = t.epoch_plan(0)
        br = t.train_iteration(0, 0, plan)
        assert br.kl == [0.0, 0.0] and br.total == sum(br.ce)

    def test_identity_every_iteration(self, toy):
        run = build_run(toy(**{"distill.p": 1.0}))
        seen = []
        run.trainer.train(2, on_iteration=lambda e, i, br: seen.append(br))
        for br in seen:
            assert br.total == pytest.approx(sum(c + br.phi * k for c, k in zip(br.ce, br.kl)), abs=1e-9)
        assert any(k > 0 for br in seen for k in br.kl)

    def test_replay(self, toy):
        a = build_run(toy()).trainer.train(3)
        b = build_run(toy()).trainer.train(3)
        assert a == b

    def test_counters(self, toy):
        run = build_run(toy(**{"distill.p": 1.0}))
        m = run.trainer.train(1)[0]
        # every iteration: one own forward plus one peer forward per student
        n_batches = sum(len(b) for b in run.trainer.epoch_plan(0))
        assert m.forward_steps == 2 * n_batches and m.backward_steps == n_batches

    def test_counters_without_detach(self, toy):
        run = build_run(toy(**{"distill.p": 1.0, "distill.detach_teacher": False}))
        m = run.trainer.train(1)[0]
        assert m.backward_steps == m.forward_steps

    def test_detach_leaves_peer_modules_untouched(self, toy):
        # student 0 routes module 0 everywhere, student 1 module 1; only student 0 trains
        run = build_run(toy(**{"pool.independent": True, "distill.p": 1.0, "schedule.ramp_end": 0}))
        t = run.trainer
        idx = t.epoch_plan(0)[0][0]
        grads = backward(t.student_loss(0, idx, [1], 1.0))
        peer = [b for layer in run.grid.modules for b in [layer[1]]]
        for blk in peer:
            assert blk.weight not in grads and blk.bias not in grads

    def test_nan_loss_reports_position(self, toy):
        run = build_run(toy())
        run.grid.modules[0][0].weight.data[:] = np.nan
        run.grid.modules[0][1].weight.data[:] = np.nan
        with pytest.raises(NumericalError, match="epoch 0, batch 0"):
            run.trainer.train(1)

    def test_lr_milestones(self, toy):
        run = build_run(toy(**{"train.lr_milestones": [2], "train.lr_factor": 0.1}))
        assert run.trainer.lr_at(1) == pytest.approx(1e-3)
        assert run.trainer.lr_at(2) == pytest.approx(1e-4)

    def test_repartition_changes_subsets(self, toy):
        run = build_run(toy(**{"partition.repartition": True}))
        a = run.trainer.student_indices(0, 0)
        b = run.trainer.student_indices(0, 1)
        assert not np.array_equal(a, b)

    def test_grid_pool_mismatch(self, toy):
        run = build_run(toy())
        other = ModuleGrid.build(np.random.default_rng(0), 4, 3, 3, 2, 8)
        from cgl.engine import CollabTrainer
        with pytest.raises(ConfigurationError):
            CollabTrainer(other, run.pool, run.data.train, run.trainer.subsets, DistillConfig(),
                          RampUpSchedule(0, 0, 1))
