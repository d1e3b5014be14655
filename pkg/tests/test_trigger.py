import numpy as np
import pytest

from neurogrow.network import ActivationTrace
from neurogrow.trigger import (
    EpochContext,
    GrowthConfig,
    GrowthRefs,
    ablation_trigger,
    compute_ed,
    evaluate_growth,
    fisher_gate,
    post_task_reset,
)


def activations_with_rank(m, n, count, value=1.0):
    """(m, n) matrix whose scaled singular values are `count` copies of
    `value` and zeros elsewhere."""
    h = np.zeros((m, n))
    for i in range(count):
        h[i, i] = np.sqrt(n) * value
    return h


def trace_for(hidden_mats):
    n = hidden_mats[0].shape[1]
    return ActivationTrace(inputs=np.zeros((1, n)), hidden=list(hidden_mats),
                           logits=np.zeros((2, n)))


class TestComputeEd:
    def test_zero_activations(self):
        assert compute_ed(np.zeros((8, 16)), eps=0.05) == 0.0

    def test_scaled_identity_saturates(self):
        m = 12
        assert compute_ed(np.sqrt(m) * np.eye(m), eps=0.05) == 1.0

    def test_rank_one(self):
        h = activations_with_rank(16, 32, count=1, value=2.0)
        assert compute_ed(h, eps=0.05) == 1.0 / 16

    def test_invariant_under_right_orthogonal_rotation(self):
        rng = np.random.default_rng(0)
        h = rng.standard_normal((6, 20))
        q, _ = np.linalg.qr(rng.standard_normal((20, 20)))
        for eps in (0.01, 0.05, 0.3):
            assert compute_ed(h, eps) == compute_ed(h @ q, eps)

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(1)
        h = rng.standard_normal((5, 17))
        perm = rng.permutation(17)
        assert compute_ed(h, 0.05) == compute_ed(h[:, perm], 0.05)


class TestFisherGate:
    def test_positive_values_exceed_zero_threshold(self):
        assert fisher_gate([0.3, 0.1, 0.2], p=25, tau=0.0)

    def test_all_zero_values_fail_strict_inequality(self):
        assert not fisher_gate([0.0, 0.0, 0.0], p=25, tau=0.0)

    def test_nearest_rank_arithmetic(self):
        assert not fisher_gate([0.1, 0.2, 0.3, 0.4], p=25, tau=0.15)
        assert fisher_gate([0.1, 0.2, 0.3, 0.4], p=75, tau=0.15)


class TestEvaluateGrowth:
    def test_margin_sizing(self):
        # 30 of 32 singular values above eps: phi = 0.9375; ref = 0.9
        h = activations_with_rank(32, 64, count=30)
        refs = GrowthRefs(phi0=[1.0])
        cfg = GrowthConfig(gamma=0.9)
        out = evaluate_growth(trace_for([h]), [[1.0] * 4], cfg, refs, [0.0])
        assert out == [(0, 1)]  # raw margin 1.2 floors to 1

    def test_round_up_small_margin(self):
        # phi = 29/32 = 0.90625, ref 0.9 -> raw 0.2 -> k = 1
        h = activations_with_rank(32, 64, count=29)
        refs = GrowthRefs(phi0=[1.0])
        cfg = GrowthConfig(gamma=0.9)
        out = evaluate_growth(trace_for([h]), [[1.0] * 4], cfg, refs, [0.0])
        assert out == [(0, 1)]

    def test_large_margin_floors(self):
        # phi = 1.0 with phi0 = 0.5: raw = 32 * (1 - 0.45) = 17.6 -> 17
        h = activations_with_rank(32, 64, count=32)
        refs = GrowthRefs(phi0=[0.5])
        cfg = GrowthConfig(gamma=0.9)
        out = evaluate_growth(trace_for([h]), [[1.0] * 4], cfg, refs, [0.0])
        assert out == [(0, 17)]

    def test_gate_false_blocks_growth(self):
        h = activations_with_rank(32, 64, count=32)
        refs = GrowthRefs(phi0=[0.5])
        cfg = GrowthConfig(gamma=0.9)
        out = evaluate_growth(trace_for([h]), [[0.0] * 4], cfg, refs, [0.0])
        assert out == []

    def test_ed_below_reference_blocks_growth(self):
        h = activations_with_rank(32, 64, count=20)  # phi = 0.625 < 0.9
        refs = GrowthRefs(phi0=[1.0])
        cfg = GrowthConfig(gamma=0.9)
        out = evaluate_growth(trace_for([h]), [[1.0] * 4], cfg, refs, [0.0])
        assert out == []

    def test_unset_refs_raise(self):
        h = activations_with_rank(8, 16, count=8)
        with pytest.raises(ValueError):
            evaluate_growth(trace_for([h]), [[1.0]], GrowthConfig(),
                            GrowthRefs(), [0.0])

    def test_raising_gamma_never_increases_k(self):
        rng = np.random.default_rng(2)
        h = rng.standard_normal((24, 64)) * 0.7
        refs = GrowthRefs(phi0=[0.6])
        last = None
        for gamma in (0.5, 0.7, 0.9, 0.99):
            cfg = GrowthConfig(gamma=gamma)
            out = evaluate_growth(trace_for([h]), [[1.0] * 4], cfg, refs, [0.0])
            k = out[0][1] if out else 0
            if last is not None:
                assert k <= last
            last = k


class TestPostTaskReset:
    def test_saturated_layer_reference(self):
        m = 10
        trace = trace_for([np.sqrt(64) * np.vstack([np.eye(m)] * 1)[:, :64]])
        # build a rank-m trace explicitly instead
        h = activations_with_rank(m, 64, count=m)
        refs = GrowthRefs(phi0=[0.2], cooldown_remaining=2)
        post_task_reset(refs, trace_for([h]), GrowthConfig())
        assert refs.phi0 == [1.0]
        assert refs.cooldown_remaining == 0

    def test_reset_is_deterministic(self):
        rng = np.random.default_rng(3)
        h = rng.standard_normal((7, 40))
        a = post_task_reset(GrowthRefs(), trace_for([h]), GrowthConfig())
        b = post_task_reset(GrowthRefs(), trace_for([h]), GrowthConfig())
        assert a.phi0 == b.phi0


class TestAblationTrigger:
    def test_ed_only_ignores_gate(self):
        h = activations_with_rank(32, 64, count=32)
        cfg = GrowthConfig(trigger_variant="ed_only")
        refs = GrowthRefs(phi0=[0.5])
        ctx = EpochContext(task_idx=0, at_task_start=False, widths=[32],
                           trace=trace_for([h]), fisher_curr=[[0.0] * 4])
        assert ablation_trigger(cfg, ctx, refs, [1e9]) == [(0, 17)]

    def test_fsat_only_sizes_by_width(self):
        cfg = GrowthConfig(trigger_variant="fsat_only", gamma=0.9)
        ctx = EpochContext(task_idx=0, at_task_start=False, widths=[32, 8],
                           fisher_curr=[[1.0] * 4, [0.0] * 4])
        out = ablation_trigger(cfg, ctx, GrowthRefs(), [0.0, 0.0])
        # layer 0 gated in: k = floor(32 * 0.1) = 3; layer 1 gate false
        assert out == [(0, 3)]

    def test_fixed_per_task_total_arithmetic(self):
        cfg = GrowthConfig(trigger_variant="fixed_per_task", fixed_k=4)
        total = 0
        for task in range(10):
            ctx = EpochContext(task_idx=task, at_task_start=True, widths=[32, 32])
            out = ablation_trigger(cfg, ctx, GrowthRefs(), [0.0, 0.0])
            total += sum(k for _, k in out)
            # never fires mid-task
            mid = EpochContext(task_idx=task, at_task_start=False, widths=[32, 32])
            assert ablation_trigger(cfg, mid, GrowthRefs(), [0.0, 0.0]) == []
        assert total == 80

    def test_scheduled_fires_only_on_listed_tasks(self):
        cfg = GrowthConfig(trigger_variant="scheduled",
                           scheduled_tasks={0, 5, 15, 25}, scheduled_k=8)
        fired = []
        for task in range(10):
            ctx = EpochContext(task_idx=task, at_task_start=True, widths=[16])
            if ablation_trigger(cfg, ctx, GrowthRefs(), [0.0]):
                fired.append(task)
        assert fired == [0, 5]

    def test_loss_plateau_window(self):
        cfg = GrowthConfig(trigger_variant="loss_plateau",
                           plateau_window=3, plateau_tol=0.002)
        widths = [20]
        improving = [0.50, 0.60, 0.70, 0.80]
        ctx = EpochContext(task_idx=1, at_task_start=False, widths=widths,
                           val_acc_history=improving)
        assert ablation_trigger(cfg, ctx, GrowthRefs(), [0.0]) == []
        flat = [0.800, 0.801, 0.801, 0.801]
        ctx = EpochContext(task_idx=1, at_task_start=False, widths=widths,
                           val_acc_history=flat)
        assert ablation_trigger(cfg, ctx, GrowthRefs(), [0.0]) == [(0, 2)]
        # too little history: no decision
        ctx = EpochContext(task_idx=1, at_task_start=False, widths=widths,
                           val_acc_history=flat[:3])
        assert ablation_trigger(cfg, ctx, GrowthRefs(), [0.0]) == []


class TestGrowthConfigValidation:
    def test_gamma_bounds(self):
        with pytest.raises(ValueError):
            GrowthConfig(gamma=1.5)
        with pytest.raises(ValueError):
            GrowthConfig(gamma=0.0)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            GrowthConfig(trigger_variant="sometimes")

    def test_negative_eps(self):
        with pytest.raises(ValueError):
            GrowthConfig(eps=-0.1)
