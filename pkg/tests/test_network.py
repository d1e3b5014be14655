import numpy as np
import pytest

from neurogrow.consolidation import ConsolidationState
from neurogrow.network import (
    GrowthInfeasibleError,
    INIT_STRATEGIES,
    cross_entropy,
    forward,
    grow_layer,
    init_mlp,
    load_checkpoint,
    loss_and_grads,
    make_fanin,
    param_count,
    save_checkpoint,
    train_step,
)


def small_mlp(seed=0, input_dim=3, hidden=(4,), output_dim=2):
    return init_mlp(input_dim, hidden, output_dim, np.random.default_rng(seed))


class TestInit:
    def test_param_count_examples(self):
        assert param_count(small_mlp(0, 784, (32, 32), 10)) == 26506
        assert param_count(small_mlp(0, 784, (16,), 10)) == 12730
        # sum over layers of (M_l * M_{l-1} + M_l), output layer included
        assert param_count(small_mlp(0, 784, (64, 64), 10)) == 55050
        assert param_count(small_mlp(0, 784, (64,), 10)) == 50890

    def test_same_seed_bit_identical(self):
        a = small_mlp(42)
        b = small_mlp(42)
        for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
            np.testing.assert_array_equal(wa, wb)
            np.testing.assert_array_equal(ba, bb)

    def test_zero_width_rejected(self):
        with pytest.raises(ValueError):
            init_mlp(3, [0], 2, np.random.default_rng(0))

    def test_biases_zero_and_weights_bounded(self):
        mlp = small_mlp(1, 9, (5,), 4)
        for w, b in mlp.layers:
            assert np.all(b == 0)
            assert np.max(np.abs(w)) <= 1.0 / np.sqrt(w.shape[1])


class TestForward:
    def test_zero_network_gives_zeros(self):
        mlp = small_mlp()
        for w, b in mlp.layers:
            w[:] = 0
        trace = forward(mlp, np.ones((3, 5)))
        for h in trace.hidden:
            assert np.all(h == 0)
        assert np.all(trace.logits == 0)

    def test_rectifier_gates_negative_preactivation(self):
        mlp = init_mlp(1, [1], 1, np.random.default_rng(0))
        mlp.layers[0][0][:] = 1.0
        mlp.layers[0][1][:] = 0.0
        trace = forward(mlp, np.array([[-1.0]]))
        assert trace.hidden[0][0, 0] == 0.0

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(3)
        mlp = init_mlp(4, [5, 3], 2, rng)
        x = rng.standard_normal((4, 7))
        trace = forward(mlp, x)

        # brute-force per-element forward
        n = x.shape[1]
        for s in range(n):
            h = x[:, s]
            for w, b in mlp.layers[:-1]:
                out = np.zeros(w.shape[0])
                for i in range(w.shape[0]):
                    acc = b[i]
                    for j in range(w.shape[1]):
                        acc += w[i, j] * h[j]
                    out[i] = max(acc, 0.0)
                h = out
            w, b = mlp.layers[-1]
            for i in range(w.shape[0]):
                acc = b[i]
                for j in range(w.shape[1]):
                    acc += w[i, j] * h[j]
                assert abs(trace.logits[i, s] - acc) < 1e-12

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            forward(small_mlp(), np.ones((5, 2)))


def total_loss(mlp, x, y, state, lam):
    return loss_and_grads(mlp, x, y, state, lam)[0]


def finite_diff_grads(mlp, x, y, state, lam, h=1e-5):
    grads = []
    for w, b in mlp.layers:
        gw = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + h
            up = total_loss(mlp, x, y, state, lam)
            w[idx] = orig - h
            down = total_loss(mlp, x, y, state, lam)
            w[idx] = orig
            gw[idx] = (up - down) / (2 * h)
        gb = np.zeros_like(b)
        for i in range(b.size):
            orig = b[i]
            b[i] = orig + h
            up = total_loss(mlp, x, y, state, lam)
            b[i] = orig - h
            down = total_loss(mlp, x, y, state, lam)
            b[i] = orig
            gb[i] = (up - down) / (2 * h)
        grads.append([gw, gb])
    return grads


class TestTrainStep:
    def test_zero_lambda_recovers_plain_ce(self):
        rng = np.random.default_rng(0)
        mlp = small_mlp(5)
        state = ConsolidationState.zeros(mlp, alpha=0.9)
        state.fisher[0][0][:] = 3.0  # nonzero Fisher, but lam = 0
        x = rng.standard_normal((3, 8))
        y = rng.integers(0, 2, 8)
        expected_ce = cross_entropy(forward(mlp, x).logits, y)
        loss = train_step(mlp, x, y, state, lam=0.0, lr=0.1, clip=1e9)
        assert abs(loss - expected_ce) < 1e-12

    def test_anchor_coincidence_gives_zero_penalty(self):
        rng = np.random.default_rng(1)
        mlp = small_mlp(6)
        state = ConsolidationState.zeros(mlp, alpha=0.9)  # anchors == theta
        for fw, fb in state.fisher:
            fw[:] = rng.uniform(0, 5, fw.shape)
            fb[:] = rng.uniform(0, 5, fb.shape)
        x = rng.standard_normal((3, 4))
        y = rng.integers(0, 2, 4)
        ce = cross_entropy(forward(mlp, x).logits, y)
        loss = train_step(mlp, x, y, state, lam=100.0, lr=0.0, clip=1e9)
        assert abs(loss - ce) < 1e-12

    @pytest.mark.parametrize("lam", [0.0, 500.0])
    def test_gradients_match_finite_differences(self, lam):
        rng = np.random.default_rng(11)
        # six-parameter model: 1 -> 1 hidden -> 2 outputs
        mlp = init_mlp(1, [1], 2, rng)
        state = ConsolidationState.zeros(mlp, alpha=0.9)
        for (fw, fb), (aw, ab) in zip(state.fisher, state.anchors):
            fw[:] = rng.uniform(0, 2, fw.shape)
            fb[:] = rng.uniform(0, 2, fb.shape)
            aw += rng.standard_normal(aw.shape) * 0.3
            ab += rng.standard_normal(ab.shape) * 0.3
        x = rng.standard_normal((1, 6)) + 0.5
        y = rng.integers(0, 2, 6)
        _, grads = loss_and_grads(mlp, x, y, state, lam)
        fd = finite_diff_grads(mlp, x, y, state, lam)
        for (gw, gb), (fw, fb) in zip(grads, fd):
            for a, b in ((gw, fw), (gb, fb)):
                denom = np.maximum(np.abs(b), 1e-3)
                assert np.max(np.abs(a - b) / denom) < 1e-4

    def test_clipping_norm_and_direction(self):
        rng = np.random.default_rng(2)
        mlp = small_mlp(7)
        x = rng.standard_normal((3, 16)) * 50  # large inputs force big grads
        y = rng.integers(0, 2, 16)
        _, grads = loss_and_grads(mlp, x, y)
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        assert np.linalg.norm(flat) > 1.0
        before = [[w.copy(), b.copy()] for w, b in mlp.layers]
        lr = 0.5
        train_step(mlp, x, y, None, lam=0.0, lr=lr, clip=1.0)
        applied = np.concatenate([
            np.concatenate([((bw - w) / lr).ravel(), (bb - b) / lr])
            for (w, b), (bw, bb) in zip(mlp.layers, before)
        ])
        assert np.linalg.norm(applied) <= 1.0 + 1e-9
        cos = flat @ applied / (np.linalg.norm(flat) * np.linalg.norm(applied))
        assert cos > 1 - 1e-12

    def test_no_clip_below_threshold(self):
        rng = np.random.default_rng(4)
        mlp = small_mlp(8)
        x = rng.standard_normal((3, 4)) * 0.01
        y = rng.integers(0, 2, 4)
        _, grads = loss_and_grads(mlp, x, y)
        before = [[w.copy(), b.copy()] for w, b in mlp.layers]
        train_step(mlp, x, y, None, lam=0.0, lr=1.0, clip=1e6)
        for (w, b), (bw, bb), (gw, gb) in zip(mlp.layers, before, grads):
            np.testing.assert_allclose(bw - w, gw, atol=1e-15)
            np.testing.assert_allclose(bb - b, gb, atol=1e-15)


class TestGrowth:
    @pytest.mark.parametrize("strategy", INIT_STRATEGIES)
    def test_function_preserved(self, strategy):
        rng = np.random.default_rng(9)
        mlp = init_mlp(8, [5, 4], 3, rng)
        probe = rng.standard_normal((8, 256))
        before = forward(mlp, probe).logits.copy()
        assert grow_layer(mlp, 0, 2, strategy, s_init=0.2, rng=rng)
        assert grow_layer(mlp, 1, 1, strategy, s_init=0.2, rng=rng)
        after = forward(mlp, probe).logits
        assert np.max(np.abs(after - before)) < 1e-12

    def test_qr_rows_orthogonal_with_init_scale(self):
        rng = np.random.default_rng(10)
        mlp = init_mlp(8, [4], 2, rng)
        grow_layer(mlp, 0, 3, "qr", s_init=0.2, rng=rng)
        rows = mlp.layers[0][0][4:]
        for i in range(3):
            assert abs(np.linalg.norm(rows[i]) - 0.2) < 1e-10
            for j in range(i + 1, 3):
                assert abs(rows[i] @ rows[j]) < 1e-10

    def test_zero_strategy_unit_is_inert(self):
        rng = np.random.default_rng(12)
        mlp = init_mlp(4, [3], 2, rng)
        grow_layer(mlp, 0, 1, "zero", rng=rng)
        x = rng.standard_normal((4, 32))
        y = rng.integers(0, 2, 32)
        assert np.all(forward(mlp, x).hidden[0][3] == 0)
        _, grads = loss_and_grads(mlp, x, y)
        assert np.all(grads[0][0][3] == 0)
        assert grads[0][1][3] == 0

    def test_nullspace_rows_orthogonal_to_existing(self):
        rng = np.random.default_rng(13)
        mlp = init_mlp(10, [4], 2, rng)
        existing = mlp.layers[0][0].copy()
        grow_layer(mlp, 0, 2, "nullspace", rng=rng)
        new_rows = mlp.layers[0][0][4:]
        for row in new_rows:
            assert abs(np.linalg.norm(row) - 1.0) < 1e-8
            for old in existing:
                assert abs(row @ old) < 1e-8

    def test_nullspace_infeasible_raises(self):
        rng = np.random.default_rng(14)
        # layer is full rank over its 4-dim input: null space is empty
        mlp = init_mlp(4, [4], 2, rng)
        with pytest.raises(GrowthInfeasibleError):
            make_fanin("nullspace", 4, 1, 0.2, mlp.layers[0][0], rng)

    def test_param_count_delta(self):
        rng = np.random.default_rng(15)
        mlp = init_mlp(784, [32, 32], 10, rng)
        base = param_count(mlp)
        grow_layer(mlp, 0, 1, "qr", rng=rng)
        assert param_count(mlp) - base == 784 + 1 + 32

    def test_max_width_refusal(self):
        rng = np.random.default_rng(16)
        mlp = init_mlp(5, [4], 2, rng)
        before = [[w.copy(), b.copy()] for w, b in mlp.layers]
        assert not grow_layer(mlp, 0, 3, "qr", rng=rng, max_width=6)
        for (w, b), (bw, bb) in zip(mlp.layers, before):
            np.testing.assert_array_equal(w, bw)
            np.testing.assert_array_equal(b, bb)
        assert grow_layer(mlp, 0, 2, "qr", rng=rng, max_width=6)

    def test_output_layer_growth_rejected(self):
        mlp = small_mlp()
        with pytest.raises(ValueError):
            grow_layer(mlp, mlp.n_layers - 1, 1, "qr")


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(17)
        mlp = init_mlp(7, [5, 3], 4, rng)
        grow_layer(mlp, 0, 2, "qr", rng=rng)
        path = tmp_path / "model.npz"
        save_checkpoint(mlp, path)
        loaded = load_checkpoint(path)
        assert loaded.input_dim == mlp.input_dim
        assert loaded.output_dim == mlp.output_dim
        for (w, b), (lw, lb) in zip(mlp.layers, loaded.layers):
            np.testing.assert_array_equal(w, lw)
            np.testing.assert_array_equal(b, lb)
