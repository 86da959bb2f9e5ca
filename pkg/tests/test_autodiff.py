"""Finite-difference checks for every tape op plus tape mechanics."""

import gc
import weakref

import numpy as np
import pytest

from sgqa import autodiff as ad
from sgqa import nn
from sgqa.autodiff import Tensor


def check_op(build, shapes, rng, trials=100, rel_tol=1e-3, step=1e-4, scale=1.0):
    """Randomized central-difference check of a scalar-valued builder.

    ``build`` maps a list of Tensors to a scalar Tensor; every input
    slot is checked on every trial.
    """
    for _ in range(trials):
        arrays = [scale * rng.normal(size=s) for s in shapes]
        tensors = [Tensor(a.copy()) for a in arrays]
        out = build(tensors)
        out.backward()
        for slot in range(len(arrays)):
            def f(x, slot=slot):
                ts = [Tensor(a.copy()) for a in arrays]
                ts[slot] = Tensor(x)
                return float(build(ts).data)

            fd = ad.finite_difference_grad(f, arrays[slot].copy(), step=step)
            got = tensors[slot].grad
            assert got is not None
            np.testing.assert_allclose(got, fd, rtol=rel_tol, atol=1e-6)


RNG = np.random.default_rng(1234)


class TestElementwiseOps:
    def test_add_broadcast(self):
        check_op(lambda ts: ad.tensor_sum(ad.mul(ad.add(ts[0], ts[1]), ts[2])),
                 [(3, 4), (3, 1), (3, 4)], RNG, trials=30)

    def test_mul_broadcast(self):
        check_op(lambda ts: ad.tensor_sum(ad.mul(ts[0], ts[1])),
                 [(2, 1, 4), (2, 3, 4)], RNG, trials=30)

    def test_const_variants(self):
        c = RNG.normal(size=(3, 4))
        check_op(lambda ts: ad.tensor_sum(ad.add_const(ad.mul_const(ts[0], 2.5), c)),
                 [(3, 4)], RNG, trials=20)

    def test_tanh(self):
        check_op(lambda ts: ad.tensor_sum(ad.tanh(ts[0])), [(5,)], RNG, trials=30)

    def test_relu(self):
        check_op(lambda ts: ad.tensor_sum(ad.relu(ts[0])), [(4, 3)], RNG, trials=30)

    def test_leaky_relu(self):
        check_op(lambda ts: ad.tensor_sum(ad.leaky_relu(ts[0], 0.2)),
                 [(4, 3)], RNG, trials=30)

    def test_elu(self):
        check_op(lambda ts: ad.tensor_sum(ad.elu(ts[0])), [(4, 3)], RNG, trials=30)

    def test_sigmoid(self):
        check_op(lambda ts: ad.tensor_sum(ad.sigmoid(ts[0])), [(6,)], RNG, trials=30)

    def test_glu(self):
        check_op(lambda ts: ad.tensor_sum(ad.glu(ts[0])), [(3, 8)], RNG, trials=30)

    def test_glu_rejects_odd(self):
        with pytest.raises(ValueError):
            ad.glu(Tensor(np.zeros((2, 3))))


class TestMatmulOps:
    def test_matmul_2d(self):
        check_op(lambda ts: ad.tensor_sum(ad.matmul(ts[0], ts[1])),
                 [(3, 4), (4, 2)], RNG, trials=30)

    def test_matmul_3d_batched(self):
        check_op(lambda ts: ad.tensor_sum(ad.matmul(ts[0], ts[1])),
                 [(2, 3, 4), (2, 4, 5)], RNG, trials=30)

    def test_const_matmul(self):
        c = RNG.normal(size=(5, 3))
        check_op(lambda ts: ad.tensor_sum(ad.const_matmul(c, ts[0])),
                 [(3, 4)], RNG, trials=20)


class TestShapeOps:
    def test_transpose(self):
        check_op(lambda ts: ad.tensor_sum(ad.mul(ad.transpose(ts[0], (1, 0, 2)), ts[1])),
                 [(2, 3, 4), (3, 2, 4)], RNG, trials=20)

    def test_reshape(self):
        check_op(lambda ts: ad.tensor_sum(ad.mul(ad.reshape(ts[0], (6, 2)), ts[1])),
                 [(3, 4), (6, 2)], RNG, trials=20)

    def test_concat(self):
        check_op(lambda ts: ad.tensor_sum(ad.mul(ad.concat([ts[0], ts[1]], axis=1), ts[2])),
                 [(3, 2), (3, 4), (3, 6)], RNG, trials=20)

    def test_sum_axis(self):
        check_op(lambda ts: ad.tensor_sum(ad.mul(ad.tensor_sum(ts[0], axis=0, keepdims=True), ts[1])),
                 [(4, 3), (1, 3)], RNG, trials=20)

    def test_mean(self):
        check_op(lambda ts: ad.tensor_sum(ad.mul(ad.tensor_mean(ts[0], axis=1, keepdims=True), ts[1])),
                 [(4, 3), (4, 1)], RNG, trials=20)


class TestSoftmaxAndLoss:
    def test_softmax(self):
        w = RNG.normal(size=(2, 3, 5))
        check_op(lambda ts: ad.tensor_sum(ad.mul(ad.softmax(ts[0]), Tensor(w))),
                 [(2, 3, 5)], RNG, trials=30)

    def test_cross_entropy_grad(self):
        check_op(lambda ts: ad.softmax_cross_entropy(ts[0], 2), [(6,)], RNG,
                 trials=100, rel_tol=1e-4)

    def test_cross_entropy_uniform_value(self):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros(4)), 1)
        assert loss.item() == pytest.approx(np.log(4))

    def test_cross_entropy_confident(self):
        logits = np.zeros(5)
        logits[3] = 20.0
        assert ad.softmax_cross_entropy(Tensor(logits), 3).item() < 1e-3

    def test_cross_entropy_gradient_is_probs_minus_onehot(self):
        logits = Tensor(RNG.normal(size=7))
        loss = ad.softmax_cross_entropy(logits, 4)
        loss.backward()
        e = np.exp(logits.data - logits.data.max())
        p = e / e.sum()
        p[4] -= 1.0
        np.testing.assert_allclose(logits.grad, p, atol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ad.softmax_cross_entropy(Tensor(np.zeros(3)), 3)


class TestGather:
    def test_gather_rows_scatter_add(self):
        table = Tensor(RNG.normal(size=(6, 3)))
        idx = np.array([0, 2, 2, 5])
        out = ad.gather_rows(table, idx)
        w = RNG.normal(size=(4, 3))
        loss = ad.tensor_sum(ad.mul(out, Tensor(w)))
        loss.backward()
        expected = np.zeros((6, 3))
        np.add.at(expected, idx, w)
        np.testing.assert_allclose(table.grad, expected)


class TestBackwardMechanics:
    def test_sum_loss_gives_ones(self):
        x = Tensor(RNG.normal(size=(3, 2)))
        ad.tensor_sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_dot_grads(self):
        x = Tensor(RNG.normal(size=(1, 5)))
        y = Tensor(RNG.normal(size=(5, 1)))
        ad.tensor_sum(ad.matmul(x, y)).backward()
        np.testing.assert_allclose(x.grad, y.data.T)
        np.testing.assert_allclose(y.grad, x.data.T)

    def test_accumulation_across_multiple_uses(self):
        x = Tensor(np.array([1.0, 2.0]))
        loss = ad.add(ad.tensor_sum(ad.mul(x, x)), ad.tensor_sum(x))
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 1.0)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros(3)).backward()

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        sizes = [(4, 8), (8, 8), (8, 3)]
        weights = [rng.normal(size=s) * 0.5 for s in sizes]
        x0 = rng.normal(size=(2, 4))

        def build(ts):
            h = Tensor(x0)
            for i, w in enumerate(ts):
                h = ad.tanh(ad.matmul(h, w))
            return ad.tensor_sum(h)

        tensors = [Tensor(w.copy()) for w in weights]
        build(tensors).backward()
        for slot in range(3):
            def f(x, slot=slot):
                ts = [Tensor(w.copy()) for w in weights]
                ts[slot] = Tensor(x)
                return float(build(ts).data)

            fd = ad.finite_difference_grad(f, weights[slot].copy())
            np.testing.assert_allclose(tensors[slot].grad, fd, rtol=1e-3, atol=1e-7)

    def test_tape_released_after_backward(self):
        x = Tensor(RNG.normal(size=(4, 4)))
        mid = ad.tanh(x)
        loss = ad.tensor_sum(mid)
        ref = weakref.ref(mid)
        loss.backward()
        assert loss._parents == () and loss._backward is None
        del mid
        gc.collect()
        assert ref() is None

    def test_no_grad_skips_taping(self):
        x = Tensor(RNG.normal(size=(3,)))
        with ad.no_grad():
            y = ad.tanh(x)
        assert y._parents == () and y._backward is None

    def test_no_memory_growth_across_steps(self):
        # stand-in for a training loop: object count must not grow
        x = Tensor(RNG.normal(size=(8, 8)))
        w = Tensor(RNG.normal(size=(8, 8)))

        def step():
            loss = ad.tensor_sum(ad.tanh(ad.matmul(x, w)))
            loss.backward()
            x.grad = None
            w.grad = None

        for _ in range(3):
            step()
        gc.collect()
        before = len([o for o in gc.get_objects() if isinstance(o, Tensor)])
        for _ in range(50):
            step()
        gc.collect()
        after = len([o for o in gc.get_objects() if isinstance(o, Tensor)])
        assert after <= before + 2


class TestNnLayers:
    def test_dense_gradcheck(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(3, 4))
        check_op(
            lambda ts: ad.tensor_sum(ad.tanh(nn.dense(Tensor(x0), ts[0], ts[1]))),
            [(4, 5), (5,)], rng, trials=20,
        )

    def test_scaled_dot_matches_loop(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            d = int(rng.integers(2, 9))
            n = int(rng.integers(1, 7))
            q = rng.normal(size=d)
            E = rng.normal(size=(n, d))
            got = nn.scaled_dot(Tensor(q), Tensor(E)).data
            want = np.array([q @ E[i] / np.sqrt(d) for i in range(n)])
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_scaled_dot_examples(self):
        q = np.array([1.0, 0.0, 0.0, 0.0])
        E = np.array([[2.0, 9.0, 9.0, 9.0]])
        assert nn.scaled_dot(Tensor(q), Tensor(E)).data[0] == pytest.approx(1.0)
        zero = nn.scaled_dot(Tensor(np.zeros(4)), Tensor(E)).data
        np.testing.assert_array_equal(zero, [0.0])

    def test_scaled_dot_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.scaled_dot(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))))

    def test_gat_gradcheck(self):
        rng = np.random.default_rng(7)
        cfg = nn.GatLayerConfig(in_dim=5, out_dim=6, heads=2)
        adj = (rng.random((4, 4)) < 0.5).astype(float)
        adj = np.triu(adj, 1)
        adj = adj + adj.T
        h0 = rng.normal(size=(4, 5))

        def build(ts):
            params = dict(zip(("w", "a_src", "a_dst", "b"), ts))
            return ad.tensor_sum(ad.tanh(nn.gat_layer(Tensor(h0), adj, params, cfg)))

        shapes = [(5, 6), (2, 3, 1), (2, 3, 1), (6,)]
        check_op(build, shapes, rng, trials=25)

    def test_gat_attention_rows_are_distributions(self):
        rng = np.random.default_rng(3)
        cfg = nn.GatLayerConfig(in_dim=4, out_dim=4, heads=2)
        params = nn.init_gat_layer(rng, cfg)
        for _ in range(20):
            n = int(rng.integers(1, 8))
            adj = (rng.random((n, n)) < 0.4).astype(float)
            h = rng.normal(size=(n, 4))
            attn = nn.gat_attention_weights(h, adj, params, cfg)
            np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-8)
            assert np.all(attn >= 0)
            allowed = ((adj + adj.T) > 0) | np.eye(n, dtype=bool)
            assert np.all(attn[:, ~allowed] < 1e-6)

    def test_gat_identity_adjacency_is_self_only(self):
        rng = np.random.default_rng(4)
        cfg = nn.GatLayerConfig(in_dim=4, out_dim=4, heads=1)
        params = {k: Tensor(v) for k, v in nn.init_gat_layer(rng, cfg).items()}
        h = rng.normal(size=(5, 4))
        out_full = nn.gat_layer(Tensor(h), np.eye(5), params, cfg).data
        # each row must depend only on that node's own features
        h2 = h.copy()
        h2[3] += 10.0
        out_mod = nn.gat_layer(Tensor(h2), np.eye(5), params, cfg).data
        np.testing.assert_allclose(out_full[:3], out_mod[:3], atol=1e-12)
        np.testing.assert_allclose(out_full[4], out_mod[4], atol=1e-12)
        assert np.abs(out_full[3] - out_mod[3]).max() > 1e-6

    def test_gat_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        cfg = nn.GatLayerConfig(in_dim=3, out_dim=4, heads=2)
        params = {k: Tensor(v) for k, v in nn.init_gat_layer(rng, cfg).items()}
        n = 6
        adj = (rng.random((n, n)) < 0.4).astype(float)
        adj = np.triu(adj, 1)
        adj = adj + adj.T
        h = rng.normal(size=(n, 3))
        perm = rng.permutation(n)
        out = nn.gat_layer(Tensor(h), adj, params, cfg).data
        out_p = nn.gat_layer(Tensor(h[perm]), adj[np.ix_(perm, perm)], params, cfg).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-10)

    def test_gat_shape_validation(self):
        cfg = nn.GatLayerConfig(in_dim=3, out_dim=4, heads=2)
        params = {k: Tensor(v) for k, v in
                  nn.init_gat_layer(np.random.default_rng(0), cfg).items()}
        with pytest.raises(ValueError):
            nn.gat_layer(Tensor(np.zeros((2, 5))), np.zeros((2, 2)), params, cfg)
        with pytest.raises(ValueError):
            nn.gat_layer(Tensor(np.zeros((2, 3))), np.zeros((3, 3)), params, cfg)

    def test_gat_config_divisibility(self):
        with pytest.raises(ValueError):
            nn.GatLayerConfig(in_dim=3, out_dim=5, heads=2)


class TestAdam:
    def test_zero_grad_no_change(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        opt = nn.Adam(p, lr=0.1)
        p["w"].grad = np.zeros(2)
        before = p["w"].data.copy()
        opt.step()
        np.testing.assert_array_equal(p["w"].data, before)

    def test_quadratic_convergence(self):
        target = 3.7
        p = {"x": Tensor(np.array([0.0]))}
        opt = nn.Adam(p, lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            p["x"].grad = 2.0 * (p["x"].data - target)
            opt.step()
        assert abs(p["x"].data[0] - target) < 1e-2

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(0)
            p = {"w": Tensor(rng.normal(size=4))}
            opt = nn.Adam(p, lr=0.05)
            for i in range(50):
                opt.zero_grad()
                p["w"].grad = np.sin(p["w"].data + i)
                opt.step()
            return p["w"].data.copy()

        np.testing.assert_array_equal(run(), run())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"a": Tensor(rng.normal(size=(2, 3))), "b": Tensor(rng.normal(size=4))}
        meta = {"config_hash": "abc123", "seed": 7}
        path = tmp_path / "ckpt.npz"
        nn.save_checkpoint(path, params, meta)
        stored, got_meta = nn.load_checkpoint(path)
        assert got_meta == meta
        np.testing.assert_array_equal(stored["a"], params["a"].data)

    def test_shape_mismatch_rejected(self, tmp_path):
        params = {"a": Tensor(np.zeros((2, 3)))}
        path = tmp_path / "ckpt.npz"
        nn.save_checkpoint(path, params, {})
        stored, _ = nn.load_checkpoint(path)
        target = {"a": Tensor(np.zeros((3, 2)))}
        with pytest.raises(ValueError):
            nn.load_into(target, stored)

    def test_missing_key_rejected(self, tmp_path):
        params = {"a": Tensor(np.zeros(2))}
        path = tmp_path / "ckpt.npz"
        nn.save_checkpoint(path, params, {})
        stored, _ = nn.load_checkpoint(path)
        with pytest.raises(ValueError):
            nn.load_into({"a": Tensor(np.zeros(2)), "b": Tensor(np.zeros(1))}, stored)
