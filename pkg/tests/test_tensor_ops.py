import math

import numpy as np
import pytest

from stnetlab import RngStream, ShapeError, Tensor
from stnetlab import ops

from oracles import batchnorm_naive, conv_naive, pool_naive, rel_err


def t64(a):
    # np.array copies, so Tensors never alias test-owned buffers
    return Tensor(np.array(a, dtype=np.float64))


class TestConv:
    def test_depthwise_1d_example(self):
        # x=[1,2,3], w=[1,0,-1], pad=1 -> [-2,-2,2]
        x = t64([[[1.0, 2.0, 3.0]]])
        w = t64([[[1.0, 0.0, -1.0]]])
        y = ops.convnd_grouped(x, w, groups=1, padding=1, spatial_rank=1)
        np.testing.assert_array_equal(y.data, [[[-2.0, -2.0, 2.0]]])

    def test_identity_kernel(self):
        rng = RngStream(7)
        x = t64(rng.normal(size=(2, 1, 4, 5)))
        w = t64(np.ones((1, 1, 1, 1)))
        b = t64([0.0])
        y = ops.convnd_grouped(x, w, b, groups=1, padding=0)
        np.testing.assert_array_equal(y.data, x.data)

    def test_temporal_mean_kernel_311(self):
        # kernel (3,1,1), weights 1/3, pad (1,0,0): time [3,6,9] -> [3,6,5]
        x = t64(np.array([3.0, 6.0, 9.0]).reshape(1, 1, 3, 1, 1))
        w = t64(np.full((1, 1, 3, 1, 1), 1.0 / 3.0))
        y = ops.convnd_grouped(x, w, padding=(1, 0, 0))
        np.testing.assert_allclose(y.data.reshape(-1), [3.0, 6.0, 5.0],
                                   rtol=0, atol=1e-15)

    def test_output_shape_formula(self):
        x = t64(np.zeros((1, 2, 9, 7)))
        w = t64(np.zeros((4, 2, 3, 3)))
        y = ops.convnd_grouped(x, w, padding=(1, 0))
        assert y.shape == (1, 4, 9, 5)

    def test_group_mismatch_errors(self):
        x = t64(np.zeros((1, 3, 4)))
        w = t64(np.zeros((2, 1, 3)))
        with pytest.raises(ShapeError, match="groups"):
            ops.convnd_grouped(x, w, groups=2, padding=1)
        w2 = t64(np.zeros((2, 1, 3)))
        with pytest.raises(ShapeError, match="groups"):
            ops.convnd_grouped(x, w2, groups=3, padding=1)
        w3 = t64(np.zeros((3, 2, 3)))
        with pytest.raises(ShapeError, match="C_in/G"):
            ops.convnd_grouped(x, w3, groups=3, padding=1)

    def test_kernel_exceeds_input_errors(self):
        x = t64(np.zeros((1, 1, 3)))
        w = t64(np.zeros((1, 1, 6)))
        with pytest.raises(ShapeError, match="kernel dim 0"):
            ops.convnd_grouped(x, w, padding=1)

    @pytest.mark.parametrize("rank", [1, 2, 3])
    def test_matches_naive_oracle(self, rank):
        rng = RngStream(100 + rank)
        for case in range(8):
            r = rng.spawn(case)
            G = int(r.choice([1, 2]))
            cg = int(r.integers(1, 3))
            cog = int(r.integers(1, 3))
            c_in, c_out = G * cg, G * cog
            S = tuple(int(r.integers(2, 6)) for _ in range(rank))
            K = tuple(int(r.integers(1, min(4, s + 1))) for s in S)
            pad = tuple(int(r.integers(0, 2)) for _ in range(rank))
            strd = tuple(int(r.integers(1, 3)) for _ in range(rank))
            B = int(r.integers(1, 3))
            x = r.normal(size=(B, c_in) + S)
            w = r.normal(size=(c_out, cg) + K)
            b = r.normal(size=(c_out,))
            y = ops.convnd_grouped(t64(x), t64(w), t64(b), groups=G,
                                   padding=pad, stride=strd)
            ref = conv_naive(x, w, b, groups=G, padding=pad, stride=strd)
            assert rel_err(y.data, ref) <= 1e-12

    def test_shift_equivariance_interior(self):
        rng = RngStream(11)
        for case in range(10):
            r = rng.spawn(case)
            n = int(r.integers(6, 12))
            x = r.normal(size=(1, 1, n))
            w = r.normal(size=(1, 1, 3))
            xs = np.roll(x, 1, axis=2)
            y = ops.convnd_grouped(t64(x), t64(w), padding=1).data
            ys = ops.convnd_grouped(t64(xs), t64(w), padding=1).data
            # interior positions (>=1 from both ends) shift along with input;
            # gemm may reassociate the 3-term sums, hence the 1-ulp tolerance
            np.testing.assert_allclose(ys[0, 0, 2:-1], y[0, 0, 1:-2],
                                       rtol=1e-12, atol=1e-14)

    def test_determinism_bitwise(self):
        rng = RngStream(5)
        x = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
        w = rng.normal(size=(6, 2, 3, 3)).astype(np.float32)
        a = ops.convnd_grouped(Tensor(x), Tensor(w), groups=2, padding=1).data
        b = ops.convnd_grouped(Tensor(x.copy()), Tensor(w.copy()),
                               groups=2, padding=1).data
        assert a.tobytes() == b.tobytes()


class TestPool:
    def test_global_avg_constant(self):
        x = t64(np.full((2, 3, 4, 4), 2.5))
        y = ops.pool(x, "global_avg")
        np.testing.assert_array_equal(y.data, np.full((2, 3), 2.5))

    def test_max_window2(self):
        x = t64(np.array([1.0, 3.0, 2.0, 4.0]).reshape(1, 1, 4))
        y = ops.pool(x, "max", window=2, stride=2)
        np.testing.assert_array_equal(y.data.reshape(-1), [3.0, 4.0])

    def test_avg_window2(self):
        x = t64(np.array([1.0, 3.0, 2.0, 4.0]).reshape(1, 1, 4))
        y = ops.pool(x, "avg", window=2, stride=2)
        np.testing.assert_array_equal(y.data.reshape(-1), [2.0, 3.0])

    def test_window_exceeds_dims_errors(self):
        x = t64(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ShapeError, match="window"):
            ops.pool(x, "max", window=4, stride=1)

    @pytest.mark.parametrize("kind", ["max", "avg", "global_avg"])
    def test_matches_naive_oracle(self, kind):
        rng = RngStream(200)
        for case in range(8):
            r = rng.spawn(case)
            rank = int(r.choice([1, 2, 3]))
            S = tuple(int(r.integers(2, 7)) for _ in range(rank))
            x = r.normal(size=(2, 2) + S)
            if kind == "global_avg":
                y = ops.pool(t64(x), kind)
                ref = pool_naive(x, kind)
            else:
                win = tuple(int(r.integers(1, s + 1)) for s in S)
                strd = tuple(int(r.integers(1, 3)) for _ in range(rank))
                y = ops.pool(t64(x), kind, window=win, stride=strd)
                ref = pool_naive(x, kind, window=win, stride=strd)
            assert rel_err(y.data, ref) <= 1e-12


class TestBatchnorm:
    def fresh(self, C, dtype=np.float64):
        return (Tensor(np.ones(C, dtype=dtype)), Tensor(np.zeros(C, dtype=dtype)),
                Tensor(np.zeros(C, dtype=dtype)), Tensor(np.ones(C, dtype=dtype)))

    def test_eval_identity_at_init(self):
        rng = RngStream(3)
        x = t64(rng.normal(size=(2, 3, 5)))
        g, b, rm, rv = self.fresh(3)
        y = ops.batchnorm(x, g, b, rm, rv, "eval")
        # gamma=1, beta=0, mean=0, var=1 -> x / sqrt(1 + eps)
        np.testing.assert_allclose(y.data, x.data / np.sqrt(1 + 1e-5),
                                   rtol=1e-15)

    def test_train_constant_input_zeros(self):
        x = t64(np.full((4, 2, 3), 7.0))
        g, b, rm, rv = self.fresh(2)
        y = ops.batchnorm(x, g, b, rm, rv, "train")
        np.testing.assert_array_equal(y.data, np.zeros_like(x.data))

    def test_train_two_point_example(self):
        x = t64(np.array([-1.0, 1.0]).reshape(2, 1))
        g, b, rm, rv = self.fresh(1)
        y = ops.batchnorm(x, g, b, rm, rv, "train", eps=1e-5)
        expect = np.array([-1.0, 1.0]) / math.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(y.data.reshape(-1), expect, rtol=1e-12)

    def test_running_stat_update_rule(self):
        rng = RngStream(4)
        x = rng.normal(size=(3, 2, 4))
        g, b, rm, rv = self.fresh(2)
        rm.data[:] = [1.0, -1.0]
        rv.data[:] = [2.0, 3.0]
        ops.batchnorm(t64(x), g, b, rm, rv, "train", momentum=0.9)
        mu = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        np.testing.assert_allclose(rm.data, 0.9 * np.array([1.0, -1.0]) + 0.1 * mu)
        np.testing.assert_allclose(rv.data, 0.9 * np.array([2.0, 3.0]) + 0.1 * var)

    def test_nonpositive_eps_errors(self):
        x = t64(np.zeros((1, 1, 2)))
        g, b, rm, rv = self.fresh(1)
        with pytest.raises(ShapeError, match="eps"):
            ops.batchnorm(x, g, b, rm, rv, "train", eps=0.0)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_matches_naive_oracle(self, mode):
        rng = RngStream(300)
        for case in range(8):
            r = rng.spawn(case)
            rank = int(r.choice([1, 2, 3]))
            C = int(r.integers(1, 4))
            S = tuple(int(r.integers(2, 5)) for _ in range(rank))
            x = r.normal(size=(2, C) + S)
            gamma = r.normal(size=C)
            beta = r.normal(size=C)
            rmean = r.normal(size=C)
            rvar = r.uniform(0.5, 2.0, size=C)
            gt, bt = t64(gamma), t64(beta)
            rmt, rvt = t64(rmean), t64(rvar)
            y = ops.batchnorm(t64(x), gt, bt, rmt, rvt, mode)
            ref, new_m, new_v = batchnorm_naive(x, gamma, beta, rmean, rvar, mode)
            assert rel_err(y.data, ref) <= 1e-12
            if mode == "train":
                assert rel_err(rmt.data, new_m) <= 1e-12
                assert rel_err(rvt.data, new_v) <= 1e-12


class TestLinearReluXent:
    def test_relu(self):
        y = ops.relu(t64([-2.0, 0.0, 3.0]))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 3.0])

    def test_linear_identity(self):
        rng = RngStream(8)
        x = t64(rng.normal(size=(3, 4)))
        w = t64(np.eye(4))
        b = t64(np.zeros(4))
        y = ops.linear(x, w, b)
        np.testing.assert_array_equal(y.data, x.data)

    def test_xent_symmetric(self):
        loss, probs = ops.softmax_xent(t64([[0.0, 0.0]]), np.array([0]))
        assert abs(loss.item() - math.log(2.0)) < 1e-12
        np.testing.assert_allclose(probs.data, [[0.5, 0.5]])

    def test_label_out_of_range_errors(self):
        with pytest.raises(ShapeError, match="label out of range"):
            ops.softmax_xent(t64([[0.0, 0.0]]), np.array([2]))

    def test_xent_stability_large_logits(self):
        loss, probs = ops.softmax_xent(t64([[1000.0, 0.0]]), np.array([0]))
        assert np.isfinite(loss.item())
        assert abs(loss.item()) < 1e-9


class TestShapeOps:
    def test_gather_resample_indices(self):
        x = t64(np.arange(8.0).reshape(4, 2))
        y = ops.gather_axis(x, np.array([0, 2]), axis=0)
        np.testing.assert_array_equal(y.data, x.data[[0, 2]])

    def test_concat_and_reshape(self):
        a = t64(np.ones((2, 3)))
        b = t64(np.zeros((2, 2)))
        y = ops.concat([a, b], axis=1)
        assert y.shape == (2, 5)
        z = ops.reshape(y, (10,))
        assert z.shape == (10,)

    def test_mixed_dtype_errors(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32))
        b = Tensor(np.ones((2, 2), dtype=np.float64))
        with pytest.raises(ShapeError, match="mixed dtypes"):
            ops.add(a, b)
