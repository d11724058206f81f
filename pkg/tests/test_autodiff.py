import numpy as np
import pytest

from stnetlab import (NumericsError, RngStream, ShapeError, Tape, Tensor,
                      set_finite_checks)
from stnetlab import ops
from stnetlab.gradcheck import gradcheck


def param(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def fd_grad(f, t, h=1e-6):
    """Central finite differences of scalar f() w.r.t. every entry of t."""
    g = np.zeros_like(t.data)
    it = np.nditer(t.data, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = t.data[idx]
        t.data[idx] = orig + h
        fp = f()
        t.data[idx] = orig - h
        fm = f()
        t.data[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def check_op(build, tensors, rtol=1e-6, atol=1e-8):
    """Compare tape gradients of sum(build()) with finite differences."""
    def loss_value():
        out = build()
        return float(out.data.sum())

    with Tape() as tape:
        out = build()
        # reduce to scalar through a recorded path
        flat = ops.reshape(out, (out.size,))
        s = ops.mean_axis(flat, 0)
        s = ops.scale(s, float(out.size))
    grads = tape.backward(s)
    for t in tensors:
        g_ad = grads.get(t)
        g_fd = fd_grad(loss_value, t)
        assert g_ad is not None, "missing gradient"
        np.testing.assert_allclose(g_ad, g_fd, rtol=rtol, atol=atol)


class TestBasics:
    def test_relu_subgradient_zero_region(self):
        x = param([-1.0])
        with Tape() as tape:
            y = ops.relu(x)
            s = ops.mean_axis(y, 0)
        g = tape.backward(s).get(x)
        np.testing.assert_array_equal(g, [0.0])

    def test_square_as_multiply(self):
        x = param([3.0])
        with Tape() as tape:
            y = ops.mul(x, x)
            s = ops.mean_axis(y, 0)
        g = tape.backward(s).get(x)
        np.testing.assert_allclose(g, [6.0])

    def test_backward_nonscalar_root_errors(self):
        x = param([[1.0, 2.0]])
        with Tape() as tape:
            y = ops.relu(x)
        with pytest.raises(ShapeError, match="scalar"):
            tape.backward(y)

    def test_tape_topological_order(self):
        a, b = param([1.0]), param([2.0])
        with Tape() as tape:
            c = ops.add(a, b)
            d = ops.mul(c, c)
            e = ops.add(d, c)
            _ = ops.mean_axis(e, 0)
        out_pos = {e.out_id: i for i, e in enumerate(tape.entries)}
        for i, entry in enumerate(tape.entries):
            for nid in entry.in_ids:
                if nid in out_pos:
                    assert out_pos[nid] < i

    def test_grad_accumulates_over_reuse(self):
        x = param([2.0])
        with Tape() as tape:
            y = ops.add(x, x)
            s = ops.mean_axis(y, 0)
        g = tape.backward(s).get(x)
        np.testing.assert_allclose(g, [2.0])

    def test_no_tape_means_no_tracking(self):
        x = param([1.0])
        y = ops.relu(x)
        assert y._node is None

    def test_finite_check_mode(self):
        x = Tensor(np.array([1e308]), requires_grad=True)
        prev = set_finite_checks(True)
        try:
            with pytest.raises(NumericsError, match="mul"):
                ops.mul(x, x)
        finally:
            set_finite_checks(prev)
        # off by default: silently propagates
        y = ops.mul(x, x)
        assert np.isinf(y.data).all()


class TestOpGradients:
    def test_linear(self):
        rng = RngStream(21)
        x = param(rng.normal(size=(3, 4)))
        w = param(rng.normal(size=(4, 2)))
        b = param(rng.normal(size=(2,)))
        check_op(lambda: ops.linear(x, w, b), [x, w, b])

    @pytest.mark.parametrize("rank,groups", [(1, 1), (2, 1), (2, 2), (3, 1), (1, 4)])
    def test_conv(self, rank, groups):
        rng = RngStream(22 + rank * 10 + groups)
        c_in, c_out = groups * 2, groups * 2
        if groups == 4:
            c_in = c_out = 4  # depthwise
        S = (5,) * rank
        K = (3,) + (1,) * (rank - 1)
        x = param(rng.normal(size=(2, c_in) + S))
        w = param(rng.normal(size=(c_out, c_in // groups) + K))
        b = param(rng.normal(size=(c_out,)))
        pad = tuple(1 if k == 3 else 0 for k in K)
        check_op(lambda: ops.convnd_grouped(x, w, b, groups=groups,
                                            padding=pad), [x, w, b])

    def test_conv_strided(self):
        rng = RngStream(29)
        x = param(rng.normal(size=(2, 3, 9, 9)))
        w = param(rng.normal(size=(4, 3, 3, 3)))
        check_op(lambda: ops.convnd_grouped(x, w, padding=1, stride=2), [x, w])

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_batchnorm(self, mode):
        rng = RngStream(31)
        x = param(rng.normal(size=(4, 3, 5)))
        g = param(rng.uniform(0.5, 1.5, size=3))
        b = param(rng.normal(size=3))
        rm = Tensor(rng.normal(size=3).astype(np.float64))
        rv = Tensor(rng.uniform(0.5, 2.0, size=3).astype(np.float64))
        check_op(lambda: ops.batchnorm(x, g, b, rm, rv, mode,
                                       update_stats=False), [x, g, b])

    @pytest.mark.parametrize("kind", ["max", "avg", "global_avg"])
    def test_pool(self, kind):
        rng = RngStream(41)
        x = param(rng.normal(size=(2, 3, 6, 6)))
        if kind == "global_avg":
            check_op(lambda: ops.pool(x, kind), [x])
        else:
            check_op(lambda: ops.pool(x, kind, window=2, stride=2), [x])

    def test_softmax_xent(self):
        rng = RngStream(51)
        logits = param(rng.normal(size=(4, 3)))
        labels = np.array([0, 2, 1, 1])

        def loss_value():
            loss, _ = ops.softmax_xent(logits, labels)
            return loss.item()

        with Tape() as tape:
            loss, _ = ops.softmax_xent(logits, labels)
        g_ad = tape.backward(loss).get(logits)
        np.testing.assert_allclose(g_ad, fd_grad(loss_value, logits),
                                   rtol=1e-6, atol=1e-9)

    def test_shape_ops(self):
        rng = RngStream(61)
        x = param(rng.normal(size=(2, 3, 4)))
        check_op(lambda: ops.transpose(ops.reshape(x, (6, 4)), (1, 0)), [x])
        check_op(lambda: ops.mean_axis(x, 2), [x])
        check_op(lambda: ops.max_axis(x, 2), [x])
        check_op(lambda: ops.gather_axis(x, np.array([0, 0, 2, 1]), 2), [x])
        y = param(rng.normal(size=(2, 5, 4)))
        check_op(lambda: ops.concat([x, y], axis=1), [x, y])


class TestGradcheckHarness:
    def test_linear_layer_tight(self):
        rng = RngStream(71)
        x = Tensor(rng.normal(size=(3, 5)).astype(np.float64))
        params = {
            "fc.weight": param(rng.normal(size=(5, 4))),
            "fc.bias": param(rng.normal(size=(4,))),
        }
        labels = np.array([1, 0, 3])

        def model():
            y = ops.linear(x, params["fc.weight"], params["fc.bias"])
            loss, _ = ops.softmax_xent(y, labels)
            return loss

        rep = gradcheck(model, params, RngStream(72), coords_per_group=24)
        assert rep.max_rel_err < 1e-7
        assert rep.worst_param in params

    def test_conv3d_bn_relu_block(self):
        rng = RngStream(81)
        x = Tensor(rng.normal(size=(2, 3, 4, 3, 3)).astype(np.float64))
        params = {
            "tconv.weight": param(rng.normal(size=(3, 3, 3, 1, 1)) * 0.5),
            "tconv.bias": param(rng.normal(size=(3,))),
            "tbn.gamma": param(rng.uniform(0.5, 1.5, size=3)),
            "tbn.beta": param(rng.normal(size=3)),
        }
        rm = Tensor(np.zeros(3))
        rv = Tensor(np.ones(3))
        labels = np.array([0, 1])

        def model():
            y = ops.convnd_grouped(x, params["tconv.weight"],
                                   params["tconv.bias"], padding=(1, 0, 0))
            y = ops.batchnorm(y, params["tbn.gamma"], params["tbn.beta"],
                              rm, rv, "train", update_stats=False)
            y = ops.relu(y)
            y = ops.pool(y, "global_avg")
            loss, _ = ops.softmax_xent(ops.reshape(y, (2, 3)), labels)
            return loss

        rep = gradcheck(model, params, RngStream(82), coords_per_group=60)
        assert rep.max_rel_err < 1e-5
