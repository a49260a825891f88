import numpy as np
import pytest

from geotoken import nn
from geotoken.errors import NumericalError
from geotoken.nn import AdamW, Tensor


def make_params(rng, shapes):
    return {k: Tensor(rng.normal(size=s), requires_grad=True) for k, s in shapes.items()}


class TestAutodiffOps:
    def test_broadcast_arithmetic_gradients(self):
        rng = np.random.default_rng(0)
        params = make_params(rng, {"a": (3, 4), "b": (4,), "c": (3, 1)})
        def loss():
            a, b, c = params["a"], params["b"], params["c"]
            y = (a * b + c - 0.5) / (b * b + 1.0)
            return (y * y).sum()
        errs = nn.finite_difference_check(loss, params)
        assert max(errs.values()) < 1e-6

    def test_matmul_2d_and_batched(self):
        rng = np.random.default_rng(1)
        params = make_params(rng, {"w": (4, 5), "u": (2, 3, 4)})
        def loss():
            h = params["u"] @ params["w"]          # (2,3,5) batched @ 2d
            return (h * h).mean()
        errs = nn.finite_difference_check(loss, params)
        assert max(errs.values()) < 1e-6

    def test_activation_and_reduction_gradients(self):
        rng = np.random.default_rng(2)
        params = make_params(rng, {"x": (5, 7)})
        def loss():
            x = params["x"]
            y = x.tanh().relu() + x.exp().log() * 0.25
            return y.mean(axis=1).sum() + y.sum(axis=0, keepdims=True).mean()
        errs = nn.finite_difference_check(loss, params)
        assert max(errs.values()) < 1e-6

    def test_softmax_and_log_softmax_gradients(self):
        rng = np.random.default_rng(3)
        params = make_params(rng, {"z": (4, 6)})
        def loss():
            p = nn.softmax(params["z"], axis=-1)
            lp = nn.log_softmax(params["z"], axis=-1)
            return (p * lp).sum()
        errs = nn.finite_difference_check(loss, params)
        assert max(errs.values()) < 1e-6

    def test_layer_norm_gradients(self):
        rng = np.random.default_rng(4)
        params = make_params(rng, {"x": (3, 8), "g": (8,), "b": (8,)})
        def loss():
            y = nn.layer_norm(params["x"], params["g"], params["b"])
            return (y * y).sum()
        errs = nn.finite_difference_check(loss, params)
        assert max(errs.values()) < 1e-6

    def test_embedding_and_gather_gradients(self):
        rng = np.random.default_rng(5)
        params = make_params(rng, {"emb": (6, 4)})
        idx = np.array([[0, 2, 5], [2, 2, 1]])
        tgt = np.array([[1, 0, 3], [2, 1, 0]])
        def loss():
            e = nn.embedding(params["emb"], idx)         # (2,3,4)
            lp = nn.log_softmax(e, axis=-1)
            return -nn.take_last_axis(lp, tgt).mean()
        errs = nn.finite_difference_check(loss, params)
        assert max(errs.values()) < 1e-6

    def test_concat_slice_reshape_transpose_gradients(self):
        rng = np.random.default_rng(6)
        params = make_params(rng, {"a": (2, 3), "b": (2, 2)})
        def loss():
            cat = nn.concat([params["a"], params["b"]], axis=1)   # (2,5)
            t = cat.transpose(1, 0).reshape(5, 2).swapaxes(0, 1)
            return (t[0] * t[1]).sum() + cat[:, 1:4].mean()
        errs = nn.finite_difference_check(loss, params)
        assert max(errs.values()) < 1e-6

    def test_backward_requires_scalar(self):
        t = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(NumericalError):
            (t * 2).backward()

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x + x * 2.0   # dy/dx = 2x + 2 = 8
        y.backward()
        assert x.grad[0] == pytest.approx(8.0)


class TestAdamW:
    def test_matches_reference_update(self):
        rng = np.random.default_rng(7)
        w0 = rng.normal(size=(4,)).astype(np.float64)
        p = Tensor(w0.copy(), requires_grad=True)
        opt = AdamW({"w": p}, lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
        # hand-stepped reference
        m = np.zeros(4); v = np.zeros(4); ref = w0.copy()
        for t in range(1, 6):
            g = np.full(4, 0.5) * t
            p.grad = g.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            ref = ref - 0.1 * (mh / (np.sqrt(vh) + 1e-8) + 0.01 * ref)
        assert np.allclose(p.data, ref, atol=1e-12)

    def test_weight_decay_is_decoupled(self):
        # with a constant gradient, the decay term acts on the weight itself,
        # not through the moment estimates
        p1 = Tensor(np.array([10.0]), requires_grad=True)
        p2 = Tensor(np.array([10.0]), requires_grad=True)
        o1 = AdamW({"w": p1}, lr=0.5, weight_decay=0.0)
        o2 = AdamW({"w": p2}, lr=0.5, weight_decay=0.1)
        for _ in range(3):
            p1.grad = np.array([1.0]); o1.step()
            p2.grad = np.array([1.0]); o2.step()
        # decayed weight is strictly smaller, and by more than the adaptive
        # step alone could explain
        assert p2.data[0] < p1.data[0]

    def test_trains_linear_regression(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(64, 3))
        true_w = np.array([1.5, -2.0, 0.5])
        y = X @ true_w
        w = Tensor(np.zeros(3), requires_grad=True)
        opt = AdamW({"w": w}, lr=0.05)
        first = None
        for _ in range(300):
            opt.zero_grad()
            pred = Tensor(X) @ w.reshape(3, 1)
            err = pred.reshape(64) - Tensor(y)
            loss = (err * err).mean()
            loss.backward()
            opt.step()
            if first is None:
                first = float(loss.data)
        assert float(loss.data) < 1e-3 < first

    def test_step_is_deterministic(self):
        def run():
            p = Tensor(np.ones(5), requires_grad=True)
            opt = AdamW({"w": p}, lr=0.01, weight_decay=1e-6)
            for i in range(10):
                p.grad = np.sin(np.arange(5.0) + i)
                opt.step()
            return p.data.copy()
        assert np.array_equal(run(), run())


class TestInit:
    def test_glorot_bounds_and_determinism(self):
        a = nn.glorot_uniform(np.random.default_rng(9), 16, 48)
        b = nn.glorot_uniform(np.random.default_rng(9), 16, 48)
        lim = np.sqrt(6.0 / 64.0)
        assert np.abs(a.data).max() <= lim
        assert a.data.shape == (16, 48)
        assert a.data.dtype == np.float32
        assert np.array_equal(a.data, b.data)

    def test_zeros_and_ones(self):
        assert not nn.zeros_param((3,)).data.any()
        assert nn.ones_param((3,)).data.sum() == 3.0

    def test_clone_params_as(self):
        p = {"w": Tensor(np.ones(3, dtype=np.float32), requires_grad=True)}
        q = nn.clone_params_as(p, np.float64)
        assert q["w"].data.dtype == np.float64
        q["w"].data[0] = 5.0
        assert p["w"].data[0] == 1.0
