import math

import numpy as np
import pytest

from khgqa import tensor as T
from khgqa.errors import DataError, IndexOutOfRange, NotScalar, ShapeMismatch


def param(arr):
    return T.Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def grad_check(build, *arrays, seed=0, floor=1e-3):
    """Worst element-wise relative error between backward and central differences.

    ``build`` maps input tensors to an output tensor; the scalar objective is a
    fixed random projection of that output.  The denominator is floored because
    central differences carry ~1e-11 absolute rounding noise, which no
    near-zero gradient entry could match in relative terms.
    """
    inputs = [param(a) for a in arrays]
    out = build(*inputs)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    T.backward(T.tsum(T.mul(out, proj)))
    worst = 0.0
    for t in inputs:
        num = T.numeric_grad(lambda: float(np.sum(build(*inputs).data * proj)), t.data)
        rel = np.abs(t.grad - num) / np.maximum(np.maximum(np.abs(t.grad), np.abs(num)), floor)
        worst = max(worst, float(rel.max()))
    return worst


class TestKernelExamples:
    def test_softmax_rows_symmetric(self):
        np.testing.assert_allclose(T.softmax_rows([[0.0, 0.0]]).data, [[0.5, 0.5]])

    def test_matmul_identity(self, rng):
        a = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(T.matmul(np.eye(2), a).data, a)

    def test_layer_norm_constant_row(self):
        np.testing.assert_allclose(T.layer_norm([[3.0, 3.0, 3.0]]).data, [[0.0, 0.0, 0.0]])

    def test_softmax_rows_sum_to_one(self, rng):
        s = T.softmax_rows(rng.standard_normal((50, 7)) * 10).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ShapeMismatch):
            T.add(np.ones((2, 3)), np.ones((4,)))
        with pytest.raises(ShapeMismatch):
            T.concat_rows([np.ones((2, 3)), np.ones((2, 4))])


class TestCrossEntropy:
    def test_uniform_two(self):
        assert T.cross_entropy_logits([0.0, 0.0], 0).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_confident(self):
        loss = T.cross_entropy_logits([20.0, -20.0], 0).item()
        assert math.isfinite(loss) and loss < 1e-15

    def test_extreme_logits_stable(self):
        loss = T.cross_entropy_logits([1000.0, -1000.0], 1).item()
        assert loss == pytest.approx(2000.0)

    def test_uniform_four(self):
        loss = T.cross_entropy_logits([0.0, 0.0, 0.0, 0.0], 3).item()
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_gradient(self):
        x = param([0.0, 0.0])
        T.backward(T.cross_entropy_logits(x, 0))
        np.testing.assert_allclose(x.grad, [-0.5, 0.5], atol=1e-15)

    def test_nonnegative(self, rng):
        z = rng.standard_normal((30, 9)) * 5
        ans = rng.integers(0, 9, 30)
        for row, a in zip(z, ans):
            assert T.cross_entropy_logits(row, a).item() >= 0

    def test_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            T.cross_entropy_logits([0.0, 1.0], 2)

    def test_batched_mean(self, rng):
        z = rng.standard_normal((4, 5))
        ans = [0, 3, 1, 4]
        each = [T.cross_entropy_logits(z[i], ans[i]).item() for i in range(4)]
        assert T.cross_entropy_logits(z, ans).item() == pytest.approx(np.mean(each), abs=1e-14)


class TestBackward:
    def test_square(self):
        x = param(3.0)
        T.backward(T.mul(x, x))
        assert x.grad == pytest.approx(6.0)

    def test_not_scalar(self):
        with pytest.raises(NotScalar):
            T.backward(T.mul(param([1.0, 2.0]), 2.0))

    def test_shared_input_accumulates(self):
        x = param(2.0)
        y = T.add(T.mul(x, x), T.mul(x, 3.0))
        T.backward(y)
        assert x.grad == pytest.approx(7.0)

    def test_params_mapping(self):
        store = T.ParamStore()
        a = store.add("a", [1.0, 2.0])
        store.add("unused", [0.0])
        grads = T.backward(T.tsum(T.mul(a, a)), store)
        np.testing.assert_allclose(grads["a"], [2.0, 4.0])
        np.testing.assert_array_equal(grads["unused"], [0.0])

    def test_replay_bit_identical(self, rng):
        a, b = rng.standard_normal((4, 6)), rng.standard_normal((6, 3))

        def run():
            x, y = param(a), param(b)
            out = T.tsum(T.gelu(T.matmul(x, y)))
            T.backward(out)
            return out.data.copy(), x.grad.copy()

        (o1, g1), (o2, g2) = run(), run()
        assert o1.tobytes() == o2.tobytes() and g1.tobytes() == g2.tobytes()

    def test_no_grad_records_nothing(self):
        x = param([1.0, 2.0])
        with T.no_grad():
            y = T.mul(x, x)
        assert y.parents == () and not y.requires_grad


class TestGradientCheck:
    """Every kernel against central differences, relative error below 1e-6."""

    @pytest.fixture
    def arrays(self, rng):
        return {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 5)),
                "c": rng.standard_normal((3, 4)), "v": rng.standard_normal(4)}

    def test_matmul(self, arrays):
        assert grad_check(T.matmul, arrays["a"], arrays["b"]) < 1e-6

    def test_batched_matmul(self, rng):
        assert grad_check(T.matmul, rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))) < 1e-6

    def test_add_broadcast(self, arrays):
        assert grad_check(T.add, arrays["a"], arrays["v"]) < 1e-6

    def test_sub(self, arrays):
        assert grad_check(T.sub, arrays["a"], arrays["c"]) < 1e-6

    def test_mul(self, arrays):
        assert grad_check(T.mul, arrays["a"], arrays["v"]) < 1e-6

    def test_gelu(self, arrays):
        assert grad_check(T.gelu, arrays["a"]) < 1e-6

    def test_sigmoid(self, arrays):
        assert grad_check(T.sigmoid, arrays["a"]) < 1e-6

    def test_logit(self, rng):
        assert grad_check(T.logit, rng.uniform(0.05, 0.95, (3, 4))) < 1e-6

    def test_softmax_rows(self, arrays):
        assert grad_check(T.softmax_rows, arrays["a"]) < 1e-6

    def test_log_softmax(self, arrays):
        assert grad_check(T.log_softmax, arrays["a"]) < 1e-6

    def test_layer_norm(self, arrays, rng):
        g, b = rng.standard_normal(4), rng.standard_normal(4)
        assert grad_check(T.layer_norm, arrays["a"], g, b) < 1e-6

    def test_l2_normalize(self, arrays):
        assert grad_check(T.l2_normalize, arrays["a"]) < 1e-6

    def test_gather_rows_repeated(self, arrays):
        ids = np.array([2, 0, 2, 1])
        assert grad_check(lambda t: T.gather_rows(t, ids), arrays["a"]) < 1e-6

    def test_concat_rows(self, arrays):
        assert grad_check(lambda x, y: T.concat_rows([x, y]), arrays["a"], arrays["c"]) < 1e-6

    def test_mean(self, arrays):
        assert grad_check(lambda t: T.mean(t, axis=1), arrays["a"]) < 1e-6

    def test_transpose_reshape(self, rng):
        x = rng.standard_normal((2, 3, 4))
        f = lambda t: T.reshape(T.transpose(t, (2, 0, 1)), (4, 6))
        assert grad_check(f, x) < 1e-6

    def test_einsum(self, rng):
        q = rng.standard_normal((2, 3, 4))
        k = rng.standard_normal((3, 3, 4))
        assert grad_check(lambda x, y: T.einsum("hid,ijd->hij", x, y), q, k) < 1e-6

    def test_cross_entropy(self, rng):
        z = rng.standard_normal((3, 6))
        assert grad_check(lambda t: T.cross_entropy_logits(t, [1, 5, 0]), z) < 1e-6


class TestAdam:
    def test_zero_gradient_no_change(self):
        store = T.ParamStore()
        store.add("w", [1.0, -2.0])
        opt = T.Adam(lr=0.1)
        for _ in range(3):
            T.adam_step(store, {"w": np.zeros(2)}, opt)
        np.testing.assert_array_equal(store["w"].data, [1.0, -2.0])

    def test_first_step(self):
        store = T.ParamStore()
        store.add("w", 0.0)
        T.adam_step(store, {"w": np.array(1.0)}, T.Adam(lr=0.1))
        assert store["w"].data == pytest.approx(-0.1, abs=1e-7)

    def test_defaults(self):
        opt = T.Adam()
        assert (opt.lr, opt.beta1, opt.beta2, opt.eps) == (1e-3, 0.9, 0.999, 1e-8)

    def test_identical_trajectories(self):
        def run():
            rng = np.random.default_rng(4)
            store = T.ParamStore()
            store.add("w", rng.standard_normal(5))
            opt = T.Adam(lr=0.05)
            path = []
            for _ in range(20):
                store.zero_grad()
                w = store["w"]
                T.backward(T.tsum(T.mul(T.sub(w, 1.0), T.sub(w, 1.0))))
                opt.step(store)
                path.append(w.data.copy())
            return np.stack(path)

        np.testing.assert_array_equal(run(), run())

    def test_minimises_quadratic(self):
        store = T.ParamStore()
        store.add("w", [5.0])
        opt = T.Adam(lr=0.1)
        for _ in range(500):
            store.zero_grad()
            w = store["w"]
            T.backward(T.tsum(T.mul(T.sub(w, 2.0), T.sub(w, 2.0))))
            opt.step(store)
        assert store["w"].data[0] == pytest.approx(2.0, abs=1e-2)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        arrays = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(2).astype(np.float32),
                  "s": np.array(1.5)}
        path = tmp_path / "m.ckpt"
        T.save_checkpoint(path, arrays, {"note": "x", "n": 3})
        loaded, meta = T.load_checkpoint(path)
        assert meta == {"note": "x", "n": 3}
        for k, v in arrays.items():
            assert loaded[k].dtype == v.dtype
            np.testing.assert_array_equal(loaded[k], v)

    def test_deterministic_bytes(self, tmp_path):
        arrays = {"w": np.arange(6.0).reshape(2, 3)}
        T.save_checkpoint(tmp_path / "a", arrays, {"k": 1})
        T.save_checkpoint(tmp_path / "b", arrays, {"k": 1})
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"hello world, definitely not a checkpoint")
        with pytest.raises(DataError):
            T.load_checkpoint(path)

    def test_param_store_shape_check(self):
        store = T.ParamStore()
        store.add("w", np.zeros((2, 2)))
        with pytest.raises(ShapeMismatch):
            store.load_arrays({"w": np.zeros(3)})
