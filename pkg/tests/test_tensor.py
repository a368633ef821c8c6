import math
import threading

import numpy as np
import pytest

from triview import tensor as T
from triview.errors import LabelError, NumericError, ShapeError
from triview.tensor import Tensor

from oracles import (
    affine_loops,
    avgpool_loops,
    conv2d_loops,
    cross_entropy_mp,
    finite_difference_errors,
    matmul_loops,
    maxpool_loops,
    relu_loops,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(T.elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])

    def test_max(self):
        np.testing.assert_array_equal(T.elementwise("max", Tensor([1, 5]), Tensor([3, 2])).data, [3, 5])

    def test_mul_by_zero_scalar(self):
        np.testing.assert_array_equal(T.elementwise("mul", Tensor([2, 3]), 0).data, [0, 0])

    def test_sub(self):
        np.testing.assert_array_equal((Tensor([5.0, 1.0]) - Tensor([2.0, 4.0])).data, [3, -3])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            T.elementwise("pow", Tensor([1.0]), 2)

    def test_max_gradient_routes_to_one_input(self, rng):
        a = Tensor(rng.integers(0, 3, 50).astype(float), requires_grad=True)
        b = Tensor(rng.integers(0, 3, 50).astype(float), requires_grad=True)
        T.backward(T.sum_all(T.maximum(a, b)))
        np.testing.assert_array_equal(a.grad + b.grad, np.ones(50))
        ties = a.data == b.data
        assert ties.any()
        np.testing.assert_array_equal(a.grad[ties], 1.0)

    def test_scalar_tensor_operand_gets_summed_gradient(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        s = Tensor(2.0, requires_grad=True)
        T.backward(T.sum_all(T.mul(x, s)))
        assert s.grad == pytest.approx(10.0)
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            Tensor([1.0, math.nan])
        with pytest.raises(NumericError):
            T.exp(Tensor([1000.0]))


class TestMatmul:
    def test_identity(self):
        m = [[1.0, 2.0], [3.0, 4.0]]
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_dot(self):
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_against_loops(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), rtol=0, atol=1e-12)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_rule(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        g = rng.normal(size=(3, 2))
        T.backward(T.sum_all(T.mul(T.matmul(a, b), Tensor(g))))
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


class TestConv2d:
    def test_sum_of_ones(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), 1, 0)
        assert out.data.tolist() == [[[[9.0]]]]

    def test_delta_kernel_is_identity(self, rng):
        x = rng.normal(size=(2, 1, 6, 6))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w), 1, 1).data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_against_loops(self, rng, stride, pad):
        x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
        got = T.conv2d(Tensor(x), Tensor(w), stride, pad).data
        assert np.max(np.abs(got - conv2d_loops(x, w, stride, pad))) < 1e-12

    @pytest.mark.parametrize("h,k,stride,pad", [(8, 3, 1, 1), (9, 3, 2, 1), (7, 2, 2, 0), (5, 5, 1, 0)])
    def test_output_shape(self, h, k, stride, pad):
        out = T.conv2d(Tensor(np.zeros((2, 3, h, h + 1))), Tensor(np.zeros((5, 3, k, k))), stride, pad)
        assert out.shape == (2, 5, (h + 2 * pad - k) // stride + 1, (h + 1 + 2 * pad - k) // stride + 1)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), 1, 1)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_gradients_match_finite_differences(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
        c = rng.uniform(-1, 1, (2, 3, 3, 3))

        def loss():
            with T.no_grad():
                return float(np.sum(T.conv2d(x, w, 2, 1).data * c))

        T.backward(T.sum_all(T.mul(T.conv2d(x, w, 2, 1), Tensor(c))))
        errs = finite_difference_errors(loss, {"x": x, "w": w})
        assert max(e[-1] for e in errs) < 1e-4


class TestPoolingAndFriends:
    def test_relu(self, rng):
        x = rng.uniform(-1, 1, (3, 4))
        np.testing.assert_array_equal(T.relu(Tensor(x)).data, relu_loops(x))
        np.testing.assert_array_equal(T.relu(Tensor(-np.abs(x))).data, np.zeros((3, 4)))
        assert T.relu(Tensor(np.zeros((2, 5, 7)))).shape == (2, 5, 7)

    def test_global_avg_pool(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        assert np.max(np.abs(T.global_avg_pool(Tensor(x)).data - avgpool_loops(x))) < 1e-12
        np.testing.assert_array_equal(T.global_avg_pool(Tensor(np.full((1, 2, 3, 3), 7.0))).data, [[7.0, 7.0]])
        assert T.global_avg_pool(Tensor(np.zeros((4, 6, 2, 2)))).shape == (4, 6)

    @pytest.mark.parametrize("k,stride", [(2, 2), (3, 1), (3, 2)])
    def test_maxpool(self, rng, k, stride):
        x = rng.normal(size=(2, 3, 7, 7))
        got = T.maxpool2d(Tensor(x), k, stride).data
        assert np.max(np.abs(got - maxpool_loops(x, k, stride))) < 1e-12
        assert got.shape == (2, 3, (7 - k) // stride + 1, (7 - k) // stride + 1)

    def test_maxpool_constant_and_tie_gradient(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        out = T.maxpool2d(x, 2)
        assert out.data.item() == 1.0
        T.backward(T.sum_all(out))
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_batchless_norm(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        scale, shift = rng.normal(size=3), rng.normal(size=3)
        got = T.batchless_norm(Tensor(x), Tensor(scale), Tensor(shift)).data
        assert np.max(np.abs(got - affine_loops(x, scale, shift))) < 1e-12
        ident = T.batchless_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_array_equal(ident, x)
        with pytest.raises(ShapeError):
            T.batchless_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)))


class TestCrossEntropy:
    def test_uniform(self):
        loss = T.softmax_cross_entropy(Tensor([[0.0, 0.0, 0.0]]), [0])
        assert loss.data == pytest.approx(math.log(3), abs=1e-15)

    def test_stabilised(self):
        loss = T.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0])
        assert loss.data == pytest.approx(0.0, abs=1e-300)

    def test_extended_precision_oracle(self, rng):
        logits = rng.normal(scale=3.0, size=(4, 3))
        labels = [0, 2, 1, 2]
        got = float(T.softmax_cross_entropy(Tensor(logits), labels).data)
        ref = float(cross_entropy_mp(logits, labels))
        assert abs(got - ref) / abs(ref) < 1e-12

    def test_gradient_formula(self, rng):
        logits = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        labels = np.array([0, 1, 2, 1, 0])
        T.backward(T.softmax_cross_entropy(logits, labels))
        e = np.exp(logits.data - logits.data.max(1, keepdims=True))
        p = e / e.sum(1, keepdims=True)
        p[np.arange(5), labels] -= 1
        np.testing.assert_allclose(logits.grad, p / 5, atol=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            T.softmax_cross_entropy(Tensor([[0.0, 1.0]]), [2])
        with pytest.raises(LabelError):
            T.softmax_cross_entropy(Tensor([[0.0, 1.0]]), [-1])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_paths_accumulate(self):
        x = Tensor([3.0], requires_grad=True)
        y = T.add(T.mul(x, 2.0), T.mul(x, x))
        T.backward(T.sum_all(y))
        np.testing.assert_array_equal(x.grad, [2.0 + 6.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            T.backward(T.mul(x, 2.0))

    def test_graph_is_topological_and_visited_once(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with T.Graph() as g:
            h = T.relu(T.matmul(x, x))
            loss = T.sum_all(T.add(h, T.mul(h, 2.0)))
        seen = set()
        for node in g.nodes:
            for inp in node.inputs:
                if inp._graph is g:
                    assert id(inp) in seen
            seen.add(id(node.output))
        calls = []
        for node in g.nodes:
            fn = node.backward
            node.backward = lambda gr, fn=fn, op=node.op: calls.append(op) or fn(gr)
        T.backward(loss)
        assert len(calls) == len(g.nodes)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.Graph() as g, T.no_grad():
            y = T.mul(x, 2.0)
        assert not y.requires_grad and not g.nodes

    def test_determinism(self, rng):
        x0 = rng.normal(size=(2, 1, 6, 6))
        w0 = rng.normal(size=(2, 1, 3, 3))

        def run():
            x, w = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
            out = T.global_avg_pool(T.relu(T.conv2d(x, w, 1, 1)))
            T.backward(T.softmax_cross_entropy(out, [0, 1]))
            return out.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

        assert run() == run()

    def test_threads_use_separate_graphs(self, rng):
        results = {}

        def work(k):
            x = Tensor(np.full(3, float(k)), requires_grad=True)
            for _ in range(50):
                x.grad = None
                T.backward(T.sum_all(T.mul(x, x)))
            results[k] = x.grad.copy()

        threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for k in range(4):
            np.testing.assert_array_equal(results[k], np.full(3, 2.0 * k))


def test_random_compositions_pass_gradient_check(rng):
    """Chains of every differentiable op on inputs in [-1, 1]."""
    for trial in range(5):
        x = Tensor(rng.uniform(-1, 1, (2, 2, 6, 6)), requires_grad=True)
        w1 = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
        sc = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        sh = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        wl = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        bl = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
        mix = Tensor(rng.uniform(-1, 1, 2), requires_grad=True)
        params = {"x": x, "w1": w1, "sc": sc, "sh": sh, "wl": wl, "bl": bl, "mix": mix}

        def forward():
            h = T.batchless_norm(T.conv2d(x, w1, 1, 1), sc, sh)
            h = T.maxpool2d(T.relu(h), 2)
            f = T.global_avg_pool(h)
            z = T.bias_add(T.matmul(f, wl), bl)
            wts = T.softmax(mix)
            z = T.add(T.mul(z, T.index(wts, 0)),
                      T.mul(T.maximum(T.mul(z, 2.0), T.mul(z, 0.5)), T.index(wts, 1)))
            return T.softmax_cross_entropy(z, [trial % 4, (trial + 1) % 4])

        T.backward(forward())

        def loss():
            with T.no_grad():
                return float(forward().data)

        errs = finite_difference_errors(loss, params)
        worst = max(errs, key=lambda e: e[-1])
        assert worst[-1] < 1e-4, worst
