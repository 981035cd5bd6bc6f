import math
import threading

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np

from pacdiff import tensor as T
from pacdiff.rng import Rng


_H = 1e-6
_TRIALS = 100


def _scalarize(out, weights):
    return T.sum(T.mul(out, T.Tensor(weights)))


def _value(build, arrays, weights):
    return _scalarize(build(*[T.Tensor(a) for a in arrays]), weights).item()


def _check_gradients(test, build, shapes, rng):
    arrays = [rng.gaussian(s) for s in shapes]
    out_shape = build(*[T.Tensor(a) for a in arrays]).shape
    weights = rng.gaussian(out_shape) if out_shape else np.array(rng.gaussian([1])[0])
    with T.Tape() as tape:
        leaves = [tape.watch(a) for a in arrays]
        loss = _scalarize(build(*leaves), weights)
    grads = T.backward(tape, loss)
    for k, leaf in enumerate(leaves):
        direction = rng.gaussian(shapes[k])
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[k] = plus[k] + _H * direction
        minus[k] = minus[k] - _H * direction
        fd = (_value(build, plus, weights) - _value(build, minus, weights)) / (2 * _H)
        analytic = float(np.sum(grads[leaf] * direction))
        test.assertLessEqual(abs(fd - analytic), 1e-5 * max(1.0, abs(analytic)))


_OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: T.add(a, b), [(5, 3), (3,)]),
    "sub": (lambda a, b: T.sub(a, b), [(2, 3), (2, 3)]),
    "sub_bias": (lambda a, b: T.sub(a, b), [(4, 2), (2,)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 3), (3, 3)]),
    "mul_bias": (lambda a, b: T.mul(a, b), [(4, 3), (3,)]),
    "scale": (lambda a: T.scale(a, -2.5), [(3, 2)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "relu": (lambda a: T.relu(a), [(4, 5)]),
    "tanh": (lambda a: T.tanh(a), [(4, 5)]),
    "concat": (lambda a, b: T.concat(a, b), [(3, 2), (3, 4)]),
    "log_softmax": (lambda a: T.log_softmax(a), [(4, 3)]),
    "gather_log_prob": (
        lambda a: T.gather_log_prob(T.log_softmax(a), np.array([0, 2, 1, 2])),
        [(4, 3)],
    ),
    "mse": (lambda a, b: T.mse(a, b), [(3, 4), (3, 4)]),
    "sum": (lambda a: T.sum(a), [(2, 5)]),
    "mean": (lambda a: T.mean(a), [(2, 5)]),
    "two_layer_net": (
        lambda x, w1, w2: T.mean(T.tanh(T.matmul(T.relu(T.matmul(x, w1)), w2))),
        [(6, 3), (3, 5), (5, 2)],
    ),
}


class VjpTest(parameterized.TestCase):

    @parameterized.named_parameters((name, name) for name in _OPS)
    def test_matches_central_differences(self, name):
        build, shapes = _OPS[name]
        rng = Rng(sum(map(ord, name)))
        for _ in range(_TRIALS):
            _check_gradients(self, build, shapes, rng)


class PrimitiveTest(parameterized.TestCase):

    def test_relu_example(self):
        np.testing.assert_array_equal(T.relu(T.tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_matmul_identity(self):
        out = T.matmul(T.tensor(np.eye(2)), T.tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_log_softmax_equal_logits(self):
        out = T.log_softmax(T.tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [-math.log(2.0), -math.log(2.0)], rtol=1e-15)

    def test_log_softmax_is_stable_for_large_logits(self):
        out = T.log_softmax(T.tensor([[1000.0, 0.0]]))
        self.assertTrue(np.isfinite(out.data).all())
        self.assertAlmostEqual(float(out.data[0, 0]), 0.0)

    def test_mse_and_mean(self):
        self.assertAlmostEqual(T.mse(T.tensor([1.0, 2.0]), T.tensor([0.0, 0.0])).item(), 2.5)
        self.assertAlmostEqual(T.mean(T.tensor([[1.0, 2.0], [3.0, 6.0]])).item(), 3.0)

    @parameterized.parameters(
        (T.add, (2, 3), (2,)),
        (T.sub, (3,), (2, 3)),
        (T.mul, (2, 3), (3, 2)),
        (T.matmul, (2, 3), (2, 3)),
        (T.mse, (2,), (3,)),
        (T.concat, (2, 3), (3, 3)),
    )
    def test_shape_mismatch_names_both_shapes(self, op, sa, sb):
        with self.assertRaises(T.ShapeError) as ctx:
            op(T.Tensor(np.zeros(sa)), T.Tensor(np.zeros(sb)))
        self.assertIn(str(sa), str(ctx.exception))
        self.assertIn(str(sb), str(ctx.exception))

    def test_untraced_ops_stay_constant(self):
        out = T.add(T.tensor([1.0]), T.tensor([2.0]))
        self.assertIsNone(out.node)
        self.assertIsNone(out.tape)


class BackwardTest(parameterized.TestCase):

    def test_reused_input_accumulates(self):
        x = np.array([1.0, -2.0, 3.0])
        with T.Tape() as tape:
            leaf = tape.watch(x)
            loss = T.sum(T.mul(leaf, leaf))
        np.testing.assert_allclose(T.backward(tape, loss)[leaf], 2.0 * x)

    def test_unreachable_leaf_gets_zeros(self):
        with T.Tape() as tape:
            used = tape.watch(np.ones(3))
            unused = tape.watch(np.ones((2, 2)))
            loss = T.sum(used)
        grads = T.backward(tape, loss)
        np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))
        np.testing.assert_array_equal(grads[used], np.ones(3))

    def test_non_scalar_output_rejected(self):
        with T.Tape() as tape:
            leaf = tape.watch(np.ones(3))
            out = T.scale(leaf, 2.0)
        with self.assertRaises(T.BackwardError):
            T.backward(tape, out)

    def test_output_from_other_tape_rejected(self):
        with T.Tape() as other:
            loss = T.sum(other.watch(np.ones(2)))
        with T.Tape() as tape:
            tape.watch(np.ones(2))
        with self.assertRaises(T.BackwardError):
            T.backward(tape, loss)

    def test_nodes_are_topologically_ordered(self):
        with T.Tape() as tape:
            x = tape.watch(np.ones((2, 2)))
            T.sum(T.add(T.matmul(x, T.tensor(np.eye(2))), T.tensor([1.0, 2.0])))
        for idx, node in enumerate(tape.nodes):
            self.assertTrue(all(i < idx for i in node.inputs))

    def test_gradient_is_linear(self):
        rng = Rng(4)
        x = rng.gaussian([3, 2])
        w = rng.gaussian([2, 2])

        def grad(a, b):
            with T.Tape() as tape:
                leaf = tape.watch(x)
                h = T.tanh(T.matmul(leaf, T.Tensor(w)))
                loss = T.add(T.scale(T.sum(h), a), T.scale(T.mean(T.mul(h, h)), b))
            return T.backward(tape, loss)[leaf]

        np.testing.assert_allclose(
            grad(2.0, -3.0), 2.0 * grad(1.0, 0.0) - 3.0 * grad(0.0, 1.0), atol=1e-12
        )

    def test_tapes_on_separate_threads_are_independent(self):
        barrier = threading.Barrier(2)
        results = {}

        def trace(name, value):
            try:
                with T.Tape() as tape:
                    barrier.wait(timeout=10)
                    leaf = tape.watch(np.array([value]))
                    barrier.wait(timeout=10)
                    loss = T.sum(T.mul(leaf, leaf))
                    barrier.wait(timeout=10)
                results[name] = T.backward(tape, loss)[leaf]
            except Exception as e:  # pylint: disable=broad-except
                results[name] = e

        threads = [threading.Thread(target=trace, args=("a", 3.0)), threading.Thread(target=trace, args=("b", 5.0))]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        np.testing.assert_array_equal(results["a"], [6.0])
        np.testing.assert_array_equal(results["b"], [10.0])


if __name__ == "__main__":
    absltest.main()
