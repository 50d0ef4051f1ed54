import unittest

import numpy as np

from autograd import Tensor
from errors import ConfigurationError, DimensionError, IncompatibleCheckpointError
from optim import OptimState, Optimizer, optimizer_step


class TestOptimizerStep(unittest.TestCase):
    def test_first_adam_step_moves_by_lr_times_sign(self):
        param = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        optimizer = Optimizer([("p", param)], lr=0.01)
        param.grad = np.array([0.5, -4.0, 1e-3])
        optimizer.step()
        np.testing.assert_allclose(param.data, [0.99, -1.99, 2.99], atol=1e-6)
        self.assertEqual(optimizer.state.step, 1)

    def test_adamw_decay_is_decoupled(self):
        param = Tensor([2.0], requires_grad=True)
        optimizer = Optimizer([("p", param)], variant="adamw", lr=0.1, weight_decay=0.5)
        param.grad = np.zeros(1)
        optimizer.step()
        np.testing.assert_allclose(param.data, [2.0 * (1.0 - 0.1 * 0.5)])

    def test_adam_decay_enters_the_gradient(self):
        param = Tensor([2.0], requires_grad=True)
        optimizer = Optimizer([("p", param)], variant="adam", lr=0.1, weight_decay=0.5)
        param.grad = np.zeros(1)
        optimizer.step()
        np.testing.assert_allclose(param.data, [1.9], atol=1e-7)

    def test_parameters_without_gradient_are_untouched(self):
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([1.0], requires_grad=True)
        optimizer = Optimizer([("a", a), ("b", b)], lr=0.1)
        a.grad = np.ones(1)
        optimizer.step()
        np.testing.assert_array_equal(b.data, [1.0])
        self.assertNotIn("b", optimizer.state.first_moment)

    def test_unknown_variant(self):
        with self.assertRaises(ConfigurationError):
            Optimizer([], variant="sgd")
        with self.assertRaises(ConfigurationError):
            optimizer_step({}, {}, OptimState(), "lamb")

    def test_gradient_shape_mismatch(self):
        param = Tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(DimensionError):
            optimizer_step({"p": param}, {"p": np.ones(3)}, OptimState())

    def test_minimises_a_quadratic(self):
        x = Tensor([5.0, -3.0], requires_grad=True)
        optimizer = Optimizer([("x", x)], lr=0.1)
        for _ in range(1000):
            optimizer.zero_grad()
            ((x - 1.0) ** 2).sum().backward()
            optimizer.step()
        np.testing.assert_allclose(x.data, [1.0, 1.0], atol=5e-2)


class TestOptimizerState(unittest.TestCase):
    def test_state_round_trip_continues_identically(self):
        def run(resume_at=None):
            x = Tensor([5.0, -3.0], requires_grad=True)
            optimizer = Optimizer([("x", x)], variant="adamw", lr=0.05, weight_decay=0.01)
            for step in range(10):
                if step == resume_at:
                    arrays, count, values = optimizer.state_arrays(), optimizer.state.step, x.data.copy()
                    x = Tensor(values, requires_grad=True)
                    optimizer = Optimizer([("x", x)], variant="adamw", lr=0.05, weight_decay=0.01)
                    optimizer.load_state_arrays(arrays, count)
                optimizer.zero_grad()
                ((x * x) * np.array([1.0, 3.0])).sum().backward()
                optimizer.step()
            return x.data

        np.testing.assert_array_equal(run(), run(resume_at=4))

    def test_missing_state_is_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        optimizer = Optimizer([("x", x)])
        with self.assertRaises(IncompatibleCheckpointError):
            optimizer.load_state_arrays({"optim.m.x": np.zeros(1)}, 3)

    def test_state_array_names(self):
        x = Tensor([1.0], requires_grad=True)
        arrays = Optimizer([("layer.x", x)]).state_arrays()
        self.assertEqual(list(arrays), ["optim.m.layer.x", "optim.v.layer.x"])
        self.assertEqual(OptimState(lr=0.5).to_dict()["lr"], 0.5)


class TestReferenceSteps(unittest.TestCase):
    def test_zero_gradients_leave_parameters(self):
        param = Tensor([0.3, -0.7], requires_grad=True)
        optimizer = Optimizer([("p", param)], lr=0.1)
        param.grad = np.zeros(2)
        optimizer.step()
        np.testing.assert_array_equal(param.data, [0.3, -0.7])

    def test_unit_gradient_first_step(self):
        param = Tensor([1.0], requires_grad=True)
        optimizer = Optimizer([("p", param)], lr=0.1)
        param.grad = np.ones(1)
        optimizer.step()
        np.testing.assert_allclose(param.data, [0.9], atol=1e-7)


if __name__ == "__main__":
    unittest.main()
