from pathlib import Path
import math
import sys
import tempfile
import unittest

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from services.errors import NumericError, ValidationError  # noqa: E402
from services.neural import (  # noqa: E402
    AdamState,
    ConvClassifier,
    ConvNetSpec,
    LabeledData,
    ModelParams,
    Posterior,
    TrainConfig,
    adam_step,
    backward_gradients,
    batch_loss_and_grads,
    compute_class_weights,
    forward_pass,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train_with_early_stopping,
    weighted_cross_entropy,
)

TOY = ConvNetSpec(input_shape=(6, 6, 1), filters=(2, 2), latent_dim=3)


def numeric_gradient(loss_fn, tensors: dict[str, np.ndarray], name: str, h: float = 1e-5) -> np.ndarray:
    arr = tensors[name]
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        up = loss_fn()
        arr[idx] = old - h
        down = loss_fn()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def assert_gradients_match(case: unittest.TestCase, loss_fn, tensors, analytic) -> None:
    for name in sorted(tensors):
        numeric = numeric_gradient(loss_fn, tensors, name)
        err = np.abs(analytic[name] - numeric)
        tol = 1e-4 * np.maximum(np.abs(numeric), np.abs(analytic[name])) + 1e-7
        case.assertTrue(np.all(err <= tol), f"{name}: max err {err.max():.3g}")


class ClassWeightTests(unittest.TestCase):
    def test_first_cohort_counts(self) -> None:
        np.testing.assert_allclose(compute_class_weights([15408, 12048, 21648]), [1.405, 1.797, 1.0], atol=1e-3)

    def test_second_cohort_counts(self) -> None:
        np.testing.assert_allclose(compute_class_weights([11088, 10800, 9600]), [1.0, 1.027, 1.155], atol=1e-3)

    def test_balanced(self) -> None:
        np.testing.assert_array_equal(compute_class_weights([7, 7, 7]), [1.0, 1.0, 1.0])

    def test_zero_count(self) -> None:
        with self.assertRaises(ValidationError):
            compute_class_weights([3, 0, 4])


class ForwardTests(unittest.TestCase):
    def test_zero_output_layer_gives_uniform(self) -> None:
        p = init_params(TOY, seed=0)
        p.tensors["out.W"][:] = 0.0
        post = forward_pass(p, np.random.default_rng(1).uniform(size=(6, 6, 1)))
        np.testing.assert_allclose(post.probs, np.full(3, 1 / 3), atol=1e-15)

    def test_hand_evaluated_one_by_one_network(self) -> None:
        spec = ConvNetSpec(input_shape=(2, 2, 1), filters=(1,), latent_dim=2, kernel_size=1)
        p = ModelParams(
            {
                "conv0.W": np.full((1, 1, 1, 1), 0.5),
                "conv0.b": np.zeros(1),
                "latent.W": np.array([[1.0, -1.0]]),
                "latent.b": np.zeros(2),
                "out.W": np.array([[1.0, 0.0, -1.0], [0.0, 0.0, 0.0]]),
                "out.b": np.zeros(3),
            }
        )
        self.assertEqual(spec.flat_dim, 1)
        post = forward_pass(p, np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])
        # conv -> [[0.5, 1], [1.5, 2]], pool -> 2, latent -> (2, 0), logits -> (2, 0, -2)
        e = [math.exp(2.0), 1.0, math.exp(-2.0)]
        np.testing.assert_allclose(post.probs, [v / sum(e) for v in e], atol=1e-15)
        np.testing.assert_allclose(post.latent, [2.0, 0.0])

    def test_non_finite_activation_names_the_layer(self) -> None:
        p = init_params(TOY, seed=0)
        p.tensors["conv1.W"][0, 0, 0, 0] = np.inf
        with self.assertRaises(NumericError) as ctx:
            forward_pass(p, np.ones((6, 6, 1)))
        self.assertEqual(ctx.exception.details["layer"], 1)


class LossTests(unittest.TestCase):
    def test_uniform_posterior(self) -> None:
        post = Posterior(probs=np.full(3, 1 / 3), latent=np.zeros(2))
        self.assertAlmostEqual(weighted_cross_entropy(post, 1, (1, 1, 1)), math.log(3), places=12)

    def test_perfect_prediction(self) -> None:
        post = Posterior(probs=np.array([0.0, 1.0, 0.0]), latent=np.zeros(2))
        self.assertEqual(weighted_cross_entropy(post, 1, (1, 2, 3)), 0.0)

    def test_integer_weights_equal_duplication(self) -> None:
        rng = np.random.default_rng(2)
        p = init_params(TOY, seed=3)
        x = rng.uniform(size=(3, 6, 6, 1))
        y = np.array([0, 1, 2])
        weighted, _ = batch_loss_and_grads(p, x, y, (1.0, 3.0, 1.0))
        dup = np.concatenate([x, x[[1, 1]]], axis=0)
        plain, _ = batch_loss_and_grads(p, dup, np.array([0, 1, 2, 1, 1]), (1.0, 1.0, 1.0))
        self.assertAlmostEqual(weighted, plain, delta=1e-9)


class GradientTests(unittest.TestCase):
    def test_matches_central_differences(self) -> None:
        rng = np.random.default_rng(4)
        p = init_params(TOY, seed=5)
        x = rng.normal(size=(4, 6, 6, 1))
        y = np.array([0, 1, 2, 1])
        weights = (1.4, 1.8, 1.0)
        _, analytic = batch_loss_and_grads(p, x, y, weights)
        assert_gradients_match(self, lambda: batch_loss_and_grads(p, x, y, weights)[0], p.tensors, analytic)

    def test_saturated_posterior_has_no_gradient(self) -> None:
        p = init_params(TOY, seed=6)
        p.tensors["out.b"][:] = [200.0, 0.0, 0.0]
        x = np.random.default_rng(7).uniform(size=(3, 6, 6, 1))
        grads = backward_gradients(p, x, np.zeros(3, dtype=int), (1, 1, 1))
        for name, g in grads.items():
            self.assertLessEqual(float(np.abs(g).max()), 1e-9, name)

    def test_equal_weight_batch_gradient_is_mean_of_singles(self) -> None:
        p = init_params(TOY, seed=8)
        x = np.random.default_rng(9).normal(size=(2, 6, 6, 1))
        y = np.array([2, 0])
        both = backward_gradients(p, x, y, (1, 1, 1))
        first = backward_gradients(p, x[:1], y[:1], (1, 1, 1))
        second = backward_gradients(p, x[1:], y[1:], (1, 1, 1))
        for name in both:
            np.testing.assert_allclose(both[name], 0.5 * (first[name] + second[name]), atol=1e-12)

    def test_class_weighted_batch_gradient_is_weighted_mean_of_singles(self) -> None:
        p = init_params(TOY, seed=8)
        x = np.random.default_rng(10).normal(size=(2, 6, 6, 1))
        y = np.array([1, 0])
        weights = (1.0, 3.0, 1.0)
        both = backward_gradients(p, x, y, weights)
        # a single row's weight cancels in sum(w l) / sum(w)
        first = backward_gradients(p, x[:1], y[:1], weights)
        second = backward_gradients(p, x[1:], y[1:], weights)
        np.testing.assert_allclose(first["out.b"], backward_gradients(p, x[:1], y[:1], (1, 1, 1))["out.b"], atol=1e-12)
        for name in both:
            np.testing.assert_allclose(both[name], (3.0 * first[name] + 1.0 * second[name]) / 4.0, atol=1e-12)


class AdamTests(unittest.TestCase):
    def test_zero_gradient_is_a_fixed_point(self) -> None:
        p = ModelParams({"w": np.array([1.0, -2.0])})
        state = AdamState.zeros_like(p)
        adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        np.testing.assert_array_equal(state.m["w"], 0.0)
        np.testing.assert_array_equal(state.v["w"], 0.0)
        self.assertEqual(state.t, 1)

    def test_first_step_moves_by_lr(self) -> None:
        p = ModelParams({"w": np.zeros(3)})
        state = AdamState.zeros_like(p)
        adam_step(p, {"w": np.array([0.5, -3.0, 1e-3])}, state, lr=0.01)
        np.testing.assert_allclose(p["w"], [-0.01, 0.01, -0.01], atol=1e-6)

    def test_quadratic_iterates(self) -> None:
        p = ModelParams({"w": np.array([1.0])})
        state = AdamState.zeros_like(p)
        w, m, v = 1.0, 0.0, 0.0
        for t in range(1, 4):
            g = 2.0 * w
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            adam_step(p, {"w": 2.0 * p["w"]}, state, lr=0.1)
            self.assertAlmostEqual(float(p["w"][0]), w, delta=1e-10)

    def test_non_finite_gradient(self) -> None:
        p = ModelParams({"w": np.zeros(2)})
        with self.assertRaises(NumericError):
            adam_step(p, {"w": np.array([np.nan, 0.0])}, AdamState.zeros_like(p), lr=0.1)


class ScriptedModel:
    """Zero-gradient model whose validation accuracy follows a fixed script."""

    def __init__(self, accuracies: list[float]):
        self.accuracies = accuracies
        self.calls = 0

    def init(self, seed: int) -> ModelParams:
        return ModelParams({"w": np.zeros(1)}, seed=seed)

    def predict(self, p: ModelParams, inputs) -> np.ndarray:
        acc = self.accuracies[min(self.calls, len(self.accuracies) - 1)]
        self.calls += 1
        p.tensors["w"][0] = self.calls
        n = inputs[0].shape[0]
        hits = int(round(acc * n))
        # validation labels are arange(n) % 3
        rows = np.arange(n)
        picks = np.where(rows < hits, rows % 3, (rows + 1) % 3)
        probs = np.zeros((n, 3))
        probs[rows, picks] = 1.0
        return probs

    def loss_and_grads(self, p, inputs, labels, sw):
        return 1.0, {"w": np.zeros(1)}


def three_pattern_data(rng: np.random.Generator, per_class: int) -> LabeledData:
    images = []
    labels = []
    for label, (r, c) in enumerate(((0, 0), (0, 4), (4, 2))):
        for _ in range(per_class):
            img = 0.05 * rng.uniform(size=(8, 8, 1))
            img[r:r + 4, c:c + 4, 0] += 1.0
            images.append(img)
            labels.append(label)
    return LabeledData(inputs=(np.asarray(images),), labels=np.asarray(labels))


class TrainingTests(unittest.TestCase):
    def data(self, n: int = 12) -> LabeledData:
        return LabeledData(inputs=(np.zeros((n, 2, 2, 1)),), labels=np.arange(n) % 3)

    def test_stops_patience_steps_after_plateau(self) -> None:
        model = ScriptedModel([0.25, 0.5, 0.5])
        cfg = TrainConfig(batch_size=4, patience=20, max_steps=100)
        result = train_with_early_stopping(model, self.data(), self.data(), cfg)
        self.assertEqual(result.best_step, 2)
        self.assertEqual(result.stopped_step, 22)
        self.assertEqual(len(result.history), 22)
        self.assertEqual(result.best_val_acc, 0.5)
        # parameters are the snapshot taken at the best step
        self.assertEqual(float(result.params["w"][0]), 2.0)

    def test_missing_class_is_rejected(self) -> None:
        train = LabeledData(inputs=(np.zeros((4, 2, 2, 1)),), labels=np.array([0, 1, 0, 1]))
        with self.assertRaises(ValidationError):
            train_with_early_stopping(ScriptedModel([1.0]), train, self.data(), TrainConfig())

    def test_same_seed_same_trajectory(self) -> None:
        rng = np.random.default_rng(10)
        train = three_pattern_data(rng, 4)
        val = three_pattern_data(rng, 2)
        spec = ConvNetSpec(input_shape=(8, 8, 1), filters=(2,), latent_dim=4)
        cfg = TrainConfig(learning_rate=0.01, batch_size=5, patience=3, max_steps=4, seed=11)
        a = train_with_early_stopping(spec, train, val, cfg)
        b = train_with_early_stopping(spec, train, val, cfg)
        self.assertEqual(a.history, b.history)
        for name in a.params.names():
            self.assertEqual(a.params[name].tobytes(), b.params[name].tobytes())

    def test_separable_patterns_are_learned(self) -> None:
        rng = np.random.default_rng(12)
        train = three_pattern_data(rng, 10)
        val = three_pattern_data(rng, 3)
        spec = ConvNetSpec(input_shape=(8, 8, 1), filters=(4,), latent_dim=8)
        cfg = TrainConfig(learning_rate=0.01, batch_size=8, patience=10, max_steps=150, seed=13)
        result = train_with_early_stopping(ConvClassifier(spec), train, val, cfg)
        self.assertEqual(result.best_val_acc, 1.0)
        self.assertLess(result.stopped_step, cfg.max_steps)

    def test_checkpoint_restores_parameters(self) -> None:
        p = init_params(TOY, seed=14)
        with tempfile.TemporaryDirectory() as tmp:
            back, meta = load_checkpoint(save_checkpoint(Path(tmp) / "model.scwt", p, {"step": 3}))
        self.assertEqual(meta["step"], 3)
        self.assertEqual(back.names(), p.names())
        for name in p.names():
            self.assertEqual(back[name].tobytes(), p[name].tobytes())


if __name__ == "__main__":
    unittest.main()
