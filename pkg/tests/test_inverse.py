from pathlib import Path
import sys
import tempfile
import unittest

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from services.errors import DegeneracyError, ShapeError, ValidationError  # noqa: E402
from services.forward import (  # noqa: E402
    HeadGeometry,
    LeadField,
    ScalpRecording,
    build_spherical_lead_field,
    fibonacci_cap,
)
from services.inverse import (  # noqa: E402
    InverseKernel,
    apply_inverse,
    average_reference_operator,
    build_kernel,
    load_kernel,
    min_norm_kernel,
    regularization_parameter,
    save_kernel,
    sloreta_standardize,
)
from services.synthgen import plant_dipole  # noqa: E402


def recording(data: np.ndarray) -> ScalpRecording:
    return ScalpRecording(data=data, sampling_rate=512.0, channel_labels=[f"E{i}" for i in range(data.shape[0])])


def random_head(n_electrodes: int, n_sources: int, seed: int) -> LeadField:
    rng = np.random.default_rng(seed)
    R = 0.09
    d = rng.normal(size=(n_sources, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    positions = d * (0.7 * R * rng.uniform(0.2, 1.0, size=n_sources) ** (1 / 3))[:, None]
    o = rng.normal(size=(n_sources, 3))
    geometry = HeadGeometry(
        sphere_radius=R,
        conductivity=0.33,
        electrode_positions=fibonacci_cap(n_electrodes, R),
        source_positions=positions,
        source_orientations=o / np.linalg.norm(o, axis=1, keepdims=True),
    )
    return build_spherical_lead_field(geometry)


class AverageReferenceTests(unittest.TestCase):
    def test_two_channels(self) -> None:
        np.testing.assert_allclose(average_reference_operator(2), [[0.5, -0.5], [-0.5, 0.5]])

    def test_idempotent_symmetric_and_kills_constants(self) -> None:
        for m in (2, 3, 7, 32, 64):
            H = average_reference_operator(m)
            np.testing.assert_allclose(H @ H, H, atol=1e-12)
            np.testing.assert_allclose(H, H.T, atol=0)
            np.testing.assert_allclose(H @ np.ones(m), 0.0, atol=1e-12)

    def test_single_channel_is_rejected(self) -> None:
        with self.assertRaises(ValidationError):
            average_reference_operator(1)


class MinNormKernelTests(unittest.TestCase):
    def test_identity_forward_unregularized(self) -> None:
        k = min_norm_kernel(LeadField(gain=np.eye(3)), 0.0)
        np.testing.assert_allclose(k.kernel, np.eye(3), atol=1e-12)

    def test_orthonormal_rows_give_transpose(self) -> None:
        A = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        k = min_norm_kernel(LeadField(gain=A), 0.0)
        np.testing.assert_allclose(k.kernel, A.T, atol=1e-12)

    def test_pseudo_inverse_consistency(self) -> None:
        A = np.random.default_rng(4).normal(size=(8, 30))
        k = min_norm_kernel(LeadField(gain=A), 0.0)
        np.testing.assert_allclose(A @ k.kernel @ A, A, rtol=1e-8, atol=1e-8 * np.abs(A).max())

    def test_non_finite_lambda(self) -> None:
        with self.assertRaises(ValidationError):
            min_norm_kernel(LeadField(gain=np.eye(3)), float("nan"))

    def test_repeated_calls_are_bit_identical(self) -> None:
        lf = LeadField(gain=np.random.default_rng(5).normal(size=(6, 12)))
        a = min_norm_kernel(lf, 0.3).kernel
        b = min_norm_kernel(lf, 0.3).kernel
        self.assertEqual(a.tobytes(), b.tobytes())

    def test_residual_shrinks_as_lambda_decreases(self) -> None:
        rng = np.random.default_rng(6)
        A = rng.normal(size=(8, 20))
        A -= A.mean(axis=0, keepdims=True)
        V = A @ rng.normal(size=(20, 5))
        residuals = []
        for lam in (10.0, 1.0, 0.1, 0.01, 0.0):
            S = min_norm_kernel(LeadField(gain=A), lam).kernel @ V
            residuals.append(float(np.linalg.norm(V - A @ S)))
        for a, b in zip(residuals, residuals[1:]):
            self.assertLessEqual(b, a + 1e-12)

    def test_closed_form_beats_row_space_perturbations(self) -> None:
        # referenced lead field and data, so H acts as the identity on the data subspace
        rng = np.random.default_rng(7)
        for _ in range(20):
            A = rng.normal(size=(6, 15))
            A -= A.mean(axis=0, keepdims=True)
            V = rng.normal(size=6)
            V -= V.mean()
            lam = float(rng.uniform(0.05, 2.0))
            S = min_norm_kernel(LeadField(gain=A), lam).kernel @ V

            def objective(x: np.ndarray) -> float:
                return float(np.sum((V - A @ x) ** 2) + lam * np.sum(x * x))

            best = objective(S)
            deltas = rng.normal(size=(1000, 6)) @ A
            deltas *= 1e-3 / np.linalg.norm(deltas, axis=1, keepdims=True)
            for d in deltas:
                self.assertLessEqual(best, objective(S + d) + 1e-12)


class StandardizationTests(unittest.TestCase):
    def test_perfect_resolution_is_a_no_op(self) -> None:
        lf = LeadField(gain=np.eye(4))
        k = sloreta_standardize(min_norm_kernel(lf, 0.0), lf)
        np.testing.assert_allclose(k.kernel, np.eye(4), atol=1e-12)
        self.assertTrue(k.standardized)

    def test_degenerate_source_is_named(self) -> None:
        A = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        lf = LeadField(gain=A)
        with self.assertRaises(DegeneracyError) as ctx:
            sloreta_standardize(min_norm_kernel(lf, 0.0), lf)
        self.assertEqual(ctx.exception.details["source"], 2)

    def test_noiseless_planted_dipoles_are_recovered(self) -> None:
        lf = random_head(32, 50, seed=8)
        k = build_kernel(lf, snr=3.0, standardized=True)
        rng = np.random.default_rng(9)
        waveform = np.sin(2 * np.pi * 10 * np.arange(64) / 512.0)
        hits = 0
        for index in rng.choice(lf.n_sources, size=50, replace=True):
            rec, truth = plant_dipole(lf, int(index), waveform)
            power = np.sum(apply_inverse(k, rec).currents ** 2, axis=1)
            hits += int(np.argmax(power) == truth)
        self.assertEqual(hits, 50)

    def test_noisy_planted_dipoles_are_mostly_recovered(self) -> None:
        lf = random_head(32, 50, seed=10)
        k = build_kernel(lf, snr=10.0, standardized=True)
        rng = np.random.default_rng(11)
        waveform = np.sin(2 * np.pi * 10 * np.arange(256) / 512.0)
        hits = 0
        for trial, index in enumerate(rng.choice(lf.n_sources, size=50, replace=True)):
            clean = np.outer(lf.gain[:, index], waveform)
            sigma = float(np.sqrt(np.mean(clean ** 2))) / 10.0
            rec, truth = plant_dipole(lf, int(index), waveform, sigma, seed=trial)
            power = np.sum(apply_inverse(k, rec).currents ** 2, axis=1)
            hits += int(np.argmax(power) == truth)
        self.assertGreaterEqual(hits, 45)

    def test_argmax_is_scale_invariant(self) -> None:
        lf = random_head(16, 20, seed=12)
        k = build_kernel(lf, snr=3.0, standardized=True)
        V = np.random.default_rng(13).normal(size=(16, 8))
        picks = {int(np.argmax(np.abs(apply_inverse(k, recording(c * V)).currents[:, 0]))) for c in (1e-3, 1.0, 1e3)}
        self.assertEqual(len(picks), 1)


class RegularizationTests(unittest.TestCase):
    def test_identity_snr_one(self) -> None:
        self.assertAlmostEqual(regularization_parameter(LeadField(gain=np.eye(4)), 1.0), 1.0, places=12)

    def test_doubling_snr_quarters_lambda(self) -> None:
        lf = LeadField(gain=np.random.default_rng(14).normal(size=(5, 9)))
        self.assertAlmostEqual(regularization_parameter(lf, 2.0) * 4, regularization_parameter(lf, 1.0), places=12)

    def test_matches_trace_oracle(self) -> None:
        A = np.random.default_rng(15).normal(size=(8, 30))
        trace = 0.0
        for i in range(8):
            for j in range(30):
                trace += A[i, j] * A[i, j]
        self.assertAlmostEqual(regularization_parameter(LeadField(gain=A), 3.0), trace / (8 * 9), delta=1e-12)

    def test_nonpositive_snr(self) -> None:
        with self.assertRaises(ValidationError):
            regularization_parameter(LeadField(gain=np.eye(2)), 0.0)


class ApplyInverseTests(unittest.TestCase):
    def test_identity_kernel(self) -> None:
        V = np.random.default_rng(16).normal(size=(4, 10))
        est = apply_inverse(InverseKernel(kernel=np.eye(4), lam=0.0), recording(V))
        np.testing.assert_array_equal(est.currents, V)

    def test_matches_naive_matmul(self) -> None:
        rng = np.random.default_rng(17)
        K = rng.normal(size=(5, 4))
        V = rng.normal(size=(4, 16))
        est = apply_inverse(InverseKernel(kernel=K, lam=0.0), recording(V))
        naive = [[sum(K[i, c] * V[c, t] for c in range(4)) for t in range(16)] for i in range(5)]
        np.testing.assert_allclose(est.currents, naive, atol=1e-12)

    def test_channel_mismatch(self) -> None:
        with self.assertRaises(ShapeError):
            apply_inverse(InverseKernel(kernel=np.eye(3), lam=0.0), recording(np.zeros((4, 5))))

    def test_standardized_kernel_file_keeps_metadata(self) -> None:
        lf = random_head(8, 6, seed=18)
        k = build_kernel(lf, lam=0.5, standardized=True)
        with tempfile.TemporaryDirectory() as tmp:
            back = load_kernel(save_kernel(Path(tmp) / "kernel.scwt", k))
        self.assertTrue(back.standardized)
        self.assertEqual(back.lam, 0.5)
        np.testing.assert_array_equal(back.resolution_diag, k.resolution_diag)


if __name__ == "__main__":
    unittest.main()
