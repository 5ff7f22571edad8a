from pathlib import Path
import sys
import unittest

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from services.errors import ValidationError  # noqa: E402
from services.forward import ScalpRecording  # noqa: E402
from services.preprocess import (  # noqa: E402
    average_rereference,
    butterworth_bandpass,
    downsample,
    preprocess_recording,
    segment_epochs,
)
from services.scout import ScoutMatrix  # noqa: E402


def rec(data: np.ndarray, rate: float) -> ScalpRecording:
    data = np.atleast_2d(data)
    return ScalpRecording(data=data, sampling_rate=rate, channel_labels=[f"E{i}" for i in range(data.shape[0])])


def sine_amplitude(y: np.ndarray, freq: float, rate: float) -> float:
    t = np.arange(y.size) / rate
    a = 2.0 * np.mean(y * np.sin(2 * np.pi * freq * t))
    b = 2.0 * np.mean(y * np.cos(2 * np.pi * freq * t))
    return float(np.hypot(a, b))


def central(y: np.ndarray, rate: float, seconds: float) -> np.ndarray:
    n = int(seconds * rate)
    start = (y.size - n) // 2
    return y[start:start + n]


class BandpassTests(unittest.TestCase):
    rate = 512.0

    def test_ten_hz_passes_at_unity_gain(self) -> None:
        t = np.arange(int(400 * self.rate)) / self.rate
        out = butterworth_bandpass(rec(np.sin(2 * np.pi * 10 * t), self.rate), 0.5, 40.0, order=8)
        amp = sine_amplitude(central(out.data[0], self.rate, 200.0), 10.0, self.rate)
        self.assertAlmostEqual(amp, 1.0, delta=0.01)

    def test_very_low_frequency_is_attenuated_40_db(self) -> None:
        t = np.arange(int(400 * self.rate)) / self.rate
        out = butterworth_bandpass(rec(np.sin(2 * np.pi * 0.05 * t), self.rate), 0.5, 40.0, order=8)
        amp = sine_amplitude(central(out.data[0], self.rate, 200.0), 0.05, self.rate)
        self.assertLessEqual(amp, 0.01)

    def test_zero_phase_keeps_peaks_in_place(self) -> None:
        t = np.arange(int(20 * self.rate)) / self.rate
        x = np.sin(2 * np.pi * 10 * t)
        y = butterworth_bandpass(rec(x, self.rate), 0.5, 40.0, order=8).data[0]
        lo, hi = 4096, 4096 + 1024
        lag = max(range(-10, 11), key=lambda k: float(np.dot(x[lo:hi], y[lo + k:hi + k])))
        self.assertLessEqual(abs(lag), 1)

    def test_invalid_band_edges(self) -> None:
        r = rec(np.zeros(1000), self.rate)
        for low, high in ((0.0, 40.0), (40.0, 0.5), (0.5, 300.0)):
            with self.assertRaises(ValidationError):
                butterworth_bandpass(r, low, high)

    def test_commutes_with_channel_permutation(self) -> None:
        data = np.random.default_rng(0).normal(size=(4, 2048))
        perm = [2, 0, 3, 1]
        a = preprocess_recording(rec(data, 1000.0)).data[perm]
        b = preprocess_recording(rec(data[perm], 1000.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class RereferenceTests(unittest.TestCase):
    def test_zero_mean_pair_is_unchanged(self) -> None:
        data = np.vstack([np.ones(10), -np.ones(10)])
        np.testing.assert_array_equal(average_rereference(rec(data, 100.0)).data, data)

    def test_columns_sum_to_zero(self) -> None:
        data = np.random.default_rng(1).normal(size=(8, 100))
        out = average_rereference(rec(data, 100.0)).data
        np.testing.assert_allclose(out.sum(axis=0), 0.0, atol=1e-12)

    def test_common_offset_is_removed(self) -> None:
        data = np.random.default_rng(3).normal(size=(5, 64))
        a = average_rereference(rec(data, 100.0)).data
        b = average_rereference(rec(data + 42.5, 100.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_single_channel(self) -> None:
        with self.assertRaises(ValidationError):
            average_rereference(rec(np.zeros(10), 100.0))


class DownsampleTests(unittest.TestCase):
    def test_length_formula(self) -> None:
        out = downsample(rec(np.random.default_rng(2).normal(size=1000), 1000.0), 512.0)
        self.assertEqual(out.n_samples, 512)
        self.assertEqual(out.sampling_rate, 512.0)

    def test_constant_stays_constant(self) -> None:
        out = downsample(rec(np.full(2000, 3.0), 1000.0), 512.0)
        self.assertEqual(out.n_samples, 1024)
        np.testing.assert_allclose(out.data, 3.0, atol=1e-6)

    def test_five_hz_sine_survives(self) -> None:
        t = np.arange(10_000) / 1000.0
        out = downsample(rec(np.sin(2 * np.pi * 5 * t), 1000.0), 512.0)
        y = central(out.data[0], 512.0, 6.0)
        spectrum = np.abs(np.fft.rfft(y))
        freqs = np.fft.rfftfreq(y.size, d=1 / 512.0)
        self.assertAlmostEqual(float(freqs[int(np.argmax(spectrum))]), 5.0, places=6)
        self.assertAlmostEqual(sine_amplitude(y, 5.0, 512.0), 1.0, delta=0.02)

    def test_no_upsampling(self) -> None:
        with self.assertRaises(ValidationError):
            downsample(rec(np.zeros(100), 256.0), 512.0)


class SegmentTests(unittest.TestCase):
    def scouts(self, n: int) -> ScoutMatrix:
        return ScoutMatrix(series=np.arange(6 * n, dtype=np.float64).reshape(6, n), sampling_rate=512.0)

    def test_three_hundred_seconds(self) -> None:
        epochs = segment_epochs(self.scouts(300 * 512))
        self.assertEqual(len(epochs), 1200)
        self.assertEqual(epochs[0].samples.shape, (128, 6))

    def test_short_series_gives_nothing(self) -> None:
        self.assertEqual(segment_epochs(self.scouts(127)), [])

    def test_epochs_partition_the_prefix(self) -> None:
        sm = self.scouts(300)
        epochs = segment_epochs(sm, subject_id="S000", label=2)
        self.assertEqual(len(epochs), 2)
        joined = np.concatenate([e.samples for e in epochs], axis=0).T
        np.testing.assert_array_equal(joined, sm.series[:, :256])
        self.assertEqual({(e.subject_id, e.label) for e in epochs}, {("S000", 2)})

    def test_other_epoch_lengths_are_rejected(self) -> None:
        with self.assertRaises(ValidationError):
            segment_epochs(self.scouts(512), epoch_len=64)

    def test_wrong_rate(self) -> None:
        sm = ScoutMatrix(series=np.zeros((6, 256)), sampling_rate=1000.0)
        with self.assertRaises(ValidationError):
            segment_epochs(sm)


if __name__ == "__main__":
    unittest.main()
