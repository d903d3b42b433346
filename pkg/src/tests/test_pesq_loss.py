import json
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

from audio_io import MixSpec, Waveform, mix_at_snr, synth_noise, synth_speech_like
from config import BARK_TABLE_PATH
from errors import AlignmentError, ConfigurationError, DegenerateSignalError, MissingInputError
from pesq_loss import (
    BarkSpectrogram,
    BarkTable,
    DisturbanceSeries,
    LoudnessGrid,
    PesqConfig,
    aggregate,
    asymmetry_factor,
    bark_spectrum,
    bark_width,
    frame_disturbances,
    level_align,
    loudness,
    pesq_loss,
    pesq_loss_batch,
    raw_disturbance,
    tf_equalize,
)
from spectral import PowerSpectrogram, StftConfig


def reference_table() -> dict:
    return json.loads(Path(BARK_TABLE_PATH).read_text(encoding="utf-8"))


def power_grid(values: torch.Tensor, fft_size: int = 512) -> PowerSpectrogram:
    return PowerSpectrogram(values.to(torch.float64), 16000, fft_size)


def reference_two_stage(values: list[float], window_len: int = 20, step: int = 10) -> float:
    frames = len(values)
    windows = max(1, frames // step)
    per_window = []
    for s in range(windows):
        chunk = values[s * step : min(s * step + window_len, frames)]
        per_window.append((sum(v ** 6 for v in chunk) / len(chunk)) ** (1.0 / 6.0))
    return math.sqrt(sum(v ** 2 for v in per_window) / len(per_window))


class TestPesqConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = PesqConfig()
        self.assertEqual(cfg.target_power, 1e7)
        self.assertEqual((cfg.window_len, cfg.window_step), (20, 10))
        self.assertEqual((cfg.score_base, cfg.sym_weight, cfg.asym_weight), (4.5, 0.1, 0.0309))

    def test_invalid(self):
        with self.assertRaises(ConfigurationError):
            PesqConfig(window_len=5, window_step=10)
        with self.assertRaises(ConfigurationError):
            PesqConfig(c1=0.0)
        with self.assertRaises(ConfigurationError):
            PesqConfig(ratio_clip=(10.0, 1.0))
        with self.assertRaises(ConfigurationError):
            PesqConfig(asym_clip_low=20.0)


class TestBarkTable(unittest.TestCase):
    def test_reference_grid_has_49_bands(self):
        table = BarkTable.default(512, 16000)
        self.assertEqual(table.n_bands, 49)
        self.assertEqual(table.band_edges[0], 0)
        self.assertEqual(table.band_edges[-1], 256)
        self.assertTrue(all(b > a for a, b in zip(table.band_edges, table.band_edges[1:])))
        self.assertTrue(bool((table.band_weights > 0).all()))
        self.assertAlmostEqual(float(table.band_weights[0]), bark_width(0.0, 31.25), places=12)

    def test_coarse_grid_merges_bands(self):
        data = reference_table()
        table = BarkTable.from_dict(data, 16, 16000)
        self.assertLess(table.n_bands, 49)
        self.assertLessEqual(table.band_edges[-1], 9)
        self.assertTrue(all(b > a for a, b in zip(table.band_edges, table.band_edges[1:])))
        # the first fifteen reference bands end below the first 1 kHz bin edge
        self.assertEqual(float(table.abs_threshold[0]), min(data["abs_threshold_power"][:15]))

    def test_narrowband_grid_drops_bands_above_nyquist(self):
        table = BarkTable.default(256, 8000)
        self.assertLess(table.n_bands, 49)
        self.assertLessEqual(table.band_edges[-1], 129)

    def test_bad_tables(self):
        data = reference_table()
        with self.assertRaises(ConfigurationError):
            BarkTable.from_dict({**data, "schema_version": 99}, 512, 16000)
        with self.assertRaises(ConfigurationError):
            BarkTable.from_dict({**data, "bins_per_band": data["bins_per_band"][:-1]}, 512, 16000)
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(MissingInputError):
                BarkTable.load(Path(tmp) / "absent.json", 512, 16000)
            broken = Path(tmp) / "broken.json"
            broken.write_text("{not json", encoding="utf-8")
            with self.assertRaises(ConfigurationError):
                BarkTable.load(broken, 512, 16000)


class TestStages(unittest.TestCase):
    def setUp(self):
        self.table = BarkTable.default(512, 16000)
        self.cfg = PesqConfig()

    def test_level_align(self):
        target = self.cfg.target_power * self.cfg.iir_gain ** 2
        half = power_grid(torch.full((3, 257), target / 2.0))
        self.assertTrue(torch.allclose(level_align(half).values, torch.full((3, 257), target, dtype=torch.float64), rtol=1e-12))

        rng = np.random.default_rng(0)
        power = power_grid(torch.from_numpy(rng.uniform(0.0, 2.0, size=(5, 257))))
        aligned = level_align(power).values
        freqs = torch.arange(257, dtype=torch.float64) * 16000 / 512
        band = (freqs >= 300.0) & (freqs <= 3000.0)
        self.assertAlmostEqual(float(aligned[:, band].mean()) / target, 1.0, delta=1e-6)
        for c in (0.1, 10.0):
            scaled = level_align(power_grid(power.values * c)).values
            self.assertTrue(torch.allclose(scaled, aligned, rtol=1e-9))

    def test_level_align_silent(self):
        with self.assertRaises(DegenerateSignalError):
            level_align(power_grid(torch.zeros(2, 257)))

    def test_bark_spectrum(self):
        flat = bark_spectrum(power_grid(torch.full((2, 257), 7.0)), self.table)
        self.assertTrue(torch.allclose(flat.values, torch.full((2, 49), 7.0, dtype=torch.float64), rtol=1e-14))

        low = torch.zeros(2, 257)
        low[:, 0] = 5.0
        only_first = bark_spectrum(power_grid(low), self.table).values
        self.assertTrue(bool((only_first[:, 1:] == 0).all()))
        self.assertEqual(float(only_first[0, 0]), 5.0)

        rng = np.random.default_rng(1)
        values = torch.from_numpy(rng.uniform(size=(3, 257)))
        bark = bark_spectrum(power_grid(values), self.table).values
        edges = self.table.band_edges
        for m in range(3):
            for i in range(49):
                expected = float(values[m, edges[i] : edges[i + 1]].mean())
                self.assertAlmostEqual(float(bark[m, i]), expected, places=12)

    def test_bark_spectrum_grid_mismatch(self):
        with self.assertRaises(AlignmentError):
            bark_spectrum(power_grid(torch.ones(2, 129), fft_size=256), self.table)

    def bark(self, values: torch.Tensor) -> BarkSpectrogram:
        return BarkSpectrogram(values.to(torch.float64), torch.ones(values.shape, dtype=torch.bool))

    def test_equalize_identical_inputs(self):
        rng = np.random.default_rng(2)
        values = torch.from_numpy(rng.uniform(1e3, 1e6, size=(6, 49)))
        eq_clean, eq_noisy = tf_equalize(self.bark(values), self.bark(values))
        self.assertTrue(torch.allclose(eq_clean.values, values, rtol=1e-9))
        self.assertTrue(torch.allclose(eq_noisy.values, values, rtol=1e-9))

    def test_equalize_uniformly_louder_noisy(self):
        rng = np.random.default_rng(3)
        clean = torch.from_numpy(rng.uniform(1e6, 2e6, size=(8, 49)))
        eq_clean, eq_noisy = tf_equalize(self.bark(clean), self.bark(4.0 * clean))
        ratio = eq_clean.values / clean
        self.assertTrue(bool(((ratio - 4.0).abs() < 4.0 * 1e-3).all()))
        totals_clean = eq_clean.values.sum(dim=1)
        totals_noisy = eq_noisy.values.sum(dim=1)
        self.assertTrue(torch.allclose(totals_clean, totals_noisy, rtol=1e-3))

    def test_equalize_single_frame(self):
        clean = torch.full((1, 49), 1e5, dtype=torch.float64)
        noisy = torch.full((1, 49), 3e5, dtype=torch.float64)
        eq_clean, eq_noisy = tf_equalize(self.bark(clean), self.bark(noisy))
        gain = (eq_clean.values.sum() + self.cfg.c2) / (noisy.sum() + self.cfg.c2)
        self.assertTrue(torch.allclose(eq_noisy.values, gain * noisy, rtol=1e-12))

    def test_loudness(self):
        p0 = self.table.abs_threshold
        at_threshold = loudness(self.bark(p0.unsqueeze(0)), self.table).values
        self.assertLess(float(at_threshold.abs().max()), 1e-9)
        silent = loudness(self.bark(torch.zeros(1, 49)), self.table).values
        self.assertEqual(float(silent.abs().max()), 0.0)

        levels = p0.unsqueeze(0) * torch.logspace(-2, 6, 30, dtype=torch.float64).unsqueeze(1)
        loud = loudness(self.bark(levels), self.table).values
        self.assertTrue(bool((loud[1:] >= loud[:-1]).all()))

    def test_raw_disturbance(self):
        lc = LoudnessGrid(torch.tensor([[10.0, 10.0, 3.0, 4.0]], dtype=torch.float64))
        ln = LoudnessGrid(torch.tensor([[8.0, 4.0, 3.0, 10.0]], dtype=torch.float64))
        self.assertEqual(raw_disturbance(lc, ln).tolist(), [[0.0, 5.0, 0.0, -5.0]])

    def test_dead_zone_soundness(self):
        rng = np.random.default_rng(4)
        lc = torch.from_numpy(rng.uniform(0.0, 20.0, size=(50, 49)))
        ln = torch.from_numpy(rng.uniform(0.0, 20.0, size=(50, 49)))
        d = raw_disturbance(LoudnessGrid(lc), LoudnessGrid(ln))
        inside = (lc - ln).abs() <= 0.25 * torch.minimum(lc, ln)
        self.assertTrue(bool((d[inside] == 0).all()))
        self.assertTrue(bool((d[~inside] != 0).all()))

    def test_asymmetry_clip(self):
        bc = torch.zeros(3, dtype=torch.float64)
        targets = torch.tensor([20.0, 2.0, 5.0], dtype=torch.float64)
        bn = 50.0 * targets ** (1.0 / 1.2) - 50.0
        h = asymmetry_factor(bc, bn)
        self.assertEqual(float(h[0]), 12.0)
        self.assertEqual(float(h[1]), 0.0)
        self.assertAlmostEqual(float(h[2]), 5.0, places=9)

        rng = np.random.default_rng(5)
        h = asymmetry_factor(torch.from_numpy(rng.uniform(0, 1e3, 500)), torch.from_numpy(rng.uniform(0, 1e4, 500)))
        self.assertTrue(bool(((h == 0) | ((h >= 3) & (h <= 12))).all()))

    def test_frame_disturbances(self):
        zeros = torch.zeros(4, 49, dtype=torch.float64)
        series = frame_disturbances(zeros, self.bark(zeros + 1.0), self.bark(zeros + 1.0), self.table)
        self.assertEqual(float(series.sym.abs().max()), 0.0)
        self.assertEqual(float(series.asym.abs().max()), 0.0)

        one_band = BarkTable(
            band_edges=(0, 2),
            band_weights=torch.ones(1),
            disturbance_weights=torch.ones(1),
            abs_threshold=torch.ones(1),
            loudness_scale=torch.ones(1),
            zwicker_power=0.23,
            silence_factor=100.0,
            fft_size=4,
            sample_rate=16000,
        )
        d = torch.full((2, 1), 3.0, dtype=torch.float64)
        series = frame_disturbances(d, self.bark(torch.ones(2, 1)), self.bark(torch.ones(2, 1)), one_band)
        self.assertEqual(series.sym.tolist(), [3.0, 3.0])
        self.assertTrue(bool((series.asym == 0).all()))


class TestAggregate(unittest.TestCase):
    def series(self, sym, asym=None) -> DisturbanceSeries:
        sym = torch.as_tensor(sym, dtype=torch.float64)
        asym = torch.zeros_like(sym) if asym is None else torch.as_tensor(asym, dtype=torch.float64)
        return DisturbanceSeries(sym, asym, torch.zeros(len(sym), 1))

    def test_perfect_signal(self):
        self.assertEqual(float(aggregate([self.series([0.0] * 30)])), 4.5)

    def test_constant_disturbance_passes_through(self):
        self.assertAlmostEqual(float(aggregate([self.series([2.0] * 40)])), 4.5 - 0.2, places=12)
        self.assertAlmostEqual(float(aggregate([self.series([0.0] * 40, [3.0] * 40)])), 4.5 - 0.0309 * 3.0, places=12)

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(6)
        for frames in (7, 20, 35, 64):
            sym, asym = rng.uniform(0, 5, frames).tolist(), rng.uniform(0, 5, frames).tolist()
            expected = 4.5 - 0.1 * reference_two_stage(sym) - 0.0309 * reference_two_stage(asym)
            self.assertAlmostEqual(float(aggregate([self.series(sym, asym)])), expected, places=10)

    def test_batch_means(self):
        first, second = self.series([1.0] * 20), self.series([3.0] * 20)
        self.assertAlmostEqual(float(aggregate([first, second])), 4.5 - 0.1 * 2.0, places=12)
        with self.assertRaises(ConfigurationError):
            aggregate([])


class TestPesqLoss(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.utterances = [synth_speech_like(1.0, 16000, seed=s) for s in range(5)]
        cls.noise = synth_noise(3.0, 16000, seed=100)

    def test_identical_inputs_score_base(self):
        x = self.utterances[0]
        report = pesq_loss(x, x)
        self.assertAlmostEqual(report.value, 4.5, delta=1e-9)
        self.assertIsNone(report.gradient)
        for stage in ("bark_clean", "eq_estimate", "loudness_clean", "raw_disturbance", "frame_disturbance"):
            self.assertIn(stage, report.diagnostics)

    def test_snr_ladder_is_strictly_decreasing(self):
        for index, clean in enumerate(self.utterances):
            scores = []
            for snr in (20.0, 15.0, 10.0, 5.0, 0.0):
                noisy, _ = mix_at_snr(clean, self.noise, MixSpec(snr, seed=index))
                scores.append(pesq_loss(clean, noisy).value)
            for better, worse in zip(scores, scores[1:]):
                self.assertGreater(better, worse, msg=f"utterance {index}: {scores}")

    def test_level_invariance(self):
        clean = self.utterances[1]
        noisy, _ = mix_at_snr(clean, self.noise, MixSpec(10.0, seed=1))
        base = pesq_loss(clean, noisy).value
        for c in (0.1, 10.0):
            scaled = pesq_loss(clean.scaled(c), noisy.scaled(c)).value
            self.assertAlmostEqual(scaled, base, delta=1e-6)

    def test_narrowband_rate(self):
        clean = synth_speech_like(1.0, 8000, seed=3)
        cfg = StftConfig(fft_size=256, hop=128, sample_rate=8000)
        self.assertAlmostEqual(pesq_loss(clean, clean, stft_cfg=cfg).value, 4.5, delta=1e-9)

    def test_batch_loss(self):
        pairs = []
        for index, clean in enumerate(self.utterances[:2]):
            noisy, _ = mix_at_snr(clean, self.noise, MixSpec(5.0, seed=index))
            pairs.append((clean, noisy))
        self.assertLess(pesq_loss_batch(pairs), 4.5)
        self.assertAlmostEqual(pesq_loss_batch([(c, c) for c, _ in pairs]), 4.5, delta=1e-9)

    def test_errors(self):
        clean = self.utterances[0]
        with self.assertRaises(AlignmentError):
            pesq_loss(clean, Waveform(clean.samples[:-1], 16000))
        with self.assertRaises(ConfigurationError):
            odd = Waveform(clean.samples, 22050)
            pesq_loss(odd, odd)
        with self.assertRaises(DegenerateSignalError):
            pesq_loss(clean, Waveform(torch.zeros(len(clean)), 16000))


if __name__ == "__main__":
    unittest.main(verbosity=2)
