import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
import soundfile as sf
import torch

from audio_io import (
    MixSpec,
    Waveform,
    achieved_snr,
    mix_at_snr,
    read_wav,
    synth_noise,
    synth_speech_like,
    synth_tone,
    write_wav,
)
from errors import (
    AlignmentError,
    DegenerateSignalError,
    MissingInputError,
    OutputPathError,
    WavFormatError,
)


class TestWavIO(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_read_scales_pcm16_by_32768(self):
        path = self.dir / "three.wav"
        sf.write(str(path), np.array([0, 16384, -32768], dtype=np.int16), 16000, subtype="PCM_16")
        w = read_wav(path)
        self.assertEqual(w.sample_rate, 16000)
        self.assertEqual(w.samples.tolist(), [0.0, 0.5, -1.0])

    def test_write_then_read_within_one_lsb(self):
        rng = np.random.default_rng(3)
        original = Waveform(torch.from_numpy(rng.uniform(-1.0, 1.0, 4000)), 16000)
        path = self.dir / "round.wav"
        write_wav(original, path)
        restored = read_wav(path)
        self.assertEqual(len(restored), len(original))
        self.assertLessEqual(float((restored.samples - original.samples).abs().max()), 1.0 / 32768.0)

    def test_full_scale_is_clipped_to_int16_max(self):
        path = self.dir / "peak.wav"
        write_wav(Waveform(torch.tensor([1.0, -1.0, 0.0]), 8000), path)
        data, _ = sf.read(str(path), dtype="int16")
        self.assertEqual(data.tolist(), [32767, -32768, 0])

    def test_overrange_without_clamp_raises(self):
        with self.assertRaisesRegex(WavFormatError, "overrange"):
            write_wav(Waveform(torch.tensor([0.2, 1.5]), 16000), self.dir / "loud.wav", clamp=False)

    def test_stereo_is_rejected(self):
        path = self.dir / "stereo.wav"
        sf.write(str(path), np.zeros((100, 2), dtype=np.int16), 16000, subtype="PCM_16")
        with self.assertRaisesRegex(WavFormatError, "channels unsupported"):
            read_wav(path)

    def test_24_bit_is_rejected(self):
        path = self.dir / "deep.wav"
        sf.write(str(path), np.zeros(100), 16000, subtype="PCM_24")
        with self.assertRaisesRegex(WavFormatError, "bit depth unsupported"):
            read_wav(path)

    def test_garbage_header_is_rejected(self):
        path = self.dir / "garbage.wav"
        path.write_bytes(b"this is not a RIFF file at all" * 4)
        with self.assertRaisesRegex(WavFormatError, "malformed"):
            read_wav(path)

    def test_missing_file(self):
        with self.assertRaises(MissingInputError) as ctx:
            read_wav(self.dir / "nope.wav")
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_unwritable_path(self):
        with self.assertRaises(OutputPathError):
            write_wav(Waveform(torch.zeros(10), 16000), self.dir / "missing_dir" / "x.wav")


class TestWaveform(unittest.TestCase):
    def test_rejects_non_finite_and_empty(self):
        with self.assertRaises(DegenerateSignalError):
            Waveform(torch.tensor([0.0, float("nan")]), 16000)
        with self.assertRaises(DegenerateSignalError):
            Waveform(torch.zeros(0), 16000)

    def test_energy_and_scaling(self):
        w = Waveform(torch.tensor([3.0, 4.0]), 16000)
        self.assertEqual(w.energy(), 25.0)
        self.assertEqual(w.scaled(2.0).energy(), 100.0)


class TestMixAtSnr(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(11)
        n = 8000
        clean = rng.standard_normal(n)
        noise = rng.standard_normal(n)
        self.clean = Waveform(torch.from_numpy(clean / np.sqrt(np.mean(clean ** 2))), 16000)
        self.noise = Waveform(torch.from_numpy(noise / np.sqrt(np.mean(noise ** 2))), 16000)

    def test_unit_powers_at_zero_db_keep_the_noise(self):
        noisy, scaled = mix_at_snr(self.clean, self.noise, MixSpec(0.0, seed=1))
        self.assertTrue(torch.allclose(scaled.samples, self.noise.samples, atol=1e-12))
        self.assertTrue(torch.allclose(noisy.samples, self.clean.samples + self.noise.samples, atol=1e-12))

    def test_twenty_db_scales_noise_by_a_tenth(self):
        _, scaled = mix_at_snr(self.clean, self.noise, MixSpec(20.0, seed=1))
        self.assertTrue(torch.allclose(scaled.samples, 0.1 * self.noise.samples, atol=1e-12))

    def test_achieved_snr_matches_target(self):
        long_noise = synth_noise(1.0, 16000, seed=5)
        for target in (-5.0, 0.0, 7.5, 20.0):
            _, scaled = mix_at_snr(self.clean, long_noise, MixSpec(target, seed=9))
            self.assertAlmostEqual(achieved_snr(self.clean, scaled), target, places=9)

    def test_same_seed_same_mixture(self):
        long_noise = synth_noise(1.0, 16000, seed=5)
        first, _ = mix_at_snr(self.clean, long_noise, MixSpec(3.0, seed=42))
        second, _ = mix_at_snr(self.clean, long_noise, MixSpec(3.0, seed=42))
        self.assertTrue(torch.equal(first.samples, second.samples))

    def test_zero_energy_clean(self):
        silent = Waveform(torch.zeros(8000), 16000)
        with self.assertRaisesRegex(DegenerateSignalError, "zero-energy reference"):
            mix_at_snr(silent, self.noise, MixSpec(0.0))

    def test_short_noise_and_rate_mismatch(self):
        with self.assertRaises(AlignmentError):
            mix_at_snr(self.clean, Waveform(self.noise.samples[:100], 16000), MixSpec(0.0))
        with self.assertRaises(AlignmentError):
            mix_at_snr(self.clean, Waveform(self.noise.samples, 8000), MixSpec(0.0))


class TestSynthesis(unittest.TestCase):
    def test_tone_and_speech_like_signals(self):
        tone = synth_tone(1000.0, 0.5, 16000, amplitude=0.25)
        self.assertEqual(len(tone), 8000)
        self.assertAlmostEqual(float(tone.samples.abs().max()), 0.25, places=6)

        speech = synth_speech_like(1.0, 16000, seed=2)
        again = synth_speech_like(1.0, 16000, seed=2)
        self.assertTrue(torch.equal(speech.samples, again.samples))
        self.assertAlmostEqual(float(speech.samples.abs().max()), 0.5, places=12)
        self.assertTrue(math.isfinite(speech.energy()))


if __name__ == "__main__":
    unittest.main(verbosity=2)
