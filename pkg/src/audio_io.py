"""
Waveform I/O and mixing.

Reads and writes 16-bit mono PCM WAV files, mixes clean speech with noise at a
requested SNR and synthesizes the tones, noise and speech-like signals used by
the desk-scale experiments.
"""
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import soundfile as sf
import torch

from config import MIX_SEED
from errors import (
    AlignmentError,
    ConfigurationError,
    DegenerateSignalError,
    MissingInputError,
    OutputPathError,
    WavFormatError,
)
from logging_config import get_logger

logger = get_logger("audio_io")

PCM16_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    """Mono float64 samples in [-1, 1] (not enforced) with a sample rate in Hz."""

    samples: torch.Tensor
    sample_rate: int

    def __post_init__(self):
        samples = torch.as_tensor(self.samples, dtype=torch.float64)
        if samples.ndim != 1:
            raise AlignmentError(f"waveform must be one-dimensional, got shape {tuple(samples.shape)}")
        if samples.numel() < 1:
            raise DegenerateSignalError("waveform has no samples")
        if not bool(torch.isfinite(samples.detach()).all()):
            raise DegenerateSignalError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ConfigurationError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    def energy(self) -> float:
        return float(torch.sum(self.samples.detach() ** 2))

    def scaled(self, factor: float) -> "Waveform":
        return Waveform(self.samples * factor, self.sample_rate)

    def numpy(self) -> np.ndarray:
        return self.samples.detach().cpu().numpy()


@dataclass(frozen=True)
class MixSpec:
    target_snr: float
    seed: int = MIX_SEED

    def __post_init__(self):
        if not math.isfinite(self.target_snr):
            raise ConfigurationError(f"target SNR must be finite, got {self.target_snr}")


def read_wav(path: str | os.PathLike) -> Waveform:
    """Read a mono 16-bit PCM WAV file into samples scaled by 1/32768."""
    wav_path = Path(path)
    if not wav_path.is_file():
        logger.warning(f"Input file not found: {wav_path}")
        raise MissingInputError(f"input file not found: {wav_path}")

    try:
        info = sf.info(str(wav_path))
    except RuntimeError as e:
        logger.warning(f"Malformed WAV header in {wav_path}: {e}")
        raise WavFormatError(f"malformed header: {wav_path}") from e

    if info.format != "WAV":
        raise WavFormatError(f"malformed header: {wav_path} is {info.format}, not RIFF/WAV")
    if info.channels != 1:
        raise WavFormatError(f"channels unsupported: {info.channels} channels in {wav_path}")
    if info.subtype != "PCM_16":
        raise WavFormatError(f"bit depth unsupported: {info.subtype} in {wav_path}")

    try:
        data, sample_rate = sf.read(str(wav_path), dtype="int16", always_2d=False)
    except RuntimeError as e:
        raise WavFormatError(f"malformed data chunk: {wav_path}") from e
    if data.size == 0:
        raise DegenerateSignalError(f"no samples in {wav_path}")

    logger.debug(f"Read {data.size} samples at {sample_rate} Hz from {wav_path}")
    return Waveform(torch.from_numpy(data.astype(np.float64) / PCM16_SCALE), sample_rate)


def write_wav(w: Waveform, path: str | os.PathLike, clamp: bool = True) -> None:
    """
    Write ``w`` as 16-bit PCM: round(x * 32768) clipped to [-32768, 32767].

    With ``clamp=False`` any sample outside [-1, 1] raises instead of clipping.
    """
    samples = w.numpy()
    if clamp:
        samples = np.clip(samples, -1.0, 1.0)
    elif np.any(np.abs(samples) > 1.0):
        peak = float(np.max(np.abs(samples)))
        raise WavFormatError(f"overrange: peak amplitude {peak:.6f} exceeds 1.0")

    pcm = np.clip(np.round(samples * PCM16_SCALE), -32768, 32767).astype(np.int16)
    wav_path = Path(path)
    try:
        sf.write(str(wav_path), pcm, w.sample_rate, subtype="PCM_16", format="WAV")
    except (RuntimeError, OSError) as e:
        logger.error(f"Cannot write {wav_path}: {e}", exc_info=True)
        raise OutputPathError(f"unwritable path: {wav_path}") from e
    logger.debug(f"Wrote {pcm.size} samples to {wav_path}")


def achieved_snr(clean: Waveform, noise: Waveform) -> float:
    """10 log10 of the clean-to-noise energy ratio, +inf for silent noise."""
    noise_energy = noise.energy()
    if noise_energy == 0.0:
        return math.inf
    return 10.0 * math.log10(clean.energy() / noise_energy)


def mix_at_snr(clean: Waveform, noise: Waveform, spec: MixSpec) -> tuple[Waveform, Waveform]:
    """
    Mix ``clean`` with a crop of ``noise`` scaled to ``spec.target_snr``.

    The crop offset is drawn from a generator seeded with ``spec.seed``, so equal
    inputs give byte-identical mixtures. Returns (noisy, scaled noise).
    """
    if clean.sample_rate != noise.sample_rate:
        raise AlignmentError(
            f"sample rates differ: clean {clean.sample_rate} Hz, noise {noise.sample_rate} Hz"
        )
    if len(noise) < len(clean):
        raise AlignmentError(f"noise ({len(noise)} samples) is shorter than clean ({len(clean)} samples)")

    clean_energy = clean.energy()
    if clean_energy == 0.0:
        raise DegenerateSignalError("zero-energy reference")

    rng = np.random.default_rng(spec.seed)
    offset = int(rng.integers(0, len(noise) - len(clean) + 1))
    segment = noise.samples.detach()[offset : offset + len(clean)]
    noise_energy = float(torch.sum(segment ** 2))
    if noise_energy == 0.0:
        raise DegenerateSignalError("zero-energy noise segment")

    scale = math.sqrt(clean_energy / (noise_energy * 10.0 ** (spec.target_snr / 10.0)))
    scaled_noise = Waveform(segment * scale, clean.sample_rate)
    noisy = Waveform(clean.samples.detach() + scaled_noise.samples, clean.sample_rate)
    logger.debug(
        f"Mixed at {spec.target_snr} dB (seed={spec.seed}, offset={offset}, scale={scale:.6g})"
    )
    return noisy, scaled_noise


def synth_tone(freq_hz: float, seconds: float, sample_rate: int, amplitude: float = 0.5) -> Waveform:
    n = int(round(seconds * sample_rate))
    t = torch.arange(n, dtype=torch.float64) / sample_rate
    return Waveform(amplitude * torch.sin(2.0 * math.pi * freq_hz * t), sample_rate)


def synth_noise(seconds: float, sample_rate: int, seed: int, amplitude: float = 0.1) -> Waveform:
    n = int(round(seconds * sample_rate))
    rng = np.random.default_rng(seed)
    return Waveform(torch.from_numpy(amplitude * rng.standard_normal(n)), sample_rate)


def synth_speech_like(seconds: float, sample_rate: int, seed: int, peak: float = 0.5) -> Waveform:
    """
    A voiced, syllable-modulated harmonic signal.

    Harmonics of a random 100-220 Hz fundamental up to 4 kHz fall off at about
    6 dB per octave; a 3-5 Hz envelope and a 150 ms pause in the middle give the
    level variation the frame aggregation of the PESQ path is sensitive to.
    """
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(100.0, 220.0)
    vibrato = 1.0 + 0.02 * np.sin(2.0 * np.pi * rng.uniform(4.0, 6.0) * t)
    phase = 2.0 * np.pi * np.cumsum(f0 * vibrato) / sample_rate

    signal = np.zeros(n)
    for k in range(1, int(min(4000.0, sample_rate / 2.0 - 1.0) // f0) + 1):
        signal += np.sin(k * phase + rng.uniform(0.0, 2.0 * np.pi)) / k

    syllable_rate = rng.uniform(3.0, 5.0)
    envelope = 0.5 * (1.0 - np.cos(2.0 * np.pi * syllable_rate * t)) + 0.05
    pause_start = n // 2
    envelope[pause_start : pause_start + int(0.15 * sample_rate)] *= 0.02

    signal *= envelope
    signal *= peak / np.max(np.abs(signal))
    return Waveform(torch.from_numpy(signal), sample_rate)
