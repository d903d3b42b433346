"""
Short-time Fourier transform, least-squares inverse and Griffin-Lim.

Framing: the signal is zero-padded with ``fft_size - hop`` samples at the head
and at least as many at the tail (more if needed to end on a whole hop), so
every original sample is covered by the same number of frames as in the steady
state. Frame m starts at ``m * hop`` in the padded signal.

Everything is float64 / complex128 torch and differentiable, so the gradient
fitter can push masks through ``istft_gl`` and ``stft`` unchanged.
"""
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from audio_io import Waveform
from branches import record_branch
from config import STFT_FFT_SIZE, STFT_HOP, STFT_SAMPLE_RATE
from errors import AlignmentError, ConfigurationError, DegenerateSignalError, MissingInputError, OutputPathError
from logging_config import get_logger

logger = get_logger("spectral")

OLA_FLOOR = 1e-12
GRID_MAGIC = b"TFGRID01"
_GRID_HEADER = struct.Struct("<8sIII")


def named_window(name: str, size: int) -> torch.Tensor:
    """Periodic analysis windows by name: ``hann``, ``hamming`` or ``rect``."""
    name = name.lower()
    if name == "hann":
        return torch.hann_window(size, periodic=True, dtype=torch.float64)
    if name == "hamming":
        return torch.hamming_window(size, periodic=True, dtype=torch.float64)
    if name in ("rect", "rectangular", "boxcar"):
        return torch.ones(size, dtype=torch.float64)
    raise ConfigurationError(f"unknown window '{name}'")


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = STFT_FFT_SIZE
    hop: int = STFT_HOP
    window: torch.Tensor | None = None
    synthesis_window: torch.Tensor | None = None
    sample_rate: int = STFT_SAMPLE_RATE

    def __post_init__(self):
        n, hop = int(self.fft_size), int(self.hop)
        if n < 2 or n & (n - 1):
            raise ConfigurationError(f"fft_size must be a power of two >= 2, got {self.fft_size}")
        if hop < 1 or hop > n:
            raise ConfigurationError(f"hop must be in [1, fft_size], got {self.hop}")
        if int(self.sample_rate) <= 0:
            raise ConfigurationError(f"sample_rate must be positive, got {self.sample_rate}")

        analysis = named_window("hann", n) if self.window is None else torch.as_tensor(self.window, dtype=torch.float64)
        synthesis = analysis if self.synthesis_window is None else torch.as_tensor(
            self.synthesis_window, dtype=torch.float64
        )
        for label, w in (("window", analysis), ("synthesis_window", synthesis)):
            if w.shape != (n,):
                raise ConfigurationError(f"{label} must have {n} taps, got shape {tuple(w.shape)}")
            if not bool(torch.isfinite(w).all()) or bool((w < 0).any()):
                raise ConfigurationError(f"{label} taps must be finite and non-negative")

        # steady-state overlap-add denominators, one value per phase within a hop
        phases = torch.arange(n) % hop
        for label, product in (("w_a^2", analysis * analysis), ("w_a*w_s", analysis * synthesis)):
            coverage = torch.zeros(hop, dtype=torch.float64).index_add_(0, phases, product)
            if bool((coverage <= OLA_FLOOR).any()):
                raise ConfigurationError(f"window/hop combination leaves samples uncovered (sum of {label} is zero)")

        object.__setattr__(self, "fft_size", n)
        object.__setattr__(self, "hop", hop)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))
        object.__setattr__(self, "window", analysis)
        object.__setattr__(self, "synthesis_window", synthesis)

    @classmethod
    def build(
        cls,
        fft_size: int = STFT_FFT_SIZE,
        hop: int = STFT_HOP,
        window: str = "hann",
        synthesis_window: str | None = None,
        sample_rate: int = STFT_SAMPLE_RATE,
    ) -> "StftConfig":
        return cls(
            fft_size=fft_size,
            hop=hop,
            window=named_window(window, fft_size),
            synthesis_window=None if synthesis_window is None else named_window(synthesis_window, fft_size),
            sample_rate=sample_rate,
        )

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def describe(self) -> dict:
        """Plain-JSON view used for the configuration digest."""
        return {
            "fft_size": self.fft_size,
            "hop": self.hop,
            "sample_rate": self.sample_rate,
            "window": [round(float(v), 12) for v in self.window],
            "synthesis_window": [round(float(v), 12) for v in self.synthesis_window],
        }


@dataclass(frozen=True)
class ComplexSpectrogram:
    """M frames x (fft_size/2 + 1) bins, complex128."""

    values: torch.Tensor
    sample_rate: int
    fft_size: int
    length: int | None = None

    def __post_init__(self):
        values = torch.as_tensor(self.values)
        if not values.is_complex():
            values = values.to(torch.complex128)
        if values.ndim != 2:
            raise AlignmentError(f"spectrogram must be frames x bins, got shape {tuple(values.shape)}")
        if values.shape[1] != self.fft_size // 2 + 1:
            raise AlignmentError(f"{values.shape[1]} bins do not match fft_size {self.fft_size}")
        object.__setattr__(self, "values", values)

    @property
    def frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def bins(self) -> int:
        return int(self.values.shape[1])

    def magnitude(self) -> torch.Tensor:
        return self.values.abs()


@dataclass(frozen=True)
class PowerSpectrogram:
    values: torch.Tensor
    sample_rate: int
    fft_size: int

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.fft_size // 2 + 1:
            raise AlignmentError(f"power grid shape {tuple(self.values.shape)} does not match fft_size {self.fft_size}")


@dataclass(frozen=True)
class MismatchReport:
    objective: float
    per_iteration: tuple[float, ...]


def power_spectrogram(spec: ComplexSpectrogram) -> PowerSpectrogram:
    return PowerSpectrogram(spec.values.real ** 2 + spec.values.imag ** 2, spec.sample_rate, spec.fft_size)


def frame_layout(length: int, cfg: StftConfig) -> tuple[int, int, int]:
    """Return (head pad, padded length, frame count) for a signal of ``length`` samples."""
    head = cfg.fft_size - cfg.hop
    frames = math.ceil((length + cfg.fft_size - 2 * cfg.hop) / cfg.hop) + 1
    padded = (frames - 1) * cfg.hop + cfg.fft_size
    return head, padded, frames


def default_length(frames: int, cfg: StftConfig) -> int:
    """Longest signal whose layout yields ``frames`` frames."""
    return (frames + 1) * cfg.hop - cfg.fft_size


def bin_weights(cfg: StftConfig) -> torch.Tensor:
    """Parseval weights of a one-sided spectrum: 1 at DC and Nyquist, 2 elsewhere."""
    weights = torch.full((cfg.bins,), 2.0, dtype=torch.float64)
    weights[0] = 1.0
    weights[-1] = 1.0
    return weights


def stft_values(samples: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    length = int(samples.shape[0])
    head, padded_len, _ = frame_layout(length, cfg)
    padded = torch.nn.functional.pad(samples, (head, padded_len - head - length))
    frames = padded.unfold(0, cfg.fft_size, cfg.hop)
    return torch.fft.rfft(frames * cfg.window, dim=-1)


def stft(w: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    if len(w) < cfg.fft_size:
        logger.warning(f"Signal of {len(w)} samples is shorter than fft_size {cfg.fft_size}")
        raise DegenerateSignalError(f"signal shorter than fft_size ({len(w)} < {cfg.fft_size})")
    values = stft_values(w.samples, cfg)
    logger.debug(f"STFT: {len(w)} samples -> {values.shape[0]} frames x {values.shape[1]} bins")
    return ComplexSpectrogram(values, w.sample_rate, cfg.fft_size, len(w))


def istft_values(values: torch.Tensor, cfg: StftConfig, length: int, synthesis: bool = False) -> torch.Tensor:
    """
    Least-squares overlap-add: z[n] = sum_m w_a x_m[n - m hop] / sum_m w_a^2.

    Only this form minimizes the STFT mismatch. With ``synthesis=True`` the
    frames are weighted by the synthesis window instead and normalized by
    sum_m w_a w_s, which still inverts a consistent spectrum exactly.

    Samples whose denominator is at most 1e-12 are set to 0; inside the cropped
    range this only happens for a mis-sized ``length`` and raises.
    """
    weight = cfg.synthesis_window if synthesis else cfg.window
    frames, bins = int(values.shape[0]), int(values.shape[1])
    if bins != cfg.bins:
        raise AlignmentError(f"spectrogram has {bins} bins, config expects {cfg.bins}")
    head = cfg.fft_size - cfg.hop
    padded_len = (frames - 1) * cfg.hop + cfg.fft_size
    if length < 1 or head + length > padded_len:
        raise AlignmentError(f"length {length} is not covered by {frames} frames")

    time_frames = torch.fft.irfft(values, n=cfg.fft_size, dim=-1) * weight
    index = (torch.arange(frames).unsqueeze(1) * cfg.hop + torch.arange(cfg.fft_size)).reshape(-1)
    numerator = torch.zeros(padded_len, dtype=torch.float64).index_add(0, index, time_frames.reshape(-1))
    denominator = torch.zeros(padded_len, dtype=torch.float64).index_add(
        0, index, (cfg.window * weight).repeat(frames)
    )

    covered = denominator > OLA_FLOOR
    if not bool(covered[head : head + length].all()):
        raise ConfigurationError("overlap-add denominator is zero at a covered sample")
    z = torch.where(covered, numerator / torch.where(covered, denominator, 1.0), 0.0)
    return z[head : head + length]


def istft_gl(s: ComplexSpectrogram, cfg: StftConfig, length: int | None = None) -> Waveform:
    """Signal whose STFT is nearest to ``s`` in the least-squares sense."""
    if s.fft_size != cfg.fft_size:
        raise AlignmentError(f"spectrogram fft_size {s.fft_size} differs from config {cfg.fft_size}")
    if length is None:
        length = s.length if s.length is not None else default_length(s.frames, cfg)
    return Waveform(istft_values(s.values, cfg, length), s.sample_rate)


def istft_ola(s: ComplexSpectrogram, cfg: StftConfig, length: int | None = None) -> Waveform:
    """Plain overlap-add with the synthesis window; equals ``istft_gl`` when the windows match."""
    if s.fft_size != cfg.fft_size:
        raise AlignmentError(f"spectrogram fft_size {s.fft_size} differs from config {cfg.fft_size}")
    if length is None:
        length = s.length if s.length is not None else default_length(s.frames, cfg)
    return Waveform(istft_values(s.values, cfg, length, synthesis=True), s.sample_rate)


def spectrum_mismatch(target: ComplexSpectrogram, z: Waveform, cfg: StftConfig) -> MismatchReport:
    """Weighted squared distance between ``target`` and the STFT of ``z``."""
    actual = stft_values(z.samples, cfg)
    if actual.shape != target.values.shape:
        raise AlignmentError(f"grid {tuple(actual.shape)} does not match target {tuple(target.values.shape)}")
    objective = float(torch.sum((target.values - actual).abs() ** 2 * bin_weights(cfg)))
    return MismatchReport(objective, (objective,))


def magnitude_mismatch(magnitude: torch.Tensor, samples: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    return torch.sum((magnitude - stft_values(samples, cfg).abs()) ** 2 * bin_weights(cfg))


def unit_phase(values: torch.Tensor) -> torch.Tensor:
    """values / |values|, with 1 where the magnitude is exactly zero."""
    mag = values.abs()
    nonzero = mag > 0
    record_branch("phase.nonzero", nonzero)
    return torch.where(nonzero, values / torch.where(nonzero, mag, 1.0), torch.ones_like(values))


def griffin_lim_values(
    initial: torch.Tensor,
    magnitude: torch.Tensor,
    cfg: StftConfig,
    length: int,
    iterations: int,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """
    Run ``iterations`` Griffin-Lim passes starting from the complex grid ``initial``.

    Pass 1 reconstructs ``initial`` directly; every later pass keeps ``magnitude``
    and takes the phase of the STFT of the previous estimate. Returns the final
    samples and the magnitude mismatch after each pass.
    """
    if iterations < 1:
        raise ConfigurationError(f"iterations must be >= 1, got {iterations}")
    z = istft_values(initial, cfg, length)
    history = [magnitude_mismatch(magnitude, z, cfg)]
    for _ in range(iterations - 1):
        phase = unit_phase(stft_values(z, cfg))
        z = istft_values(magnitude * phase, cfg, length)
        history.append(magnitude_mismatch(magnitude, z, cfg))
    return z, history


def griffin_lim_iterate(
    magnitude: torch.Tensor,
    init_phase: torch.Tensor,
    cfg: StftConfig,
    iterations: int,
    length: int | None = None,
    sample_rate: int | None = None,
) -> tuple[Waveform, MismatchReport]:
    """Griffin-Lim from a magnitude grid and an initial phase grid (radians)."""
    magnitude = torch.as_tensor(magnitude, dtype=torch.float64)
    init_phase = torch.as_tensor(init_phase, dtype=torch.float64)
    if magnitude.shape != init_phase.shape:
        raise AlignmentError(f"magnitude {tuple(magnitude.shape)} and phase {tuple(init_phase.shape)} differ")
    if length is None:
        length = default_length(int(magnitude.shape[0]), cfg)
    initial = torch.polar(magnitude, init_phase)
    z, history = griffin_lim_values(initial, magnitude, cfg, length, iterations)
    per_iteration = tuple(float(v) for v in history)
    logger.debug(f"Griffin-Lim: {iterations} iterations, mismatch {per_iteration[0]:.6g} -> {per_iteration[-1]:.6g}")
    return Waveform(z, sample_rate or cfg.sample_rate), MismatchReport(per_iteration[-1], per_iteration)


def dump_grid(values: torch.Tensor | np.ndarray, path: str | os.PathLike) -> None:
    """Write a frames x bins grid: header, then row-major little-endian float64."""
    array = np.asarray(values.detach().cpu().numpy() if isinstance(values, torch.Tensor) else values)
    if array.ndim != 2:
        raise AlignmentError(f"grid must be two-dimensional, got shape {array.shape}")
    components = 2 if np.iscomplexobj(array) else 1
    if components == 2:
        payload = np.ascontiguousarray(array.astype(np.complex128)).view(np.float64)
    else:
        payload = np.ascontiguousarray(array, dtype=np.float64)
    header = _GRID_HEADER.pack(GRID_MAGIC, array.shape[0], array.shape[1], components)
    try:
        Path(path).write_bytes(header + payload.astype("<f8").tobytes())
    except OSError as e:
        raise OutputPathError(f"unwritable path: {path}") from e


def load_grid(path: str | os.PathLike) -> torch.Tensor:
    grid_path = Path(path)
    if not grid_path.is_file():
        raise MissingInputError(f"grid file not found: {grid_path}")
    raw = grid_path.read_bytes()
    if len(raw) < _GRID_HEADER.size:
        raise ConfigurationError(f"truncated grid file: {grid_path}")
    magic, rows, cols, components = _GRID_HEADER.unpack_from(raw)
    if magic != GRID_MAGIC or components not in (1, 2):
        raise ConfigurationError(f"not a grid file: {grid_path}")
    expected = rows * cols * components * 8
    if len(raw) - _GRID_HEADER.size != expected:
        raise ConfigurationError(f"grid payload of {grid_path} has {len(raw) - _GRID_HEADER.size} bytes, expected {expected}")

    data = np.frombuffer(raw, dtype="<f8", offset=_GRID_HEADER.size).astype(np.float64)
    if components == 2:
        return torch.from_numpy(data.view(np.complex128).reshape(rows, cols).copy())
    return torch.from_numpy(data.reshape(rows, cols).copy())
