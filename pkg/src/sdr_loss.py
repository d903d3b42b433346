"""
Scale-invariant SDR and the objectives built on it.

For a clean reference x and an estimate x^:

    alpha    = <x^, x> / ||x||^2
    x_target = alpha x
    SI-SDR   = 10 log10(||x_target||^2 / ||x_target - x^||^2)

Every objective here is oriented so that larger is better.
"""
import math
from dataclasses import dataclass
from typing import Sequence

import torch

from audio_io import Waveform
from branches import record_branch
from config import PESQ_WEIGHT, SDR_CLAMP_DB
from errors import AlignmentError, ConfigurationError, DegenerateSignalError
from logging_config import get_logger
from masks import MaskGrid, d2
from pesq_loss import pesq_loss_batch
from spectral import ComplexSpectrogram

logger = get_logger("sdr_loss")


@dataclass(frozen=True)
class SdrDecomposition:
    x_target: Waveform
    e_noise: Waveform
    e_artif: Waveform
    alpha: float


@dataclass(frozen=True)
class JointLossConfig:
    pesq_weight: float = PESQ_WEIGHT
    batch_size: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.pesq_weight) or self.pesq_weight < 0:
            raise ConfigurationError(f"pesq_weight must be finite and non-negative, got {self.pesq_weight}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")


@dataclass(frozen=True)
class Utterance:
    """One batch element of the joint objectives."""

    clean: Waveform
    estimate: Waveform
    mask: MaskGrid | None = None
    noisy: ComplexSpectrogram | None = None
    clean_spec: ComplexSpectrogram | None = None


def _check_pair(clean: Waveform, estimate: Waveform) -> None:
    if len(clean) != len(estimate):
        raise AlignmentError(f"length mismatch: clean {len(clean)}, estimate {len(estimate)}")
    if clean.sample_rate != estimate.sample_rate:
        raise AlignmentError(f"sample rate mismatch: {clean.sample_rate} vs {estimate.sample_rate}")


def sdr_decompose(clean: Waveform, noise: Waveform, estimate: Waveform) -> SdrDecomposition:
    """
    Split the estimate error into a noise part and an artifact residual.

    x_target and e_noise are the separate projections of x^ onto x and onto n;
    e_artif is the residual, so the three parts always sum to x^.
    """
    _check_pair(clean, estimate)
    _check_pair(clean, noise)
    x, n, xh = (w.samples.detach() for w in (clean, noise, estimate))
    clean_energy, noise_energy = float(torch.dot(x, x)), float(torch.dot(n, n))
    if clean_energy == 0.0:
        raise DegenerateSignalError("zero-energy reference")
    if noise_energy == 0.0:
        raise DegenerateSignalError("zero-energy noise")

    alpha = float(torch.dot(xh, x)) / clean_energy
    x_target = alpha * x
    e_noise = (float(torch.dot(xh, n)) / noise_energy) * n
    e_artif = xh - x_target - e_noise

    rate = clean.sample_rate
    return SdrDecomposition(Waveform(x_target, rate), Waveform(e_noise, rate), Waveform(e_artif, rate), alpha)


def si_sdr(clean: Waveform, estimate: Waveform) -> float:
    """SI-SDR in dB; +inf for a perfect (scaled) estimate, -inf for an orthogonal one."""
    _check_pair(clean, estimate)
    x, xh = clean.samples.detach(), estimate.samples.detach()
    ref_energy = float(torch.dot(x, x))
    if ref_energy == 0.0:
        raise DegenerateSignalError("zero-energy reference")

    alpha = float(torch.dot(xh, x)) / ref_energy
    target_energy = alpha * alpha * ref_energy
    residual_energy = float(torch.sum((alpha * x - xh) ** 2))
    if residual_energy == 0.0:
        return math.inf
    if target_energy == 0.0:
        return -math.inf
    return 10.0 * math.log10(target_energy / residual_energy)


def snr_db(clean: Waveform, estimate: Waveform) -> float:
    """Plain SNR with the reference unscaled (alpha = 1)."""
    _check_pair(clean, estimate)
    x, xh = clean.samples.detach(), estimate.samples.detach()
    error = float(torch.sum((x - xh) ** 2))
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(float(torch.dot(x, x)) / error)


def si_sdr_tensor(x: torch.Tensor, estimate: torch.Tensor, clamp_db: float = SDR_CLAMP_DB) -> torch.Tensor:
    """
    Differentiable SI-SDR clamped to [-clamp_db, clamp_db].

    The infinite cases are taken as separate branches, so a perfect estimate
    gives exactly +clamp_db with a zero gradient instead of NaN.
    """
    ref_energy = torch.dot(x, x)
    if float(ref_energy) == 0.0:
        raise DegenerateSignalError("zero-energy reference")
    alpha = torch.dot(estimate, x) / ref_energy
    target_energy = alpha ** 2 * ref_energy
    residual_energy = torch.sum((alpha * x - estimate) ** 2)

    finite = (residual_energy > 0) & (target_energy > 0)
    safe_ratio = torch.where(finite, target_energy / torch.where(finite, residual_energy, 1.0), 1.0)
    ceiling = torch.full_like(ref_energy, clamp_db)
    raw = torch.where(
        finite,
        10.0 * torch.log10(safe_ratio),
        torch.where(residual_energy > 0, -ceiling, ceiling),
    )
    record_branch("si_sdr.finite", finite.reshape(1))
    record_branch("si_sdr.clamp", ((raw > clamp_db) | (raw < -clamp_db)).reshape(1))
    return torch.clamp(raw, -clamp_db, clamp_db)


def sdr_loss(batch: Sequence[tuple[Waveform, Waveform]], clamp_db: float = SDR_CLAMP_DB) -> float:
    """Mean SI-SDR over (clean, estimate) pairs, each clamped to +-clamp_db."""
    if len(batch) == 0:
        raise ConfigurationError("empty batch")
    values = []
    for clean, estimate in batch:
        value = si_sdr(clean, estimate)
        values.append(min(max(value, -clamp_db), clamp_db))
    return sum(values) / len(values)


def squared_error_tensor(x: torch.Tensor, estimate: torch.Tensor) -> torch.Tensor:
    return torch.sum((x - estimate) ** 2)


def snr_mse_loss(clean: Waveform, estimate: Waveform) -> float:
    """Time-domain squared error sum (x - x^)^2; a distance, so smaller is better."""
    _check_pair(clean, estimate)
    return float(squared_error_tensor(clean.samples.detach(), estimate.samples.detach()))


def spectrum_mse(mask, noisy_mag, clean_mag) -> float:
    """Magnitude-domain squared error sum (M |Y| - |X|)^2."""
    return float(d2(mask, clean_mag, noisy_mag))


def _check_batch(batch: Sequence[Utterance], cfg: JointLossConfig) -> None:
    if len(batch) == 0:
        raise ConfigurationError("empty batch")
    if cfg.batch_size is not None and len(batch) != cfg.batch_size:
        raise AlignmentError(f"batch holds {len(batch)} utterances, configured batch_size is {cfg.batch_size}")


def joint_sdr_pesq(batch: Sequence[Utterance], cfg: JointLossConfig = JointLossConfig(), **pesq_options) -> float:
    """L_SDR + w * L_PESQ over a batch; ``pesq_options`` go to ``pesq_loss_batch``."""
    _check_batch(batch, cfg)
    pairs = [(u.clean, u.estimate) for u in batch]
    value = sdr_loss(pairs) + cfg.pesq_weight * pesq_loss_batch(pairs, **pesq_options)
    logger.debug(f"joint_sdr_pesq over {len(batch)} utterances: {value:.6f}")
    return value


def joint_sdr_mse(batch: Sequence[Utterance], cfg: JointLossConfig = JointLossConfig()) -> float:
    """L_SDR - w * sum of per-utterance spectrum MSE; needs mask, noisy and clean spectra."""
    _check_batch(batch, cfg)
    penalty = 0.0
    for index, u in enumerate(batch):
        if u.mask is None or u.noisy is None or u.clean_spec is None:
            raise ConfigurationError(f"utterance {index} lacks the mask or spectra joint_sdr_mse needs")
        penalty += spectrum_mse(u.mask, u.noisy.magnitude(), u.clean_spec.magnitude())
    value = sdr_loss([(u.clean, u.estimate) for u in batch]) - cfg.pesq_weight * penalty
    logger.debug(f"joint_sdr_mse over {len(batch)} utterances: {value:.6f}")
    return value
