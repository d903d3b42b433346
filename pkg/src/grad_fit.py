"""
Mask gradients, a finite-difference oracle and the mask-fitting harness.

Every objective is evaluated on the time-domain estimate obtained by applying a
free mask to the noisy spectrum and inverting it (optionally with extra
Griffin-Lim passes). ``loss_and_grad`` differentiates that composition with
torch autograd; ``fd_gradient`` checks it numerically; ``fit_mask`` climbs it.
"""
import csv
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np
import torch

from audio_io import Waveform
from branches import recording, record_branch, same_branches
from config import FIT_MASK_MAX, FIT_MASK_MIN, FIT_STEP_SIZE, FIT_STEPS
from errors import AlignmentError, ConfigurationError, DegenerateSignalError, DivergenceError, OutputPathError
from logging_config import get_logger
from loss_report import LossReport
from masks import MaskConfig, MaskGrid, MaskKind, iam_label, psm_label
from pesq_loss import SUPPORTED_RATES, BarkTable, PesqConfig, pesq_score_tensor
from sdr_loss import JointLossConfig, si_sdr_tensor, squared_error_tensor
from spectral import (
    ComplexSpectrogram,
    PowerSpectrogram,
    StftConfig,
    default_length,
    frame_layout,
    griffin_lim_values,
    istft_values,
    power_spectrogram,
    stft,
)

logger = get_logger("grad_fit")

MASK_INITS = ("ones", "iam", "psm", "value")


class LossKind(str, Enum):
    SDR = "SDR"
    SNR_MSE = "SNR_MSE"
    SDR_MSE = "SDR_MSE"
    SDR_PESQ = "SDR_PESQ"
    PESQ = "PESQ"

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        try:
            return cls(text.strip().upper().replace("-", "_"))
        except ValueError as e:
            raise ConfigurationError(f"invalid loss kind '{text}'") from e

    @property
    def uses_pesq(self) -> bool:
        return self in (LossKind.SDR_PESQ, LossKind.PESQ)


@dataclass(frozen=True)
class FitConfig:
    loss_kind: LossKind = LossKind.SDR
    steps: int = FIT_STEPS
    step_size: float = FIT_STEP_SIZE
    mask_init: str = "ones"
    init_value: float = 1.0
    clamp: tuple[float, float] | None = (FIT_MASK_MIN, FIT_MASK_MAX)
    joint: JointLossConfig = field(default_factory=JointLossConfig)
    max_halvings: int = 12

    def __post_init__(self):
        kind = LossKind.parse(self.loss_kind) if isinstance(self.loss_kind, str) else self.loss_kind
        object.__setattr__(self, "loss_kind", LossKind(kind))
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise ConfigurationError(f"step_size must be positive, got {self.step_size}")
        if self.mask_init not in MASK_INITS:
            raise ConfigurationError(f"mask_init must be one of {MASK_INITS}, got '{self.mask_init}'")
        if not math.isfinite(self.init_value):
            raise ConfigurationError("init_value must be finite")
        if self.clamp is not None:
            low, high = (float(v) for v in self.clamp)
            if not low < high:
                raise ConfigurationError(f"clamp range is empty: {self.clamp}")
            object.__setattr__(self, "clamp", (low, high))
        if self.max_halvings < 0:
            raise ConfigurationError("max_halvings must be non-negative")


class TrajectoryPoint(NamedTuple):
    step: int
    loss: float
    si_sdr: float
    pesq_score: float


class FitResult(NamedTuple):
    mask: MaskGrid
    trajectory: list[TrajectoryPoint]


class FiniteDifference(NamedTuple):
    gradient: torch.Tensor
    skipped: torch.Tensor


@dataclass(frozen=True)
class _Problem:
    """Everything the objective needs besides the mask, checked once."""

    noisy: ComplexSpectrogram
    clean: Waveform
    noise: Waveform
    stft_cfg: StftConfig
    pesq_cfg: PesqConfig
    table: BarkTable | None
    gl_iterations: int
    clean_spec: ComplexSpectrogram
    clean_power: PowerSpectrogram

    @property
    def length(self) -> int:
        return len(self.clean)


def _problem(
    noisy: ComplexSpectrogram,
    clean: Waveform,
    noise: Waveform,
    cfg: FitConfig,
    stft_cfg: StftConfig | None,
    pesq_cfg: PesqConfig | None,
    table: BarkTable | None,
    gl_iterations: int,
) -> _Problem:
    stft_cfg = stft_cfg or StftConfig(sample_rate=clean.sample_rate)
    if gl_iterations < 1:
        raise ConfigurationError(f"gl_iterations must be >= 1, got {gl_iterations}")
    if len(clean) != len(noise):
        raise AlignmentError(f"length mismatch: clean {len(clean)}, noise {len(noise)}")
    output_length = noisy.length if noisy.length is not None else default_length(noisy.frames, stft_cfg)
    if output_length != len(clean) or frame_layout(len(clean), stft_cfg)[2] != noisy.frames:
        raise AlignmentError(
            f"clean has {len(clean)} samples but the noisy grid reconstructs {output_length} samples"
        )
    if noisy.fft_size != stft_cfg.fft_size:
        raise AlignmentError(f"noisy grid fft_size {noisy.fft_size} differs from config {stft_cfg.fft_size}")
    if cfg.loss_kind.uses_pesq:
        if clean.sample_rate not in SUPPORTED_RATES:
            raise ConfigurationError(f"PESQ losses support {SUPPORTED_RATES} Hz, got {clean.sample_rate}")
        if table is None:
            table = BarkTable.default(stft_cfg.fft_size, clean.sample_rate)
    clean_spec = stft(clean, stft_cfg)
    return _Problem(
        noisy=noisy,
        clean=clean,
        noise=noise,
        stft_cfg=stft_cfg,
        pesq_cfg=pesq_cfg or PesqConfig(),
        table=table,
        gl_iterations=gl_iterations,
        clean_spec=clean_spec,
        clean_power=power_spectrogram(clean_spec),
    )


def _estimate(values: torch.Tensor, problem: _Problem) -> torch.Tensor:
    masked = values * problem.noisy.values
    if problem.gl_iterations == 1:
        return istft_values(masked, problem.stft_cfg, problem.length)
    record_branch("mask.sign", values >= 0)
    magnitude = values.abs() * problem.noisy.values.abs()
    estimate, _ = griffin_lim_values(masked, magnitude, problem.stft_cfg, problem.length, problem.gl_iterations)
    return estimate


def _objective(values: torch.Tensor, problem: _Problem, cfg: FitConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return (objective, estimate samples, clamped SI-SDR); larger objective is better."""
    estimate = _estimate(values, problem)
    x = problem.clean.samples
    sdr = si_sdr_tensor(x, estimate)
    kind, weight = cfg.loss_kind, cfg.joint.pesq_weight

    if kind is LossKind.SDR:
        value = sdr
    elif kind is LossKind.SNR_MSE:
        value = -squared_error_tensor(x, estimate)
    elif kind is LossKind.SDR_MSE:
        mse = torch.sum((values * problem.noisy.values.abs() - problem.clean_spec.values.abs()) ** 2)
        value = sdr - weight * mse
    else:
        score, _ = pesq_score_tensor(
            x, estimate, problem.stft_cfg, problem.table, problem.pesq_cfg, clean_power=problem.clean_power
        )
        value = sdr + weight * score if kind is LossKind.SDR_PESQ else score
    return value, estimate, sdr


def _as_values(mask: MaskGrid | torch.Tensor) -> torch.Tensor:
    values = mask.values if isinstance(mask, MaskGrid) else torch.as_tensor(mask, dtype=torch.float64)
    return values.detach().to(torch.float64)


def _evaluate(values: torch.Tensor, problem: _Problem, cfg: FitConfig) -> tuple[LossReport, torch.Tensor]:
    if values.shape != problem.noisy.values.shape:
        raise AlignmentError(f"mask {tuple(values.shape)} does not match noisy grid {tuple(problem.noisy.values.shape)}")
    leaf = values.detach().clone().requires_grad_(True)
    value, estimate, sdr = _objective(leaf, problem, cfg)
    (gradient,) = torch.autograd.grad(value, leaf)
    report = LossReport(
        value=float(value),
        gradient=gradient.detach(),
        diagnostics={"loss_kind": cfg.loss_kind.value, "si_sdr": float(sdr), "gl_iterations": problem.gl_iterations},
    )
    return report, estimate.detach()


def loss_and_grad(
    mask: MaskGrid,
    noisy: ComplexSpectrogram,
    clean: Waveform,
    noise: Waveform,
    cfg: FitConfig,
    stft_cfg: StftConfig | None = None,
    pesq_cfg: PesqConfig | None = None,
    table: BarkTable | None = None,
    gl_iterations: int = 1,
) -> LossReport:
    """Objective value and its exact derivative with respect to every mask entry."""
    problem = _problem(noisy, clean, noise, cfg, stft_cfg, pesq_cfg, table, gl_iterations)
    report, estimate = _evaluate(_as_values(mask), problem, cfg)
    report.diagnostics["estimate"] = estimate
    return report


def central_difference(
    fn: Callable[[torch.Tensor], float | torch.Tensor],
    values: torch.Tensor,
    epsilon: float,
    track_branches: bool = False,
) -> FiniteDifference:
    """
    (f(M + eps e) - f(M - eps e)) / (2 eps) for every entry of ``values``.

    With ``track_branches`` an entry is skipped (gradient left at 0) when the
    base point and the two shifted points do not take the same branches of every
    recorded non-smooth operation.
    """
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    base = torch.as_tensor(values, dtype=torch.float64).detach().clone()
    gradient = torch.zeros_like(base)
    skipped = torch.zeros(base.shape, dtype=torch.bool)

    def evaluate(point: torch.Tensor) -> tuple[float, list]:
        with recording() as record:
            value = float(fn(point))
        return value, record

    base_branches = evaluate(base)[1] if track_branches else None
    for index in np.ndindex(*base.shape):
        plus, minus = base.clone(), base.clone()
        plus[index] += epsilon
        minus[index] -= epsilon
        f_plus, branches_plus = evaluate(plus)
        f_minus, branches_minus = evaluate(minus)
        if track_branches and not (
            same_branches(base_branches, branches_plus) and same_branches(base_branches, branches_minus)
        ):
            skipped[index] = True
            continue
        gradient[index] = (f_plus - f_minus) / (2.0 * epsilon)
    return FiniteDifference(gradient, skipped)


def fd_gradient(
    mask: MaskGrid,
    noisy: ComplexSpectrogram,
    clean: Waveform,
    noise: Waveform,
    cfg: FitConfig,
    stft_cfg: StftConfig | None = None,
    pesq_cfg: PesqConfig | None = None,
    table: BarkTable | None = None,
    gl_iterations: int = 1,
    epsilon: float = 1e-4,
) -> FiniteDifference:
    """Central differences of the full forward pipeline; entries straddling a kink are skipped."""
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    problem = _problem(noisy, clean, noise, cfg, stft_cfg, pesq_cfg, table, gl_iterations)

    def forward(values: torch.Tensor) -> float:
        with torch.no_grad():
            return float(_objective(values, problem, cfg)[0])

    result = central_difference(forward, _as_values(mask), epsilon, track_branches=True)
    skipped = int(result.skipped.sum())
    if skipped:
        logger.debug(f"fd_gradient skipped {skipped} of {result.skipped.numel()} entries at kinks")
    return result


def gradient_relative_error(analytic: torch.Tensor, numeric: torch.Tensor, skipped: torch.Tensor | None = None) -> float:
    """max |g - g_fd| / max(max |g|, max |g_fd|) over the entries not skipped."""
    keep = torch.ones(analytic.shape, dtype=torch.bool) if skipped is None else ~skipped
    if not bool(keep.any()):
        return 0.0
    g, h = analytic[keep], numeric[keep]
    scale = max(float(g.abs().max()), float(h.abs().max()))
    if scale == 0.0:
        return 0.0
    return float((g - h).abs().max()) / scale


def _initial_mask(problem: _Problem, cfg: FitConfig) -> torch.Tensor:
    shape = problem.noisy.values.shape
    if cfg.mask_init == "ones":
        values = torch.ones(shape, dtype=torch.float64)
    elif cfg.mask_init == "value":
        values = torch.full(shape, cfg.init_value, dtype=torch.float64)
    elif cfg.mask_init == "iam":
        values = iam_label(problem.clean_spec, problem.noisy, MaskConfig(), clip=True).values
    else:
        values = psm_label(problem.clean_spec, problem.noisy, MaskConfig()).values
    return _clamped(values, cfg)


def _clamped(values: torch.Tensor, cfg: FitConfig) -> torch.Tensor:
    if cfg.clamp is None:
        return values
    return torch.clamp(values, *cfg.clamp)


def _pesq_metric(estimate: torch.Tensor, problem: _Problem) -> float:
    if problem.clean.sample_rate not in SUPPORTED_RATES:
        return math.nan
    table = problem.table or BarkTable.default(problem.stft_cfg.fft_size, problem.clean.sample_rate)
    try:
        with torch.no_grad():
            score, _ = pesq_score_tensor(
                problem.clean.samples, estimate, problem.stft_cfg, table, problem.pesq_cfg, clean_power=problem.clean_power
            )
    except DegenerateSignalError:
        # a silenced estimate has no PESQ score; the fit itself may continue
        return math.nan
    return float(score)


def _point(step: int, report: LossReport, estimate: torch.Tensor, problem: _Problem) -> TrajectoryPoint:
    return TrajectoryPoint(step, report.value, report.diagnostics["si_sdr"], _pesq_metric(estimate, problem))


def _is_finite(report: LossReport) -> bool:
    return math.isfinite(report.value) and bool(torch.isfinite(report.gradient).all())


def fit_mask(
    noisy: Waveform,
    clean: Waveform,
    noise: Waveform,
    cfg: FitConfig,
    stft_cfg: StftConfig | None = None,
    pesq_cfg: PesqConfig | None = None,
    table: BarkTable | None = None,
    gl_iterations: int = 1,
) -> FitResult:
    """
    Gradient ascent on a free mask.

    Each step tries clamp(M + eta g), halving eta while the objective drops; if
    no halving helps the mask is kept, so the recorded loss never decreases.
    """
    if not (len(noisy) == len(clean) == len(noise)):
        raise AlignmentError(f"lengths differ: noisy {len(noisy)}, clean {len(clean)}, noise {len(noise)}")
    stft_cfg = stft_cfg or StftConfig(sample_rate=clean.sample_rate)
    problem = _problem(stft(noisy, stft_cfg), clean, noise, cfg, stft_cfg, pesq_cfg, table, gl_iterations)
    logger.info(
        f"FIT START: loss={cfg.loss_kind.value}, steps={cfg.steps}, step_size={cfg.step_size}, "
        f"init={cfg.mask_init}, gl_iterations={gl_iterations}, grid={tuple(problem.noisy.values.shape)}"
    )

    mask = _initial_mask(problem, cfg)
    report, estimate = _evaluate(mask, problem, cfg)
    if not _is_finite(report):
        raise DivergenceError("non-finite objective at the initial mask", mask=None, trajectory=())
    trajectory = [_point(0, report, estimate, problem)]

    for step in range(1, cfg.steps + 1):
        eta = cfg.step_size
        for _ in range(cfg.max_halvings + 1):
            candidate = _clamped(mask + eta * report.gradient, cfg)
            candidate_report, candidate_estimate = _evaluate(candidate, problem, cfg)
            if not _is_finite(candidate_report):
                logger.error(f"FIT ERROR: non-finite objective at step {step} (eta={eta:.3g})")
                raise DivergenceError(
                    f"non-finite objective at step {step}",
                    mask=MaskGrid(mask, MaskKind.FREE),
                    trajectory=trajectory,
                )
            if candidate_report.value >= report.value:
                mask, report, estimate = candidate, candidate_report, candidate_estimate
                break
            eta *= 0.5
        trajectory.append(_point(step, report, estimate, problem))
        logger.debug(f"step {step}: loss={report.value:.6f} si_sdr={trajectory[-1].si_sdr:.6f} eta={eta:.3g}")

    logger.info(
        f"FIT END: loss {trajectory[0].loss:.6f} -> {trajectory[-1].loss:.6f}, "
        f"si_sdr {trajectory[0].si_sdr:.6f} -> {trajectory[-1].si_sdr:.6f}"
    )
    return FitResult(MaskGrid(mask, MaskKind.FREE), trajectory)


def fit_with_gl_iterations(
    noisy: Waveform,
    clean: Waveform,
    noise: Waveform,
    cfg: FitConfig,
    gl_iterations: int,
    stft_cfg: StftConfig | None = None,
    pesq_cfg: PesqConfig | None = None,
    table: BarkTable | None = None,
) -> FitResult:
    """``fit_mask`` with ``gl_iterations`` Griffin-Lim passes inside the objective."""
    return fit_mask(noisy, clean, noise, cfg, stft_cfg, pesq_cfg, table, gl_iterations=gl_iterations)


def compare_gl_iterations(
    noisy: Waveform,
    clean: Waveform,
    noise: Waveform,
    cfg: FitConfig,
    counts: tuple[int, ...] = (1, 2, 3, 4),
    stft_cfg: StftConfig | None = None,
    pesq_cfg: PesqConfig | None = None,
    table: BarkTable | None = None,
) -> dict[int, FitResult]:
    return {
        count: fit_with_gl_iterations(noisy, clean, noise, cfg, count, stft_cfg, pesq_cfg, table)
        for count in counts
    }


def reconstruct(
    mask: MaskGrid,
    noisy: ComplexSpectrogram,
    stft_cfg: StftConfig,
    length: int | None = None,
    gl_iterations: int = 1,
) -> Waveform:
    """Estimate waveform of ``mask`` applied to ``noisy``, with optional Griffin-Lim passes."""
    if mask.values.shape != noisy.values.shape:
        raise AlignmentError(f"mask {mask.shape} does not match noisy grid {tuple(noisy.values.shape)}")
    if length is None:
        length = noisy.length if noisy.length is not None else default_length(noisy.frames, stft_cfg)
    values = mask.values.detach()
    with torch.no_grad():
        masked = values * noisy.values
        if gl_iterations == 1:
            samples = istft_values(masked, stft_cfg, length)
        else:
            magnitude = values.abs() * noisy.values.abs()
            samples, _ = griffin_lim_values(masked, magnitude, stft_cfg, length, gl_iterations)
    return Waveform(samples, noisy.sample_rate)


def write_trajectory_csv(trajectory: list[TrajectoryPoint], path: str | os.PathLike) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(TrajectoryPoint._fields)
            for point in trajectory:
                writer.writerow([point.step] + [f"{v:.6f}" for v in point[1:]])
    except OSError as e:
        raise OutputPathError(f"unwritable path: {path}") from e
