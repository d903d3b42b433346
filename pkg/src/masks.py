"""
Time-frequency masks: oracle labels, application and the three distances.

Labels are computed from clean (X), noise (N) and noisy (Y = X + N) spectra:

    IBM  1 where |X| >= 10^(S/10) |N|, else 0
    IRM  |X| / (|X| + |N|)
    IAM  |X| / max(|Y|, eps)
    PSM  IAM * cos(angle Y - angle X)

A mask is applied by elementwise multiplication with Y, so a negative mask value
flips the noisy phase by pi.
"""
import math
import os
from dataclasses import dataclass
from enum import Enum

import torch

from errors import AlignmentError, ConfigurationError
from logging_config import get_logger
from spectral import ComplexSpectrogram, dump_grid, load_grid

logger = get_logger("masks")

IAM_LABEL_CLIP = 10.0


class MaskKind(str, Enum):
    IBM = "IBM"
    IRM = "IRM"
    IAM = "IAM"
    PSM = "PSM"
    FREE = "FREE"

    @classmethod
    def parse(cls, text: str) -> "MaskKind":
        try:
            return cls(text.strip().upper())
        except ValueError as e:
            raise ConfigurationError(f"unknown mask kind '{text}'") from e


@dataclass(frozen=True)
class MaskConfig:
    # one value for every bin, or a 1-D tensor holding one threshold per bin
    ibm_threshold_db: float | torch.Tensor = 0.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if isinstance(self.ibm_threshold_db, torch.Tensor):
            threshold = self.ibm_threshold_db.detach().to(torch.float64)
            if threshold.ndim != 1:
                raise ConfigurationError(f"per-bin IBM threshold must be 1-D, got shape {tuple(threshold.shape)}")
            if not bool(torch.isfinite(threshold).all()):
                raise ConfigurationError("IBM threshold contains non-finite values")
            object.__setattr__(self, "ibm_threshold_db", threshold)
        elif not math.isfinite(self.ibm_threshold_db):
            raise ConfigurationError(f"IBM threshold must be finite, got {self.ibm_threshold_db}")


@dataclass(frozen=True)
class MaskGrid:
    values: torch.Tensor
    label_kind: MaskKind = MaskKind.FREE

    def __post_init__(self):
        values = torch.as_tensor(self.values, dtype=torch.float64)
        if values.ndim != 2:
            raise AlignmentError(f"mask must be frames x bins, got shape {tuple(values.shape)}")
        plain = values.detach()
        if not bool(torch.isfinite(plain).all()):
            raise ConfigurationError("mask contains non-finite values")
        kind = MaskKind(self.label_kind)
        if kind is MaskKind.IBM and not bool(((plain == 0) | (plain == 1)).all()):
            raise ConfigurationError("IBM values must be 0 or 1")
        if kind is MaskKind.IRM and not bool(((plain >= 0) & (plain <= 1)).all()):
            raise ConfigurationError("IRM values must lie in [0, 1]")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "label_kind", kind)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)


def _check_shapes(*grids: torch.Tensor) -> None:
    first = grids[0].shape
    for grid in grids[1:]:
        if grid.shape != first:
            raise AlignmentError(f"grid shapes differ: {tuple(first)} vs {tuple(grid.shape)}")


def _values(grid) -> torch.Tensor:
    return grid.values if isinstance(grid, (MaskGrid, ComplexSpectrogram)) else torch.as_tensor(grid)


def ibm_label(clean: ComplexSpectrogram, noise: ComplexSpectrogram, cfg: MaskConfig = MaskConfig()) -> MaskGrid:
    _check_shapes(clean.values, noise.values)
    threshold = cfg.ibm_threshold_db
    if isinstance(threshold, torch.Tensor) and len(threshold) != clean.values.shape[1]:
        raise AlignmentError(f"{len(threshold)} IBM thresholds for {clean.values.shape[1]} bins")
    factor = 10.0 ** (threshold / 10.0)
    hit = clean.values.abs() >= factor * noise.values.abs()
    return MaskGrid(hit.to(torch.float64), MaskKind.IBM)


def irm_label(clean: ComplexSpectrogram, noise: ComplexSpectrogram, cfg: MaskConfig = MaskConfig()) -> MaskGrid:
    """|X| / (|X| + |N|); bins where both are silent get 0.5."""
    _check_shapes(clean.values, noise.values)
    x, n = clean.values.abs(), noise.values.abs()
    total = x + n
    silent = total == 0
    return MaskGrid(torch.where(silent, 0.5, x / torch.where(silent, 1.0, total)), MaskKind.IRM)


def iam_label(
    clean: ComplexSpectrogram,
    noisy: ComplexSpectrogram,
    cfg: MaskConfig = MaskConfig(),
    clip: bool = False,
) -> MaskGrid:
    """|X| / max(|Y|, eps); ``clip=True`` limits the training label to [0, 10]."""
    _check_shapes(clean.values, noisy.values)
    iam = clean.values.abs() / torch.clamp(noisy.values.abs(), min=cfg.epsilon)
    if clip:
        iam = torch.clamp(iam, 0.0, IAM_LABEL_CLIP)
    return MaskGrid(iam, MaskKind.IAM)


def psm_label(
    clean: ComplexSpectrogram,
    noisy: ComplexSpectrogram,
    cfg: MaskConfig = MaskConfig(),
    truncate: tuple[float, float] | None = None,
) -> MaskGrid:
    """IAM scaled by the cosine of the noisy-minus-clean phase; optionally truncated."""
    iam = iam_label(clean, noisy, cfg).values
    psm = iam * torch.cos(torch.angle(noisy.values) - torch.angle(clean.values))
    if truncate is not None:
        low, high = truncate
        if low > high:
            raise ConfigurationError(f"truncation range is empty: {truncate}")
        psm = torch.clamp(psm, low, high)
    return MaskGrid(psm, MaskKind.PSM)


def oracle_mask(
    kind: MaskKind | str,
    clean: ComplexSpectrogram,
    noise: ComplexSpectrogram,
    cfg: MaskConfig = MaskConfig(),
) -> MaskGrid:
    kind = MaskKind.parse(kind) if isinstance(kind, str) else kind
    noisy = ComplexSpectrogram(clean.values + noise.values, clean.sample_rate, clean.fft_size, clean.length)
    if kind is MaskKind.IBM:
        return ibm_label(clean, noise, cfg)
    if kind is MaskKind.IRM:
        return irm_label(clean, noise, cfg)
    if kind is MaskKind.IAM:
        return iam_label(clean, noisy, cfg)
    if kind is MaskKind.PSM:
        return psm_label(clean, noisy, cfg)
    raise ConfigurationError("FREE masks have no oracle; fit one with grad_fit.fit_mask")


def apply_mask(mask: MaskGrid, noisy: ComplexSpectrogram) -> ComplexSpectrogram:
    _check_shapes(mask.values, noisy.values)
    return ComplexSpectrogram(mask.values * noisy.values, noisy.sample_rate, noisy.fft_size, noisy.length)


def d1(mask, label) -> torch.Tensor:
    """Label distance: sum (M - L)^2."""
    m, target = _values(mask), _values(label)
    _check_shapes(m, target)
    return torch.sum((m - target) ** 2)


def d2(mask, clean_mag, noisy_mag) -> torch.Tensor:
    """Magnitude distance: sum (M |Y| - |X|)^2."""
    m, x, y = _values(mask), _values(clean_mag), _values(noisy_mag)
    _check_shapes(m, x, y)
    return torch.sum((m * y - x) ** 2)


def d3(mask, clean: ComplexSpectrogram, noisy: ComplexSpectrogram, form: str = "complex") -> torch.Tensor:
    """
    Phase-sensitive distance.

    ``complex`` is sum |M Y - X|^2; ``cosine`` is sum (M |Y| - |X| cos(dphi))^2,
    which is smaller by exactly sum |X|^2 sin^2(dphi).
    """
    m = _values(mask)
    _check_shapes(m, clean.values, noisy.values)
    if form == "complex":
        return torch.sum((m * noisy.values - clean.values).abs() ** 2)
    if form == "cosine":
        delta = torch.angle(noisy.values) - torch.angle(clean.values)
        return torch.sum((m * noisy.values.abs() - clean.values.abs() * torch.cos(delta)) ** 2)
    raise ConfigurationError(f"unknown d3 form '{form}'")


def save_mask(mask: MaskGrid, path: str | os.PathLike) -> None:
    dump_grid(mask.values, path)
    logger.debug(f"Saved {mask.label_kind.value} mask {mask.shape} to {path}")


def load_mask(path: str | os.PathLike, label_kind: MaskKind = MaskKind.FREE) -> MaskGrid:
    values = load_grid(path)
    if values.is_complex():
        raise ConfigurationError(f"mask file {path} holds a complex grid")
    return MaskGrid(values, label_kind)
