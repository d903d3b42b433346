"""
Differentiable PESQ approximation.

The pipeline per utterance:

    level alignment -> bark spectrum -> time-frequency equalization
      -> loudness -> raw disturbance -> frame disturbances -> aggregation

and L_PESQ = score_base - sym_weight * d_sym - asym_weight * d_asym, with d_sym and
d_asym averaged over the utterances of a batch. There is no IIR filter, no time
alignment and no bad-interval reprocessing: inputs must already be aligned.

Every stage is written in torch so ``grad_fit`` can differentiate through it.
Clips, thresholds and the dead zone report their branches to ``branches``.
"""
import json
import math
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import torch

from audio_io import Waveform
from branches import record_branch
from config import BARK_TABLE_PATH, STFT_FFT_SIZE, STFT_SAMPLE_RATE
from errors import AlignmentError, ConfigurationError, DegenerateSignalError, MissingInputError
from logging_config import get_logger
from loss_report import LossReport
from spectral import PowerSpectrogram, StftConfig, power_spectrogram, stft

logger = get_logger("pesq_loss")

SUPPORTED_RATES = (8000, 16000)
TABLE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PesqConfig:
    target_power: float = 1e7
    iir_gain: float = 2.47
    c1: float = 1000.0
    c2: float = 5000.0
    smoothing: tuple[float, float] = (0.2, 0.8)
    ratio_clip: tuple[float, float] = (0.01, 100.0)
    gain_clip: tuple[float, float] = (3e-4, 5.0)
    align_band_hz: tuple[float, float] = (300.0, 3000.0)
    dead_zone_factor: float = 0.25
    asym_exponent: float = 1.2
    asym_offset: float = 50.0
    asym_clip_high: float = 12.0
    asym_clip_low: float = 3.0
    window_len: int = 20
    window_step: int = 10
    score_base: float = 4.5
    sym_weight: float = 0.1
    asym_weight: float = 0.0309

    def __post_init__(self):
        for name in ("target_power", "iir_gain", "c1", "c2", "asym_exponent", "asym_clip_high"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("dead_zone_factor", "asym_offset", "asym_clip_low", "sym_weight", "asym_weight"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.asym_clip_low > self.asym_clip_high:
            raise ConfigurationError("asym_clip_low exceeds asym_clip_high")
        for name in ("smoothing", "ratio_clip", "gain_clip", "align_band_hz"):
            pair = tuple(float(v) for v in getattr(self, name))
            if len(pair) != 2 or pair[0] < 0 or pair[1] < 0:
                raise ConfigurationError(f"{name} must be a pair of non-negative numbers, got {getattr(self, name)}")
            object.__setattr__(self, name, pair)
        if self.ratio_clip[0] > self.ratio_clip[1] or self.gain_clip[0] > self.gain_clip[1]:
            raise ConfigurationError("clip ranges must be ordered (low, high)")
        if self.align_band_hz[0] >= self.align_band_hz[1]:
            raise ConfigurationError("align_band_hz must be an increasing pair")
        if self.window_len < 1 or self.window_step < 1 or self.window_step > self.window_len:
            raise ConfigurationError("need 1 <= window_step <= window_len")

    def describe(self) -> dict:
        return asdict(self)


def bark_width(low_hz: float, high_hz: float) -> float:
    """Width in bark of [low_hz, high_hz), using the 7 asinh(f / 650) scale."""
    return 7.0 * (math.asinh(high_hz / 650.0) - math.asinh(low_hz / 650.0))


@dataclass(frozen=True)
class BarkTable:
    """Perceptual bands laid over one STFT grid (fft_size, sample_rate)."""

    band_edges: tuple[int, ...]
    band_weights: torch.Tensor
    disturbance_weights: torch.Tensor
    abs_threshold: torch.Tensor
    loudness_scale: torch.Tensor
    zwicker_power: float
    silence_factor: float
    fft_size: int
    sample_rate: int
    _averaging: torch.Tensor = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        edges = tuple(int(e) for e in self.band_edges)
        bands = len(edges) - 1
        if bands < 1 or any(b <= a for a, b in zip(edges, edges[1:])) or edges[0] < 0:
            raise ConfigurationError(f"band edges must be non-negative and strictly increasing: {edges}")
        for name in ("band_weights", "disturbance_weights", "abs_threshold", "loudness_scale"):
            values = torch.as_tensor(getattr(self, name), dtype=torch.float64)
            if values.shape != (bands,):
                raise ConfigurationError(f"{name} needs {bands} entries, got shape {tuple(values.shape)}")
            if not bool((values > 0).all()):
                raise ConfigurationError(f"{name} must be positive")
            object.__setattr__(self, name, values)
        if not self.zwicker_power > 0 or not self.silence_factor > 0:
            raise ConfigurationError("zwicker_power and silence_factor must be positive")
        object.__setattr__(self, "band_edges", edges)

        bins = self.fft_size // 2 + 1
        if edges[-1] > bins:
            raise ConfigurationError(f"band edge {edges[-1]} exceeds the {bins} bins of fft_size {self.fft_size}")
        averaging = torch.zeros(bins, bands, dtype=torch.float64)
        for band, (low, high) in enumerate(zip(edges, edges[1:])):
            averaging[low:high, band] = 1.0 / (high - low)
        object.__setattr__(self, "_averaging", averaging)

    @property
    def n_bands(self) -> int:
        return len(self.band_edges) - 1

    @property
    def averaging_matrix(self) -> torch.Tensor:
        """bins x bands; power @ matrix gives per-band mean power."""
        return self._averaging

    @property
    def silence_threshold(self) -> torch.Tensor:
        return self.silence_factor * self.abs_threshold

    @classmethod
    def from_dict(cls, data: dict, fft_size: int, sample_rate: int) -> "BarkTable":
        """
        Lay the reference bands of ``data`` over an (fft_size, sample_rate) grid.

        Reference edges are rescaled by bin spacing. A band that shrinks to no bins
        merges into the next one, which keeps the smallest threshold of the merged
        bands; bands that fall above Nyquist are dropped. Weights are the bark
        width of each resulting band.
        """
        if data.get("schema_version") != TABLE_SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported band table schema: {data.get('schema_version')}")
        try:
            counts = [int(c) for c in data["bins_per_band"]]
            thresholds = [float(t) for t in data["abs_threshold_power"]]
            ref_rate, ref_fft = int(data["sample_rate"]), int(data["fft_size"])
            loudness_scale = float(data["loudness_scale"])
            zwicker_power = float(data["zwicker_power"])
            silence_factor = float(data["silence_threshold_factor"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"malformed band table: {e}") from e
        if len(counts) != len(thresholds) or any(c < 1 for c in counts):
            raise ConfigurationError("band table needs one positive bin count and one threshold per band")

        bins = fft_size // 2 + 1
        ref_bin_hz = ref_rate / ref_fft
        bin_hz = sample_rate / fft_size
        ref_edges = [0]
        for count in counts:
            ref_edges.append(ref_edges[-1] + count)
        mapped = [min(math.floor(e * ref_bin_hz / bin_hz + 0.5), bins) for e in ref_edges]

        edges, groups, pending = [mapped[0]], [], []
        for band in range(len(counts)):
            pending.append(band)
            if mapped[band + 1] > edges[-1]:
                edges.append(mapped[band + 1])
                groups.append(pending)
                pending = []
        if not groups:
            raise ConfigurationError(f"no band of the table fits fft_size {fft_size} at {sample_rate} Hz")
        if len(groups) != len(counts):
            logger.info(f"Band table mapped onto {len(groups)} bands for fft_size={fft_size} at {sample_rate} Hz")

        widths = [bark_width(low * bin_hz, high * bin_hz) for low, high in zip(edges, edges[1:])]
        return cls(
            band_edges=tuple(edges),
            band_weights=torch.tensor(widths, dtype=torch.float64),
            disturbance_weights=torch.tensor(widths, dtype=torch.float64),
            abs_threshold=torch.tensor([min(thresholds[b] for b in group) for group in groups], dtype=torch.float64),
            loudness_scale=torch.full((len(groups),), loudness_scale, dtype=torch.float64),
            zwicker_power=zwicker_power,
            silence_factor=silence_factor,
            fft_size=fft_size,
            sample_rate=sample_rate,
        )

    @classmethod
    def load(cls, path: str | os.PathLike, fft_size: int, sample_rate: int) -> "BarkTable":
        table_path = Path(path)
        try:
            data = json.loads(table_path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise MissingInputError(f"band table not found: {table_path}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"band table {table_path} is not valid JSON: {e}") from e
        return cls.from_dict(data, fft_size, sample_rate)

    @classmethod
    def default(cls, fft_size: int = STFT_FFT_SIZE, sample_rate: int = STFT_SAMPLE_RATE) -> "BarkTable":
        return _cached_table(str(BARK_TABLE_PATH), fft_size, sample_rate)


@lru_cache(maxsize=16)
def _cached_table(path: str, fft_size: int, sample_rate: int) -> BarkTable:
    return BarkTable.load(path, fft_size, sample_rate)


@dataclass(frozen=True)
class BarkSpectrogram:
    values: torch.Tensor
    silence_mask: torch.Tensor


@dataclass(frozen=True)
class LoudnessGrid:
    values: torch.Tensor


@dataclass(frozen=True)
class DisturbanceSeries:
    sym: torch.Tensor
    asym: torch.Tensor
    raw: torch.Tensor


def _safe_root(v: torch.Tensor, degree: int, name: str) -> torch.Tensor:
    """v ** (1/degree) with value and gradient 0 at v == 0."""
    positive = v > 0
    record_branch(name, positive)
    return torch.where(positive, torch.where(positive, v, 1.0) ** (1.0 / degree), 0.0)


def _clip(values: torch.Tensor, low: float, high: float, name: str) -> torch.Tensor:
    record_branch(name, torch.stack([values < low, values > high]))
    return torch.clamp(values, low, high)


def level_align(power: PowerSpectrogram, cfg: PesqConfig = PesqConfig()) -> PowerSpectrogram:
    """Scale so the mean power of the 300-3000 Hz bins equals target_power * iir_gain^2."""
    freqs = torch.arange(power.values.shape[1], dtype=torch.float64) * power.sample_rate / power.fft_size
    low, high = cfg.align_band_hz
    band = (freqs >= low) & (freqs <= high)
    if not bool(band.any()):
        raise ConfigurationError(f"no STFT bin lies in {low}-{high} Hz at fft_size {power.fft_size}")
    average = power.values[:, band].mean()
    if not float(average) > 0:
        raise DegenerateSignalError("silent input: no power between 300 Hz and 3 kHz")
    target = cfg.target_power * cfg.iir_gain ** 2
    return PowerSpectrogram(power.values * (target / average), power.sample_rate, power.fft_size)


def bark_spectrum(power: PowerSpectrogram, table: BarkTable) -> BarkSpectrogram:
    bins = power.values.shape[1]
    if table.band_edges[-1] > bins:
        raise AlignmentError(f"band edge {table.band_edges[-1]} out of range for {bins} bins")
    if table.averaging_matrix.shape[0] != bins:
        raise AlignmentError(f"band table built for {table.averaging_matrix.shape[0]} bins, grid has {bins}")
    values = power.values @ table.averaging_matrix
    audible = values > table.silence_threshold
    record_branch("bark.audible", audible)
    return BarkSpectrogram(values, audible)


def tf_equalize(
    clean: BarkSpectrogram,
    noisy: BarkSpectrogram,
    cfg: PesqConfig = PesqConfig(),
) -> tuple[BarkSpectrogram, BarkSpectrogram]:
    """
    Frequency compensation of the clean bands, then per-frame gain compensation
    of the noisy bands. The per-frame gain is smoothed S_m = a S_(m-1) + b S_m,
    with S_0 left as computed.
    """
    bc, bn = clean.values, noisy.values
    if bc.shape != bn.shape:
        raise AlignmentError(f"bark grids differ: {tuple(bc.shape)} vs {tuple(bn.shape)}")
    frames = bc.shape[0]
    if frames < 1:
        raise DegenerateSignalError("no frames to equalize")

    clean_avg = (bc * clean.silence_mask).sum(dim=0) / frames
    noisy_avg = (bn * noisy.silence_mask).sum(dim=0) / frames
    ratio = _clip((noisy_avg + cfg.c1) / (clean_avg + cfg.c1), *cfg.ratio_clip, name="tf.ratio_clip")
    eq_clean = bc * ratio

    gain = (eq_clean.sum(dim=1) + cfg.c2) / (bn.sum(dim=1) + cfg.c2)
    gain = _clip(gain, *cfg.gain_clip, name="tf.gain_clip")
    previous_weight, current_weight = cfg.smoothing
    smoothed = [gain[0]]
    for m in range(1, frames):
        smoothed.append(previous_weight * smoothed[-1] + current_weight * gain[m])
    eq_noisy = torch.stack(smoothed).unsqueeze(1) * bn

    return BarkSpectrogram(eq_clean, clean.silence_mask), BarkSpectrogram(eq_noisy, noisy.silence_mask)


def loudness(eq: BarkSpectrogram, table: BarkTable) -> LoudnessGrid:
    """Zwicker loudness S (P0/0.5)^g [(0.5 + 0.5 E/P0)^g - 1], floored at 0."""
    p0, g = table.abs_threshold, table.zwicker_power
    values = table.loudness_scale * (p0 / 0.5) ** g * ((0.5 + 0.5 * eq.values / p0) ** g - 1.0)
    record_branch("loudness.floor", values < 0)
    return LoudnessGrid(torch.clamp(values, min=0.0))


def raw_disturbance(lc: LoudnessGrid, ln: LoudnessGrid, cfg: PesqConfig = PesqConfig()) -> torch.Tensor:
    if lc.values.shape != ln.values.shape:
        raise AlignmentError(f"loudness grids differ: {tuple(lc.values.shape)} vs {tuple(ln.values.shape)}")
    difference = lc.values - ln.values
    record_branch("disturbance.min", lc.values < ln.values)
    dead_zone = cfg.dead_zone_factor * torch.minimum(lc.values, ln.values)
    above, below = difference - dead_zone, difference + dead_zone
    record_branch("disturbance.dead_zone", torch.stack([above > 0, below < 0]))
    return torch.clamp(above, min=0.0) + torch.clamp(below, max=0.0)


def asymmetry_factor(bc: torch.Tensor, bn: torch.Tensor, cfg: PesqConfig = PesqConfig()) -> torch.Tensor:
    """((Bn + 50) / (Bc + 50))^1.2, set to 12 above 12 and to 0 below 3."""
    h = ((bn + cfg.asym_offset) / (bc + cfg.asym_offset)) ** cfg.asym_exponent
    high, low = h > cfg.asym_clip_high, h < cfg.asym_clip_low
    record_branch("asymmetry.clip", torch.stack([high, low]))
    return torch.where(high, cfg.asym_clip_high, torch.where(low, 0.0, h))


def frame_disturbances(
    d: torch.Tensor,
    bc: BarkSpectrogram,
    bn: BarkSpectrogram,
    table: BarkTable,
    cfg: PesqConfig = PesqConfig(),
) -> DisturbanceSeries:
    """FD_m = sum(w) sqrt(sum((W D)^2) / sum(w)); AFD_m the same over D h."""
    if not (d.shape == bc.values.shape == bn.values.shape):
        raise AlignmentError("disturbance and bark grids must share one shape")
    total_weight = table.band_weights.sum()
    weighted = table.disturbance_weights * d
    h = asymmetry_factor(bc.values, bn.values, cfg)
    fd = total_weight * _safe_root((weighted ** 2).sum(dim=1) / total_weight, 2, "fd.sqrt")
    afd = total_weight * _safe_root(((weighted * h) ** 2).sum(dim=1) / total_weight, 2, "afd.sqrt")
    return DisturbanceSeries(fd, afd, d)


def _two_stage(values: torch.Tensor, cfg: PesqConfig, name: str) -> torch.Tensor:
    """L6 over 20-frame windows stepping by 10, then L2 over the windows."""
    frames = int(values.shape[0])
    if frames < 1:
        raise DegenerateSignalError("no frames to aggregate")
    windows = max(1, frames // cfg.window_step)
    per_window = []
    for s in range(windows):
        start = s * cfg.window_step
        chunk = values[start : min(start + cfg.window_len, frames)]
        per_window.append(_safe_root(torch.mean(chunk ** 6), 6, f"{name}.l6"))
    return _safe_root(torch.mean(torch.stack(per_window) ** 2), 2, f"{name}.l2")


def aggregate(series: Sequence[DisturbanceSeries], cfg: PesqConfig = PesqConfig()) -> torch.Tensor:
    """score_base - sym_weight d_sym - asym_weight d_asym, with d_* the batch means."""
    if len(series) == 0:
        raise ConfigurationError("nothing to aggregate")
    d_sym = torch.stack([_two_stage(s.sym, cfg, "sym") for s in series]).mean()
    d_asym = torch.stack([_two_stage(s.asym, cfg, "asym") for s in series]).mean()
    return cfg.score_base - cfg.sym_weight * d_sym - cfg.asym_weight * d_asym


def disturbance_series(
    clean_power: PowerSpectrogram,
    estimate_power: PowerSpectrogram,
    table: BarkTable,
    cfg: PesqConfig = PesqConfig(),
) -> tuple[DisturbanceSeries, dict]:
    """Run one utterance from power spectra to per-frame disturbances."""
    bark_clean = bark_spectrum(level_align(clean_power, cfg), table)
    bark_estimate = bark_spectrum(level_align(estimate_power, cfg), table)
    eq_clean, eq_estimate = tf_equalize(bark_clean, bark_estimate, cfg)
    loud_clean, loud_estimate = loudness(eq_clean, table), loudness(eq_estimate, table)
    d = raw_disturbance(loud_clean, loud_estimate, cfg)
    series = frame_disturbances(d, bark_clean, bark_estimate, table, cfg)
    stages = {
        "bark_clean": bark_clean.values,
        "bark_estimate": bark_estimate.values,
        "eq_clean": eq_clean.values,
        "eq_estimate": eq_estimate.values,
        "loudness_clean": loud_clean.values,
        "loudness_estimate": loud_estimate.values,
        "raw_disturbance": d,
        "frame_disturbance": series.sym,
        "asym_frame_disturbance": series.asym,
    }
    return series, stages


def _check_inputs(clean: Waveform, estimate: Waveform, stft_cfg: StftConfig) -> None:
    if len(clean) != len(estimate):
        raise AlignmentError(f"length mismatch: clean {len(clean)}, estimate {len(estimate)}")
    if clean.sample_rate != estimate.sample_rate:
        raise AlignmentError(f"sample rate mismatch: {clean.sample_rate} vs {estimate.sample_rate}")
    if clean.sample_rate not in SUPPORTED_RATES:
        raise ConfigurationError(f"PESQ path supports {SUPPORTED_RATES} Hz, got {clean.sample_rate}")
    if clean.sample_rate != stft_cfg.sample_rate:
        raise AlignmentError(f"signals at {clean.sample_rate} Hz, STFT configured for {stft_cfg.sample_rate} Hz")


def _resolve(stft_cfg: StftConfig | None, table: BarkTable | None, sample_rate: int) -> tuple[StftConfig, BarkTable]:
    if stft_cfg is None:
        stft_cfg = StftConfig(sample_rate=sample_rate)
    if table is None:
        table = BarkTable.default(stft_cfg.fft_size, stft_cfg.sample_rate)
    return stft_cfg, table


def pesq_score_tensor(
    clean: torch.Tensor,
    estimate: torch.Tensor,
    stft_cfg: StftConfig,
    table: BarkTable,
    cfg: PesqConfig = PesqConfig(),
    clean_power: PowerSpectrogram | None = None,
) -> tuple[torch.Tensor, dict]:
    """Differentiable score of one aligned (clean, estimate) pair of sample tensors."""
    rate = stft_cfg.sample_rate
    if clean_power is None:
        clean_power = power_spectrogram(stft(Waveform(clean, rate), stft_cfg))
    estimate_power = power_spectrogram(stft(Waveform(estimate, rate), stft_cfg))
    series, stages = disturbance_series(clean_power, estimate_power, table, cfg)
    score = aggregate([series], cfg)
    return score, stages


def pesq_loss(
    clean: Waveform,
    estimate: Waveform,
    cfg: PesqConfig | None = None,
    table: BarkTable | None = None,
    stft_cfg: StftConfig | None = None,
) -> LossReport:
    """L_PESQ of one utterance; the report carries every stage as diagnostics."""
    cfg = cfg or PesqConfig()
    stft_cfg, table = _resolve(stft_cfg, table, clean.sample_rate)
    _check_inputs(clean, estimate, stft_cfg)
    with torch.no_grad():
        score, stages = pesq_score_tensor(clean.samples, estimate.samples, stft_cfg, table, cfg)
    value = float(score)
    logger.debug(f"pesq_loss over {len(clean)} samples: {value:.6f}")
    return LossReport(value=value, gradient=None, diagnostics=stages)


def pesq_loss_batch(
    pairs: Sequence[tuple[Waveform, Waveform]],
    cfg: PesqConfig | None = None,
    table: BarkTable | None = None,
    stft_cfg: StftConfig | None = None,
) -> float:
    """Batch L_PESQ: d_sym and d_asym are averaged over utterances before the linear map."""
    if len(pairs) == 0:
        raise ConfigurationError("empty batch")
    cfg = cfg or PesqConfig()
    stft_cfg, table = _resolve(stft_cfg, table, pairs[0][0].sample_rate)
    series = []
    with torch.no_grad():
        for clean, estimate in pairs:
            _check_inputs(clean, estimate, stft_cfg)
            clean_power = power_spectrogram(stft(clean, stft_cfg))
            estimate_power = power_spectrogram(stft(estimate, stft_cfg))
            series.append(disturbance_series(clean_power, estimate_power, table, cfg)[0])
        return float(aggregate(series, cfg))
