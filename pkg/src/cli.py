"""
Command-line surface: mix, score, oracle, fit and eval.

Usage (from the repository root):

    uv run src/main.py mix clean.wav noise.wav noisy.wav --snr 0 --seed 7
    uv run src/main.py score clean.wav noisy.wav --json
    uv run src/main.py oracle clean.wav noise.wav out.wav --mask PSM --gl-iters 1
    uv run src/main.py fit clean.wav noise.wav --loss sdr-pesq --steps 200 --lr 10 --out-csv fit.csv
    uv run src/main.py eval manifest.csv report --jobs 4

Exit codes: 0 success, 1 partial failure, 2 missing input, 3 degenerate signal,
4 alignment/length, 5 bad argument, 6 numeric divergence.
"""
import argparse
import csv
import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any

import anyio

from audio_io import MixSpec, Waveform, achieved_snr, mix_at_snr, read_wav, write_wav
from config import (
    BARK_TABLE_PATH,
    EVAL_JOBS,
    FIT_MASK_MAX,
    FIT_MASK_MIN,
    FIT_STEP_SIZE,
    FIT_STEPS,
    MIX_SEED,
    PESQ_WEIGHT,
    SDR_CLAMP_DB,
    STFT_FFT_SIZE,
    STFT_HOP,
    STFT_SAMPLE_RATE,
    read_config_file,
)
from errors import AlignmentError, ConfigurationError, DenoiseError, DivergenceError, MissingInputError, OutputPathError
from grad_fit import FitConfig, LossKind, fit_mask, reconstruct, write_trajectory_csv
from logging_config import get_logger
from masks import MaskConfig, MaskKind, oracle_mask
from pesq_loss import BarkTable, PesqConfig, pesq_loss
from sdr_loss import JointLossConfig, si_sdr
from spectral import StftConfig, stft

logger = get_logger("cli")

EXIT_OK = 0
EXIT_PARTIAL = 1
MANIFEST_COLUMNS = ("id", "clean", "noisy", "noise", "snr", "method")
REPORT_COLUMNS = ("id", "si_sdr_in", "si_sdr_out", "pesq_in", "pesq_out", "loss_kind", "config_digest")
ORACLE_METHODS = {kind.value.lower(): kind for kind in MaskKind if kind is not MaskKind.FREE}


def _fixed(value: float) -> str:
    text = f"{value:.6f}"
    # printed zero is never signed
    return text[1:] if text == "-0.000000" else text


def _json_number(value: float) -> float | None:
    return float(_fixed(value)) if math.isfinite(value) else None


def _clamped_si_sdr(clean: Waveform, estimate: Waveform) -> float:
    return min(max(si_sdr(clean, estimate), -SDR_CLAMP_DB), SDR_CLAMP_DB)


@dataclass
class Settings:
    """STFT, PESQ, band-table and fit defaults after applying a ``--config`` file."""

    stft: StftConfig
    pesq: PesqConfig
    table_data: dict
    fit_steps: int = FIT_STEPS
    fit_step_size: float = FIT_STEP_SIZE
    pesq_weight: float = PESQ_WEIGHT
    clamp: tuple[float, float] | None = (FIT_MASK_MIN, FIT_MASK_MAX)
    mask_init: str = "ones"
    _tables: dict = field(default_factory=dict, repr=False)

    def stft_for(self, sample_rate: int) -> StftConfig:
        if sample_rate == self.stft.sample_rate:
            return self.stft
        return dataclasses.replace(self.stft, sample_rate=sample_rate)

    def table_for(self, sample_rate: int) -> BarkTable:
        key = (self.stft.fft_size, sample_rate)
        if key not in self._tables:
            self._tables[key] = BarkTable.from_dict(self.table_data, *key)
        return self._tables[key]

    def fit_config(self, loss: str, steps: int | None, lr: float | None, mask_init: str | None,
                   pesq_weight: float | None) -> FitConfig:
        return FitConfig(
            loss_kind=LossKind.parse(loss),
            steps=self.fit_steps if steps is None else steps,
            step_size=self.fit_step_size if lr is None else lr,
            mask_init=mask_init or self.mask_init,
            clamp=self.clamp,
            joint=JointLossConfig(pesq_weight=self.pesq_weight if pesq_weight is None else pesq_weight),
        )

    def describe(self) -> dict:
        return {
            "stft": self.stft.describe(),
            "pesq": self.pesq.describe(),
            "bark_table": self.table_data,
            "fit": {
                "steps": self.fit_steps,
                "step_size": self.fit_step_size,
                "pesq_weight": self.pesq_weight,
                "clamp": list(self.clamp) if self.clamp else None,
                "mask_init": self.mask_init,
            },
        }

    def digest(self) -> str:
        canonical = json.dumps(self.describe(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _read_table(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise MissingInputError(f"band table not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"band table {path} is not valid JSON: {e}") from e


def load_settings(config_path: str | None = None) -> Settings:
    overrides = read_config_file(config_path) if config_path else {}

    stft_section = dict(overrides.get("stft", {}))
    try:
        stft_cfg = StftConfig.build(
            fft_size=int(stft_section.pop("fft_size", STFT_FFT_SIZE)),
            hop=int(stft_section.pop("hop", STFT_HOP)),
            window=stft_section.pop("window", "hann"),
            synthesis_window=stft_section.pop("synthesis_window", None),
            sample_rate=int(stft_section.pop("sample_rate", STFT_SAMPLE_RATE)),
        )
        pesq_cfg = PesqConfig(**overrides.get("pesq", {}))
    except TypeError as e:
        raise ConfigurationError(f"invalid configuration value: {e}") from e
    if stft_section:
        raise ConfigurationError(f"unknown stft settings: {', '.join(sorted(stft_section))}")

    table = overrides.get("bark_table", BARK_TABLE_PATH)
    table_data = table if isinstance(table, dict) else _read_table(table)

    fit = dict(overrides.get("fit", {}))
    clamp = fit.pop("clamp", (FIT_MASK_MIN, FIT_MASK_MAX))
    settings = Settings(
        stft=stft_cfg,
        pesq=pesq_cfg,
        table_data=table_data,
        fit_steps=int(fit.pop("steps", FIT_STEPS)),
        fit_step_size=float(fit.pop("step_size", FIT_STEP_SIZE)),
        pesq_weight=float(fit.pop("pesq_weight", PESQ_WEIGHT)),
        clamp=tuple(clamp) if clamp is not None else None,
        mask_init=fit.pop("mask_init", "ones"),
    )
    if fit:
        raise ConfigurationError(f"unknown fit settings: {', '.join(sorted(fit))}")
    # fail on a bad table now rather than inside the first command
    settings.table_for(stft_cfg.sample_rate)
    return settings


@dataclass(frozen=True)
class ReportRow:
    id: str
    si_sdr_in: float
    si_sdr_out: float
    pesq_in: float
    pesq_out: float
    loss_kind: str
    config_digest: str

    def csv_fields(self) -> list[str]:
        return [self.id, *(_fixed(v) for v in (self.si_sdr_in, self.si_sdr_out, self.pesq_in, self.pesq_out)),
                self.loss_kind, self.config_digest]

    def json_fields(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "si_sdr_in": _json_number(self.si_sdr_in),
            "si_sdr_out": _json_number(self.si_sdr_out),
            "pesq_in": _json_number(self.pesq_in),
            "pesq_out": _json_number(self.pesq_out),
            "loss_kind": self.loss_kind,
            "config_digest": self.config_digest,
        }


@dataclass(frozen=True)
class ManifestRow:
    line: int
    id: str
    clean: Path
    noisy: Path | None
    noise: Path | None
    snr: float | None
    method: str


class DenoiseCommands:
    """One method per CLI command; each returns the process exit status."""

    def __init__(self, settings: Settings | None = None, out=None):
        self.settings = settings or load_settings()
        self.out = out or sys.stdout
        self.digest = self.settings.digest()
        logger.info(f"Commands ready (config digest {self.digest}, fft_size={self.settings.stft.fft_size})")

    def _emit(self, payload: dict[str, Any], as_json: bool) -> None:
        if as_json:
            data = {k: _json_number(v) if isinstance(v, float) else v for k, v in payload.items()}
            print(json.dumps(data, sort_keys=True), file=self.out)
            return
        for key, value in payload.items():
            print(f"{key}: {_fixed(value) if isinstance(value, float) else value}", file=self.out)

    def _pesq(self, clean: Waveform, estimate: Waveform) -> float:
        rate = clean.sample_rate
        return pesq_loss(clean, estimate, self.settings.pesq, self.settings.table_for(rate),
                         self.settings.stft_for(rate)).value

    @staticmethod
    def _noisy_from(clean: Waveform, noise: Waveform) -> Waveform:
        if len(clean) != len(noise):
            raise AlignmentError(f"length mismatch: clean {len(clean)}, noise {len(noise)}")
        if clean.sample_rate != noise.sample_rate:
            raise AlignmentError(f"sample rate mismatch: {clean.sample_rate} vs {noise.sample_rate}")
        return Waveform(clean.samples + noise.samples, clean.sample_rate)

    def _oracle_estimate(self, clean: Waveform, noise: Waveform, noisy: Waveform, kind: MaskKind,
                         gl_iters: int) -> Waveform:
        stft_cfg = self.settings.stft_for(clean.sample_rate)
        mask = oracle_mask(kind, stft(clean, stft_cfg), stft(noise, stft_cfg), MaskConfig())
        return reconstruct(mask, stft(noisy, stft_cfg), stft_cfg, len(clean), gl_iterations=gl_iters)

    def cmd_mix(self, clean_path: str, noise_path: str, snr_db: float, out_path: str,
                seed: int = MIX_SEED, noise_out: str | None = None, as_json: bool = False) -> int:
        logger.info(f"COMMAND START: mix clean={clean_path} noise={noise_path} snr={snr_db} seed={seed} out={out_path}")
        try:
            clean, noise = read_wav(clean_path), read_wav(noise_path)
            noisy, scaled_noise = mix_at_snr(clean, noise, MixSpec(snr_db, seed))
            noise_out = noise_out or str(Path(out_path).with_name(f"{Path(out_path).stem}_noise.wav"))
            write_wav(noisy, out_path)
            write_wav(scaled_noise, noise_out)
            self._emit({"achieved_snr_db": achieved_snr(clean, scaled_noise)}, as_json)
        except DenoiseError as e:
            logger.error(f"COMMAND ERROR: mix failed: {e}")
            raise
        logger.info(f"COMMAND END: mix wrote {out_path} and {noise_out}")
        return EXIT_OK

    def cmd_score(self, clean_path: str, estimate_path: str, as_json: bool = False) -> int:
        logger.info(f"COMMAND START: score clean={clean_path} estimate={estimate_path}")
        try:
            clean, estimate = read_wav(clean_path), read_wav(estimate_path)
            scores = {"si_sdr_db": _clamped_si_sdr(clean, estimate), "pesq": self._pesq(clean, estimate)}
            self._emit(scores, as_json)
        except DenoiseError as e:
            logger.error(f"COMMAND ERROR: score failed: {e}")
            raise
        logger.info(f"COMMAND END: score si_sdr={scores['si_sdr_db']:.6f} pesq={scores['pesq']:.6f}")
        return EXIT_OK

    def cmd_oracle(self, clean_path: str, noise_path: str, mask_kind: str, gl_iters: int, out_path: str,
                   as_json: bool = False) -> int:
        logger.info(f"COMMAND START: oracle clean={clean_path} noise={noise_path} mask={mask_kind} gl_iters={gl_iters}")
        try:
            kind = MaskKind.parse(mask_kind)
            if kind is MaskKind.FREE:
                raise ConfigurationError("mask kind FREE has no oracle; use the fit command")
            if gl_iters < 1:
                raise ConfigurationError(f"--gl-iters must be >= 1, got {gl_iters}")
            clean, noise = read_wav(clean_path), read_wav(noise_path)
            noisy = self._noisy_from(clean, noise)
            estimate = self._oracle_estimate(clean, noise, noisy, kind, gl_iters)
            write_wav(estimate, out_path)
            metrics = {
                "si_sdr_in": _clamped_si_sdr(clean, noisy),
                "si_sdr_out": _clamped_si_sdr(clean, estimate),
                "pesq_in": self._pesq(clean, noisy),
                "pesq_out": self._pesq(clean, estimate),
            }
            self._emit(metrics, as_json)
        except DenoiseError as e:
            logger.error(f"COMMAND ERROR: oracle failed: {e}")
            raise
        logger.info(f"COMMAND END: oracle {kind.value} si_sdr {metrics['si_sdr_in']:.6f} -> {metrics['si_sdr_out']:.6f}")
        return EXIT_OK

    def cmd_fit(self, clean_path: str, noise_path: str, loss_kind: str, steps: int | None, lr: float | None,
                out_csv: str, out_wav: str | None = None, gl_iters: int = 1, mask_init: str | None = None,
                pesq_weight: float | None = None, as_json: bool = False) -> int:
        logger.info(f"COMMAND START: fit clean={clean_path} noise={noise_path} loss={loss_kind} steps={steps} lr={lr}")
        try:
            cfg = self.settings.fit_config(loss_kind, steps, lr, mask_init, pesq_weight)
            clean, noise = read_wav(clean_path), read_wav(noise_path)
            noisy = self._noisy_from(clean, noise)
            rate = clean.sample_rate
            stft_cfg = self.settings.stft_for(rate)
            table = self.settings.table_for(rate) if rate in (8000, 16000) else None
            try:
                result = fit_mask(noisy, clean, noise, cfg, stft_cfg, self.settings.pesq, table, gl_iterations=gl_iters)
            except DivergenceError as e:
                write_trajectory_csv(e.trajectory, out_csv)
                logger.error(f"COMMAND ERROR: fit diverged after {len(e.trajectory)} points; partial trajectory in {out_csv}")
                raise
            write_trajectory_csv(result.trajectory, out_csv)
            out_wav = out_wav or str(Path(out_csv).with_suffix(".wav"))
            write_wav(reconstruct(result.mask, stft(noisy, stft_cfg), stft_cfg, len(clean), gl_iters), out_wav)
            final = result.trajectory[-1]
            self._emit({"steps": final.step, "loss": final.loss, "si_sdr": final.si_sdr,
                        "pesq_score": final.pesq_score}, as_json)
        except DivergenceError:
            raise
        except DenoiseError as e:
            logger.error(f"COMMAND ERROR: fit failed: {e}")
            raise
        logger.info(f"COMMAND END: fit wrote {out_csv} ({len(result.trajectory)} rows) and {out_wav}")
        return EXIT_OK

    def _parse_manifest(self, manifest_path: Path) -> tuple[list[ManifestRow], list[dict[str, Any]]]:
        if not manifest_path.is_file():
            raise MissingInputError(f"manifest not found: {manifest_path}")
        rows, errors = [], []
        base = manifest_path.parent
        with manifest_path.open("r", newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None:
                return rows, errors
            missing = [c for c in ("id", "clean", "method") if c not in reader.fieldnames]
            if missing:
                raise ConfigurationError(f"manifest header lacks columns: {', '.join(missing)}")
            for record in reader:
                line = reader.line_num
                try:
                    rows.append(self._manifest_row(record, line, base))
                except DenoiseError as e:
                    logger.warning(f"Manifest line {line} rejected: {e}")
                    errors.append({"line": line, "error": str(e)})
        return rows, errors

    @staticmethod
    def _manifest_row(record: dict, line: int, base: Path) -> ManifestRow:
        if None in record or any(record.get(c) is None for c in MANIFEST_COLUMNS if c in record):
            raise ConfigurationError("wrong number of fields")
        values = {key: (record.get(key) or "").strip() for key in MANIFEST_COLUMNS}
        if not values["id"] or not values["clean"]:
            raise ConfigurationError("id and clean are required")
        method = values["method"].lower().replace("-", "_")
        if method != "noisy" and method not in ORACLE_METHODS:
            LossKind.parse(method)
        snr = None
        if not values["noisy"]:
            if not values["noise"] or not values["snr"]:
                raise ConfigurationError("need either noisy, or noise and snr")
            try:
                snr = float(values["snr"])
            except ValueError as e:
                raise ConfigurationError(f"snr '{values['snr']}' is not a number") from e
        return ManifestRow(
            line=line,
            id=values["id"],
            clean=base / values["clean"],
            noisy=base / values["noisy"] if values["noisy"] else None,
            noise=base / values["noise"] if values["noise"] else None,
            snr=snr,
            method=method,
        )

    def _evaluate_row(self, row: ManifestRow) -> ReportRow:
        clean = read_wav(row.clean)
        if row.noisy is not None:
            noisy = read_wav(row.noisy)
            if len(noisy) != len(clean):
                raise AlignmentError(f"length mismatch: clean {len(clean)}, noisy {len(noisy)}")
            noise = Waveform(noisy.samples - clean.samples, clean.sample_rate)
        else:
            noisy, noise = mix_at_snr(clean, read_wav(row.noise), MixSpec(row.snr, MIX_SEED))

        if row.method == "noisy":
            estimate, label = noisy, "NONE"
        elif row.method in ORACLE_METHODS:
            kind = ORACLE_METHODS[row.method]
            estimate, label = self._oracle_estimate(clean, noise, noisy, kind, 1), kind.value
        else:
            cfg = self.settings.fit_config(row.method, None, None, None, None)
            stft_cfg = self.settings.stft_for(clean.sample_rate)
            table = self.settings.table_for(clean.sample_rate)
            result = fit_mask(noisy, clean, noise, cfg, stft_cfg, self.settings.pesq, table)
            estimate = reconstruct(result.mask, stft(noisy, stft_cfg), stft_cfg, len(clean))
            label = cfg.loss_kind.value

        return ReportRow(
            id=row.id,
            si_sdr_in=_clamped_si_sdr(clean, noisy),
            si_sdr_out=_clamped_si_sdr(clean, estimate),
            pesq_in=self._pesq(clean, noisy),
            pesq_out=self._pesq(clean, estimate),
            loss_kind=label,
            config_digest=self.digest,
        )

    def _evaluate_or_error(self, row: ManifestRow) -> ReportRow | dict[str, Any]:
        try:
            return self._evaluate_row(row)
        except DenoiseError as e:
            logger.warning(f"Manifest line {row.line} ({row.id}) failed: {e}")
            return {"line": row.line, "error": str(e)}

    async def _evaluate_rows(self, rows: list[ManifestRow], jobs: int) -> list:
        results: list = [None] * len(rows)
        limiter = anyio.CapacityLimiter(jobs)

        async def evaluate(index: int, row: ManifestRow) -> None:
            results[index] = await anyio.to_thread.run_sync(self._evaluate_or_error, row, limiter=limiter)

        async with anyio.create_task_group() as tg:
            for index, row in enumerate(rows):
                tg.start_soon(evaluate, index, row)
        return results

    def cmd_eval(self, manifest_path: str, out_report: str, jobs: int = EVAL_JOBS, as_json: bool = False) -> int:
        logger.info(f"COMMAND START: eval manifest={manifest_path} out={out_report} jobs={jobs}")
        try:
            if jobs < 1:
                raise ConfigurationError(f"--jobs must be >= 1, got {jobs}")
            rows, errors = self._parse_manifest(Path(manifest_path))
            results = anyio.run(partial(self._evaluate_rows, rows, jobs)) if rows else []
            report = [r for r in results if isinstance(r, ReportRow)]
            errors = sorted(errors + [r for r in results if isinstance(r, dict)], key=lambda e: e["line"])
            self._write_report(report, errors, Path(out_report))
            self._emit({"rows": len(report), "errors": len(errors), "config_digest": self.digest}, as_json)
        except DenoiseError as e:
            logger.error(f"COMMAND ERROR: eval failed: {e}")
            raise
        status = EXIT_PARTIAL if errors else EXIT_OK
        logger.info(f"COMMAND END: eval produced {len(report)} rows, {len(errors)} errors, exit {status}")
        return status

    def _write_report(self, report: list[ReportRow], errors: list[dict], out_report: Path) -> None:
        csv_path, json_path = out_report.with_suffix(".csv"), out_report.with_suffix(".json")
        try:
            with csv_path.open("w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(REPORT_COLUMNS)
                for row in report:
                    writer.writerow(row.csv_fields())
            document = {"config_digest": self.digest, "rows": [r.json_fields() for r in report], "errors": errors}
            json_path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as e:
            raise OutputPathError(f"cannot write report {out_report}: {e}") from e


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors become exit status 5; status 2 stays reserved for missing inputs."""

    def error(self, message):
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="sdr-pesq", description="Joint SDR/PESQ denoising objectives and mask fitting")
    parser.add_argument("--config", type=str, default=None, help="JSON file overriding STFT/PESQ/table/fit settings")
    commands = parser.add_subparsers(dest="command", required=True)

    mix = commands.add_parser("mix", help="Mix clean speech with noise at a target SNR")
    mix.add_argument("clean")
    mix.add_argument("noise")
    mix.add_argument("out", help="noisy WAV to write")
    mix.add_argument("--snr", type=float, required=True, help="target SNR in dB")
    mix.add_argument("--seed", type=int, default=MIX_SEED, help="seed of the noise crop offset")
    mix.add_argument("--noise-out", default=None, help="scaled-noise WAV (default: <out>_noise.wav)")
    mix.add_argument("--json", action="store_true")

    score = commands.add_parser("score", help="Print SI-SDR and the PESQ approximation")
    score.add_argument("clean")
    score.add_argument("estimate")
    score.add_argument("--json", action="store_true")

    oracle = commands.add_parser("oracle", help="Denoise with an oracle mask")
    oracle.add_argument("clean")
    oracle.add_argument("noise")
    oracle.add_argument("out")
    oracle.add_argument("--mask", default="PSM", help="IBM, IRM, IAM or PSM")
    oracle.add_argument("--gl-iters", type=int, default=1)
    oracle.add_argument("--json", action="store_true")

    fit = commands.add_parser("fit", help="Fit a free mask by gradient ascent")
    fit.add_argument("clean")
    fit.add_argument("noise")
    fit.add_argument("--loss", default="sdr", help="sdr, snr-mse, sdr-mse, sdr-pesq or pesq")
    fit.add_argument("--steps", type=int, default=None)
    fit.add_argument("--lr", type=float, default=None, help="initial step size")
    fit.add_argument("--gl-iters", type=int, default=1)
    fit.add_argument("--mask-init", default=None, help="ones, iam, psm or value")
    fit.add_argument("--pesq-weight", type=float, default=None)
    fit.add_argument("--out-csv", required=True)
    fit.add_argument("--out-wav", default=None, help="denoised WAV (default: <out-csv>.wav)")
    fit.add_argument("--json", action="store_true")

    evaluate = commands.add_parser("eval", help="Evaluate a manifest of utterances")
    evaluate.add_argument("manifest")
    evaluate.add_argument("out", help="report base path; writes <out>.csv and <out>.json")
    evaluate.add_argument("--jobs", type=int, default=EVAL_JOBS)
    evaluate.add_argument("--json", action="store_true")
    return parser


def _dispatch(commands: DenoiseCommands, args: argparse.Namespace) -> int:
    if args.command == "mix":
        return commands.cmd_mix(args.clean, args.noise, args.snr, args.out, args.seed, args.noise_out, args.json)
    if args.command == "score":
        return commands.cmd_score(args.clean, args.estimate, args.json)
    if args.command == "oracle":
        return commands.cmd_oracle(args.clean, args.noise, args.mask, args.gl_iters, args.out, args.json)
    if args.command == "fit":
        return commands.cmd_fit(args.clean, args.noise, args.loss, args.steps, args.lr, args.out_csv, args.out_wav,
                                args.gl_iters, args.mask_init, args.pesq_weight, args.json)
    return commands.cmd_eval(args.manifest, args.out, args.jobs, args.json)


def main(argv: list[str] | None = None) -> int:
    exit_code = EXIT_OK
    try:
        args = build_parser().parse_args(argv)
        commands = DenoiseCommands(load_settings(args.config))
        exit_code = _dispatch(commands, args)
    except DenoiseError as e:
        print(f"error: {e}", file=sys.stderr)
        exit_code = e.exit_code
    except KeyboardInterrupt:
        logger.info("Command interrupted by user.")
        exit_code = EXIT_PARTIAL
    except Exception as e:
        logger.critical(f"Command crashed: {e}", exc_info=True)
        exit_code = EXIT_PARTIAL
    finally:
        logger.info(f"Exiting with code {exit_code}.")
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
