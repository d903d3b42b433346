# config.py
import json
import os
from pathlib import Path

from dotenv import load_dotenv

from errors import ConfigurationError
from logging_config import setup_logger, get_logger, setup_third_party_logging

load_dotenv()

# --- Logging Configuration ---
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
LOG_FILE_PATH = os.getenv("LOG_FILE", "logs/sdr_pesq.log")
LOG_MAX_BYTES = int(os.getenv("LOG_MAX_BYTES", 10 * 1024 * 1024))
LOG_BACKUP_COUNT = int(os.getenv("LOG_BACKUP_COUNT", 5))
LOG_TO_FILE = os.getenv("LOG_TO_FILE", "true").lower() == "true"
THIRD_PARTY_LOG_LEVEL = os.getenv("THIRD_PARTY_LOG_LEVEL", "WARNING").upper()

logger = setup_logger(
    log_level=LOG_LEVEL,
    log_file_path=LOG_FILE_PATH,
    log_max_bytes=LOG_MAX_BYTES,
    log_backup_count=LOG_BACKUP_COUNT,
    enable_console=True,
    enable_file=LOG_TO_FILE,
)

setup_third_party_logging(level=THIRD_PARTY_LOG_LEVEL)

# --- STFT Configuration ---
STFT_SAMPLE_RATE = int(os.getenv("STFT_SAMPLE_RATE", 16000))
STFT_FFT_SIZE = int(os.getenv("STFT_FFT_SIZE", 512))
STFT_HOP = int(os.getenv("STFT_HOP", 256))

# --- Perceptual Table ---
DATA_DIR = Path(__file__).resolve().parent / "data"
BARK_TABLE_PATH = os.getenv("BARK_TABLE_PATH", str(DATA_DIR / "p862_bark_16k.json"))

# --- Mixing / Fitting ---
MIX_SEED = int(os.getenv("MIX_SEED", 0))
FIT_STEPS = int(os.getenv("FIT_STEPS", 200))
FIT_STEP_SIZE = float(os.getenv("FIT_STEP_SIZE", 10.0))
FIT_MASK_MIN = float(os.getenv("FIT_MASK_MIN", -2.0))
FIT_MASK_MAX = float(os.getenv("FIT_MASK_MAX", 3.0))
PESQ_WEIGHT = float(os.getenv("PESQ_WEIGHT", 1.0))
SDR_CLAMP_DB = float(os.getenv("SDR_CLAMP_DB", 60.0))

# --- Batch Evaluation ---
EVAL_JOBS = int(os.getenv("EVAL_JOBS", 1))

CONFIG_FILE_SECTIONS = frozenset({"stft", "pesq", "bark_table", "fit"})


# --- Validation ---
if STFT_FFT_SIZE <= 0 or STFT_HOP <= 0:
    logger.error(f"STFT sizes must be positive (STFT_FFT_SIZE={STFT_FFT_SIZE}, STFT_HOP={STFT_HOP}).")
    raise ValueError("STFT_FFT_SIZE and STFT_HOP must be positive integers.")
if STFT_HOP > STFT_FFT_SIZE:
    logger.error(f"STFT_HOP ({STFT_HOP}) exceeds STFT_FFT_SIZE ({STFT_FFT_SIZE}).")
    raise ValueError("STFT_HOP must not exceed STFT_FFT_SIZE.")
if FIT_MASK_MIN >= FIT_MASK_MAX:
    logger.error(f"Mask clamp is empty: FIT_MASK_MIN={FIT_MASK_MIN}, FIT_MASK_MAX={FIT_MASK_MAX}.")
    raise ValueError("FIT_MASK_MIN must be smaller than FIT_MASK_MAX.")
if EVAL_JOBS < 1:
    logger.warning(f"EVAL_JOBS={EVAL_JOBS} is not positive; using 1.")
    EVAL_JOBS = 1

logger.info(f"STFT defaults: fft_size={STFT_FFT_SIZE}, hop={STFT_HOP}, sample_rate={STFT_SAMPLE_RATE}")
logger.info(f"Bark table: {BARK_TABLE_PATH}")
logger.debug(
    f"Logging to console{' and to file: ' + LOG_FILE_PATH if LOG_TO_FILE else ''} "
    f"(Level: {LOG_LEVEL}, MaxSize: {LOG_MAX_BYTES}B, Backups: {LOG_BACKUP_COUNT})"
)


def read_config_file(path: str | os.PathLike) -> dict:
    """
    Load a JSON override file passed with ``--config``.

    Only the sections ``stft``, ``pesq``, ``bark_table`` and ``fit`` are accepted;
    values are validated later by the objects they feed.
    """
    config_path = Path(path)
    log = get_logger("config")
    log.info(f"Reading configuration overrides from {config_path}")
    try:
        with config_path.open("r", encoding="utf-8") as handle:
            overrides = json.load(handle)
    except FileNotFoundError as e:
        log.error(f"Configuration file not found: {config_path}")
        raise ConfigurationError(f"configuration file not found: {config_path}") from e
    except json.JSONDecodeError as e:
        log.error(f"Configuration file {config_path} is not valid JSON: {e}")
        raise ConfigurationError(f"malformed configuration file {config_path}: {e}") from e

    if not isinstance(overrides, dict):
        raise ConfigurationError("configuration file must hold a JSON object")
    unknown = set(overrides) - CONFIG_FILE_SECTIONS
    if unknown:
        log.error(f"Unknown configuration sections: {sorted(unknown)}")
        raise ConfigurationError(f"unknown configuration sections: {', '.join(sorted(unknown))}")

    # a relative table path is relative to the file that names it
    table = overrides.get("bark_table")
    if isinstance(table, str) and not Path(table).is_absolute():
        overrides["bark_table"] = str((config_path.parent / table).resolve())
    return overrides
