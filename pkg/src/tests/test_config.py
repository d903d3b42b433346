import json
import logging
import tempfile
import unittest
from pathlib import Path

from cli import load_settings
from config import BARK_TABLE_PATH, read_config_file
from errors import ConfigurationError, MissingInputError
from logging_config import (
    LOGGER_NAME,
    THIRD_PARTY_LOGGERS,
    SdrPesqJsonFormatter,
    get_logger,
    setup_logger,
    setup_third_party_logging,
)


class TestConfigFile(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, payload, name: str = "config.json") -> Path:
        path = self.dir / name
        path.write_text(payload if isinstance(payload, str) else json.dumps(payload), encoding="utf-8")
        return path

    def test_sections_pass_through(self):
        overrides = read_config_file(self.write({"stft": {"hop": 128}, "fit": {"steps": 5}}))
        self.assertEqual(overrides, {"stft": {"hop": 128}, "fit": {"steps": 5}})

    def test_rejected_files(self):
        with self.assertRaisesRegex(ConfigurationError, "not found"):
            read_config_file(self.dir / "absent.json")
        with self.assertRaisesRegex(ConfigurationError, "malformed"):
            read_config_file(self.write("{stft: 1"))
        with self.assertRaisesRegex(ConfigurationError, "JSON object"):
            read_config_file(self.write([1, 2]))
        with self.assertRaisesRegex(ConfigurationError, "logging"):
            read_config_file(self.write({"logging": {}}))

    def test_relative_table_path_follows_the_config_file(self):
        nested = self.dir / "nested"
        nested.mkdir()
        overrides = read_config_file(self.write({"bark_table": "tables/bark.json"}, "nested/config.json"))
        self.assertEqual(Path(overrides["bark_table"]), (nested / "tables" / "bark.json").resolve())


class TestSettings(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, payload) -> str:
        path = self.dir / "config.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        return str(path)

    def test_defaults(self):
        settings = load_settings()
        self.assertEqual((settings.stft.fft_size, settings.stft.hop), (512, 256))
        self.assertEqual(settings.table_for(16000).n_bands, 49)
        self.assertEqual(settings.table_data, json.loads(Path(BARK_TABLE_PATH).read_text(encoding="utf-8")))

    def test_digest_is_stable_and_tracks_overrides(self):
        self.assertEqual(load_settings().digest(), load_settings().digest())
        self.assertEqual(len(load_settings().digest()), 16)
        tuned = load_settings(self.write({"fit": {"steps": 5}}))
        self.assertEqual(tuned.fit_steps, 5)
        self.assertNotEqual(tuned.digest(), load_settings().digest())

    def test_overrides_reach_the_fit_config(self):
        settings = load_settings(self.write({"fit": {"step_size": 2.0, "clamp": None, "pesq_weight": 0.5}}))
        cfg = settings.fit_config("sdr-pesq", None, None, None, None)
        self.assertEqual((cfg.step_size, cfg.clamp, cfg.joint.pesq_weight), (2.0, None, 0.5))
        self.assertEqual(settings.fit_config("sdr", 3, 1.0, "iam", 2.0).steps, 3)

    def test_unknown_keys(self):
        with self.assertRaisesRegex(ConfigurationError, "unknown stft settings"):
            load_settings(self.write({"stft": {"fft": 512}}))
        with self.assertRaisesRegex(ConfigurationError, "unknown fit settings"):
            load_settings(self.write({"fit": {"epochs": 5}}))
        with self.assertRaises(ConfigurationError):
            load_settings(self.write({"pesq": {"score_basis": 4.5}}))

    def test_missing_table(self):
        with self.assertRaises(MissingInputError):
            load_settings(self.write({"bark_table": "absent.json"}))


class TestLogging(unittest.TestCase):
    def setUp(self):
        self.logger = logging.getLogger(LOGGER_NAME)
        self.saved = (self.logger.handlers[:], self.logger.level)

    def tearDown(self):
        for handler in self.logger.handlers[:]:
            self.logger.removeHandler(handler)
        handlers, level = self.saved
        for handler in handlers:
            self.logger.addHandler(handler)
        self.logger.setLevel(level)

    def test_child_logger_names(self):
        self.assertEqual(get_logger("cli").name, "sdr_pesq.cli")
        self.assertIs(get_logger(), self.logger)

    def test_formatter_adds_call_site_fields(self):
        formatter = SdrPesqJsonFormatter(fmt="%(message)s")
        record = logging.LogRecord("sdr_pesq.grad_fit", logging.WARNING, __file__, 42, "step %d", (3,), None,
                                   func="fit_mask")
        document = json.loads(formatter.format(record))
        self.assertEqual(document["message"], "step 3")
        self.assertEqual(document["level"], "WARNING")
        self.assertEqual(document["logger"], "sdr_pesq.grad_fit")
        self.assertEqual(document["component"], "grad_fit")
        self.assertEqual((document["function"], document["line"]), ("fit_mask", 42))
        self.assertIn("timestamp", document)

    def test_setup_replaces_handlers(self):
        with tempfile.TemporaryDirectory() as tmp:
            log_file = Path(tmp) / "logs" / "run.log"
            setup_logger("DEBUG", str(log_file), enable_console=True, enable_file=True)
            logger = setup_logger("DEBUG", str(log_file), enable_console=True, enable_file=True)
            self.assertEqual(len(logger.handlers), 2)
            self.assertEqual(logger.level, logging.DEBUG)
            self.assertFalse(logger.propagate)
            self.assertTrue(log_file.parent.is_dir())
            logger = setup_logger("WARNING", enable_console=True, enable_file=False)
            self.assertEqual(len(logger.handlers), 1)

    def test_third_party_levels(self):
        setup_third_party_logging("ERROR")
        for name in THIRD_PARTY_LOGGERS:
            self.assertEqual(logging.getLogger(name).level, logging.ERROR)
        setup_third_party_logging("WARNING")


if __name__ == "__main__":
    unittest.main(verbosity=2)
