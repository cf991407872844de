import logging

import pytest
import torch

from protomtl.exceptions import ConfigError
from protomtl.logging import get_log_level_from_env, setup_logger
from protomtl.utils import (
    configure_threads,
    read_csv,
    read_kv,
    state_checksum,
    write_csv,
    write_kv,
)


class TestKeyValueFiles:
    """Tests for key = value files."""

    def test_read(self, tmp_path):
        """Test comments and blank lines are skipped and values stripped."""
        path = tmp_path / "c.txt"
        path.write_text("# comment\n\nepochs = 3\nprotocol=one-label  \n")
        assert read_kv(path) == {"epochs": "3", "protocol": "one-label"}

    def test_value_may_contain_equals(self, tmp_path):
        """Test only the first '=' separates key and value."""
        path = tmp_path / "c.txt"
        path.write_text("note = a=b\n")
        assert read_kv(path) == {"note": "a=b"}

    @pytest.mark.parametrize("text", ["epochs 3\n", "= 3\n", "a = 1\na = 2\n"])
    def test_malformed(self, tmp_path, text):
        """Test malformed lines and duplicate keys raise ConfigError."""
        path = tmp_path / "c.txt"
        path.write_text(text)
        with pytest.raises(ConfigError) as exc_info:
            read_kv(path)
        assert exc_info.value.path == str(path)

    def test_missing_file(self, tmp_path):
        """Test a missing file raises ConfigError."""
        with pytest.raises(ConfigError):
            read_kv(tmp_path / "absent.txt")

    def test_write_formats(self, tmp_path):
        """Test booleans, floats and lists are written readably."""
        path = tmp_path / "c.txt"
        write_kv(path, {"use_vq": True, "margin": 0.2, "sizes": [16, 16], "name": "x"})
        assert path.read_text() == "use_vq = true\nmargin = 0.2\nsizes = 16 16\nname = x\n"
        assert read_kv(path)["margin"] == "0.2"


class TestCsv:
    """Tests for CSV helpers."""

    def test_round_trip_keeps_float_precision(self, tmp_path):
        """Test floats are written at full precision into new directories."""
        path = write_csv(tmp_path / "a" / "b.csv", ["x", "y"], [[0.1 + 0.2, "z"]])
        rows = read_csv(path)
        assert float(rows[0]["x"]) == 0.1 + 0.2
        assert rows[0]["y"] == "z"


class TestLogging:
    """Tests for logger setup."""

    def test_env_level(self, monkeypatch):
        """Test the level comes from PROTO_MTL_LOG_LEVEL."""
        monkeypatch.setenv("PROTO_MTL_LOG_LEVEL", "debug")
        assert get_log_level_from_env() == logging.DEBUG
        monkeypatch.setenv("PROTO_MTL_LOG_LEVEL", "nonsense")
        assert get_log_level_from_env() == logging.INFO

    def test_setup_logger(self, tmp_path):
        """Test handlers are not duplicated and the file handler receives records."""
        log_file = tmp_path / "run.log"
        logger = setup_logger("protomtl.test_utils", level=logging.INFO)
        setup_logger("protomtl.test_utils", level=logging.INFO)
        assert len(logger.handlers) == 1
        setup_logger("protomtl.test_utils", level=logging.INFO, log_file=str(log_file))
        logging.getLogger("protomtl.test_utils.child").info("hello")
        for handler in logger.handlers:
            handler.flush()
        assert "hello" in log_file.read_text()
        for handler in list(logger.handlers):
            handler.close()
            logger.removeHandler(handler)


class TestTorchHelpers:
    """Tests for thread configuration and checksums."""

    def test_configure_threads(self, monkeypatch):
        """Test the thread cap comes from PROTO_MTL_THREADS."""
        monkeypatch.setenv("PROTO_MTL_THREADS", "2")
        assert configure_threads() == 2
        assert torch.get_num_threads() == 2
        monkeypatch.setenv("PROTO_MTL_THREADS", "many")
        assert configure_threads() == 1

    def test_state_checksum(self):
        """Test the checksum changes when a parameter changes."""
        layer = torch.nn.Linear(2, 2)
        before = state_checksum(layer)
        assert state_checksum(layer) == before
        with torch.no_grad():
            layer.weight[0, 0] += 1.0
        assert state_checksum(layer) != before
