import logging
from dataclasses import dataclass
from typing import Optional

import pytest

from DietaMT.support_functions import (
    PACKAGE_LOGGER,
    ClientError,
    ConfigError,
    DietaError,
    InputError,
    TokenIndexError,
    call_with_retry,
    coerce_fields,
    dataclass_from_mapping,
    debug_print,
    format_key_value_lines,
    parse_key_value_lines,
    read_key_value_file,
    setup_logging,
    write_key_value_file,
)


@dataclass
class Settings:
    workers: int = 1
    rate: float = 0.5
    verbose: bool = False
    endpoint: Optional[str] = None
    name: str = "run"


def test_debug_print(caplog):
    caplog.set_level(logging.DEBUG, logger=PACKAGE_LOGGER)
    debug_print(False, "This should not be logged")
    assert caplog.records == []

    debug_print(True, "This should be logged")
    assert [r.getMessage() for r in caplog.records] == ["This should be logged"]
    assert caplog.records[0].levelno == logging.DEBUG


def test_setup_logging_is_idempotent():
    package_logger = setup_logging(debug=True)
    handlers = list(package_logger.handlers)
    assert package_logger.level == logging.DEBUG
    assert setup_logging().level == logging.INFO
    assert package_logger.handlers == handlers


def test_error_hierarchy():
    assert issubclass(InputError, ValueError)
    assert issubclass(TokenIndexError, IndexError)
    assert issubclass(ClientError, DietaError)


class TestRetry:
    def test_retries_once_then_succeeds(self):
        attempts = []

        def flaky():
            attempts.append(1)
            if len(attempts) == 1:
                raise ClientError("timeout")
            return "ok"

        assert call_with_retry(flaky, backoff=0) == "ok"
        assert len(attempts) == 2

    def test_gives_up_after_retries(self):
        attempts = []

        def broken():
            attempts.append(1)
            raise ClientError("down")

        with pytest.raises(ClientError, match="down"):
            call_with_retry(broken, retries=2, backoff=0)
        assert len(attempts) == 3

    def test_other_errors_are_not_retried(self):
        attempts = []

        def wrong():
            attempts.append(1)
            raise KeyError("bug")

        with pytest.raises(KeyError):
            call_with_retry(wrong, backoff=0)
        assert len(attempts) == 1


class TestKeyValueFiles:
    def test_read(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment\n\nseed = 3\noutput-dir=runs/a=b\n", encoding="utf-8"
        )
        assert read_key_value_file(path) == {"seed": "3", "output_dir": "runs/a=b"}

    def test_bad_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("seed\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="bad.cfg:1"):
            read_key_value_file(path)

    def test_write_then_read(self, tmp_path):
        path = tmp_path / "stats.txt"
        write_key_value_file(path, {"input_pairs": 10, "kept_pairs": 7})
        assert path.read_text(encoding="utf-8") == "input_pairs=10\nkept_pairs=7\n"
        assert read_key_value_file(path) == {"input_pairs": "10", "kept_pairs": "7"}

    def test_in_memory_lines(self):
        text = format_key_value_lines({"magic": "DIETA1", "d_model": 16})
        assert parse_key_value_lines(text) == {"magic": "DIETA1", "d_model": "16"}


class TestCoercion:
    def test_types(self):
        raw = {"workers": "8", "rate": "1e-3", "verbose": "yes", "endpoint": "none"}
        assert coerce_fields(Settings, raw) == {
            "workers": 8,
            "rate": 1e-3,
            "verbose": True,
            "endpoint": None,
        }

    def test_typed_values_pass_through(self):
        raw = {"workers": 2, "endpoint": "http://x"}
        settings = dataclass_from_mapping(Settings, raw)
        assert settings == Settings(workers=2, endpoint="http://x")

    def test_errors(self):
        with pytest.raises(ConfigError, match="boolean"):
            coerce_fields(Settings, {"verbose": "maybe"})
        with pytest.raises(ConfigError, match="workers"):
            coerce_fields(Settings, {"workers": "many"})
        with pytest.raises(ConfigError, match="unknown Settings key"):
            coerce_fields(Settings, {"colour": "red"})
        assert coerce_fields(Settings, {"colour": "red"}, strict=False) == {}
