# tests/test_core.py
import json
import logging

import pytest
from pydantic import Field, ValidationError

from core.config import Settings
from core.exceptions import (
    ArgumentError,
    ArgumentModel,
    CoevoBaseError,
    ConfigurationError,
    ContractError,
    NonFiniteError,
    ResultsIOError,
    ShapeError,
    TrainingDivergenceError,
    handle_cli_exception,
)
from core.logging import ColorConsoleFormatter, JSONFormatter, get_run_id, set_run_id
from core.tracking import tracked_run


class TestExceptions:
    def test_default_detail(self):
        assert str(ContractError()) == "Internal contract violated."

    def test_context_in_message(self):
        exc = ShapeError("bad width", expected=2, got=3)
        assert exc.context == {"expected": 2, "got": 3}
        assert str(exc) == "bad width (expected=2, got=3)"

    def test_divergence_with_context(self):
        exc = TrainingDivergenceError("nan", last_report="r", epoch=2).with_context(generation=4, couple=1)
        assert exc.context == {"epoch": 2, "generation": 4, "couple": 1}
        assert exc.last_report == "r"

    @pytest.mark.parametrize("exc, code", [
        (ShapeError(), 2),
        (ArgumentError(), 2),
        (NonFiniteError(), 3),
        (TrainingDivergenceError(), 3),
        (ContractError(), 4),
        (ConfigurationError(), 5),
        (ResultsIOError(), 6),
        (KeyboardInterrupt(), 130),
        (RuntimeError("boom"), 1),
    ])
    def test_exit_codes(self, exc, code):
        assert handle_cli_exception(exc) == code

    def test_validation_error_exits_like_a_bad_argument(self):
        with pytest.raises(ValidationError) as info:
            Settings(_env_file=None, WORKERS=0)
        assert handle_cli_exception(info.value) == ArgumentError.exit_code

    def test_argument_model_raises_argument_error(self):
        class Window(ArgumentModel):
            size: int = Field(ge=1)

        with pytest.raises(ArgumentError, match="invalid Window: size") as info:
            Window(size=0)
        assert info.value.context == {"size": 0}
        assert Window(size=3).size == 3

    def test_hierarchy(self):
        for cls in (ShapeError, ArgumentError, NonFiniteError, TrainingDivergenceError,
                    ContractError, ConfigurationError, ResultsIOError):
            assert issubclass(cls, CoevoBaseError)


class TestTracking:
    def test_run_id_restored(self):
        set_run_id("outer")
        with tracked_run("inner", reps=1) as timer:
            assert get_run_id() == "inner"
        assert get_run_id() == "outer"
        assert timer.elapsed_ms >= 0.0

    def test_run_id_restored_on_failure(self):
        set_run_id("outer")
        with pytest.raises(ArgumentError):
            with tracked_run("inner"):
                raise ArgumentError("nope")
        assert get_run_id() == "outer"


def _record(**extra) -> logging.LogRecord:
    record = logging.LogRecord("app.coevo", logging.INFO, __file__, 10, "Generation finished", None, None)
    for key, value in extra.items():
        setattr(record, key, value)
    return record


class TestFormatters:
    def test_json_carries_extras_and_run_id(self):
        set_run_id("exp/rep_001")
        payload = json.loads(JSONFormatter().format(_record(generation=3, accuracy=0.5)))
        assert payload["message"] == "Generation finished"
        assert payload["generation"] == 3
        assert payload["accuracy"] == 0.5
        assert payload["run_id"] == "exp/rep_001"
        set_run_id("")

    def test_console_appends_key_values(self):
        line = ColorConsoleFormatter().format(_record(generation=3))
        assert "Generation finished" in line
        assert "generation=3" in line


class TestSettings:
    def test_defaults(self):
        settings = Settings(_env_file=None)
        assert settings.DEFAULT_PRESET in ("paper", "desk")
        assert settings.WORKERS >= 1

    def test_unknown_preset(self):
        with pytest.raises(ValidationError):
            Settings(_env_file=None, DEFAULT_PRESET="huge")

    def test_log_format_normalised(self):
        assert Settings(_env_file=None, LOG_FORMAT="CONSOLE").LOG_FORMAT == "console"
        with pytest.raises(ValidationError):
            Settings(_env_file=None, LOG_FORMAT="xml")

    def test_debug_forces_debug_level(self):
        assert Settings(_env_file=None, LOG_LEVEL="warning").log_level == "WARNING"
        assert Settings(_env_file=None, DEBUG=True, LOG_LEVEL="WARNING").log_level == "DEBUG"

    def test_debug_flag_reaches_root_logger(self, monkeypatch):
        import core.logging as core_logging
        debug = Settings(_env_file=None, DEBUG=True, LOG_LEVEL="ERROR", LOG_TO_FILE=False)
        monkeypatch.setattr(core_logging, "settings", debug)
        root = logging.getLogger()
        previous_level, previous_handlers = root.level, list(root.handlers)
        try:
            core_logging.setup_logging()
            assert root.level == logging.DEBUG
        finally:
            root.handlers[:] = previous_handlers
            root.setLevel(previous_level)
