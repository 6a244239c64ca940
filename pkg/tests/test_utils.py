import importlib
import logging
import math

import pytest

import globals as settings
import utils
from utils import content_hash, normalize_angle


def _reload():
    importlib.reload(settings)
    importlib.reload(utils)


@pytest.fixture
def env(monkeypatch):
    monkeypatch.delenv("OPEN_LOG", raising=False)
    monkeypatch.delenv("LASTMILE_LOG", raising=False)
    yield monkeypatch
    monkeypatch.undo()
    _reload()
    utils.setup_logging()


class TestLogLevel:
    def test_open_log_overrides_level(self, env):
        env.setenv("OPEN_LOG", "DEBUG")
        _reload()
        assert settings.LOG_LEVEL == "DEBUG"
        utils.setup_logging()
        assert logging.getLogger().level == logging.DEBUG

    def test_open_log_wins_over_fallback(self, env):
        env.setenv("OPEN_LOG", "WARNING")
        env.setenv("LASTMILE_LOG", "DEBUG")
        _reload()
        assert settings.LOG_LEVEL == "WARNING"

    def test_fallback_and_default(self, env):
        env.setenv("LASTMILE_LOG", "ERROR")
        _reload()
        assert settings.LOG_LEVEL == "ERROR"
        env.delenv("LASTMILE_LOG")
        _reload()
        assert settings.LOG_LEVEL == "INFO"

    def test_explicit_level_beats_env(self, env):
        env.setenv("OPEN_LOG", "DEBUG")
        _reload()
        utils.setup_logging("error")
        assert logging.getLogger().level == logging.ERROR


def test_normalize_angle():
    assert normalize_angle(3 * math.pi) == pytest.approx(math.pi)
    assert normalize_angle(-math.pi) == pytest.approx(math.pi)
    assert normalize_angle(0.5) == 0.5


def test_content_hash_canonical():
    assert content_hash({"b": 1, "a": [1.0, 2]}) == content_hash({"a": [1.0, 2], "b": 1})
    assert content_hash({"a": 1}) != content_hash({"a": 2})
