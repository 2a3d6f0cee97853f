"""Tests for logging and serialization helpers."""

import logging

import numpy as np

from proto_rectify.errors import ConfigurationError, CorruptFileError, DataError, NumericalError, exit_code_for
from proto_rectify.util import (
    append_jsonl,
    canonical_json,
    content_hash,
    get_basic_logger,
    read_jsonl,
    remove_file_logging,
    setup_file_logging,
)


class TestJson:
    def test_canonical_json_is_ordered_and_compact(self):
        """Sorted keys, no whitespace, numpy scalars as plain numbers."""
        assert canonical_json({"b": 1, "a": np.float32(0.5)}) == '{"a":0.5,"b":1}'

    def test_jsonl_round_trip(self, tmp_path):
        """Appended records read back in order, arrays as lists."""
        path = tmp_path / "log.jsonl"
        append_jsonl(path, {"iteration": 0, "loss": 1.5})
        append_jsonl(path, {"iteration": 1, "values": np.arange(2)})
        assert read_jsonl(path) == [{"iteration": 0, "loss": 1.5}, {"iteration": 1, "values": [0, 1]}]


class TestContentHash:
    def test_order_independent(self, tmp_path):
        """The hash ignores file order."""
        a, b = tmp_path / "a.py", tmp_path / "b.py"
        a.write_text("x = 1\n")
        b.write_text("y = 2\n")
        assert content_hash([a, b]) == content_hash([b, a])

    def test_tracks_content(self, tmp_path):
        """Editing a file changes the hash."""
        a = tmp_path / "a.py"
        a.write_text("x = 1\n")
        before = content_hash([a])
        a.write_text("x = 2\n")
        assert content_hash([a]) != before


class TestFileLogging:
    def test_records_reach_file(self, tmp_path):
        """Package records go to the run log until the handler is removed."""
        logger = get_basic_logger("proto_rectify.test_logging")
        handler = setup_file_logging(tmp_path / "run.log")
        try:
            logger.warning("hello from the loop")
        finally:
            remove_file_logging(handler)
        logger.warning("after removal")
        text = (tmp_path / "run.log").read_text()
        assert "hello from the loop" in text
        assert "after removal" not in text

    def test_logger_is_reused(self):
        """Repeated lookups return one logger with at most one handler."""
        logger = get_basic_logger("proto_rectify.same")
        assert get_basic_logger("proto_rectify.same") is logger is logging.getLogger("proto_rectify.same")
        assert len(logger.handlers) <= 1


def test_exit_codes():
    """Configuration 2, data 3, numerical 4, anything else 1."""
    assert exit_code_for(ConfigurationError("x")) == 2
    assert exit_code_for(CorruptFileError("x")) == 3
    assert exit_code_for(DataError("x")) == 3
    assert exit_code_for(NumericalError("x")) == 4
    assert exit_code_for(RuntimeError("x")) == 1
