"""Status codes and the exception type shared by every component."""
from __future__ import annotations

import enum


class Status(enum.IntEnum):
    SUCCESS = 0
    TRUNCATED = 1
    LENGTH_MISMATCH = 2
    IO_ERROR = 3
    NO_SPACE = 4
    NOT_FOUND = 5
    RING_FULL = 6
    TABLE_FULL = 7
    BAD_OP_KIND = 8
    OUT_OF_RANGE = 9
    NAME_EXISTS = 10
    RECORD_TOO_LARGE = 11
    BACKPRESSURE = 12
    CORRUPT_METADATA = 13
    TIMEOUT = 14
    CONFIG_INVALID = 15
    NOT_IN_GROUP = 16
    PENDING = 255


class DDSError(Exception):
    """An operation failed with a :class:`Status` other than SUCCESS."""

    def __init__(self, status: Status, message: str = "") -> None:
        self.status = Status(status)
        super().__init__(f"{self.status.name}: {message}" if message else self.status.name)


class InvariantViolation(AssertionError):
    """Raised by runtime self-checks; the CLI maps it to a nonzero exit."""
