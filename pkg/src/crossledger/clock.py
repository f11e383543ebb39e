"""Injectable time sources.

Every component that stamps or compares times takes a clock object instead of
reading the wall clock, so scenarios and tests can freeze and step time
deterministically.
"""

from __future__ import annotations

from datetime import datetime, timedelta, timezone
from typing import Protocol


class Clock(Protocol):
    def now(self) -> datetime: ...


class SystemClock:
    """Real UTC wall clock, used by the long-running service."""

    def now(self) -> datetime:
        return datetime.now(timezone.utc)


class ManualClock:
    """Clock that only moves when told to. Starts at a fixed instant."""

    def __init__(self, start: datetime | None = None):
        self._now = start or datetime(2021, 6, 1, 12, 0, 0, tzinfo=timezone.utc)
        if self._now.tzinfo is None:
            self._now = self._now.replace(tzinfo=timezone.utc)

    def now(self) -> datetime:
        return self._now

    def advance(self, seconds: float) -> datetime:
        if seconds < 0:
            raise ValueError("clock cannot move backwards")
        self._now += timedelta(seconds=seconds)
        return self._now


def epoch_millis(dt: datetime) -> int:
    return int(dt.timestamp() * 1000)


def compact_timestamp(dt: datetime) -> str:
    """Second-resolution timestamp string used inside exchange records."""
    return dt.strftime("%Y%m%dT%H%M%S")


def compact_id(dt: datetime) -> str:
    """Millisecond-resolution identifier prefix (compact timestamp + 3 digits)."""
    return dt.strftime("%Y%m%dT%H%M%S") + f"{dt.microsecond // 1000:03d}"
