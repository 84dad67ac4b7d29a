"""Instants and durations.

All instants are integer milliseconds since the Unix epoch (UTC); all
durations are integer milliseconds.
"""
from __future__ import annotations

import re
from datetime import datetime, timezone

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)

_DURATION_RE = re.compile(r"^\s*(\d+)\s*(ms|min|s|h)\s*$")
_UNITS = {"ms": 1, "s": 1000, "min": 60_000, "h": 3_600_000}


def parse_instant(text: str) -> int:
    """Parse an ISO-8601 instant; naive values are taken as UTC."""
    s = text.strip()
    if s.endswith("Z") or s.endswith("z"):
        s = s[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(s)
    except ValueError as exc:
        raise ValueError(f"invalid ISO-8601 instant: {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    delta = dt - _EPOCH
    return (delta.days * 86_400 + delta.seconds) * 1000 + delta.microseconds // 1000


def format_instant(ms: int) -> str:
    days, rem = divmod(int(ms), 86_400_000)
    dt = datetime.fromordinal(_EPOCH.toordinal() + days)
    secs, millis = divmod(rem, 1000)
    h, secs = divmod(secs, 3600)
    m, s = divmod(secs, 60)
    return f"{dt.year:04d}-{dt.month:02d}-{dt.day:02d}T{h:02d}:{m:02d}:{s:02d}.{millis:03d}Z"


def parse_duration(text: str) -> int:
    m = _DURATION_RE.match(text)
    if not m:
        raise ValueError(f"invalid duration: {text!r} (expected <int>(ms|s|min|h))")
    return int(m.group(1)) * _UNITS[m.group(2)]


def format_duration(ms: int) -> str:
    for unit in ("h", "min", "s"):
        size = _UNITS[unit]
        if ms and ms % size == 0:
            return f"{ms // size}{unit}"
    return f"{ms}ms"
