"""Simulation time parsing and formatting.

The simulation clock counts seconds from an origin at 08:00 of day zero.
Durations are accepted as ISO-8601 (``PT10H``) or shorthand (``10h``,
``90m``, ``1.5h``); instants are rendered as ISO-8601 against a nominal
day-zero date so API payloads stay machine-readable.
"""

from __future__ import annotations

import re
from datetime import datetime, timedelta

# Time-of-day at simulation second zero.  Day rates apply first.
ORIGIN_SECONDS_OF_DAY = 8 * 3600

# Nominal calendar anchor for rendering sim instants; carries no meaning
# beyond making ISO timestamps well-formed.
_DAY_ZERO = datetime(2000, 1, 1)

_SHORTHAND = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(h|hr|hrs|hour|hours|m|min|mins|s|sec|secs)\s*$", re.I)
_ISO_DURATION = re.compile(
    r"^P(?:(?P<days>\d+(?:\.\d+)?)D)?"
    r"(?:T(?:(?P<hours>\d+(?:\.\d+)?)H)?(?:(?P<minutes>\d+(?:\.\d+)?)M)?(?:(?P<seconds>\d+(?:\.\d+)?)S)?)?$",
    re.I,
)


class DurationError(ValueError):
    pass


def parse_duration_hours(text: str | float | int) -> float:
    """Parse a duration into hours."""
    if isinstance(text, (int, float)):
        return float(text)
    raw = text.strip()
    m = _SHORTHAND.match(raw)
    if m:
        value = float(m.group(1))
        unit = m.group(2).lower()[0]
        if unit == "h":
            return value
        if unit == "m":
            return value / 60.0
        return value / 3600.0
    m = _ISO_DURATION.match(raw)
    if m and raw.upper() != "P":
        days = float(m.group("days") or 0)
        hours = float(m.group("hours") or 0)
        minutes = float(m.group("minutes") or 0)
        seconds = float(m.group("seconds") or 0)
        return days * 24 + hours + minutes / 60.0 + seconds / 3600.0
    try:
        return float(raw)
    except ValueError:
        raise DurationError(f"cannot parse duration {text!r}") from None


def format_duration(hours: float) -> str:
    """Render hours as an ISO-8601 duration (second resolution)."""
    total = round(hours * 3600)
    if total < 0:
        return "-" + format_duration(-hours)
    h, rem = divmod(total, 3600)
    m, s = divmod(rem, 60)
    parts = []
    if h:
        parts.append(f"{h}H")
    if m:
        parts.append(f"{m}M")
    if s or not parts:
        parts.append(f"{s}S")
    return "PT" + "".join(parts)


def parse_time_of_day(text: str) -> int:
    """Parse ``HH:MM`` or ``HH:MM:SS`` into seconds of day."""
    parts = text.strip().split(":")
    if len(parts) not in (2, 3) or not all(p.isdigit() for p in parts):
        raise DurationError(f"cannot parse time of day {text!r}")
    h, m = int(parts[0]), int(parts[1])
    s = int(parts[2]) if len(parts) == 3 else 0
    if h > 24 or m >= 60 or s >= 60 or (h == 24 and (m or s)):
        raise DurationError(f"time of day out of range: {text!r}")
    return (h * 3600 + m * 60 + s) % 86400


def format_time_of_day(seconds_of_day: int) -> str:
    h, rem = divmod(int(seconds_of_day) % 86400, 3600)
    m, s = divmod(rem, 60)
    if s:
        return f"{h:02d}:{m:02d}:{s:02d}"
    return f"{h:02d}:{m:02d}"


def time_of_day(t_sim_seconds: float) -> float:
    """Seconds-of-day at a simulation instant."""
    return (ORIGIN_SECONDS_OF_DAY + t_sim_seconds) % 86400.0


def format_instant(t_sim_seconds: float) -> str:
    stamp = _DAY_ZERO + timedelta(seconds=ORIGIN_SECONDS_OF_DAY + t_sim_seconds)
    return stamp.isoformat()
