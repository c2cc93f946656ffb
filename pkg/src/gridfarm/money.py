"""Exact money arithmetic: amounts are integer counts of cents."""

from __future__ import annotations

# Absorbs float noise (~1e-12) so that two algebraically-equal cost
# expressions always land on the same cent.
_ROUND_GUARD = 1e-7


def round_cents(amount: float) -> int:
    """Round a fractional cent amount to whole cents, half away from zero.

    Every path that turns (cpu_hours x rate) into money must go through
    this single function: quote projections and actual charges have to
    agree to the cent.
    """
    if amount >= 0:
        return int(amount + 0.5 + _ROUND_GUARD)
    return -int(-amount + 0.5 + _ROUND_GUARD)


def to_cents(units: float | int | str) -> int:
    """Convert a money amount in units (dollars) to cents."""
    if isinstance(units, str):
        units = float(units)
    return round_cents(units * 100.0)


def to_units(cents: int) -> float:
    return cents / 100.0


def fmt(cents: int) -> str:
    sign = "-" if cents < 0 else ""
    cents = abs(cents)
    return f"{sign}{cents // 100}.{cents % 100:02d}"
