"""Pricing machinery: time-of-day cost schedules, the budget ledger,
pre-run quotes, and sealed-bid tenders with rate pinning."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .money import round_cents, to_units
from .timefmt import format_time_of_day

DAY_SECONDS = 86400


class ScheduleError(ValueError):
    pass


class LedgerError(ValueError):
    pass


class BudgetExceeded(LedgerError):
    def __init__(self, amount_cents: int, headroom_cents: int):
        self.amount_cents = amount_cents
        self.headroom_cents = headroom_cents
        super().__init__(
            f"charge of {to_units(amount_cents)} exceeds remaining budget {to_units(headroom_cents)}")


class DoubleCharge(LedgerError):
    def __init__(self, job_key: str):
        self.job_key = job_key
        super().__init__(f"job {job_key} already charged")


@dataclass(frozen=True)
class RateSegment:
    """Daily [start, end) window at a rate in cents per cpu-hour.

    A segment whose end is not after its start wraps past midnight.
    """
    start_s: int
    end_s: int
    rate_cents: int

    def intervals(self) -> list[tuple[int, int]]:
        if self.start_s < self.end_s:
            return [(self.start_s, self.end_s)]
        return [(self.start_s, DAY_SECONDS), (0, self.end_s)]


@dataclass(frozen=True)
class CostSchedule:
    segments: tuple[RateSegment, ...]
    user_multipliers: dict[str, float] = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        covered: list[tuple[int, int]] = []
        for seg in self.segments:
            if seg.rate_cents <= 0:
                raise ScheduleError(f"rate must be positive, got {seg.rate_cents} cents")
            if not (0 <= seg.start_s < DAY_SECONDS and 0 <= seg.end_s <= DAY_SECONDS):
                raise ScheduleError("segment bounds must lie within the day")
            covered.extend(seg.intervals())
        covered.sort()
        cursor = 0
        for lo, hi in covered:
            if lo < cursor:
                raise ScheduleError(f"overlapping segments at {format_time_of_day(lo)}")
            if lo > cursor:
                raise ScheduleError(f"gap in schedule at {format_time_of_day(cursor)}")
            cursor = hi
        if cursor != DAY_SECONDS:
            raise ScheduleError(f"gap in schedule at {format_time_of_day(cursor)}")
        for user, mult in self.user_multipliers.items():
            if mult <= 0:
                raise ScheduleError(f"multiplier for {user!r} must be positive")

    def boundaries(self) -> list[int]:
        """Distinct seconds-of-day at which the rate may change."""
        marks = set()
        for seg in self.segments:
            marks.add(seg.start_s % DAY_SECONDS)
            marks.add(seg.end_s % DAY_SECONDS)
        return sorted(marks)

    def base_rate_at(self, seconds_of_day: float) -> int:
        tod = seconds_of_day % DAY_SECONDS
        for seg in self.segments:
            for lo, hi in seg.intervals():
                if lo <= tod < hi:
                    return seg.rate_cents
        raise ScheduleError("schedule does not cover the day")  # unreachable after validation


def flat_schedule(rate_cents: int, user_multipliers: dict[str, float] | None = None) -> CostSchedule:
    return CostSchedule((RateSegment(0, DAY_SECONDS, rate_cents),), dict(user_multipliers or {}))


def cost_at(schedule: CostSchedule, user_id: str, seconds_of_day: float) -> int:
    """Effective rate (cents per cpu-hour) for a user at a time of day.

    Segment boundaries are right-open: the boundary instant belongs to
    the segment that starts there.
    """
    base = schedule.base_rate_at(seconds_of_day)
    mult = schedule.user_multipliers.get(user_id, 1.0)
    if mult == 1.0:
        return base
    return round_cents(base * mult)


# --------------------------------------------------------------------------
# Ledger


@dataclass(frozen=True)
class LedgerEntry:
    seq: int
    t_sim: float
    job_key: str
    resource_id: str
    cpu_hours: float
    rate_cents: int
    amount_cents: int


class BudgetLedger:
    """Append-only record of money committed, plus in-flight reservations.

    ``committed + reserved`` is the value the scheduler checks against the
    budget ceiling; reservations are conservative projections released
    when the actual charge lands.
    """

    def __init__(self, budget_cents: int, enforce: bool = True):
        if budget_cents <= 0:
            raise LedgerError("budget must be positive")
        self.budget_cents = budget_cents
        self.enforce = enforce
        self.entries: list[LedgerEntry] = []
        self.committed_cents = 0
        self._reservations: dict[str, int] = {}
        self._charged: set[str] = set()

    @property
    def reserved_cents(self) -> int:
        return sum(self._reservations.values())

    def headroom_cents(self) -> int:
        return self.budget_cents - self.committed_cents - self.reserved_cents

    def can_reserve(self, amount_cents: int) -> bool:
        return not self.enforce or amount_cents <= self.headroom_cents()

    def reserve(self, job_key: str, amount_cents: int) -> None:
        if amount_cents < 0:
            raise LedgerError("reservation must be non-negative")
        if self.enforce and amount_cents > self.headroom_cents():
            raise BudgetExceeded(amount_cents, self.headroom_cents())
        self._reservations[job_key] = amount_cents

    def release(self, job_key: str) -> None:
        self._reservations.pop(job_key, None)

    def charge(self, job_key: str, resource_id: str, cpu_hours: float,
               rate_cents: int, t_sim: float) -> LedgerEntry:
        if cpu_hours < 0:
            raise LedgerError("cpu_hours must be non-negative")
        if job_key in self._charged:
            raise DoubleCharge(job_key)
        amount = round_cents(cpu_hours * rate_cents)
        if self.enforce and self.committed_cents + amount > self.budget_cents:
            raise BudgetExceeded(amount, self.budget_cents - self.committed_cents)
        self.release(job_key)
        entry = LedgerEntry(
            seq=len(self.entries),
            t_sim=t_sim,
            job_key=job_key,
            resource_id=resource_id,
            cpu_hours=cpu_hours,
            rate_cents=rate_cents,
            amount_cents=amount,
        )
        self.entries.append(entry)
        self.committed_cents += amount
        self._charged.add(job_key)
        return entry

    def recompute_committed(self) -> int:
        return sum(e.amount_cents for e in self.entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["seq", "t_sim", "job_id", "resource_id", "cpu_hours", "rate", "amount"])
        for e in self.entries:
            writer.writerow([e.seq, f"{e.t_sim:.3f}", e.job_key, e.resource_id,
                             f"{e.cpu_hours:.6f}", to_units(e.rate_cents), to_units(e.amount_cents)])
        return buf.getvalue()

    def snapshot(self) -> dict:
        return {
            "budget": to_units(self.budget_cents),
            "committed": to_units(self.committed_cents),
            "reserved": to_units(self.reserved_cents),
            "entries": len(self.entries),
            "enforce": self.enforce,
        }


# --------------------------------------------------------------------------
# Quotes


@dataclass(frozen=True)
class Quote:
    feasible: bool
    projected_cost_cents: int
    projected_finish_hours: float
    assumed_resources: tuple[tuple[str, int, float], ...]  # (id, rate cents, jobs/h)
    reason: str = ""

    def to_json(self) -> dict:
        return {
            "feasible": self.feasible,
            "projected_cost": to_units(self.projected_cost_cents),
            "projected_finish_hours": self.projected_finish_hours,
            "assumed_resources": [
                {"resource_id": rid, "rate": to_units(rate), "jobs_per_hour": jph}
                for rid, rate, jph in self.assumed_resources
            ],
            "reason": self.reason,
        }


def build_quote(decision, deadline_hours: float, budget_cents: int,
                rates_cents: dict[str, int], jobs_per_hour: dict[str, float]) -> Quote:
    """Fold a schedule decision into the pre-run feasibility answer."""
    feasible = decision.feasible_deadline and decision.feasible_budget
    reason = ""
    if not decision.selected:
        reason = "no usable resources"
    elif not decision.feasible_deadline:
        reason = "insufficient capacity for the deadline"
    elif not decision.feasible_budget:
        reason = "projected cost exceeds budget"
    assumed = tuple(
        (sel.resource_id, rates_cents[sel.resource_id], jobs_per_hour[sel.resource_id])
        for sel in decision.selected
    )
    return Quote(
        feasible=feasible,
        projected_cost_cents=decision.projected_cost_cents,
        projected_finish_hours=decision.projected_finish_hours,
        assumed_resources=assumed,
        reason=reason,
    )


# --------------------------------------------------------------------------
# Tenders


@dataclass(frozen=True)
class Bid:
    resource_id: str
    rate_cents: int
    capacity_slots: int
    window_hours: float

    def __post_init__(self) -> None:
        if self.rate_cents <= 0:
            raise ValueError("offered rate must be positive")
        if self.capacity_slots < 1:
            raise ValueError("offered capacity must be at least one slot")


@dataclass(frozen=True)
class AcceptedBid:
    bid: Bid
    slots_taken: int


@dataclass(frozen=True)
class TenderResult:
    accepted: tuple[AcceptedBid, ...]
    covered: bool
    slots_requested: int

    def slots_covered(self) -> int:
        return sum(a.slots_taken for a in self.accepted)


class NoCapacityOffered(ValueError):
    pass


def run_tender(slots_needed: int, min_window_hours: float, bids: list[Bid]) -> TenderResult:
    """Sealed-bid, single round: accept cheapest bids until demand is covered.

    Ties break by resource id.  Bids whose validity window is shorter than
    the requested window are disregarded.  If aggregate capacity falls
    short the acceptance is partial and flagged.
    """
    if slots_needed < 1:
        raise ValueError("must request at least one slot")
    usable = [b for b in bids if b.window_hours >= min_window_hours]
    if not usable:
        raise NoCapacityOffered("no capacity offered")
    usable.sort(key=lambda b: (b.rate_cents, b.resource_id))
    accepted: list[AcceptedBid] = []
    remaining = slots_needed
    for bid in usable:
        if remaining <= 0:
            break
        take = min(bid.capacity_slots, remaining)
        accepted.append(AcceptedBid(bid, take))
        remaining -= take
    return TenderResult(tuple(accepted), covered=remaining <= 0, slots_requested=slots_needed)


class RatePinRegistry:
    """Rates pinned by accepted bids for their validity window; these
    override the cost schedule for the experiment that ran the tender."""

    def __init__(self) -> None:
        self._pins: dict[str, tuple[int, float, float]] = {}

    def pin(self, resource_id: str, rate_cents: int, t_from_s: float, t_until_s: float) -> None:
        self._pins[resource_id] = (rate_cents, t_from_s, t_until_s)

    def pin_tender(self, result: TenderResult, t_sim: float) -> None:
        for acc in result.accepted:
            self.pin(acc.bid.resource_id, acc.bid.rate_cents,
                     t_sim, t_sim + acc.bid.window_hours * 3600.0)

    def pinned_rate(self, resource_id: str, t_sim: float) -> int | None:
        pin = self._pins.get(resource_id)
        if pin is None:
            return None
        rate, t_from, t_until = pin
        if t_from <= t_sim < t_until:
            return rate
        return None

    def as_json(self) -> dict:
        return {rid: {"rate": to_units(rate), "from_s": f, "until_s": u}
                for rid, (rate, f, u) in sorted(self._pins.items())}
