"""Resource selection: deadline-constrained, cost-minimizing.

Candidates are ranked by expected money per job.  The minimal prefix whose
aggregate throughput covers the remaining work within the remaining time
is selected; projected cost comes from filling jobs onto that prefix
cheapest-first to capacity.  Greedy-by-cost is optimal for this divisible
fill model; the test suite checks it against brute-force subset
enumeration rather than assuming it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .economy import CostSchedule
from .money import round_cents

EWMA_ALPHA = 0.3

# Capacity floors use a small epsilon so an exact integer product of
# rate x time is not lost to float representation.
_CAP_EPS = 1e-9


@dataclass(frozen=True)
class ResourceView:
    """A resource as the directory reports it to the scheduler."""
    resource_id: str
    authorized: bool
    capability: float
    queue_type: str  # "interactive" | "batch"
    queue_length: int
    load: float
    reliability: float
    bandwidth_mbps: float
    slots: int
    schedule: CostSchedule
    status: str  # "up" | "down"

    def usable(self) -> bool:
        return self.authorized and self.status == "up"


@dataclass(frozen=True)
class RateEstimate:
    resource_id: str
    jobs_per_hour: float  # per execution slot
    samples: int = 0
    last_update: float = 0.0


def initial_rate(view: ResourceView, reference_rate: float) -> RateEstimate:
    """No-history estimate: capability times the reference machine's rate."""
    return RateEstimate(view.resource_id, view.capability * reference_rate)


def observe_completion(estimate: RateEstimate, wall_hours: float,
                       t_sim: float, alpha: float = EWMA_ALPHA) -> RateEstimate:
    """Fold one observed completion into the moving average."""
    observed = 1.0 / wall_hours if wall_hours > 0 else estimate.jobs_per_hour
    smoothed = alpha * observed + (1.0 - alpha) * estimate.jobs_per_hour
    return replace(estimate, jobs_per_hour=smoothed,
                   samples=estimate.samples + 1, last_update=t_sim)


@dataclass(frozen=True)
class SchedulerSettings:
    expected_job_hours: float = 1.0  # cpu-hours per job on the reference machine
    reference_rate: float = 1.0      # jobs/hour per slot on the reference machine
    cycle_seconds: float = 120.0
    pipeline_factor: float = 2.0
    completion_replan_every: int = 5
    # Plan against a tightened deadline so load drift on in-flight work
    # cannot push the tail past the real one; quotes use the same margin.
    deadline_safety: float = 0.9

    @property
    def cycle_hours(self) -> float:
        return self.cycle_seconds / 3600.0


@dataclass(frozen=True)
class Selected:
    resource_id: str
    quota: int           # in-flight ceiling
    allocation: int      # jobs this resource should absorb before the deadline
    per_job_cost_cents: int
    jobs_per_hour: float  # aggregate over slots


@dataclass(frozen=True)
class ScheduleDecision:
    selected: tuple[Selected, ...]
    projected_finish_hours: float
    projected_cost_cents: int
    feasible_deadline: bool
    feasible_budget: bool
    n_remaining: int
    t_rem_hours: float

    @property
    def selected_ids(self) -> tuple[str, ...]:
        return tuple(s.resource_id for s in self.selected)

    def selection(self) -> tuple[tuple[str, int], ...]:
        return tuple((s.resource_id, s.quota) for s in self.selected)

    def to_json(self) -> dict:
        from .money import to_units
        return {
            "selected": [
                {"resource_id": s.resource_id, "quota": s.quota, "allocation": s.allocation,
                 "per_job_cost": to_units(s.per_job_cost_cents), "jobs_per_hour": s.jobs_per_hour}
                for s in self.selected
            ],
            "projected_finish_hours": self.projected_finish_hours,
            "projected_cost": to_units(self.projected_cost_cents),
            "feasible_deadline": self.feasible_deadline,
            "feasible_budget": self.feasible_budget,
            "n_remaining": self.n_remaining,
            "t_rem_hours": self.t_rem_hours,
        }


EMPTY_DECISION = ScheduleDecision((), 0.0, 0, False, False, 0, 0.0)


def per_job_cost_cents(rate_cents: int, jobs_per_hour: float,
                       settings: SchedulerSettings) -> int:
    """Expected money per job: cpu-hours estimated from the consumption
    rate, priced at the pinned rate."""
    est_cpu_hours = settings.expected_job_hours * settings.reference_rate / jobs_per_hour
    return round_cents(rate_cents * est_cpu_hours)


def estimated_job_cpu_hours(jobs_per_hour: float, settings: SchedulerSettings) -> float:
    return settings.expected_job_hours * settings.reference_rate / jobs_per_hour


def capacity_jobs(jobs_per_hour: float, slots: int, t_rem_hours: float) -> int:
    """Whole jobs a resource can finish within the window, all slots busy."""
    if t_rem_hours <= 0:
        return 0
    return slots * int(math.floor(jobs_per_hour * t_rem_hours + _CAP_EPS))


def drain_hours(n_jobs: int, jobs_per_hour: float, slots: int) -> float:
    if n_jobs <= 0:
        return 0.0
    return math.ceil(n_jobs / slots) / jobs_per_hour


def select_resources(n_remaining: int, t_rem_hours: float,
                     views: list[ResourceView],
                     rates: dict[str, RateEstimate],
                     money_rates_cents: dict[str, int],
                     budget_remaining_cents: int,
                     settings: SchedulerSettings) -> ScheduleDecision:
    """Pick the cheapest resource set that still meets the deadline.

    Candidates sorted by per-job cost (ties by id); the minimal prefix
    with enough capacity is selected.  If no prefix suffices every
    candidate is selected and the deadline flagged infeasible.  If the
    cheapest-first fill exceeds the remaining budget, the most expensive
    member is trimmed while the rest still meets the deadline; when no
    trim restores affordability the deadline-minimal set is kept and the
    budget flagged instead.
    """
    candidates = [v for v in views if v.usable() and v.resource_id in rates]
    if n_remaining <= 0:
        return ScheduleDecision((), 0.0, 0, True, True, 0, t_rem_hours)
    if not candidates or t_rem_hours <= 0:
        return ScheduleDecision((), 0.0, 0, False, False, n_remaining, t_rem_hours)

    ranked = []
    for v in candidates:
        r = rates[v.resource_id].jobs_per_hour
        cost = per_job_cost_cents(money_rates_cents[v.resource_id], r, settings)
        ranked.append((cost, v.resource_id, v, r))
    ranked.sort(key=lambda item: (item[0], item[1]))

    prefix_len = 0
    total_capacity = 0
    for cost, rid, v, r in ranked:
        prefix_len += 1
        total_capacity += capacity_jobs(r, v.slots, t_rem_hours)
        if total_capacity >= n_remaining:
            break
    feasible_deadline = total_capacity >= n_remaining
    if not feasible_deadline:
        prefix_len = len(ranked)

    def build(prefix: list[tuple[int, str, ResourceView, float]]) -> tuple[tuple[Selected, ...], int, float, bool]:
        remaining = n_remaining
        chosen = []
        projected_cost = 0
        finish = 0.0
        for cost, rid, v, r in prefix:
            cap = capacity_jobs(r, v.slots, t_rem_hours)
            take = min(remaining, cap)
            remaining -= take
            quota = max(v.slots, round(r * v.slots * settings.cycle_hours * settings.pipeline_factor))
            chosen.append(Selected(rid, quota, take, cost, r * v.slots))
            projected_cost += take * cost
            if take:
                finish = max(finish, drain_hours(take, r, v.slots))
        return tuple(chosen), projected_cost, finish, remaining == 0

    prefix = ranked[:prefix_len]
    chosen, projected_cost, finish, covered = build(prefix)
    feasible_budget = projected_cost <= budget_remaining_cents
    if feasible_deadline and not feasible_budget:
        # Trim from the expensive end while the rest still covers the work.
        while len(prefix) > 1:
            trial = prefix[:-1]
            t_chosen, t_cost, t_finish, t_covered = build(trial)
            if not t_covered:
                break
            prefix = trial
            chosen, projected_cost, finish = t_chosen, t_cost, t_finish
            if projected_cost <= budget_remaining_cents:
                feasible_budget = True
                break

    return ScheduleDecision(
        selected=chosen,
        projected_finish_hours=finish,
        projected_cost_cents=projected_cost,
        feasible_deadline=feasible_deadline,
        feasible_budget=feasible_budget,
        n_remaining=n_remaining,
        t_rem_hours=t_rem_hours,
    )


# --------------------------------------------------------------------------
# Assignment


@dataclass
class PlacementState:
    """Per-decision bookkeeping: how many jobs each selected resource has
    absorbed (in flight plus finished) since the decision was made."""
    placed: dict[str, int] = field(default_factory=dict)

    @classmethod
    def for_decision(cls, decision: ScheduleDecision, in_flight: dict[str, int]) -> PlacementState:
        return cls(placed={s.resource_id: in_flight.get(s.resource_id, 0) for s in decision.selected})

    def record(self, resource_id: str) -> None:
        self.placed[resource_id] = self.placed.get(resource_id, 0) + 1

    def unrecord(self, resource_id: str) -> None:
        self.placed[resource_id] = max(0, self.placed.get(resource_id, 0) - 1)


def assign(waiting_ordinals: list[int], decision: ScheduleDecision,
           placement: PlacementState, in_flight: dict[str, int]) -> list[tuple[int, str]]:
    """Fill waiting jobs onto selected resources, cheapest first.

    A resource accepts work while it is below both its in-flight quota and
    its decision allocation; jobs go in ordinal order.  Deterministic.
    """
    orders: list[tuple[int, str]] = []
    flying = dict(in_flight)
    queue = iter(waiting_ordinals)
    pending = next(queue, None)
    for sel in decision.selected:
        if pending is None:
            break
        rid = sel.resource_id
        while pending is not None:
            placed = placement.placed.get(rid, 0)
            if flying.get(rid, 0) >= sel.quota or placed >= sel.allocation:
                break
            orders.append((pending, rid))
            flying[rid] = flying.get(rid, 0) + 1
            placement.record(rid)
            pending = next(queue, None)
    return orders


def replan_trigger(event: str, completions_since_replan: int,
                   eta_hours: float | None, t_rem_hours: float,
                   settings: SchedulerSettings) -> bool:
    """Whether selection must re-run now.

    Everything forces a re-plan except completions, which only do every
    K-th time or once the projected finish slips past the deadline.
    """
    if event == "completion":
        if completions_since_replan >= settings.completion_replan_every:
            return True
        return eta_hours is not None and eta_hours > t_rem_hours
    return event in ("tick", "failure", "resource_up", "resource_down",
                     "cost_boundary", "steer")
