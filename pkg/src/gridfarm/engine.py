"""Experiment engine: owns experiment and job lifecycle state, journals
every transition before committing it, and coordinates scheduling,
dispatch, and accounting.

All mutations flow through a single serialized command stream (the
simulation loop's thread); readers get consistent snapshot copies under a
short critical section.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from . import scheduling
from .economy import (BudgetExceeded, BudgetLedger, Quote, RatePinRegistry,
                      build_quote, cost_at)
from .journal import JournalRecord, JournalWriter
from .money import round_cents, to_cents, to_units
from .plan import (DEFAULT_CROSS_PRODUCT_CAP, JobSpec, Plan, count_jobs,
                   expand_jobs, parse_plan, print_plan)
from .scheduling import (EMPTY_DECISION, PlacementState, RateEstimate,
                         ResourceView, ScheduleDecision, SchedulerSettings,
                         initial_rate, observe_completion, replan_trigger,
                         select_resources)
from .timefmt import time_of_day

_DEADLINE_EPS_HOURS = 1e-9


class Phase(str, Enum):
    NEGOTIATING = "negotiating"
    READY = "ready"
    RUNNING = "running"
    PAUSED = "paused"
    COMPLETED = "completed"
    ABORTED = "aborted"
    DEADLINE_MISSED = "deadline_missed"
    BUDGET_EXHAUSTED = "budget_exhausted"


TERMINAL_PHASES = {Phase.COMPLETED, Phase.ABORTED, Phase.DEADLINE_MISSED, Phase.BUDGET_EXHAUSTED}


class JobState(str, Enum):
    WAITING = "waiting"
    SCHEDULED = "scheduled"
    STAGING = "staging"
    RUNNING = "running"
    COMPLETING = "completing"
    DONE = "done"
    FAILED = "failed"
    ABORTED = "aborted"


JOB_TERMINAL = {JobState.DONE, JobState.FAILED, JobState.ABORTED}
IN_FLIGHT = {JobState.SCHEDULED, JobState.STAGING, JobState.RUNNING, JobState.COMPLETING}

LEGAL_TRANSITIONS: dict[JobState, set[JobState]] = {
    JobState.WAITING: {JobState.SCHEDULED, JobState.FAILED, JobState.ABORTED},
    JobState.SCHEDULED: {JobState.STAGING, JobState.FAILED, JobState.ABORTED},
    JobState.STAGING: {JobState.RUNNING, JobState.FAILED, JobState.ABORTED},
    JobState.RUNNING: {JobState.COMPLETING, JobState.DONE, JobState.FAILED, JobState.ABORTED},
    JobState.COMPLETING: {JobState.DONE, JobState.FAILED, JobState.ABORTED},
    JobState.FAILED: {JobState.WAITING},
    JobState.DONE: set(),
    JobState.ABORTED: set(),
}


class EngineError(ValueError):
    pass


class IllegalTransition(EngineError):
    def __init__(self, job_key: str, current: JobState, target: JobState):
        self.current = current
        self.target = target
        super().__init__(f"job {job_key}: illegal transition {current.value} -> {target.value}")


class RecoveryError(ValueError):
    pass


@dataclass
class ExperimentConstraints:
    deadline_hours: float
    budget_cents: int
    user_id: str = "user"

    def __post_init__(self) -> None:
        if self.deadline_hours <= 0:
            raise EngineError("deadline must be positive")
        if self.budget_cents <= 0:
            raise EngineError("budget must be positive")

    def to_json(self) -> dict:
        return {
            "deadline_hours": self.deadline_hours,
            "budget": to_units(self.budget_cents),
            "user_id": self.user_id,
        }


@dataclass(frozen=True)
class RunConfig:
    scheduler: SchedulerSettings = SchedulerSettings()
    retry_cap: int = 3
    charge_failed: bool = False
    charge_integrated: bool = False
    enforce_budget: bool = True
    cross_product_cap: int = DEFAULT_CROSS_PRODUCT_CAP
    # An attempt exceeding its load-adjusted projection by this factor is
    # abandoned and retried elsewhere; stragglers must not hold the
    # deadline hostage.  0 disables.
    straggler_factor: float = 2.0

    def to_json(self) -> dict:
        return {
            "expected_job_hours": self.scheduler.expected_job_hours,
            "reference_rate": self.scheduler.reference_rate,
            "cycle_seconds": self.scheduler.cycle_seconds,
            "pipeline_factor": self.scheduler.pipeline_factor,
            "completion_replan_every": self.scheduler.completion_replan_every,
            "retry_cap": self.retry_cap,
            "charge_failed": self.charge_failed,
            "charge_integrated": self.charge_integrated,
            "enforce_budget": self.enforce_budget,
            "cross_product_cap": self.cross_product_cap,
            "straggler_factor": self.straggler_factor,
        }

    @classmethod
    def from_json(cls, obj: dict) -> RunConfig:
        return cls(
            scheduler=SchedulerSettings(
                expected_job_hours=obj.get("expected_job_hours", 1.0),
                reference_rate=obj.get("reference_rate", 1.0),
                cycle_seconds=obj.get("cycle_seconds", 120.0),
                pipeline_factor=obj.get("pipeline_factor", 2.0),
                completion_replan_every=obj.get("completion_replan_every", 5),
            ),
            retry_cap=obj.get("retry_cap", 3),
            charge_failed=obj.get("charge_failed", False),
            charge_integrated=obj.get("charge_integrated", False),
            enforce_budget=obj.get("enforce_budget", True),
            cross_product_cap=obj.get("cross_product_cap", DEFAULT_CROSS_PRODUCT_CAP),
            straggler_factor=obj.get("straggler_factor", 4.0),
        )


@dataclass
class JobRecord:
    spec: JobSpec
    state: JobState = JobState.WAITING
    assigned_resource: str | None = None
    attempt: int = 0   # prior interrupted or unsuccessful attempts
    failures: int = 0  # real execution failures; only these consume the retry cap
    cost_cents: int = 0
    cost_final: bool = False
    pinned_rate_cents: int | None = None
    dispatched_at: float | None = None
    timeout_at: float | None = None
    timestamps: dict[str, float] = field(default_factory=dict)

    @property
    def ordinal(self) -> int:
        return self.spec.job_id.ordinal

    def to_json(self) -> dict:
        return {
            "ordinal": self.ordinal,
            "binding": self.spec.binding,
            "state": self.state.value,
            "resource": self.assigned_resource,
            "attempt": self.attempt,
            "cost": to_units(self.cost_cents),
            "pinned_rate": to_units(self.pinned_rate_cents) if self.pinned_rate_cents is not None else None,
        }


@dataclass(frozen=True)
class DispatchOrder:
    job_id: str
    ordinal: int
    attempt: int
    resource_id: str
    task: object  # resolved TaskScript
    binding: dict
    pinned_rate_cents: int
    projected_hours: float


@dataclass(frozen=True)
class StatusUpdate:
    ordinal: int
    attempt: int
    phase: str  # staging_in | started | progress | staged_out | completed | failed
    resource_id: str
    cpu_hours: float = 0.0
    wall_hours: float = 0.0
    message: str = ""


STATUS_ORDER = ["staging_in", "started", "progress", "staged_out", "completed", "failed"]

_STATUS_TO_STATE = {
    "staging_in": JobState.STAGING,
    "started": JobState.RUNNING,
    "staged_out": JobState.COMPLETING,
    "completed": JobState.DONE,
    "failed": JobState.FAILED,
}


class Engine:
    """Persistent job control agent for a single experiment."""

    def __init__(self, experiment_id: str, plan: Plan, plan_text: str,
                 constraints: ExperimentConstraints, config: RunConfig,
                 journal: JournalWriter, jobs: list[JobSpec]):
        self.experiment_id = experiment_id
        self.plan = plan
        self.plan_text = plan_text
        self.constraints = constraints
        self.config = config
        self.journal = journal
        self.jobs: dict[int, JobRecord] = {spec.job_id.ordinal: JobRecord(spec) for spec in jobs}
        self.phase = Phase.READY
        self.started_at: float | None = None
        self.finished_at: float | None = None
        self.ledger = BudgetLedger(constraints.budget_cents, enforce=config.enforce_budget)
        self.rates: dict[str, RateEstimate] = {}
        self.pins = RatePinRegistry()
        self.decision: ScheduleDecision = EMPTY_DECISION
        self.placement = PlacementState()
        self.in_flight: dict[str, int] = {}
        self.completions_since_replan = 0
        self.last_quote: Quote | None = None
        self.usage_samples: list[tuple[float, int, int]] = []  # (t, resources in use, running jobs)
        self._replan_reason: str | None = "initial"
        self._commands: queue.Queue = queue.Queue()
        self._lock = threading.RLock()
        self._dispatch_sink: Callable[[DispatchOrder, float], None] | None = None
        self._cancel_sink: Callable[[int, int, str], None] | None = None
        self._budget_rejection = False

    # ------------------------------------------------------------------
    # Construction

    @classmethod
    def create(cls, plan_text: str | Plan, constraints: ExperimentConstraints,
               config: RunConfig, journal: JournalWriter,
               experiment_id: str, plan_name: str = "plan",
               negotiate: bool = False) -> Engine:
        plan = plan_text if isinstance(plan_text, Plan) else parse_plan(plan_text, name=plan_name)
        text = plan_text if isinstance(plan_text, str) else print_plan(plan)
        jobs = expand_jobs(plan, experiment_id, cap=config.cross_product_cap)
        engine = cls(experiment_id, plan, text, constraints, config, journal, jobs)
        if negotiate:
            engine.phase = Phase.NEGOTIATING
        engine._journal("experiment_created", {
            "experiment_id": experiment_id,
            "plan_name": plan.name,
            "plan_text": text,
            "constraints": constraints.to_json(),
            "config": config.to_json(),
            "job_count": len(jobs),
            "phase": engine.phase.value,
        }, t_sim=0.0)
        return engine

    def bind_dispatch(self, sink: Callable[[DispatchOrder, float], None]) -> None:
        self._dispatch_sink = sink

    def bind_cancel(self, sink: Callable[[int, int, str], None]) -> None:
        self._cancel_sink = sink

    # ------------------------------------------------------------------
    # Journal plumbing

    def _journal(self, kind: str, payload: dict, t_sim: float) -> JournalRecord:
        return self.journal.append(kind, payload, t_sim)

    def _set_phase(self, phase: Phase, t: float, reason: str = "") -> None:
        if phase == self.phase:
            return
        self.phase = phase
        if phase in TERMINAL_PHASES:
            self.finished_at = t
        self._journal("phase", {"phase": phase.value, "reason": reason}, t)

    # ------------------------------------------------------------------
    # Commands (thread-safe entry points)

    def submit_command(self, command: str, client_id: str = "local", **kwargs) -> None:
        self._commands.put((command, client_id, kwargs))

    def apply_pending_commands(self, t: float) -> None:
        while True:
            try:
                command, client_id, kwargs = self._commands.get_nowait()
            except queue.Empty:
                return
            self.apply_command(command, t, client_id=client_id, **kwargs)

    def apply_command(self, command: str, t: float, client_id: str = "local", **kwargs) -> None:
        with self._lock:
            if command == "start":
                self.start(t)
            elif command == "pause":
                self.pause(t)
            elif command == "abort":
                self.abort(t, reason=kwargs.get("reason", f"abort requested by {client_id}"))
            elif command == "steer":
                self.steer(t, deadline_hours=kwargs.get("deadline_hours"),
                           budget_cents=kwargs.get("budget_cents"), client_id=client_id)
            else:
                raise EngineError(f"unknown command {command!r}")

    def start(self, t: float) -> None:
        if self.phase not in (Phase.READY, Phase.NEGOTIATING, Phase.PAUSED):
            raise EngineError(f"cannot start from phase {self.phase.value}")
        if self.started_at is None:
            self.started_at = t
        self._set_phase(Phase.RUNNING, t, reason="started")

    def pause(self, t: float) -> None:
        if self.phase != Phase.RUNNING:
            raise EngineError(f"cannot pause from phase {self.phase.value}")
        self._set_phase(Phase.PAUSED, t, reason="paused")

    def abort(self, t: float, reason: str = "aborted") -> None:
        if self.phase in TERMINAL_PHASES:
            raise EngineError(f"experiment already terminal ({self.phase.value})")
        self._halt(Phase.ABORTED, t, reason)

    def steer(self, t: float, deadline_hours: float | None = None,
              budget_cents: int | None = None, client_id: str = "local") -> ExperimentConstraints:
        """Replace deadline and/or budget mid-flight; the next scheduling
        cycle re-plans against the new constraints."""
        if self.phase in TERMINAL_PHASES:
            raise EngineError(f"cannot steer a terminal experiment ({self.phase.value})")
        if deadline_hours is not None:
            if deadline_hours <= 0:
                raise EngineError("deadline must be positive")
            if self.started_at is not None and deadline_hours <= self._elapsed_hours(t):
                raise EngineError("new deadline is already in the past")
            self.constraints.deadline_hours = deadline_hours
        if budget_cents is not None:
            if budget_cents <= 0:
                raise EngineError("budget must be positive")
            self.constraints.budget_cents = budget_cents
            self.ledger.budget_cents = budget_cents
        self._journal("constraints", {
            "constraints": self.constraints.to_json(),
            "client_id": client_id,
        }, t)
        self._replan_reason = "constraints steered"
        return self.constraints

    # ------------------------------------------------------------------
    # Time helpers

    def _elapsed_hours(self, t: float) -> float:
        if self.started_at is None:
            return 0.0
        return (t - self.started_at) / 3600.0

    def t_rem_hours(self, t: float) -> float:
        return self.constraints.deadline_hours - self._elapsed_hours(t)

    def planning_horizon_hours(self, t: float) -> float:
        """Remaining time as the scheduler sees it, safety margin applied."""
        if self.started_at is None:
            return self.constraints.deadline_hours * self.config.scheduler.deadline_safety
        return (self.constraints.deadline_hours * self.config.scheduler.deadline_safety
                - self._elapsed_hours(t))

    def n_remaining(self) -> int:
        return sum(1 for j in self.jobs.values() if j.state not in JOB_TERMINAL)

    def waiting_ordinals(self) -> list[int]:
        return sorted(o for o, j in self.jobs.items() if j.state == JobState.WAITING)

    def eta_hours(self) -> float | None:
        rate = sum(s.jobs_per_hour for s in self.decision.selected)
        if rate <= 0:
            return None
        return self.n_remaining() / rate

    # ------------------------------------------------------------------
    # Rates and money

    def ensure_rate(self, view: ResourceView) -> RateEstimate:
        est = self.rates.get(view.resource_id)
        if est is None:
            est = initial_rate(view, self.config.scheduler.reference_rate)
            self.rates[view.resource_id] = est
        return est

    def money_rate(self, resource_id: str, schedule, t: float) -> int:
        pinned = self.pins.pinned_rate(resource_id, t)
        if pinned is not None:
            return pinned
        return cost_at(schedule, self.constraints.user_id, time_of_day(t))

    # ------------------------------------------------------------------
    # Scheduling cycle

    def on_tick(self, t: float, views: list[ResourceView]) -> None:
        """One scheduling cycle: apply commands, enforce constraints,
        re-plan, and hand out waiting work."""
        with self._lock:
            self.apply_pending_commands(t)
            if self.phase in TERMINAL_PHASES:
                return
            self.set_views(views)
            if self.phase != Phase.RUNNING:
                return
            if self._check_deadline(t):
                return
            if self._check_budget_spent(t):
                return
            self._check_stragglers(t)
            if self.phase in TERMINAL_PHASES:
                return
            usable = [v for v in views if v.usable()]
            if not any(v.authorized for v in views):
                self._halt(Phase.ABORTED, t, "no authorized resources registered")
                return
            self.replan(t, views, reason=self._replan_reason or "cycle")
            self._replan_reason = None
            self.dispatch_round(t, usable)
            if self._check_terminal(t):
                return
            self._check_budget_stalled(t)
            self._sample_usage(t)

    def replan(self, t: float, views: list[ResourceView], reason: str = "cycle") -> ScheduleDecision:
        for v in views:
            if v.usable():
                self.ensure_rate(v)
        money_rates = {v.resource_id: self.money_rate(v.resource_id, v.schedule, t)
                       for v in views if v.usable()}
        budget_rem = self.ledger.budget_cents - self.ledger.committed_cents - self.ledger.reserved_cents
        decision = select_resources(
            n_remaining=self.n_remaining(),
            t_rem_hours=self.planning_horizon_hours(t),
            views=views,
            rates=self.rates,
            money_rates_cents=money_rates,
            budget_remaining_cents=budget_rem,
            settings=self.config.scheduler,
        )
        self.decision = decision
        self.placement = PlacementState.for_decision(decision, self.in_flight)
        self.completions_since_replan = 0
        self._journal("replan", {"reason": reason, "decision": decision.to_json()}, t)
        return decision

    def dispatch_round(self, t: float, views: list[ResourceView]) -> int:
        """Assign waiting jobs per the current decision and push dispatch
        orders; returns how many were dispatched."""
        if self._dispatch_sink is None or self.phase != Phase.RUNNING:
            return 0
        self._budget_rejection = False
        by_id = {v.resource_id: v for v in views}
        orders = scheduling.assign(self.waiting_ordinals(), self.decision,
                                   self.placement, self.in_flight)
        dispatched = 0
        for ordinal, rid in orders:
            view = by_id.get(rid)
            if view is None or not view.usable():
                self.placement.unrecord(rid)
                continue
            job = self.jobs[ordinal]
            rate = self.money_rate(rid, view.schedule, t)
            est = self.rates[rid]
            est_hours = scheduling.estimated_job_cpu_hours(est.jobs_per_hour, self.config.scheduler)
            # Last-moment state check: a job must not start somewhere the
            # current load already projects it past the planning horizon;
            # it waits for a saner placement instead.
            load_adjusted_wall = est_hours / max(1.0 - view.load, 0.05)
            if load_adjusted_wall > self.planning_horizon_hours(t):
                self.placement.unrecord(rid)
                continue
            reservation = round_cents(est_hours * rate)
            if not self.ledger.can_reserve(reservation):
                self.placement.unrecord(rid)
                self._budget_rejection = True
                self._journal("anomaly", {
                    "kind": "dispatch_blocked_by_budget",
                    "job": ordinal, "resource": rid,
                    "reservation": to_units(reservation),
                    "headroom": to_units(self.ledger.headroom_cents()),
                }, t)
                continue
            self.ledger.reserve(self._job_key(ordinal), reservation)
            self.apply_transition(ordinal, JobState.SCHEDULED, t, resource=rid,
                                  event=f"dispatched to {rid}",
                                  extras={"rate": to_units(rate), "reserved": to_units(reservation)})
            job.pinned_rate_cents = rate
            job.dispatched_at = t
            if self.config.straggler_factor > 0:
                job.timeout_at = t + load_adjusted_wall * self.config.straggler_factor * 3600.0
            else:
                job.timeout_at = None
            order = DispatchOrder(
                job_id=str(job.spec.job_id),
                ordinal=ordinal,
                attempt=job.attempt,
                resource_id=rid,
                task=job.spec.task,
                binding=job.spec.binding,
                pinned_rate_cents=rate,
                projected_hours=est_hours,
            )
            self._dispatch_sink(order, t)
            dispatched += 1
        return dispatched

    # ------------------------------------------------------------------
    # Transitions

    def _job_key(self, ordinal: int) -> str:
        return f"{self.experiment_id}/{ordinal}"

    def apply_transition(self, ordinal: int, target: JobState, t: float,
                         resource: str | None = None, event: str = "",
                         extras: dict | None = None) -> JobRecord:
        """Move a job through its state machine; the journal record is
        appended before the in-memory change is considered committed."""
        job = self.jobs[ordinal]
        if target not in LEGAL_TRANSITIONS[job.state]:
            err = IllegalTransition(self._job_key(ordinal), job.state, target)
            self._journal("anomaly", {
                "kind": "illegal_transition",
                "job": ordinal, "from": job.state.value, "to": target.value,
                "event": event,
            }, t)
            raise err
        payload = {
            "job": ordinal,
            "from": job.state.value,
            "to": target.value,
            "resource": resource if resource is not None else job.assigned_resource,
            "attempt": job.attempt,
            "event": event,
        }
        if extras:
            payload.update(extras)
        self._journal("transition", payload, t)
        self._apply_state(job, target, t, resource)
        return job

    def _apply_state(self, job: JobRecord, target: JobState, t: float,
                     resource: str | None = None) -> None:
        prev = job.state
        if prev in IN_FLIGHT and target not in IN_FLIGHT and job.assigned_resource:
            rid = job.assigned_resource
            self.in_flight[rid] = max(0, self.in_flight.get(rid, 0) - 1)
        if target == JobState.SCHEDULED:
            job.assigned_resource = resource
            self.in_flight[resource] = self.in_flight.get(resource, 0) + 1
        job.state = target
        job.timestamps[target.value] = t
        if target == JobState.WAITING:
            job.assigned_resource = None
            job.pinned_rate_cents = None
            job.dispatched_at = None

    # ------------------------------------------------------------------
    # Status updates from the dispatcher

    def on_status(self, update: StatusUpdate, t: float) -> None:
        with self._lock:
            job = self.jobs.get(update.ordinal)
            if job is None:
                return
            if self.phase in TERMINAL_PHASES:
                return
            if update.attempt != job.attempt or job.state in JOB_TERMINAL or job.state == JobState.WAITING:
                self._journal("anomaly", {
                    "kind": "stale_status", "job": update.ordinal,
                    "phase": update.phase, "attempt": update.attempt,
                }, t)
                return
            if update.phase == "progress":
                job.timestamps["progress"] = t
                return
            target = _STATUS_TO_STATE.get(update.phase)
            if target is None:
                self._journal("anomaly", {"kind": "unknown_status", "job": update.ordinal,
                                          "phase": update.phase}, t)
                return
            if target == JobState.DONE and job.state == JobState.RUNNING:
                # Fabric may fold staged_out and completed into one instant.
                self.apply_transition(update.ordinal, JobState.COMPLETING, t,
                                      event="stage-out implied")
            try:
                if target == JobState.DONE:
                    self._complete(job, update, t)
                elif target == JobState.FAILED:
                    self._fail(job, update, t)
                else:
                    self.apply_transition(update.ordinal, target, t, event=update.phase)
                    return
            except IllegalTransition:
                return
            # Only terminal statuses free capacity worth topping up.
            self._after_status(t)

    def _complete(self, job: JobRecord, update: StatusUpdate, t: float) -> None:
        rid = job.assigned_resource or update.resource_id
        rate = job.pinned_rate_cents or 0
        cpu_hours = update.cpu_hours
        amount_due = round_cents(cpu_hours * rate)
        key = self._job_key(job.ordinal)
        try:
            entry = self.ledger.charge(key, rid, cpu_hours, rate, t)
        except BudgetExceeded as exc:
            self.apply_transition(job.ordinal, JobState.DONE, t,
                                  event="completed; charge rejected",
                                  extras={"cpu_hours": cpu_hours, "wall_hours": update.wall_hours})
            job.cost_cents = 0
            job.cost_final = True
            self._observe(rid, update.wall_hours, t)
            self._journal("anomaly", {
                "kind": "charge_rejected_budget", "job": job.ordinal,
                "amount": to_units(amount_due), "detail": str(exc),
            }, t)
            self._halt(Phase.BUDGET_EXHAUSTED, t, "charge would exceed budget")
            return
        job.cost_cents = entry.amount_cents
        job.cost_final = True
        self.apply_transition(job.ordinal, JobState.DONE, t,
                              event=f"completed, cpu_time={cpu_hours:.4f}h",
                              extras={"cpu_hours": cpu_hours, "wall_hours": update.wall_hours,
                                      "cost": to_units(entry.amount_cents)})
        self._journal("charge", {
            "job": job.ordinal, "resource": rid, "cpu_hours": cpu_hours,
            "rate": to_units(rate), "amount": to_units(entry.amount_cents),
            "committed": to_units(self.ledger.committed_cents),
        }, t)
        self._observe(rid, update.wall_hours, t)
        self.completions_since_replan += 1

    def _fail(self, job: JobRecord, update: StatusUpdate, t: float) -> None:
        timed_out = update.message == "attempt timed out"
        rid = job.assigned_resource or update.resource_id
        key = self._job_key(job.ordinal)
        self.ledger.release(key)
        if rid:
            self.placement.unrecord(rid)
        self.apply_transition(job.ordinal, JobState.FAILED, t,
                              event=update.message or "failed",
                              extras={"cpu_hours": update.cpu_hours, "timeout": timed_out})
        job.attempt += 1
        if not timed_out:
            job.failures += 1
        if self.config.charge_failed and update.cpu_hours > 0 and job.pinned_rate_cents:
            try:
                entry = self.ledger.charge(key, rid, update.cpu_hours, job.pinned_rate_cents, t)
                job.cost_cents = entry.amount_cents
                self._journal("charge", {
                    "job": job.ordinal, "resource": rid, "cpu_hours": update.cpu_hours,
                    "rate": to_units(job.pinned_rate_cents), "amount": to_units(entry.amount_cents),
                    "committed": to_units(self.ledger.committed_cents), "partial": True,
                }, t)
            except BudgetExceeded:
                self._halt(Phase.BUDGET_EXHAUSTED, t, "partial charge would exceed budget")
                return
        job.cost_final = True
        if job.failures < self.config.retry_cap:
            # cost_final re-opens: the retry attempt will finalize again.
            job.cost_final = False
            self.apply_transition(job.ordinal, JobState.WAITING, t,
                                  event=f"retry {job.failures}/{self.config.retry_cap}")

    def _observe(self, resource_id: str, wall_hours: float, t: float) -> None:
        est = self.rates.get(resource_id)
        if est is None or wall_hours <= 0:
            return
        self.rates[resource_id] = observe_completion(est, wall_hours, t)

    def _after_status(self, t: float) -> None:
        if self.phase != Phase.RUNNING:
            return
        if self._check_terminal(t):
            return
        views = self._last_views
        if views is None:
            return
        # Completion/failure frees capacity; top up immediately, with a
        # full re-plan only when the trigger rule says so.
        if replan_trigger("completion", self.completions_since_replan,
                          self.eta_hours(), self.planning_horizon_hours(t), self.config.scheduler):
            self.replan(t, views, reason="completion window")
        self.dispatch_round(t, [v for v in views if v.usable()])
        self._check_budget_stalled(t)

    _last_views: list[ResourceView] | None = None

    def set_views(self, views: list[ResourceView]) -> None:
        self._last_views = views

    # ------------------------------------------------------------------
    # Experiment-level checks

    def _check_stragglers(self, t: float) -> None:
        """Abandon attempts that blew far past their projection."""
        for ordinal in sorted(self.jobs):
            job = self.jobs[ordinal]
            if job.state not in IN_FLIGHT or job.timeout_at is None or t <= job.timeout_at:
                continue
            if self._cancel_sink is not None and job.assigned_resource:
                self._cancel_sink(ordinal, job.attempt, job.assigned_resource)
            self.on_status(StatusUpdate(ordinal, job.attempt, "failed",
                                        job.assigned_resource or "",
                                        message="attempt timed out"), t)

    def _check_deadline(self, t: float) -> bool:
        if self._elapsed_hours(t) > self.constraints.deadline_hours + _DEADLINE_EPS_HOURS:
            if any(j.state not in JOB_TERMINAL for j in self.jobs.values()):
                self._halt(Phase.DEADLINE_MISSED, t, "deadline passed with work outstanding")
                return True
        return False

    def _check_budget_spent(self, t: float) -> bool:
        if self.config.enforce_budget and self.ledger.committed_cents >= self.ledger.budget_cents \
                and any(j.state not in JOB_TERMINAL for j in self.jobs.values()):
            self._halt(Phase.BUDGET_EXHAUSTED, t, "budget fully committed")
            return True
        return False

    def _check_budget_stalled(self, t: float) -> bool:
        """Pending work, nothing in flight, and nothing affordable: halt."""
        if not self.config.enforce_budget or not self._budget_rejection:
            return False
        if self.phase != Phase.RUNNING:
            return False
        flying = sum(self.in_flight.values())
        waiting = self.waiting_ordinals()
        if flying == 0 and waiting:
            self._halt(Phase.BUDGET_EXHAUSTED, t, "remaining work unaffordable within budget")
            return True
        return False

    def _check_terminal(self, t: float) -> bool:
        if all(j.state in JOB_TERMINAL for j in self.jobs.values()):
            self._set_phase(Phase.COMPLETED, t,
                            reason="all jobs terminal"
                            + ("; with failures" if self.failed_permanent() else ""))
            return True
        return False

    def _halt(self, phase: Phase, t: float, reason: str) -> None:
        """Terminal stop: in-flight attempts are synthesized as failed and
        pending jobs aborted, none of it charged."""
        for ordinal in sorted(self.jobs):
            job = self.jobs[ordinal]
            if job.state in JOB_TERMINAL:
                continue
            self.ledger.release(self._job_key(ordinal))
            self.apply_transition(ordinal, JobState.ABORTED, t,
                                  event=f"halted: {reason}")
            job.cost_final = True
        self._set_phase(phase, t, reason)

    def failed_permanent(self) -> int:
        return sum(1 for j in self.jobs.values() if j.state == JobState.FAILED)

    # ------------------------------------------------------------------
    # Views for clients

    def _sample_usage(self, t: float) -> None:
        in_use = sum(1 for n in self.in_flight.values() if n > 0)
        running = sum(1 for j in self.jobs.values() if j.state in IN_FLIGHT)
        self.usage_samples.append((t, in_use, running))

    def state_counts(self) -> dict[str, int]:
        counts = {state.value: 0 for state in JobState}
        for job in self.jobs.values():
            counts[job.state.value] += 1
        return counts

    def snapshot(self, t: float) -> dict:
        with self._lock:
            counts = self.state_counts()
            eta = self.eta_hours()
            return {
                "experiment_id": self.experiment_id,
                "plan_name": self.plan.name,
                "phase": self.phase.value,
                "t_sim": t,
                "started_at": self.started_at,
                "finished_at": self.finished_at,
                "elapsed_hours": self._elapsed_hours(t),
                "constraints": self.constraints.to_json(),
                "job_counts": counts,
                "total_jobs": len(self.jobs),
                "in_flight": {rid: n for rid, n in sorted(self.in_flight.items()) if n > 0},
                "resources_in_use": sum(1 for n in self.in_flight.values() if n > 0),
                "ledger": self.ledger.snapshot(),
                "eta_hours": eta,
                "completed_with_failures": self.phase == Phase.COMPLETED and self.failed_permanent() > 0,
                "failed_permanent": self.failed_permanent(),
                "decision": self.decision.to_json() if self.decision.selected else None,
                "quote": self.last_quote.to_json() if self.last_quote else None,
                "seq": self.journal.next_seq - 1,
            }

    def job_table(self, state: str | None = None) -> list[dict]:
        with self._lock:
            rows = [self.jobs[o].to_json() for o in sorted(self.jobs)]
        if state:
            rows = [r for r in rows if r["state"] == state]
        return rows

    def quote(self, t: float, views: list[ResourceView]) -> Quote:
        """Non-committal feasibility answer against current directory state."""
        with self._lock:
            for v in views:
                if v.usable():
                    self.ensure_rate(v)
            money_rates = {v.resource_id: self.money_rate(v.resource_id, v.schedule, t)
                           for v in views if v.usable()}
            n = self.n_remaining()
            t_rem = self.planning_horizon_hours(t)
            budget_rem = self.ledger.budget_cents - self.ledger.committed_cents - self.ledger.reserved_cents
            decision = select_resources(n, t_rem, views, self.rates, money_rates,
                                        budget_rem, self.config.scheduler)
            jobs_per_hour = {v.resource_id: self.rates[v.resource_id].jobs_per_hour
                             for v in views if v.resource_id in self.rates}
            q = build_quote(decision, t_rem, budget_rem, money_rates, jobs_per_hour)
            self.last_quote = q
            self._journal("quote", q.to_json(), t)
            return q


# --------------------------------------------------------------------------
# Recovery


def recover(records: Iterable[JournalRecord], journal: JournalWriter | None = None,
            views: list[ResourceView] | None = None,
            t_recover: float | None = None) -> Engine:
    """Rebuild an engine from committed journal records.

    The reconstructed state matches an uninterrupted engine that processed
    the same committed events, except that jobs stranded in flight are
    reset to waiting with their attempt incremented: the simulated
    fabric's execution handles do not survive a crash, so at-least-once
    re-execution is the contract.  Rate estimates are rebuilt by replaying
    completion observations over the no-history initial values, which is
    why ``views`` should be supplied when the fabric is available.
    """
    records = list(records)
    if not records or records[0].kind != "experiment_created":
        raise RecoveryError("no experiment-created record")
    head = records[0].payload
    config = RunConfig.from_json(head["config"])
    constraints = ExperimentConstraints(
        deadline_hours=head["constraints"]["deadline_hours"],
        budget_cents=to_cents(head["constraints"]["budget"]),
        user_id=head["constraints"]["user_id"],
    )
    sink = journal if journal is not None else JournalWriter(None)
    sink.preload(records)
    plan = parse_plan(head["plan_text"], name=head.get("plan_name", "plan"))
    jobs = expand_jobs(plan, head["experiment_id"], cap=config.cross_product_cap)
    engine = Engine(head["experiment_id"], plan, head["plan_text"], constraints,
                    config, sink, jobs)
    engine.phase = Phase(head.get("phase", "ready"))
    views_by_id = {v.resource_id: v for v in views} if views else {}

    def ensure_estimate(rid: str, wall: float) -> None:
        if rid in engine.rates:
            return
        view = views_by_id.get(rid)
        if view is not None:
            engine.rates[rid] = initial_rate(view, config.scheduler.reference_rate)
        else:
            # No directory view available: seed from the observation itself.
            engine.rates[rid] = RateEstimate(rid, 1.0 / wall if wall > 0 else 1.0)

    last_t = records[-1].t_sim
    for rec in records[1:]:
        payload = rec.payload
        if rec.kind == "phase":
            engine.phase = Phase(payload["phase"])
            if engine.phase == Phase.RUNNING and engine.started_at is None:
                engine.started_at = rec.t_sim
            if engine.phase in TERMINAL_PHASES:
                engine.finished_at = rec.t_sim
        elif rec.kind == "constraints":
            engine.constraints.deadline_hours = payload["constraints"]["deadline_hours"]
            engine.constraints.budget_cents = to_cents(payload["constraints"]["budget"])
            engine.ledger.budget_cents = engine.constraints.budget_cents
        elif rec.kind == "transition":
            job = engine.jobs[payload["job"]]
            target = JobState(payload["to"])
            engine._apply_state(job, target, rec.t_sim, payload.get("resource"))
            if target == JobState.FAILED:
                job.attempt = payload.get("attempt", job.attempt) + 1
                if not payload.get("timeout"):
                    job.failures += 1
            elif target == JobState.SCHEDULED:
                rate = payload.get("rate")
                if rate is not None:
                    job.pinned_rate_cents = to_cents(rate)
                job.dispatched_at = rec.t_sim
            elif target == JobState.DONE:
                job.cost_final = True
                wall = payload.get("wall_hours", 0.0)
                rid = payload.get("resource")
                if rid and wall > 0:
                    ensure_estimate(rid, wall)
                    engine.rates[rid] = observe_completion(engine.rates[rid], wall, rec.t_sim)
        elif rec.kind == "charge":
            key = engine._job_key(payload["job"])
            entry = engine.ledger.charge(key, payload["resource"], payload["cpu_hours"],
                                         to_cents(payload["rate"]), rec.t_sim)
            if not payload.get("partial"):
                engine.jobs[payload["job"]].cost_cents = entry.amount_cents

    t_now = t_recover if t_recover is not None else last_t
    stranded = [o for o in sorted(engine.jobs)
                if engine.jobs[o].state in IN_FLIGHT]
    engine._journal("recovered", {
        "records_replayed": len(records),
        "stranded": stranded,
    }, t_now)
    for ordinal in stranded:
        job = engine.jobs[ordinal]
        engine.ledger.release(engine._job_key(ordinal))
        engine.apply_transition(ordinal, JobState.FAILED, t_now,
                                event="stranded by crash; re-queued")
        job.attempt += 1
        if job.attempt < engine.config.retry_cap:
            engine.apply_transition(ordinal, JobState.WAITING, t_now,
                                    event=f"retry {job.attempt}/{engine.config.retry_cap}")
    engine.in_flight = {rid: n for rid, n in engine.in_flight.items() if n > 0}
    engine._replan_reason = "recovered"
    return engine
