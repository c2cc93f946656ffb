"""Deterministic discrete-event simulation of an experiment on a fabric.

Events are processed in (time, ordinal) order with ordinals assigned at
push, so identical inputs produce byte-identical traces and journals.
The control surface interacts with the run only through the engine's
command queue, which the loop services at every scheduling tick.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import threading
import time as wallclock
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from .economy import Bid, run_tender
from .engine import (Engine, ExperimentConstraints, Phase, RunConfig,
                     StatusUpdate, TERMINAL_PHASES, recover)
from .fabric import Fabric, LOAD_STEP_SECONDS
from .journal import JournalWriter, read_journal
from .money import round_cents, to_units
from .plan import Plan, parse_plan, print_plan
from .timefmt import time_of_day


class SimStalled(RuntimeError):
    pass


class Simulation:
    """One experiment bound to one fabric instance."""

    def __init__(self, fabric: Fabric, plan_text: str | Plan,
                 constraints: ExperimentConstraints,
                 config: RunConfig | None = None,
                 journal_path: str | Path | None = None,
                 trace_path: str | Path | None = None,
                 experiment_id: str | None = None,
                 negotiate: bool = False,
                 engine: Engine | None = None,
                 t_start: float = 0.0):
        self.fabric = fabric
        self.config = config or RunConfig()
        if engine is None:
            plan = plan_text if isinstance(plan_text, Plan) else parse_plan(plan_text)
            text = print_plan(plan) if isinstance(plan_text, Plan) else plan_text
            if experiment_id is None:
                experiment_id = derive_experiment_id(text, fabric, constraints, self.config)
            journal = JournalWriter(journal_path)
            self.engine = Engine.create(plan, constraints, self.config, journal,
                                        experiment_id, plan_name=plan.name,
                                        negotiate=negotiate)
        else:
            self.engine = engine
        self.engine.bind_dispatch(self._submit_order)
        self.engine.bind_cancel(self._cancel_attempt)

        self.now = t_start
        self._heap: list[tuple[float, int, str, dict]] = []
        self._ordinal = 0
        self.trace_path = Path(trace_path) if trace_path else None
        self._trace_fh = open(self.trace_path, "w", encoding="utf-8") if self.trace_path else None
        self.trace: list[dict] = []

        # Per-resource execution state.  Running work carries its remaining
        # cpu-hours so load steps can stretch or relax it in flight.
        self._busy: dict[str, int] = {rid: 0 for rid in fabric.resources}
        self._queues: dict[str, deque] = {rid: deque() for rid in fabric.resources}
        self._dead_attempts: set[tuple[int, int]] = set()
        self._inflight_attempts: dict[str, set[tuple[int, int]]] = {rid: set() for rid in fabric.resources}
        self._running: dict[str, dict[tuple[int, int], list]] = {rid: {} for rid in fabric.resources}
        self._finish_version: dict[tuple[int, int], int] = {}

        self._seed_background(t_start)
        cycle = self.config.scheduler.cycle_seconds
        first_tick = 0.0 if t_start == 0.0 else (int(t_start // cycle) + 1) * cycle
        self._push(first_tick, "schedule_tick", {})
        # Load walks step strictly after the start instant.
        self._push((int(t_start // LOAD_STEP_SECONDS) + 1) * LOAD_STEP_SECONDS, "load_step", {})
        boundary = self._next_cost_boundary(t_start)
        if boundary is not None:
            self._push(boundary, "cost_boundary", {})
        for rid in sorted(fabric.resources):
            for down_h, up_h in fabric.resources[rid].outages:
                if down_h * 3600.0 >= t_start:
                    self._push(down_h * 3600.0, "resource_down", {"resource": rid})
                if up_h * 3600.0 >= t_start:
                    self._push(up_h * 3600.0, "resource_up", {"resource": rid})

    # ------------------------------------------------------------------
    # Event plumbing

    def _push(self, t: float, kind: str, payload: dict) -> None:
        heapq.heappush(self._heap, (t, self._ordinal, kind, payload))
        self._ordinal += 1

    def _emit_trace(self, t: float, ordinal: int, kind: str, payload: dict) -> None:
        entry = {"t": round(t, 6), "ord": ordinal, "kind": kind}
        entry.update(payload)
        self.trace.append(entry)
        if self._trace_fh is not None:
            self._trace_fh.write(json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n")

    def _next_cost_boundary(self, t: float) -> float | None:
        marks = self.fabric.cost_boundaries()
        if not marks:
            return None
        tod = time_of_day(t)
        for mark in marks:
            if mark > tod + 1e-6:
                return t + (mark - tod)
        return t + (86400.0 - tod) + marks[0]

    # ------------------------------------------------------------------
    # Commands

    def start(self) -> None:
        self.engine.submit_command("start")

    def submit_command(self, command: str, client_id: str = "local", **kwargs) -> None:
        self.engine.submit_command(command, client_id=client_id, **kwargs)

    def initial_quote(self):
        return self.engine.quote(self.now, self.fabric.discover(self.engine.constraints.user_id))

    def run_tender(self, slots: int, window_hours: float = 24.0):
        """Solicit sealed bids from every up resource owner and pin the
        accepted rates for the validity window."""
        user = self.engine.constraints.user_id
        bids = []
        for rid in sorted(self.fabric.resources):
            if not self.fabric.up[rid]:
                continue
            res = self.fabric.resources[rid]
            rate = round_cents(self.fabric.posted_rate(rid, user, self.now) * res.markup)
            bids.append(Bid(rid, rate, res.slots, window_hours))
        result = run_tender(slots, window_hours, bids)
        self.engine.pins.pin_tender(result, self.now)
        self.engine.journal.append("tender", {
            "slots_requested": result.slots_requested,
            "covered": result.covered,
            "accepted": [{"resource_id": a.bid.resource_id, "rate": to_units(a.bid.rate_cents),
                          "slots": a.slots_taken, "window_hours": a.bid.window_hours}
                         for a in result.accepted],
        }, self.now)
        return result

    # ------------------------------------------------------------------
    # Main loop

    def run_until(self, t_limit: float | None = None,
                  max_events: int = 5_000_000) -> dict:
        """Process events until the experiment is terminal or the time
        limit is reached; returns a snapshot."""
        events = 0
        while self._heap:
            t_next = self._heap[0][0]
            if t_limit is not None and t_next > t_limit:
                self.now = t_limit
                return self.engine.snapshot(self.now)
            t, ordinal, kind, payload = heapq.heappop(self._heap)
            self.now = t
            self._dispatch_event(t, ordinal, kind, payload)
            events += 1
            if events > max_events:
                raise SimStalled(f"exceeded {max_events} events without termination")
            if self.engine.phase in TERMINAL_PHASES:
                self._emit_trace(t, self._ordinal, "experiment_terminal",
                                 {"phase": self.engine.phase.value})
                self._close_trace()
                return self.engine.snapshot(self.now)
        if self.engine.phase in TERMINAL_PHASES:
            self._close_trace()
            return self.engine.snapshot(self.now)
        raise SimStalled(
            f"event queue exhausted at t={self.now:.1f}s with experiment in "
            f"phase {self.engine.phase.value}")

    def run_paced(self, time_scale: float, stop: threading.Event) -> dict:
        """Service mode: advance sim time at ``time_scale`` sim-seconds per
        wall second (0 = as fast as possible), honoring a stop flag."""
        while self._heap and not stop.is_set():
            t_next = self._heap[0][0]
            if time_scale > 0 and t_next > self.now:
                gap_wall = (t_next - self.now) / time_scale
                slice_wall = min(gap_wall, 0.2)
                wallclock.sleep(slice_wall)
                self.now = min(t_next, self.now + slice_wall * time_scale)
                if self.now < t_next - 1e-9:
                    continue
            t, ordinal, kind, payload = heapq.heappop(self._heap)
            self.now = t
            self._dispatch_event(t, ordinal, kind, payload)
            if self.engine.phase in TERMINAL_PHASES:
                self._emit_trace(t, self._ordinal, "experiment_terminal",
                                 {"phase": self.engine.phase.value})
                break
        self._close_trace()
        return self.engine.snapshot(self.now)

    def _close_trace(self) -> None:
        if self._trace_fh is not None:
            self._trace_fh.close()
            self._trace_fh = None

    def _dispatch_event(self, t: float, ordinal: int, kind: str, payload: dict) -> None:
        self._emit_trace(t, ordinal, kind, payload)
        if kind == "schedule_tick":
            views = self.fabric.discover(self.engine.constraints.user_id,
                                         {rid: len(q) for rid, q in self._queues.items()})
            self.engine.on_tick(t, views)
            if self.engine.phase not in TERMINAL_PHASES:
                self._push(t + self.config.scheduler.cycle_seconds, "schedule_tick", {})
        elif kind == "load_step":
            for rid in sorted(self.fabric.resources):
                before = self.fabric.loads[rid]
                after = self.fabric.step_load(rid)
                if after != before and self._running[rid]:
                    self._retime_running(t, rid, before, after)
            self._push(t + LOAD_STEP_SECONDS, "load_step", {})
        elif kind == "cost_boundary":
            self._force_replan(t, "cost boundary crossed")
            nxt = self._next_cost_boundary(t)
            if nxt is not None:
                self._push(nxt, "cost_boundary", {})
        elif kind == "job_staged":
            self._job_staged(t, payload)
        elif kind == "job_finish":
            self._job_finish(t, payload)
        elif kind == "resource_down":
            self._resource_down(t, payload["resource"])
        elif kind == "resource_up":
            self.fabric.up[payload["resource"]] = True
            self._force_replan(t, f"resource {payload['resource']} up")

    def _force_replan(self, t: float, reason: str) -> None:
        if self.engine.phase != Phase.RUNNING:
            return
        views = self.fabric.discover(self.engine.constraints.user_id,
                                     {rid: len(q) for rid, q in self._queues.items()})
        self.engine.set_views(views)
        self.engine.replan(t, views, reason=reason)
        self.engine.dispatch_round(t, [v for v in views if v.usable()])

    # ------------------------------------------------------------------
    # Executor backend (the fabric side of dispatch)

    def _submit_order(self, order, t: float) -> None:
        rid = order.resource_id
        if not self.fabric.up.get(rid, False):
            self.engine.on_status(StatusUpdate(order.ordinal, order.attempt, "failed",
                                               rid, message="resource unavailable"), t)
            return
        payload_mb = self.fabric.stage_payload_mb * sum(
            1 for s in order.task.steps if s.verb == "stage_in")
        staging_hours = 0.0
        if payload_mb > 0:
            res = self.fabric.resources[rid]
            staging_hours = (payload_mb / res.bandwidth_mbps) / 3600.0
        self.engine.on_status(StatusUpdate(order.ordinal, order.attempt, "staging_in", rid), t)
        self._inflight_attempts[rid].add((order.ordinal, order.attempt))
        key = {"job": order.ordinal, "attempt": order.attempt, "resource": rid}
        if staging_hours > 0:
            self._push(t + staging_hours * 3600.0, "job_staged", key)
        else:
            self._job_staged(t, key)

    def _seed_background(self, t: float) -> None:
        """Pre-populate batch queues with background work.

        On resume the already-drained portion is skipped: background jobs
        sit ahead of everything in FIFO order, so by time t each slot has
        serviced floor(t / mean_service) of them.
        """
        for rid in sorted(self.fabric.resources):
            res = self.fabric.resources[rid]
            if res.queue_type != "batch" or res.background_queue == 0:
                continue
            drained = 0
            if t > 0 and res.mean_service_hours > 0:
                per_slot = int((t / 3600.0) / res.mean_service_hours)
                drained = min(res.background_queue, res.slots * per_slot)
            for _ in range(res.background_queue - drained):
                self._queues[rid].append(("bg", None, t))
        for rid in sorted(self.fabric.resources):
            self._try_start(t, rid)

    def _job_staged(self, t: float, payload: dict) -> None:
        rid = payload["resource"]
        key = (payload["job"], payload["attempt"])
        if key in self._dead_attempts:
            self._dead_attempts.discard(key)
            return
        self._queues[rid].append((payload["job"], payload["attempt"], t))
        self._inflight_attempts[rid].add(key)
        self._try_start(t, rid)

    def _try_start(self, t: float, rid: str) -> None:
        res = self.fabric.resources[rid]
        queue = self._queues[rid]
        while self._busy[rid] < res.slots and queue:
            head, attempt, staged_at = queue.popleft()
            self._busy[rid] += 1
            if head == "bg":
                self._push(t + res.mean_service_hours * 3600.0, "job_finish",
                           {"resource": rid, "background": True})
                continue
            key = (head, attempt)
            if key in self._dead_attempts:
                self._dead_attempts.discard(key)
                self._busy[rid] -= 1
                continue
            self.engine.on_status(StatusUpdate(head, attempt, "started", rid), t)
            cpu_hours = self.config.scheduler.expected_job_hours / res.capability
            self._running[rid][key] = [cpu_hours, t, staged_at, cpu_hours]
            self._schedule_finish(t, rid, key)

    def _schedule_finish(self, t: float, rid: str, key: tuple[int, int]) -> None:
        remaining_cpu = self._running[rid][key][0]
        load = self.fabric.loads[rid]
        wall_left = remaining_cpu / (1.0 - load)
        version = self._finish_version.get(key, 0) + 1
        self._finish_version[key] = version
        self._push(t + wall_left * 3600.0, "job_finish", {
            "job": key[0], "attempt": key[1], "resource": rid, "version": version,
        })

    def _retime_running(self, t: float, rid: str, load_before: float, load_after: float) -> None:
        """Account progress at the old load and reschedule at the new one."""
        for key, entry in list(self._running[rid].items()):
            remaining, last_t, staged_at, total_cpu = entry
            consumed = ((t - last_t) / 3600.0) * (1.0 - load_before)
            entry[0] = max(0.0, remaining - consumed)
            entry[1] = t
            self._schedule_finish(t, rid, key)

    def _job_finish(self, t: float, payload: dict) -> None:
        rid = payload["resource"]
        if payload.get("background"):
            self._busy[rid] = max(0, self._busy[rid] - 1)
            self._try_start(t, rid)
            return
        key = (payload["job"], payload["attempt"])
        if payload.get("version") != self._finish_version.get(key):
            return  # superseded by a load retiming
        entry = self._running[rid].pop(key, None)
        if entry is None:
            return
        self._finish_version.pop(key, None)
        self._busy[rid] = max(0, self._busy[rid] - 1)
        self._inflight_attempts[rid].discard(key)
        if key in self._dead_attempts:
            self._dead_attempts.discard(key)
            self._try_start(t, rid)
            return
        ordinal, attempt = key
        cpu_hours = entry[3]
        wall_hours = (t - entry[2]) / 3600.0
        if self.fabric.draw_failure(rid):
            self.engine.on_status(StatusUpdate(ordinal, attempt, "failed", rid,
                                               cpu_hours=cpu_hours,
                                               message="execution error"), t)
        else:
            self.engine.on_status(StatusUpdate(ordinal, attempt, "staged_out", rid), t)
            self.engine.on_status(StatusUpdate(ordinal, attempt, "completed", rid,
                                               cpu_hours=cpu_hours,
                                               wall_hours=wall_hours, message="ok"), t)
        self._try_start(t, rid)

    def _cancel_attempt(self, ordinal: int, attempt: int, rid: str) -> None:
        """Engine-side abandonment (straggler timeout): free the slot and
        tombstone any pending events for this attempt."""
        key = (ordinal, attempt)
        entry = self._running[rid].pop(key, None)
        if entry is not None:
            self._finish_version.pop(key, None)
            self._busy[rid] = max(0, self._busy[rid] - 1)
            self._inflight_attempts[rid].discard(key)
            self._try_start(self.now, rid)
            return
        if key in self._inflight_attempts[rid]:
            self._inflight_attempts[rid].discard(key)
            queue = self._queues[rid]
            remaining = deque(item for item in queue if (item[0], item[1]) != key)
            if len(remaining) != len(queue):
                self._queues[rid] = remaining
            else:
                self._dead_attempts.add(key)  # still mid-transfer

    def _resource_down(self, t: float, rid: str) -> None:
        self.fabric.up[rid] = False
        # Refresh the engine's view first so the retry machinery does not
        # re-place work on the resource that just vanished.
        self.engine.set_views(self.fabric.discover(
            self.engine.constraints.user_id,
            {r: len(q) for r, q in self._queues.items()}))
        # Everything queued or running there fails now; the waiting retry
        # machinery re-places the work elsewhere.
        victims = []
        for item in list(self._queues[rid]):
            if item[0] != "bg":
                victims.append((item[0], item[1]))
        self._queues[rid].clear()
        for key in sorted(self._inflight_attempts[rid]):
            if key not in victims:
                victims.append(key)
            self._dead_attempts.add(key)
        for key in list(self._running[rid]):
            self._running[rid].pop(key)
            self._finish_version.pop(key, None)
            self._dead_attempts.discard(key)
        self._busy[rid] = 0
        for ordinal, attempt in victims:
            self.engine.on_status(StatusUpdate(ordinal, attempt, "failed", rid,
                                               message="resource unavailable"), t)
        self._force_replan(t, f"resource {rid} down")


def _next_multiple(t: float, step: float) -> float:
    return max(0, math.ceil((t - 1e-9) / step)) * step


def derive_experiment_id(plan_text: str, fabric: Fabric,
                         constraints: ExperimentConstraints,
                         config: RunConfig) -> str:
    digest = hashlib.sha1()
    digest.update(plan_text.encode("utf-8"))
    digest.update(json.dumps(fabric.describe(), sort_keys=True).encode("utf-8"))
    digest.update(json.dumps(constraints.to_json(), sort_keys=True).encode("utf-8"))
    digest.update(json.dumps(config.to_json(), sort_keys=True).encode("utf-8"))
    name = parse_plan(plan_text).name if isinstance(plan_text, str) else "exp"
    return f"{name}-{digest.hexdigest()[:10]}"


# --------------------------------------------------------------------------
# Headless runs


@dataclass
class RunResult:
    sim: Simulation
    quote: object
    snapshot: dict

    @property
    def engine(self) -> Engine:
        return self.sim.engine

    @property
    def phase(self) -> str:
        return self.snapshot["phase"]

    @property
    def finish_hours(self) -> float | None:
        eng = self.sim.engine
        if eng.finished_at is None or eng.started_at is None:
            return None
        return (eng.finished_at - eng.started_at) / 3600.0

    @property
    def total_cost_cents(self) -> int:
        return self.sim.engine.ledger.committed_cents

    def mean_resources_in_use(self) -> float:
        samples = [in_use for _t, in_use, _r in self.sim.engine.usage_samples]
        if not samples:
            return 0.0
        return sum(samples) / len(samples)

    def outcome_multiset(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for job in self.sim.engine.jobs.values():
            counts[job.state.value] = counts.get(job.state.value, 0) + 1
        return dict(sorted(counts.items()))


def run_headless(plan_text: str | Plan, fabric: Fabric,
                 constraints: ExperimentConstraints,
                 config: RunConfig | None = None,
                 journal_path: str | Path | None = None,
                 trace_path: str | Path | None = None,
                 tender_slots: int | None = None,
                 t_limit: float | None = None) -> RunResult:
    """Create, quote, start, and drive an experiment to its terminal phase."""
    sim = Simulation(fabric, plan_text, constraints, config=config,
                     journal_path=journal_path, trace_path=trace_path)
    if tender_slots:
        sim.run_tender(tender_slots)
    quote = sim.initial_quote()
    sim.start()
    snapshot = sim.run_until(t_limit)
    return RunResult(sim=sim, quote=quote, snapshot=snapshot)


# --------------------------------------------------------------------------
# Resume after a crash


def resume(journal_path: str | Path, fabric: Fabric,
           trace_path: str | Path | None = None) -> Simulation:
    """Recover engine state from a journal and continue the simulation.

    The fabric must be rebuilt from the same config and seed; load walks
    are replayed deterministically up to the recovery instant so the
    continued run sees the load trajectories the crashed run would have.
    """
    report = read_journal(journal_path)
    if not report.records:
        raise ValueError("journal holds no committed records")
    t_rec = report.records[-1].t_sim
    # Rewrite the file to exactly the committed prefix before appending.
    with open(journal_path, "w", encoding="utf-8") as fh:
        for rec in report.records:
            fh.write(rec.encode() + "\n")
    steps = int(t_rec // LOAD_STEP_SECONDS)
    for _ in range(steps):
        for rid in sorted(fabric.resources):
            fabric.step_load(rid)
    for rid in sorted(fabric.resources):
        res = fabric.resources[rid]
        for down_h, up_h in res.outages:
            if down_h * 3600.0 <= t_rec < up_h * 3600.0:
                fabric.up[rid] = False
    user = report.records[0].payload["constraints"]["user_id"]
    views = fabric.discover(user)
    engine = recover(report.records, JournalWriter(journal_path), views=views,
                     t_recover=t_rec)
    return Simulation(fabric, engine.plan_text, engine.constraints,
                      config=engine.config, trace_path=trace_path,
                      engine=engine, t_start=t_rec)
