"""Simulated grid fabric: heterogeneous priced resources, a directory
service for discovery, and deterministic per-resource random streams.

Randomness is split per (resource, purpose) by hashing, so adding a
resource to a fabric never perturbs the draws any other resource sees.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

from .economy import CostSchedule, RateSegment, cost_at, flat_schedule
from .money import to_cents, to_units
from .scheduling import ResourceView
from .timefmt import format_time_of_day, parse_time_of_day, time_of_day

LOAD_STEP_SECONDS = 300.0
LOAD_SIGMA_DEFAULT = 0.05
LOAD_MAX = 0.9


class FabricError(ValueError):
    pass


@dataclass
class SimResource:
    resource_id: str
    capability: float
    slots: int = 1
    queue_type: str = "interactive"  # or "batch"
    background_queue: int = 0        # batch: jobs already queued at start
    mean_service_hours: float = 1.0  # service time of background queue jobs
    bandwidth_mbps: float = 10.0
    failure_rate: float = 0.0        # per-attempt probability, drawn at completion
    markup: float = 1.0              # owner bidding strategy over the posted rate
    schedule: CostSchedule = field(default_factory=lambda: flat_schedule(to_cents(1.0)))
    load_initial: float = 0.0
    load_sigma: float = LOAD_SIGMA_DEFAULT
    reliability: float = 1.0
    outages: tuple[tuple[float, float], ...] = ()  # (from_hours, until_hours)

    def __post_init__(self) -> None:
        if self.slots < 1:
            raise FabricError(f"{self.resource_id}: slots must be >= 1")
        if not (0.0 <= self.failure_rate < 1.0):
            raise FabricError(f"{self.resource_id}: failure rate must be in [0, 1)")
        if self.capability <= 0:
            raise FabricError(f"{self.resource_id}: capability must be positive")
        if self.queue_type not in ("interactive", "batch"):
            raise FabricError(f"{self.resource_id}: unknown queue type {self.queue_type!r}")

    def to_json(self) -> dict:
        return {
            "id": self.resource_id,
            "capability": self.capability,
            "slots": self.slots,
            "queue_type": self.queue_type,
            "background_queue": self.background_queue,
            "mean_service_hours": self.mean_service_hours,
            "bandwidth_mbps": self.bandwidth_mbps,
            "failure_rate": self.failure_rate,
            "markup": self.markup,
            "load_initial": self.load_initial,
            "load_sigma": self.load_sigma,
            "reliability": self.reliability,
            "outages": [list(o) for o in self.outages],
            "cost": {
                "segments": [
                    [format_time_of_day(s.start_s), format_time_of_day(s.end_s), to_units(s.rate_cents)]
                    for s in self.schedule.segments
                ],
                "user_multipliers": dict(sorted(self.schedule.user_multipliers.items())),
            },
        }


@dataclass
class Directory:
    """Registry of grid resources plus per-user authorization.

    With no authorization table every user sees every resource; otherwise a
    user's entry (or the ``*`` default) lists permitted resource ids.
    """
    resources: dict[str, SimResource]
    authorization: dict[str, list[str]] | None = None

    def authorized_ids(self, user_id: str) -> set[str]:
        if self.authorization is None:
            return set(self.resources)
        allowed = self.authorization.get(user_id, self.authorization.get("*"))
        if allowed is None:
            return set()
        if allowed == ["all"]:
            return set(self.resources)
        return {rid for rid in allowed if rid in self.resources}


@dataclass(frozen=True)
class JobTiming:
    cpu_hours: float
    exec_wall_hours: float
    staging_hours: float
    queue_wait_estimate_hours: float

    @property
    def wall_hours(self) -> float:
        return self.exec_wall_hours + self.staging_hours + self.queue_wait_estimate_hours


def job_duration(resource: SimResource, expected_job_hours: float, load: float,
                 payload_mb: float = 0.0, jobs_ahead: int | None = None) -> JobTiming:
    """Formula-level timing: cpu-hours scale with capability, wall time
    stretches with load, plus staging and FIFO wait estimates."""
    cpu_hours = expected_job_hours / resource.capability
    exec_wall = cpu_hours / (1.0 - load)
    staging_hours = (payload_mb / resource.bandwidth_mbps) / 3600.0 if payload_mb > 0 else 0.0
    ahead = resource.background_queue if jobs_ahead is None else jobs_ahead
    wait = ahead * resource.mean_service_hours if resource.queue_type == "batch" else 0.0
    return JobTiming(cpu_hours, exec_wall, staging_hours, wait)


class Fabric:
    """A concrete fabric instance: resources, directory, seeded streams,
    and live per-resource load/status state."""

    def __init__(self, resources: list[SimResource], seed: int,
                 authorization: dict[str, list[str]] | None = None,
                 stage_payload_mb: float = 0.0):
        ids = [r.resource_id for r in resources]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise FabricError(f"duplicate resource ids: {', '.join(dupes)}")
        self.resources: dict[str, SimResource] = {r.resource_id: r for r in sorted(resources, key=lambda r: r.resource_id)}
        self.directory = Directory(self.resources, authorization)
        self.seed = seed
        self.stage_payload_mb = stage_payload_mb
        self.loads: dict[str, float] = {rid: r.load_initial for rid, r in self.resources.items()}
        self.up: dict[str, bool] = {rid: True for rid in self.resources}
        self._streams: dict[tuple[str, str], random.Random] = {}
        self.frozen = False

    def freeze(self) -> None:
        """Disable all variability: zero static load, no failures, empty
        background queues, and rates pinned flat at the origin instant."""
        self.frozen = True
        for rid, res in self.resources.items():
            res.load_sigma = 0.0
            res.load_initial = 0.0
            res.failure_rate = 0.0
            res.background_queue = 0
            res.outages = ()
            pinned = res.schedule.base_rate_at(time_of_day(0.0))
            res.schedule = CostSchedule((RateSegment(0, 86400, pinned),),
                                        dict(res.schedule.user_multipliers))
            self.loads[rid] = 0.0

    def stream(self, resource_id: str, purpose: str) -> random.Random:
        key = (resource_id, purpose)
        rng = self._streams.get(key)
        if rng is None:
            rng = random.Random(_stream_seed(self.seed, resource_id, purpose))
            self._streams[key] = rng
        return rng

    def step_load(self, resource_id: str) -> float:
        """One bounded-random-walk step, reflected at [0, LOAD_MAX]."""
        res = self.resources[resource_id]
        if res.load_sigma <= 0:
            return self.loads[resource_id]
        step = self.stream(resource_id, "load").gauss(0.0, res.load_sigma)
        load = self.loads[resource_id] + step
        if load < 0.0:
            load = -load
        if load > LOAD_MAX:
            load = 2 * LOAD_MAX - load
        load = min(max(load, 0.0), LOAD_MAX)
        self.loads[resource_id] = load
        return load

    def draw_failure(self, resource_id: str) -> bool:
        rate = self.resources[resource_id].failure_rate
        if rate <= 0:
            return False
        return self.stream(resource_id, "failure").random() < rate

    def posted_rate(self, resource_id: str, user_id: str, t_sim: float) -> int:
        return cost_at(self.resources[resource_id].schedule, user_id, time_of_day(t_sim))

    def view(self, resource_id: str, user_id: str, queue_depth: int = 0) -> ResourceView:
        res = self.resources[resource_id]
        return ResourceView(
            resource_id=resource_id,
            authorized=resource_id in self.directory.authorized_ids(user_id),
            capability=res.capability,
            queue_type=res.queue_type,
            queue_length=res.background_queue + queue_depth,
            load=self.loads[resource_id],
            reliability=res.reliability,
            bandwidth_mbps=res.bandwidth_mbps,
            slots=res.slots,
            schedule=res.schedule,
            status="up" if self.up[resource_id] else "down",
        )

    def discover(self, user_id: str, queue_depths: dict[str, int] | None = None) -> list[ResourceView]:
        """Authorized, registered resources with fresh status fields; down
        resources are included but flagged."""
        depths = queue_depths or {}
        allowed = self.directory.authorized_ids(user_id)
        return [self.view(rid, user_id, depths.get(rid, 0))
                for rid in sorted(self.resources) if rid in allowed]

    def cost_boundaries(self) -> list[int]:
        marks: set[int] = set()
        for res in self.resources.values():
            marks.update(res.schedule.boundaries())
        return sorted(marks)

    def describe(self) -> dict:
        return {
            "seed": self.seed,
            "resource_count": len(self.resources),
            "stage_payload_mb": self.stage_payload_mb,
            "resources": [self.resources[rid].to_json() for rid in sorted(self.resources)],
        }


def _stream_seed(seed: int, resource_id: str, purpose: str) -> int:
    digest = hashlib.sha256(f"{seed}:{resource_id}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# --------------------------------------------------------------------------
# Config parsing and synthesis


def _parse_schedule(spec: dict) -> CostSchedule:
    segments = []
    for entry in spec.get("segments", []):
        start, end, rate = entry
        segments.append(RateSegment(parse_time_of_day(start), parse_time_of_day(end) or 86400,
                                    to_cents(rate)))
    multipliers = {str(k): float(v) for k, v in spec.get("user_multipliers", {}).items()}
    return CostSchedule(tuple(segments), multipliers)


def _parse_resource(spec: dict) -> SimResource:
    load_spec = spec.get("load", {})
    return SimResource(
        resource_id=str(spec["id"]),
        capability=float(spec["capability"]),
        slots=int(spec.get("slots", 1)),
        queue_type=spec.get("queue_type", "interactive"),
        background_queue=int(spec.get("background_queue", 0)),
        mean_service_hours=float(spec.get("mean_service_hours", 1.0)),
        bandwidth_mbps=float(spec.get("bandwidth_mbps", 10.0)),
        failure_rate=float(spec.get("failure_rate", 0.0)),
        markup=float(spec.get("markup", 1.0)),
        schedule=_parse_schedule(spec["cost"]) if "cost" in spec else flat_schedule(to_cents(1.0)),
        load_initial=float(load_spec.get("initial", 0.0)),
        load_sigma=float(load_spec.get("sigma", LOAD_SIGMA_DEFAULT)),
        reliability=float(spec.get("reliability", 1.0)),
        outages=tuple((float(a), float(b)) for a, b in spec.get("outages", [])),
    )


def load_fabric(path: str | Path, seed: int) -> Fabric:
    with open(path, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    return fabric_from_config(spec, seed)


def fabric_from_config(spec: dict, seed: int) -> Fabric:
    resources = [_parse_resource(r) for r in spec.get("resources", [])]
    if not resources:
        raise FabricError("fabric config lists no resources")
    authorization = spec.get("users")
    return Fabric(resources, seed=seed,
                  authorization=authorization,
                  stage_payload_mb=float(spec.get("stage_payload_mb", 0.0)))


def synthesize_fabric(count: int, seed: int, stage_payload_mb: float = 0.0) -> Fabric:
    """Generate a representative fabric: capabilities log-uniform in
    [0.5, 4.0], day/night cost schedules with price superlinear in speed
    (fast machines cost more per job), and mixed queue types.

    Resource i's composition depends only on (seed, i), so growing the
    fabric leaves existing resources untouched.
    """
    resources = []
    for i in range(count):
        rng = random.Random(_stream_seed(seed, f"grid{i:03d}", "synth"))
        capability = math.exp(rng.uniform(math.log(0.5), math.log(4.0)))
        day_rate = 4.0 * (capability ** 1.4) * rng.uniform(0.85, 1.15)
        night_rate = day_rate * rng.uniform(0.35, 0.6)
        schedule = CostSchedule((
            RateSegment(8 * 3600, 20 * 3600, to_cents(day_rate)),
            RateSegment(20 * 3600, 8 * 3600, to_cents(night_rate)),
        ))
        batch = rng.random() < 0.3
        resources.append(SimResource(
            resource_id=f"grid{i:03d}",
            capability=round(capability, 4),
            slots=rng.randint(2, 6) if batch else rng.randint(1, 2),
            queue_type="batch" if batch else "interactive",
            background_queue=rng.randint(0, 3) if batch else 0,
            mean_service_hours=round(rng.uniform(0.2, 0.8), 3),
            bandwidth_mbps=round(rng.uniform(1.0, 100.0), 2),
            failure_rate=round(rng.uniform(0.0, 0.04), 4),
            markup=round(rng.uniform(1.0, 1.3), 3),
            schedule=schedule,
            load_initial=round(rng.uniform(0.0, 0.3), 4),
            load_sigma=LOAD_SIGMA_DEFAULT,
            reliability=round(1.0 - rng.uniform(0.0, 0.04), 4),
        ))
    return Fabric(resources, seed=seed, stage_payload_mb=stage_payload_mb)
