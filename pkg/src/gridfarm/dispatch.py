"""Dispatch: turn orders into job-wrapper scripts and drive them against
an executor backend, reporting status back to the engine.

Two backends share one interface: the simulated fabric (default) and a
local-process executor that really runs the commands in a scratch
directory, which keeps the wrapper format honest without needing a grid.
"""

from __future__ import annotations

import shlex
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

from .engine import DispatchOrder, StatusUpdate
from .plan import PLACEHOLDER_RE, TaskScript

WRAPPER_VERBS = ("stage_in", "substitute", "execute", "stage_out", "report")


class WrapperError(ValueError):
    pass


@dataclass(frozen=True)
class WrapperCommand:
    verb: str
    args: tuple[str, ...]

    def render(self) -> str:
        if not self.args:
            return self.verb
        return f"{self.verb} {' '.join(shlex.quote(a) for a in self.args)}"


@dataclass(frozen=True)
class WrapperScript:
    """Staging commands, one contiguous execute block, stage-outs, and a
    terminal report."""
    commands: tuple[WrapperCommand, ...]

    def render(self) -> str:
        return "\n".join(c.render() for c in self.commands) + "\n"


def build_wrapper(task: TaskScript) -> WrapperScript:
    """Deterministic translation of task steps into wrapper primitives.

    Staging (and template substitution) first, then the execute block,
    then explicit stage-outs plus any declared outputs not already staged,
    and finally the report step.
    """
    for step in task.steps:
        for arg in step.args:
            match = PLACEHOLDER_RE.search(arg)
            if match:
                raise WrapperError(f"unresolved placeholder ${{{match.group(1)}}} in {step.verb} step")
    stage_in = [WrapperCommand(s.verb, s.args) for s in task.steps if s.verb in ("stage_in", "substitute")]
    executes = [WrapperCommand("execute", s.args) for s in task.steps if s.verb == "execute"]
    if not executes:
        raise WrapperError("task has no execute step")
    stage_out = [WrapperCommand("stage_out", s.args) for s in task.steps if s.verb == "stage_out"]
    staged = {c.args[0] for c in stage_out}
    for name in task.declared_outputs():
        if name not in staged:
            stage_out.append(WrapperCommand("stage_out", (name, name)))
    return WrapperScript(tuple(stage_in + executes + stage_out + [WrapperCommand("report", ())]))


def parse_wrapper(text: str) -> WrapperScript:
    commands = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = shlex.split(line)
        verb, args = parts[0], tuple(parts[1:])
        if verb not in WRAPPER_VERBS:
            raise WrapperError(f"line {lineno}: unknown wrapper verb {verb!r}")
        commands.append(WrapperCommand(verb, args))
    script = WrapperScript(tuple(commands))
    _validate_shape(script)
    return script


def _validate_shape(script: WrapperScript) -> None:
    verbs = [c.verb for c in script.commands]
    if not verbs or verbs[-1] != "report":
        raise WrapperError("wrapper must end with report")
    exec_idx = [i for i, v in enumerate(verbs) if v == "execute"]
    if not exec_idx:
        raise WrapperError("wrapper has no execute block")
    if exec_idx[-1] - exec_idx[0] != len(exec_idx) - 1:
        raise WrapperError("execute commands must form one contiguous block")
    for i, v in enumerate(verbs):
        if v in ("stage_in", "substitute") and i > exec_idx[0]:
            raise WrapperError("staging must precede the execute block")
        if v == "stage_out" and i < exec_idx[-1]:
            raise WrapperError("stage_out must follow the execute block")


# --------------------------------------------------------------------------
# Executor backends

StatusSink = Callable[[StatusUpdate, float], None]


class Executor(Protocol):
    def submit(self, order: DispatchOrder, t: float) -> None: ...


class LocalProcessExecutor:
    """Runs wrapper scripts as real subprocesses in a scratch directory.

    Intended for end-to-end demos and tests; stage_in copies from the
    plan directory, stage_out copies into the results directory, and
    cpu-hours are measured wall time.
    """

    def __init__(self, sink: StatusSink, workdir: str | Path,
                 source_dir: str | Path | None = None,
                 results_dir: str | Path | None = None,
                 timeout_seconds: float = 60.0):
        self.sink = sink
        self.workdir = Path(workdir)
        self.source_dir = Path(source_dir) if source_dir else self.workdir
        self.results_dir = Path(results_dir) if results_dir else self.workdir / "results"
        self.timeout_seconds = timeout_seconds

    def submit(self, order: DispatchOrder, t: float) -> None:
        wrapper = build_wrapper(order.task)
        scratch = self.workdir / f"job-{order.ordinal:06d}-a{order.attempt}"
        scratch.mkdir(parents=True, exist_ok=True)
        self.results_dir.mkdir(parents=True, exist_ok=True)
        started = time.monotonic()
        self.sink(StatusUpdate(order.ordinal, order.attempt, "staging_in",
                               order.resource_id), t)
        try:
            binding = order.binding
            for cmd in wrapper.commands:
                if cmd.verb == "stage_in":
                    src, dst = cmd.args
                    (scratch / dst).write_bytes((self.source_dir / src).read_bytes())
                elif cmd.verb == "substitute":
                    src, dst = cmd.args
                    template = (scratch / src).read_text(encoding="utf-8")
                    (scratch / dst).write_text(_substitute(template, binding), encoding="utf-8")
            self.sink(StatusUpdate(order.ordinal, order.attempt, "started",
                                   order.resource_id), t)
            for cmd in wrapper.commands:
                if cmd.verb != "execute":
                    continue
                proc = subprocess.run(cmd.args[0], shell=True, cwd=scratch,
                                      capture_output=True, text=True,
                                      timeout=self.timeout_seconds)
                if proc.returncode != 0:
                    raise RuntimeError(
                        f"execute failed (rc={proc.returncode}): {proc.stderr.strip()[:200]}")
            for cmd in wrapper.commands:
                if cmd.verb == "stage_out":
                    src, dst = cmd.args
                    target = self.results_dir / dst
                    if dst.endswith("/"):
                        target = self.results_dir / dst / src
                    target.parent.mkdir(parents=True, exist_ok=True)
                    target.write_bytes((scratch / src).read_bytes())
            self.sink(StatusUpdate(order.ordinal, order.attempt, "staged_out",
                                   order.resource_id), t)
        except Exception as exc:
            cpu = (time.monotonic() - started) / 3600.0
            self.sink(StatusUpdate(order.ordinal, order.attempt, "failed",
                                   order.resource_id, cpu_hours=cpu,
                                   message=str(exc)), t)
            return
        cpu = (time.monotonic() - started) / 3600.0
        self.sink(StatusUpdate(order.ordinal, order.attempt, "completed",
                               order.resource_id, cpu_hours=cpu,
                               wall_hours=cpu, message="ok"), t)


def _substitute(template: str, binding: dict) -> str:
    def repl(m):
        return str(binding.get(m.group(1), m.group(0)))
    return PLACEHOLDER_RE.sub(repl, template)
