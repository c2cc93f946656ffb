"""Declarative sweep-plan language: parsing, validation, job expansion.

A plan declares parameters (ranges or value lists) and a task script of
staging/execution steps.  Expansion enumerates the full cross-product of
parameter values into concrete job specifications, substituting
``${name}`` placeholders.

Grammar (canonical form, one declaration per line)::

    parameter <name> [label "<text>"] integer range from <a> to <b> step <s>;
    parameter <name> [label "<text>"] real range from <a> to <b> step <s>;
    parameter <name> [label "<text>"] list <lit>, <lit>, ...;
    task main
      stage_in <source_path> <dest_name>
      substitute <template_name> <output_name>
      execute "<command with ${placeholders}>"
      output <name>
      stage_out <source_name> <dest_path>
    endtask

``#`` starts a comment.  ``output`` pre-declares a file produced by the
execute step so stage_out references can be validated.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field, replace

DEFAULT_CROSS_PRODUCT_CAP = 1_000_000

# Significant digits used when enumerating real ranges; fixed so job
# identity is reproducible across runs and platforms.
REAL_PRECISION = 6

PLACEHOLDER_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")
_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_BARE_SAFE_RE = re.compile(r"^[A-Za-z0-9_./*@+:${}-]+$")
_NUMBER_RE = re.compile(r"^-?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$")

STEP_VERBS = ("stage_in", "substitute", "execute", "stage_out", "output")
_KEYWORDS = {"parameter", "task", "endtask", "label", "integer", "real",
             "range", "from", "to", "step", "list", "main", *STEP_VERBS}


@dataclass(frozen=True)
class Diagnostic:
    line: int
    col: int
    message: str

    def __str__(self) -> str:
        return f"{self.line}:{self.col}: {self.message}"


class PlanError(ValueError):
    """Parse or validation failure; carries positioned diagnostics."""

    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics))


class PlanTooLarge(ValueError):
    def __init__(self, count: int, cap: int):
        self.count = count
        self.cap = cap
        super().__init__(f"cross-product of {count} jobs exceeds cap of {cap}")


@dataclass(frozen=True)
class IntegerRange:
    start: int
    stop: int
    step: int

    def values(self) -> list[int]:
        return list(range(self.start, self.stop + 1, self.step))


@dataclass(frozen=True)
class RealRange:
    start: float
    stop: float
    step: float

    def values(self) -> list[str]:
        # a + k*s for k = 0..floor((b-a)/s); epsilon guards the float floor.
        count = int(math.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return [render_value(self.start + k * self.step) for k in range(count)]


@dataclass(frozen=True)
class ValueList:
    items: tuple[int | float | str, ...]

    def values(self) -> list[int | str]:
        return [v if isinstance(v, int) else render_value(v) for v in self.items]


Domain = IntegerRange | RealRange | ValueList


@dataclass(frozen=True)
class ParameterDecl:
    name: str
    domain: Domain
    label: str = ""

    def cardinality(self) -> int:
        return len(self.domain.values())


@dataclass(frozen=True)
class Step:
    verb: str
    args: tuple[str, ...]


@dataclass(frozen=True)
class TaskScript:
    steps: tuple[Step, ...]

    def execute_steps(self) -> list[Step]:
        return [s for s in self.steps if s.verb == "execute"]

    def declared_outputs(self) -> list[str]:
        return [s.args[0] for s in self.steps if s.verb == "output"]


@dataclass(frozen=True)
class Plan:
    name: str
    parameters: tuple[ParameterDecl, ...]
    task: TaskScript

    def parameter(self, name: str) -> ParameterDecl:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)


@dataclass(frozen=True)
class JobId:
    experiment_id: str
    ordinal: int

    def __str__(self) -> str:
        return f"{self.experiment_id}/{self.ordinal}"


@dataclass(frozen=True)
class JobSpec:
    job_id: JobId
    binding: dict[str, int | str] = field(hash=False)
    task: TaskScript


def render_value(value: float | int | str) -> int | str:
    """Canonical textual identity for a parameter value."""
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if value == int(value) and abs(value) < 1e15:
            return format(value, ".1f")
        return format(value, f".{REAL_PRECISION}g")
    return value


# --------------------------------------------------------------------------
# Tokenizer


@dataclass(frozen=True)
class _Token:
    kind: str  # word | string | number | punct | eof
    text: str
    line: int
    col: int


def _tokenize(text: str) -> tuple[list[_Token], list[Diagnostic]]:
    tokens: list[_Token] = []
    diagnostics: list[Diagnostic] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        i = 0
        n = len(line)
        while i < n:
            ch = line[i]
            if ch in " \t\r":
                i += 1
                continue
            if ch == "#":
                break
            col = i + 1
            if ch in ";,":
                tokens.append(_Token("punct", ch, lineno, col))
                i += 1
                continue
            if ch == '"':
                j = i + 1
                out = []
                closed = False
                while j < n:
                    c = line[j]
                    if c == "\\" and j + 1 < n:
                        out.append({"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(line[j + 1], line[j + 1]))
                        j += 2
                        continue
                    if c == '"':
                        closed = True
                        j += 1
                        break
                    out.append(c)
                    j += 1
                if not closed:
                    diagnostics.append(Diagnostic(lineno, col, "unterminated string literal"))
                tokens.append(_Token("string", "".join(out), lineno, col))
                i = j
                continue
            j = i
            while j < n and line[j] not in ' \t\r;,"#':
                j += 1
            word = line[i:j]
            kind = "number" if _NUMBER_RE.match(word) else "word"
            tokens.append(_Token(kind, word, lineno, col))
            i = j
    last_line = text.count("\n") + 1
    tokens.append(_Token("eof", "", last_line, 1))
    return tokens, diagnostics


# --------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0
        self.diagnostics: list[Diagnostic] = []

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def error(self, tok: _Token, message: str) -> None:
        self.diagnostics.append(Diagnostic(tok.line, tok.col, message))

    def recover(self) -> None:
        """Skip to the next statement boundary after an error."""
        while True:
            tok = self.peek()
            if tok.kind == "eof":
                return
            if tok.kind == "punct" and tok.text == ";":
                self.advance()
                return
            if tok.kind == "word" and tok.text in ("parameter", "task", "endtask"):
                if tok.text == "endtask":
                    self.advance()
                return
            self.advance()

    def expect_semicolon(self) -> None:
        tok = self.peek()
        if tok.kind == "punct" and tok.text == ";":
            self.advance()

    # -- statements --------------------------------------------------------

    def parse(self, name: str) -> Plan | None:
        parameters: list[ParameterDecl] = []
        task: TaskScript | None = None
        task_tok: _Token | None = None
        while True:
            tok = self.peek()
            if tok.kind == "eof":
                break
            if tok.kind == "word" and tok.text == "parameter":
                decl = self.parse_parameter()
                if decl is not None:
                    parameters.append(decl)
            elif tok.kind == "word" and tok.text == "task":
                task_tok = tok
                parsed = self.parse_task()
                if parsed is not None:
                    if task is not None:
                        self.error(tok, "duplicate task block")
                    else:
                        task = parsed
            elif tok.kind == "punct" and tok.text == ";":
                self.advance()
            else:
                self.error(tok, f"expected 'parameter' or 'task', got {tok.text!r}")
                self.recover()

        first = self.tokens[0]
        seen: set[str] = set()
        for decl in parameters:
            if decl.name in seen:
                self.error(first, f"duplicate parameter {decl.name!r}")
            seen.add(decl.name)
        if not parameters:
            self.error(first, "plan declares no parameters")
        if task is None:
            self.error(first, "plan has no task block")
        else:
            if not task.execute_steps():
                self.error(task_tok or first, "task has no execute step")
            self.validate_task(task, seen, task_tok or first)
        if self.diagnostics:
            return None
        assert task is not None
        return Plan(name=name, parameters=tuple(parameters), task=task)

    def validate_task(self, task: TaskScript, declared: set[str], at: _Token) -> None:
        for step in task.steps:
            for arg in step.args:
                for ph in PLACEHOLDER_RE.findall(arg):
                    if ph not in declared:
                        self.error(at, f"unknown placeholder ${{{ph}}} in {step.verb} step")
        produced = set(task.declared_outputs())
        for step in task.steps:
            if step.verb in ("stage_in", "substitute"):
                produced.add(step.args[1])
            elif step.verb == "stage_out":
                if step.args[0] not in produced:
                    self.error(at, f"stage_out references {step.args[0]!r}, which no step produces")

    def parse_parameter(self) -> ParameterDecl | None:
        self.advance()  # 'parameter'
        name_tok = self.advance()
        if name_tok.kind != "word" or not _IDENT_RE.match(name_tok.text) or name_tok.text in _KEYWORDS:
            self.error(name_tok, f"expected parameter name, got {name_tok.text!r}")
            self.recover()
            return None
        label = ""
        if self.peek().kind == "word" and self.peek().text == "label":
            self.advance()
            label_tok = self.advance()
            if label_tok.kind != "string":
                self.error(label_tok, "label requires a quoted string")
                self.recover()
                return None
            label = label_tok.text

        kind_tok = self.advance()
        if kind_tok.kind == "word" and kind_tok.text in ("integer", "real"):
            domain = self.parse_range(kind_tok.text, name_tok.text)
        elif kind_tok.kind == "word" and kind_tok.text == "list":
            domain = self.parse_list(name_tok.text)
        else:
            self.error(kind_tok, f"expected 'integer', 'real' or 'list', got {kind_tok.text!r}")
            self.recover()
            return None
        if domain is None:
            return None
        self.expect_semicolon()
        return ParameterDecl(name=name_tok.text, domain=domain, label=label)

    def parse_range(self, kind: str, pname: str) -> Domain | None:
        for keyword in ("range", "from"):
            tok = self.advance()
            if tok.kind != "word" or tok.text != keyword:
                self.error(tok, f"expected {keyword!r} in range declaration")
                self.recover()
                return None
        start_tok = self.advance()
        to_tok = self.advance()
        stop_tok = self.advance()
        step_kw = self.advance()
        step_tok = self.advance()
        for tok, expected in ((to_tok, "to"), (step_kw, "step")):
            if tok.kind != "word" or tok.text != expected:
                self.error(tok, f"expected {expected!r} in range declaration")
                self.recover()
                return None
        for tok in (start_tok, stop_tok, step_tok):
            if tok.kind != "number":
                self.error(tok, f"expected a number, got {tok.text!r}")
                self.recover()
                return None
        if kind == "integer":
            try:
                start, stop, step = int(start_tok.text), int(stop_tok.text), int(step_tok.text)
            except ValueError:
                self.error(start_tok, f"integer range for {pname!r} has non-integer bounds")
                self.recover()
                return None
            domain: Domain = IntegerRange(start, stop, step)
        else:
            domain = RealRange(float(start_tok.text), float(stop_tok.text), float(step_tok.text))
        if domain.step <= 0:
            self.error(step_tok, "invalid range: step must be positive")
            self.recover()
            return None
        if domain.stop < domain.start:
            self.error(start_tok, f"invalid range: from {domain.start} exceeds to {domain.stop}")
            self.recover()
            return None
        return domain

    def parse_list(self, pname: str) -> ValueList | None:
        items: list[int | float | str] = []
        while True:
            tok = self.advance()
            if tok.kind == "string":
                items.append(tok.text)
            elif tok.kind == "number":
                items.append(int(tok.text) if _is_int(tok.text) else float(tok.text))
            elif tok.kind == "word":
                items.append(tok.text)
            else:
                self.error(tok, f"expected a literal in list for {pname!r}")
                self.recover()
                return None
            nxt = self.peek()
            if nxt.kind == "punct" and nxt.text == ",":
                self.advance()
                continue
            break
        if not items:
            self.error(self.peek(), f"empty value list for {pname!r}")
            return None
        return ValueList(tuple(items))

    def parse_task(self) -> TaskScript | None:
        self.advance()  # 'task'
        name_tok = self.advance()
        if name_tok.kind != "word" or name_tok.text != "main":
            self.error(name_tok, f"expected task name 'main', got {name_tok.text!r}")
        steps: list[Step] = []
        while True:
            tok = self.peek()
            if tok.kind == "eof":
                self.error(tok, "task block not closed with 'endtask'")
                return None
            if tok.kind == "word" and tok.text == "endtask":
                self.advance()
                break
            if tok.kind == "punct":
                self.advance()
                continue
            if tok.kind == "word" and tok.text in STEP_VERBS:
                step = self.parse_step(tok.text)
                if step is not None:
                    steps.append(step)
            else:
                self.error(tok, f"unknown task step {tok.text!r}")
                self.advance()
        return TaskScript(tuple(steps))

    def parse_step(self, verb: str) -> Step | None:
        self.advance()  # verb
        arity = {"stage_in": 2, "substitute": 2, "execute": 1, "stage_out": 2, "output": 1}[verb]
        args = []
        for _ in range(arity):
            tok = self.advance()
            if tok.kind not in ("word", "string", "number"):
                self.error(tok, f"{verb} expects {arity} argument(s)")
                return None
            args.append(tok.text)
        if verb == "execute" and self.tokens[self.pos - 1].kind != "string":
            self.error(self.tokens[self.pos - 1], "execute expects a quoted command string")
            return None
        return Step(verb, tuple(args))


def _is_int(text: str) -> bool:
    try:
        int(text)
        return True
    except ValueError:
        return False


def parse_plan(text: str, name: str = "plan") -> Plan:
    """Parse plan source into a validated Plan.

    Raises PlanError carrying every positioned diagnostic found; a parse
    either yields a fully valid plan or diagnostics, never both.
    """
    tokens, diagnostics = _tokenize(text)
    parser = _Parser(tokens)
    parser.diagnostics.extend(diagnostics)
    plan = parser.parse(name)
    if plan is None or parser.diagnostics:
        raise PlanError(parser.diagnostics)
    return plan


# --------------------------------------------------------------------------
# Canonical printer


def _print_arg(arg: str) -> str:
    if arg and _BARE_SAFE_RE.match(arg) and not _NUMBER_RE.match(arg):
        return arg
    escaped = arg.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def _print_literal(value: int | float | str) -> str:
    if isinstance(value, (int, float)):
        return repr(value)
    escaped = value.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def print_plan(plan: Plan) -> str:
    """Emit canonical plan source: one declaration per line, lowercase keywords."""
    lines = []
    for p in plan.parameters:
        head = f"parameter {p.name}"
        if p.label:
            head += f' label "{p.label}"'
        d = p.domain
        if isinstance(d, IntegerRange):
            lines.append(f"{head} integer range from {d.start} to {d.stop} step {d.step};")
        elif isinstance(d, RealRange):
            lines.append(f"{head} real range from {d.start!r} to {d.stop!r} step {d.step!r};")
        else:
            lines.append(f"{head} list {', '.join(_print_literal(v) for v in d.items)};")
    lines.append("task main")
    for step in plan.task.steps:
        if step.verb == "execute":
            lines.append(f'  execute {_print_literal(step.args[0])}')
        else:
            lines.append(f"  {step.verb} {' '.join(_print_arg(a) for a in step.args)}")
    lines.append("endtask")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Expansion


def count_jobs(plan: Plan) -> int:
    total = 1
    for p in plan.parameters:
        total *= p.cardinality()
    return total


def expand_jobs(plan: Plan, experiment_id: str,
                cap: int = DEFAULT_CROSS_PRODUCT_CAP) -> list[JobSpec]:
    """Enumerate the full cross-product, last declared parameter fastest."""
    total = count_jobs(plan)
    if total > cap:
        raise PlanTooLarge(total, cap)
    names = [p.name for p in plan.parameters]
    domains = [p.domain.values() for p in plan.parameters]
    jobs = []
    for ordinal, combo in enumerate(itertools.product(*domains)):
        binding = dict(zip(names, combo))
        jobs.append(JobSpec(
            job_id=JobId(experiment_id, ordinal),
            binding=binding,
            task=resolve_task(plan.task, binding),
        ))
    return jobs


class UnresolvedPlaceholder(ValueError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unresolved placeholder ${{{name}}}")


def resolve_task(task: TaskScript, binding: dict[str, int | str]) -> TaskScript:
    """Substitute ``${name}`` in every step argument; idempotent once resolved."""
    def sub(arg: str) -> str:
        def repl(m: re.Match[str]) -> str:
            name = m.group(1)
            if name not in binding:
                raise UnresolvedPlaceholder(name)
            return str(binding[name])
        return PLACEHOLDER_RE.sub(repl, arg)

    return TaskScript(tuple(replace(s, args=tuple(sub(a) for a in s.args)) for s in task.steps))
