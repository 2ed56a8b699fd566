"""Program model and its line-oriented text form.

A program is a sequence of calls; a call may bind its result to a resource
variable ``rN`` that later calls consume::

    r0 = open("./file0", 0x42, 0x1ff)
    read(r0, 0x20)
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Optional

from .target.syscalls import SYSCALLS_BY_NAME


class ProgramError(ValueError):
    """Raised for programs that do not parse or do not validate."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Ref:
    index: int

    def __str__(self):
        return f"r{self.index}"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple = ()
    result: Optional[int] = None

    def __str__(self):
        text = f"{self.name}({', '.join(_format_arg(a) for a in self.args)})"
        if self.result is not None:
            text = f"r{self.result} = {text}"
        return text


@dataclass(frozen=True)
class Program:
    calls: tuple = ()

    def __len__(self):
        return len(self.calls)

    def __iter__(self):
        return iter(self.calls)

    def serialize(self) -> str:
        return serialize_program(self)

    @property
    def id(self) -> str:
        return program_id(self)


def _format_arg(value):
    if isinstance(value, Ref):
        return str(value)
    if isinstance(value, str):
        return '"' + value + '"'
    if value < 0:
        return f"-{-value:#x}"
    return f"{value:#x}"


def serialize_program(program: Program) -> str:
    return "".join(str(call) + "\n" for call in program.calls)


def program_id(program: Program) -> str:
    """Stable content hash of the canonical serialization."""
    return hashlib.sha256(serialize_program(program).encode()).hexdigest()[:16]


_LINE_RE = re.compile(r"^(?:r(?P<bind>\d+)\s*=\s*)?(?P<name>[A-Za-z_][A-Za-z0-9_]*)\s*\((?P<args>.*)\)$")
_INT_RE = re.compile(r"^-?(?:0[xX][0-9a-fA-F]+|\d+)$")
_REF_RE = re.compile(r"^r(\d+)$")
_FLAG_EXPR_RE = re.compile(r"^[A-Z_][A-Z0-9_]*(?:\s*\|\s*[A-Z_][A-Z0-9_]*)*$")


def _split_args(text, lineno):
    args, cur, in_str = [], [], False
    for ch in text:
        if ch == '"':
            in_str = not in_str
            cur.append(ch)
        elif ch == "," and not in_str:
            args.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if in_str:
        raise ProgramError("unterminated string literal", lineno)
    tail = "".join(cur).strip()
    if tail or args:
        args.append(tail)
    if any(a == "" for a in args):
        raise ProgramError("empty argument", lineno)
    return args


def _parse_arg(token, spec, lineno):
    if _REF_RE.match(token):
        return Ref(int(token[1:]))
    if token.startswith('"'):
        if len(token) < 2 or not token.endswith('"') or '"' in token[1:-1]:
            raise ProgramError(f"malformed string literal {token}", lineno)
        return token[1:-1]
    if _INT_RE.match(token):
        neg = token.startswith("-")
        body = token[1:] if neg else token
        value = int(body, 16) if body[:2].lower() == "0x" else int(body, 10)
        return -value if neg else value
    if spec is not None and spec.kind == "flags" and _FLAG_EXPR_RE.match(token):
        names = dict(spec.flags)
        value = 0
        for part in token.split("|"):
            part = part.strip()
            if part not in names:
                raise ProgramError(f"unknown flag {part} for {spec.name}", lineno)
            value |= names[part]
        return value
    raise ProgramError(f"malformed literal {token}", lineno)


def parse_program(data) -> Program:
    """Parse program text (str or bytes) and validate it against the syscall table."""
    if isinstance(data, (bytes, bytearray)):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProgramError(f"not UTF-8 text: {exc}") from None
    calls = []
    lines = []
    for lineno, raw in enumerate(data.split("\n"), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        m = _LINE_RE.match(line)
        if not m:
            raise ProgramError(f"cannot parse call {line!r}", lineno)
        name = m.group("name")
        spec = SYSCALLS_BY_NAME.get(name)
        if spec is None:
            raise ProgramError(f"unknown syscall {name}", lineno)
        tokens = _split_args(m.group("args"), lineno)
        if len(tokens) != len(spec.args):
            raise ProgramError(f"{name} takes {len(spec.args)} arguments, got {len(tokens)}", lineno)
        args = tuple(_parse_arg(t, a, lineno) for t, a in zip(tokens, spec.args))
        bind = m.group("bind")
        calls.append(Call(name, args, int(bind) if bind is not None else None))
        lines.append(lineno)
    program = Program(tuple(calls))
    validate(program, lines)
    return program


def _strip_comment(raw):
    in_str = False
    for i, ch in enumerate(raw):
        if ch == '"':
            in_str = not in_str
        elif ch == "#" and not in_str:
            return raw[:i]
    return raw


def validate(program: Program, lines=None) -> None:
    """Check syscall names, argument domains and resource flow.

    Every ``rN`` must be bound by an earlier call whose result kind matches
    the consuming slot. Raises ProgramError naming the offending line
    (1-based call index when ``lines`` is not given).
    """
    kinds = {}
    for i, call in enumerate(program.calls):
        lineno = lines[i] if lines else i + 1
        spec = SYSCALLS_BY_NAME.get(call.name)
        if spec is None:
            raise ProgramError(f"unknown syscall {call.name}", lineno)
        if len(call.args) != len(spec.args):
            raise ProgramError(f"{call.name} takes {len(spec.args)} arguments", lineno)
        for value, arg in zip(call.args, spec.args):
            if isinstance(value, Ref):
                if arg.kind != "ref":
                    raise ProgramError(f"{arg.name} does not take a resource", lineno)
                if value.index not in kinds:
                    raise ProgramError(f"undefined resource r{value.index}", lineno)
                if kinds[value.index] != arg.resource:
                    raise ProgramError(
                        f"r{value.index} is a {kinds[value.index]}, {arg.name} needs {arg.resource}", lineno
                    )
            elif arg.kind == "ref":
                raise ProgramError(f"{arg.name} needs a resource variable", lineno)
            elif not arg.accepts(value):
                raise ProgramError(f"value {value!r} out of domain for {call.name}.{arg.name}", lineno)
        if call.result is not None:
            if spec.returns is None:
                raise ProgramError(f"{call.name} does not return a resource", lineno)
            kinds[call.result] = spec.returns


def is_valid(program: Program) -> bool:
    try:
        validate(program)
    except ProgramError:
        return False
    return True
