"""Program generation/mutation and the subsystem-filtered feedback loop.

Differences from a stock coverage-guided loop:

* an execution that crashes the target is logged and dropped; it is never
  stored or minimized;
* a program is admitted only if its trace contains at least one subsystem
  block not yet covered by the corpus (or by an optional baseline set).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import random
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Optional

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_block_set, check_positive_int
from .coverage import (DEFAULT_PATTERN, CoverageStats, SubsystemSet, classify, coverage_stats, parse_trace,
                       serialize_trace, union_all)
from .program import Call, Program, ProgramError, Ref, parse_program, program_id, serialize_program, validate
from .target import MiniKernel, emit_block_map
from .target.syscalls import SYSCALLS, SYSCALLS_BY_NAME

log = logging.getLogger(__name__)

OPERATORS = ("insert", "remove", "mutate_arg", "splice")
DEFAULT_WEIGHTS = {"insert": 3, "remove": 1, "mutate_arg": 4, "splice": 2}
DEFAULT_MUTATE_RATIO = 0.7
DEFAULT_MAX_LEN = 12

OUTCOMES = ("admitted", "rejected_no_new", "rejected_crash")

_INTERESTING = (0, 1, 7, 8, 0x18, 0x20, 0x1ff, 0x200, 0x5c0, 0x5c1, 0xfff, 0x1000, 0x1001,
                0x2000, 0x4000, 0x8000, 0xffe3, 0xffe4, 0x10000, 0x20000)


class EngineError(RuntimeError):
    pass


# -- generation ---------------------------------------------------------------


def _enabled(specs, disabled):
    """Enabled specs whose resource inputs can all be produced from scratch."""
    specs = [s for s in specs if s.name not in disabled]
    if not specs:
        raise EngineError("all syscalls disabled")
    available, usable = set(), []
    changed = True
    while changed:
        changed = False
        for s in specs:
            if s not in usable and all(a.resource in available for a in s.args if a.kind == "ref"):
                usable.append(s)
                if s.returns:
                    available.add(s.returns)
                changed = True
    if not usable:
        raise EngineError("no enabled syscall has its resources available")
    usable.sort(key=specs.index)
    producers = {}
    for s in usable:
        if s.returns:
            producers.setdefault(s.returns, []).append(s)
    return usable, producers


def _rand_value(rng, arg):
    if arg.kind == "const":
        return arg.lo
    if arg.kind == "path":
        return rng.choice(arg.pool)
    if arg.kind == "flags":
        value = 0
        for _, bit in arg.flags:
            if rng.random() < 0.2:
                value |= bit
        return value
    r = rng.random()
    if r < 0.15:
        return arg.lo
    if r < 0.25:
        return arg.hi
    if r < 0.6:
        pool = [v for v in _INTERESTING if arg.lo <= v <= arg.hi]
        if pool:
            return rng.choice(pool)
    return rng.randint(arg.lo, arg.hi)


class _Builder:
    """Accumulates calls while tracking resource bindings by kind."""

    def __init__(self, calls=()):
        self.calls = list(calls)
        self.kinds = {}
        for c in self.calls:
            if c.result is not None:
                self.kinds[c.result] = SYSCALLS_BY_NAME[c.name].returns

    def next_binding(self):
        return max(self.kinds, default=-1) + 1

    def bindings_of(self, kind):
        return [i for i, k in self.kinds.items() if k == kind]

    def make_call(self, rng, spec, bindings=None):
        bindings = self.kinds if bindings is None else bindings
        args = []
        for arg in spec.args:
            if arg.kind == "ref":
                choices = [i for i, k in bindings.items() if k == arg.resource]
                args.append(Ref(rng.choice(choices)))
            else:
                args.append(_rand_value(rng, arg))
        result = self.next_binding() if spec.returns else None
        return Call(spec.name, tuple(args), result)

    def append(self, call):
        self.calls.append(call)
        if call.result is not None:
            self.kinds[call.result] = SYSCALLS_BY_NAME[call.name].returns


def _produce(rng, b, kind, producers, limit, depth=0):
    """Append a producer of ``kind`` (and, recursively, of its inputs)."""
    choices = [p for p in producers[kind] if all(a.resource != kind for a in p.args if a.kind == "ref")]
    if not choices or depth > 4:
        return False
    spec = rng.choice(choices)
    for a in spec.args:
        if a.kind == "ref" and not b.bindings_of(a.resource):
            if len(b.calls) >= limit or not _produce(rng, b, a.resource, producers, limit, depth + 1):
                return False
    if len(b.calls) >= limit:
        return False
    b.append(b.make_call(rng, spec))
    return True


def generate(rng, specs=SYSCALLS, disabled=frozenset(), max_len=DEFAULT_MAX_LEN) -> Program:
    """Random valid program of 1..max_len calls using only enabled syscalls.

    Resources a chosen call needs are created on demand by inserting
    producer calls in front of it.
    """
    usable, producers = _enabled(specs, disabled)
    n = rng.randint(1, max_len)
    b = _Builder()
    while len(b.calls) < n:
        spec = rng.choice(usable)
        for a in spec.args:
            if a.kind == "ref" and not b.bindings_of(a.resource):
                _produce(rng, b, a.resource, producers, n)
        if len(b.calls) >= n:
            break
        if all(b.bindings_of(a.resource) for a in spec.args if a.kind == "ref"):
            b.append(b.make_call(rng, spec))
    return Program(tuple(b.calls))


# -- mutation -----------------------------------------------------------------


def repair(calls) -> Program:
    """Rewire dangling resource refs to the nearest earlier producer of the same
    kind, drop calls that cannot be rewired, and renumber bindings r0, r1, ..."""
    out = []
    live = []  # (old binding id, new binding id, kind) in program order
    renumber = {}
    for call in calls:
        spec = SYSCALLS_BY_NAME[call.name]
        args = []
        ok = True
        for value, arg in zip(call.args, spec.args):
            if arg.kind != "ref":
                args.append(value)
                continue
            if isinstance(value, Ref) and value.index in renumber and renumber[value.index][1] == arg.resource:
                args.append(Ref(renumber[value.index][0]))
                continue
            nearest = [new for _, new, kind in live if kind == arg.resource]
            if not nearest:
                ok = False
                break
            args.append(Ref(nearest[-1]))
        if not ok:
            continue
        result = None
        if call.result is not None:
            result = len(live)
            live.append((call.result, result, spec.returns))
            renumber[call.result] = (result, spec.returns)
        out.append(Call(call.name, tuple(args), result))
    return Program(tuple(out))


def _mutate_arg(rng, program, specs_ok):
    calls = list(program.calls)
    slots = []
    for i, call in enumerate(calls):
        spec = SYSCALLS_BY_NAME[call.name]
        for j, arg in enumerate(spec.args):
            if arg.kind == "const":
                continue
            slots.append((i, j, arg))
    if not slots:
        return None
    i, j, arg = rng.choice(slots)
    call = calls[i]
    old = call.args[j]
    if arg.kind == "ref":
        b = _Builder(calls[:i])
        choices = [k for k in b.bindings_of(arg.resource) if Ref(k) != old]
        if not choices:
            return None
        new = Ref(rng.choice(choices))
    elif arg.kind == "flags" and rng.random() < 0.5:
        _, bit = rng.choice(arg.flags)
        new = old ^ bit
    elif arg.kind in ("int", "len") and rng.random() < 0.3:
        new = min(max(old + rng.choice((-1, 1)) * rng.choice((1, 8, 0x200, 0x1000)), arg.lo), arg.hi)
    else:
        new = _rand_value(rng, arg)
    if new == old:
        return None
    args = list(call.args)
    args[j] = new
    calls[i] = Call(call.name, tuple(args), call.result)
    return calls


def _insert(rng, program, usable):
    calls = list(program.calls)
    pos = rng.randint(0, len(calls))
    b = _Builder(calls[:pos])
    avail = {k for k in b.kinds.values()}
    candidates = [s for s in usable if all(a.resource in avail for a in s.args if a.kind == "ref")]
    if not candidates:
        return None
    spec = rng.choice(candidates)
    call = b.make_call(rng, spec)
    if call.result is not None:
        # fresh binding id above every existing one
        call = Call(call.name, call.args, max((c.result for c in calls if c.result is not None), default=-1) + 1)
    calls.insert(pos, call)
    return calls


def _remove(rng, program):
    if len(program.calls) <= 1:
        return None
    calls = list(program.calls)
    del calls[rng.randrange(len(calls))]
    return calls


def _splice(rng, program, donors):
    donors = [d for d in donors if d.calls and d != program]
    if not donors:
        return None
    donor = rng.choice(donors)
    head = list(program.calls[:rng.randint(1, len(program.calls))])
    tail = list(donor.calls[rng.randrange(len(donor.calls)):])
    offset = max((c.result for c in head if c.result is not None), default=-1) + 1
    shifted = []
    for c in tail:
        args = tuple(Ref(a.index + offset) if isinstance(a, Ref) else a for a in c.args)
        shifted.append(Call(c.name, args, None if c.result is None else c.result + offset))
    return head + shifted


def mutate(program: Program, rng, donors=(), specs=SYSCALLS, disabled=frozenset(),
           max_len=DEFAULT_MAX_LEN, weights=None) -> Program:
    """Apply one weighted mutation operator; the result is always valid.

    Returns the input unchanged only when no operator can alter it.
    """
    weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
    usable, _ = _enabled(specs, disabled)
    ops = [op for op in OPERATORS if weights.get(op, 0) > 0]
    for _ in range(16):
        op = rng.choices(ops, weights=[weights[o] for o in ops])[0]
        if op == "insert":
            calls = _insert(rng, program, usable) if len(program.calls) < max_len else None
        elif op == "remove":
            calls = _remove(rng, program)
        elif op == "mutate_arg":
            calls = _mutate_arg(rng, program, usable)
        else:
            calls = _splice(rng, program, donors)
        if calls is None:
            continue
        result = repair(calls[:max_len])
        if result.calls and result != program:
            return result
    return program


# -- admission ----------------------------------------------------------------


def admit(trace, subsystem, corpus_covered, baseline=None) -> frozenset:
    """New-coverage signature; the program is admitted iff it is non-empty.

    signature = (trace & subsystem) - corpus_covered - baseline
    """
    blocks = subsystem.blocks if isinstance(subsystem, SubsystemSet) else subsystem
    sig = (frozenset(trace) & blocks) - frozenset(corpus_covered)
    if baseline:
        sig -= frozenset(baseline)
    return sig


# -- fuzz loop ----------------------------------------------------------------


@dataclass(frozen=True)
class CorpusEntry:
    id: str
    program: Program
    signature: frozenset
    full_trace: frozenset
    runtime_cost: int
    admitted_at: int


@dataclass(frozen=True)
class LogEvent:
    iteration: int
    program_id: str
    outcome: str
    kernel: int
    subsys: int
    subsys_minus_baseline: int


LOG_FIELDS = ("iteration", "program", "outcome", "kernel", "subsys", "subsys_minus_baseline")


@dataclass
class FuzzLog:
    events: list = field(default_factory=list)

    def append(self, event):
        if self.events:
            last = self.events[-1]
            if (event.kernel < last.kernel or event.subsys < last.subsys
                    or event.subsys_minus_baseline < last.subsys_minus_baseline):
                raise EngineError(f"cumulative coverage decreased at iteration {event.iteration}")
        self.events.append(event)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def count(self, outcome) -> int:
        return sum(1 for e in self.events if e.outcome == outcome)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for e in self.events:
            w.writerow((e.iteration, e.program_id, e.outcome, e.kernel, e.subsys, e.subsys_minus_baseline))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text) -> "FuzzLog":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != LOG_FIELDS:
            raise ValueError(f"fuzz log header must be {','.join(LOG_FIELDS)}")
        out = cls()
        for lineno, row in enumerate(rows[1:], 2):
            if not row:
                continue
            try:
                it, pid, outcome, k, s, m = row
                event = LogEvent(int(it), pid, outcome, int(k), int(s), int(m))
            except ValueError:
                raise ValueError(f"line {lineno}: malformed fuzz log row {row!r}") from None
            if outcome not in OUTCOMES:
                raise ValueError(f"line {lineno}: unknown outcome {outcome!r}")
            out.events.append(event)
        return out


@dataclass
class FuzzConfig:
    seed: int = 0
    iterations: int = 1000
    workers: int = 1
    disabled_syscalls: frozenset = frozenset()
    subsystem: Optional[SubsystemSet] = None
    max_program_len: int = DEFAULT_MAX_LEN
    mutation_weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    mutate_ratio: float = DEFAULT_MUTATE_RATIO
    baseline: Optional[frozenset] = None

    def __post_init__(self):
        if not isinstance(self.iterations, int) or self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations!r}")
        check_positive_int(self.workers, "workers")
        check_positive_int(self.max_program_len, "max_program_len")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        unknown = set(self.mutation_weights) - set(OPERATORS)
        if unknown:
            raise ValueError(f"unknown mutation operators: {sorted(unknown)}")
        if any(w < 0 for w in self.mutation_weights.values()) or not any(self.mutation_weights.values()):
            raise ValueError("mutation weights must be non-negative and not all zero")
        if not 0 <= self.mutate_ratio <= 1:
            raise ValueError("mutate_ratio must be in [0, 1]")
        self.disabled_syscalls = frozenset(self.disabled_syscalls)
        unknown = self.disabled_syscalls - set(SYSCALLS_BY_NAME)
        if unknown:
            raise ValueError(f"unknown syscalls in disable list: {sorted(unknown)}")
        if self.subsystem is None:
            self.subsystem = classify(emit_block_map())
        if self.baseline is not None:
            self.baseline = as_block_set(self.baseline)
        _enabled(SYSCALLS, self.disabled_syscalls)


class Corpus:
    """Admitted entries plus the running coverage unions."""

    def __init__(self, subsystem, baseline=None):
        self.subsystem = subsystem
        self.baseline = frozenset(baseline or ())
        self.entries = []
        self.ids = set()
        self.covered = set()
        self.signatures = set()

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def add(self, entry):
        self.entries.append(entry)
        self.ids.add(entry.id)
        self.covered.update(entry.full_trace)
        self.signatures.update(entry.signature)

    def counts(self):
        subsys = len(self.subsystem.blocks.intersection(self.covered))
        return len(self.covered), subsys, len(self.signatures)

    @property
    def programs(self):
        return [e.program for e in self.entries]


def _propose(rng, corpus, cfg):
    if corpus.entries and rng.random() < cfg.mutate_ratio:
        parent = rng.choice(corpus.entries).program
        return mutate(parent, rng, donors=corpus.programs, disabled=cfg.disabled_syscalls,
                      max_len=cfg.max_program_len, weights=cfg.mutation_weights)
    return generate(rng, SYSCALLS, cfg.disabled_syscalls, cfg.max_program_len)


def fuzz(config: FuzzConfig, kernel_factory=MiniKernel):
    """Run the feedback loop; returns (Corpus, FuzzLog).

    With ``workers == 1`` the run is a deterministic function of the config.
    With more workers, executions run concurrently on separate target
    instances and are admitted one at a time in completion order.
    """
    cfg = config
    try:
        kernel = kernel_factory()
    except Exception as exc:
        raise EngineError(f"target initialization failed: {exc}") from exc
    rng = random.Random(cfg.seed)
    corpus = Corpus(cfg.subsystem, cfg.baseline)
    flog = FuzzLog()
    iteration = 0

    def record(program, pid, result):
        nonlocal iteration
        if result is None:
            outcome = "rejected_no_new"
        elif result.crashed:
            outcome = "rejected_crash"
        else:
            sig = admit(result.trace, cfg.subsystem, corpus.covered, cfg.baseline)
            if sig and pid not in corpus.ids:
                corpus.add(CorpusEntry(pid, program, sig, result.trace, result.runtime_cost, iteration))
                outcome = "admitted"
            else:
                outcome = "rejected_no_new"
        flog.append(LogEvent(iteration, pid, outcome, *corpus.counts()))
        iteration += 1

    if cfg.workers == 1:
        for _ in range(cfg.iterations):
            program = _propose(rng, corpus, cfg)
            pid = program_id(program)
            if pid in corpus.ids:
                record(program, pid, None)
                continue
            record(program, pid, kernel.execute(program, faults_enabled=True))
        return corpus, flog

    local = threading.local()

    def run(program):
        k = getattr(local, "kernel", None)
        if k is None:
            k = local.kernel = kernel_factory()
        return k.execute(program, faults_enabled=True)

    lock = threading.Lock()
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        remaining = cfg.iterations
        while remaining:
            batch = []
            for _ in range(min(cfg.workers, remaining)):
                program = _propose(rng, corpus, cfg)
                batch.append((program, program_id(program)))
            remaining -= len(batch)
            futures = {}
            for program, pid in batch:
                if pid in corpus.ids:
                    with lock:
                        record(program, pid, None)
                else:
                    futures[pool.submit(run, program)] = (program, pid)
            for fut in as_completed(futures):
                program, pid = futures[fut]
                with lock:
                    record(program, pid, fut.result())
    return corpus, flog


# -- persistence --------------------------------------------------------------


def save_corpus(corpus: Corpus, flog: FuzzLog, out_dir) -> None:
    """Write ``<id>.prog``, ``<id>.trace``, ``manifest.json`` and ``fuzzlog.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "subsystem": {"name": corpus.subsystem.name, "regex": corpus.subsystem.regex,
                      "total": corpus.subsystem.total},
        "baseline_size": len(corpus.baseline),
        "entries": [],
    }
    for e in corpus.entries:
        _write_text(os.path.join(out_dir, f"{e.id}.prog"), serialize_program(e.program))
        _write_text(os.path.join(out_dir, f"{e.id}.trace"), serialize_trace(e.full_trace))
        manifest["entries"].append({
            "id": e.id,
            "signature_size": len(e.signature),
            "signature": [f"{a:#x}" for a in sorted(e.signature)],
            "runtime_cost": e.runtime_cost,
            "admitted_at": e.admitted_at,
        })
    _write_text(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    _write_text(os.path.join(out_dir, "fuzzlog.csv"), flog.to_csv())


def _write_text(path, text):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def load_corpus(in_dir, subsystem=None, baseline=None):
    """Read a corpus directory back; returns (Corpus, FuzzLog or None)."""
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if subsystem is None:
        sub = manifest.get("subsystem", {})
        subsystem = classify(emit_block_map(), sub.get("name", "vfs"), sub.get("regex", DEFAULT_PATTERN))
    corpus = Corpus(subsystem, baseline)
    for item in manifest["entries"]:
        with open(os.path.join(in_dir, f"{item['id']}.prog"), "rb") as fh:
            program = parse_program(fh.read())
        with open(os.path.join(in_dir, f"{item['id']}.trace"), "rb") as fh:
            trace = parse_trace(fh.read())
        sig = frozenset(int(a, 16) for a in item["signature"])
        corpus.add(CorpusEntry(item["id"], program, sig, frozenset(trace), item["runtime_cost"],
                               item["admitted_at"]))
    flog = None
    log_path = os.path.join(in_dir, "fuzzlog.csv")
    if os.path.exists(log_path):
        with open(log_path) as fh:
            flog = FuzzLog.from_csv(fh.read())
    return corpus, flog


# -- replay -------------------------------------------------------------------


@dataclass(frozen=True)
class ReplayEntry:
    id: str
    stats: Optional[CoverageStats]
    diverged: bool
    error: Optional[str] = None


@dataclass(frozen=True)
class ReplayReport:
    entries: tuple
    union: frozenset
    aggregate: CoverageStats
    kernel_blocks: int
    subsys_blocks: int
    subsys_minus_baseline: int

    @property
    def flagged(self):
        return [e for e in self.entries if e.diverged or e.error]


def replay(corpus: Corpus, subsystem=None, baseline=None, kernel=None) -> ReplayReport:
    """Re-execute every entry and compare against its stored trace."""
    subsystem = subsystem or corpus.subsystem
    baseline = frozenset(corpus.baseline if baseline is None else baseline)
    kernel = kernel or MiniKernel()
    rows, traces = [], []
    for e in corpus.entries:
        try:
            validate(e.program)
            result = kernel.execute(e.program, faults_enabled=True)
        except Exception as exc:  # noqa: BLE001 - aggregation continues
            log.warning("replay of %s failed: %s", e.id, exc)
            rows.append(ReplayEntry(e.id, None, True, str(exc)))
            continue
        traces.append(result.trace)
        diverged = result.trace != e.full_trace or result.crashed
        rows.append(ReplayEntry(e.id, coverage_stats(result.trace, subsystem), diverged,
                                result.crash_reason))
    union = union_all(traces)
    sub = union & subsystem.blocks
    return ReplayReport(tuple(rows), union, coverage_stats(union, subsystem), len(union), len(sub),
                        len(sub - baseline))


# -- estimator ----------------------------------------------------------------


class SubsystemFuzzer(BaseEstimator):
    """Estimator facade over :func:`fuzz`.

    ``fit()`` runs the loop and stores ``corpus_``, ``log_`` and
    ``subsystem_``; ``score()`` returns the fraction of subsystem blocks the
    corpus covers. A ``pattern`` of ``".*"`` gives whole-kernel feedback.
    """

    def __init__(self, seed=0, iterations=1000, workers=1, pattern=None, disabled_syscalls=(),
                 max_program_len=DEFAULT_MAX_LEN, mutation_weights=None, mutate_ratio=DEFAULT_MUTATE_RATIO,
                 baseline=None):
        self.seed = seed
        self.iterations = iterations
        self.workers = workers
        self.pattern = pattern
        self.disabled_syscalls = disabled_syscalls
        self.max_program_len = max_program_len
        self.mutation_weights = mutation_weights
        self.mutate_ratio = mutate_ratio
        self.baseline = baseline

    def _config(self):
        block_map = emit_block_map()
        subsystem = classify(block_map) if self.pattern is None else classify(block_map, "custom", self.pattern)
        return FuzzConfig(
            seed=self.seed, iterations=self.iterations, workers=self.workers,
            disabled_syscalls=frozenset(self.disabled_syscalls), subsystem=subsystem,
            max_program_len=self.max_program_len,
            mutation_weights=dict(DEFAULT_WEIGHTS if self.mutation_weights is None else self.mutation_weights),
            mutate_ratio=self.mutate_ratio, baseline=self.baseline,
        )

    def fit(self, X=None, y=None):
        cfg = self._config()
        self.subsystem_ = cfg.subsystem
        self.corpus_, self.log_ = fuzz(cfg)
        return self

    def score(self, X=None, y=None, subsystem=None):
        check_is_fitted(self, "corpus_")
        sub = subsystem or self.subsystem_
        return coverage_stats(self.corpus_.covered, sub).covered / sub.total

    def save(self, out_dir):
        check_is_fitted(self, "corpus_")
        save_corpus(self.corpus_, self.log_, out_dir)
