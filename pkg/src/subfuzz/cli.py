"""``subfuzz`` command line.

Exit codes: 0 success, 1 usage or input parse error, 2 data/integrity error.
Environment: SUBFUZZ_SEED and SUBFUZZ_REGEX supply defaults that flags override.
"""

from __future__ import annotations

import argparse
import csv
import os
import re
import sys

from . import __version__
from .coverage import (DEFAULT_PATTERN, CoverageFormatError, classify, coverage_stats, read_block_map,
                       read_trace, serialize_trace, union_all, write_block_map)
from .engine import EngineError, FuzzConfig, FuzzLog, fuzz, load_corpus, replay, save_corpus
from .minimizer import items_from_corpus, minimize, read_items_csv
from .program import ProgramError, parse_program
from .report import (IntegrityError, combine_stats, combined_csv, series_csv, suite_table, table_csv, time_series,
                     venn, venn_csv)
from .target import MiniKernel, SYSCALLS, default_disabled, emit_block_map


class UsageError(Exception):
    """Bad flags or unparsable input; exit 1."""


class DataError(Exception):
    """Inputs parse but are inconsistent; exit 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- shared helpers -----------------------------------------------------------


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SUBFUZZ_SEED")
    if env is None:
        return 0
    try:
        return int(env, 0)
    except ValueError:
        raise UsageError(f"SUBFUZZ_SEED is not an integer: {env!r}") from None


def _regex(args):
    pattern = getattr(args, "regex", None)
    if pattern is None:
        pattern = os.environ.get("SUBFUZZ_REGEX", DEFAULT_PATTERN)
    try:
        re.compile(pattern)
    except re.error as exc:
        raise UsageError(f"invalid regex {pattern!r}: {exc}") from None
    return pattern


def _block_map(path):
    return emit_block_map() if path is None else read_block_map(path)


def _subsystem(args):
    return classify(_block_map(getattr(args, "map", None)), args.name, _regex(args))


def _union_traces(paths):
    return union_all(read_trace(p) for p in paths or ())


def _read_disable(path):
    names = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                names.append(line)
    return frozenset(names)


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="\n") as fh:
            fh.write(text)


# -- subcommands --------------------------------------------------------------


def cmd_fuzz(args):
    subsystem = _subsystem(args)
    disabled = _read_disable(args.disable) if args.disable else frozenset()
    baseline = _union_traces(args.baseline) if args.baseline else None
    try:
        cfg = FuzzConfig(seed=_seed(args), iterations=args.iterations, workers=args.workers,
                         disabled_syscalls=disabled, subsystem=subsystem, max_program_len=args.max_len,
                         baseline=baseline)
    except (ValueError, EngineError) as exc:
        raise UsageError(str(exc)) from None
    corpus, flog = fuzz(cfg)
    save_corpus(corpus, flog, args.out)
    kernel, subsys, minus = corpus.counts()
    print(f"iterations={len(flog)} admitted={len(corpus)} crashes={flog.count('rejected_crash')} "
          f"kernel_blocks={kernel} subsys_minus_baseline={minus}")
    print(f"{subsystem.name}: {coverage_stats(corpus.covered, subsystem)}")
    return 0


def cmd_run(args):
    with open(args.program, "rb") as fh:
        program = parse_program(fh.read())
    result = MiniKernel(faults_enabled=not args.no_faults).execute(program)
    if args.trace_out:
        with open(args.trace_out, "w", newline="\n") as fh:
            fh.write(serialize_trace(result.trace))
    for call, status in zip(program, result.statuses):
        print(f"{call}  -> {status}")
    line = f"outcome: {result.outcome}"
    if result.crashed:
        line += f" ({result.crash_reason})"
    print(line)
    print(f"blocks: {len(result.trace)}")
    return 0


def cmd_blockmap(args):
    block_map = emit_block_map()
    if args.out:
        write_block_map(args.out, block_map)
    else:
        sys.stdout.write(block_map.serialize())
    return 0


def cmd_syscalls(args):
    if args.non_vfs:
        # suitable as a --disable file for fuzz
        for name in sorted(default_disabled()):
            print(name)
        return 0
    for spec in SYSCALLS:
        params = ", ".join(a.name for a in spec.args)
        ret = f" -> {spec.returns}" if spec.returns else ""
        print(f"{spec.name}({params}){ret}\t{spec.subsystem_hint}")
    return 0


def cmd_classify(args):
    subsystem = _subsystem(args)
    if args.out:
        with open(args.out, "w", newline="\n") as fh:
            fh.write(serialize_trace(subsystem.blocks))
    total = _block_map(args.map).total_blocks
    print(f"{subsystem.name}: {subsystem.total}/{total} blocks")
    return 0


def cmd_coverage(args):
    subsystem = _subsystem(args)
    traces = [read_trace(p) for p in args.traces]
    for path, trace in zip(args.traces, traces):
        print(f"{path}: {coverage_stats(trace, subsystem)}")
    if len(traces) > 1:
        print(f"union: {coverage_stats(union_all(traces), subsystem)}")
    return 0


def cmd_minimize(args):
    if (args.items is None) == (args.corpus is None):
        raise UsageError("give exactly one of --items or --corpus")
    if args.items:
        subsystem = _subsystem(args) if (args.map or args.regex) else None
        items = read_items_csv(args.items, subsystem)
    else:
        corpus, _ = load_corpus(args.corpus)
        items = items_from_corpus(corpus)
    try:
        sel = minimize(items, args.epsilon)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _emit(sel.to_csv(), args.out)
    print(f"kept {len(sel.kept)}/{len(items)} items, covered {len(sel.covered)}/{len(sel.universe)} blocks, "
          f"cost {sel.total_cost:g}", file=sys.stderr)
    return 0


def _read_suites(path):
    base = os.path.dirname(os.path.abspath(path))
    suites = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["suite", "tests", "trace_file"]:
            raise UsageError("suites CSV header must be suite,tests,trace_file")
        for lineno, row in enumerate(reader, 2):
            try:
                tests = int(row["tests"])
            except ValueError:
                raise UsageError(f"{path}: line {lineno}: bad test count {row['tests']!r}") from None
            traces = [read_trace(os.path.join(base, p.strip())) for p in row["trace_file"].split(";") if p.strip()]
            suites.append((row["suite"], tests, traces))
    return suites


def cmd_report(args):
    if args.kind == "table":
        if not args.suites:
            raise UsageError("report table needs --suites")
        rows = suite_table(_read_suites(args.suites), _subsystem(args))
        _emit(table_csv(rows), args.out)
    elif args.kind == "venn":
        if not args.a or not args.b:
            raise UsageError("report venn needs --a and --b traces")
        counts = venn(_subsystem(args), _union_traces(args.a), _union_traces(args.b))
        _emit(venn_csv(counts), args.out)
    elif args.kind == "series":
        if (args.log is None) == (args.corpus is None):
            raise UsageError("report series needs exactly one of --log or --corpus")
        if args.log:
            with open(args.log) as fh:
                flog = FuzzLog.from_csv(fh.read())
        else:
            _, flog = load_corpus(args.corpus)
            if flog is None:
                raise DataError(f"{args.corpus}: no fuzzlog.csv")
        _emit(series_csv(time_series(flog)), args.out)
    elif args.kind == "combine":
        if not args.a or not args.b:
            raise UsageError("report combine needs --a (base) and --b (added) traces")
        stats = combine_stats(_union_traces(args.a), _union_traces(args.b), _subsystem(args))
        _emit(combined_csv(stats), args.out)
    return 0


def cmd_replay(args):
    corpus, _ = load_corpus(args.corpus)
    rep = replay(corpus)
    for e in rep.entries:
        status = "DIVERGED" if e.diverged else "ok"
        detail = f" ({e.error})" if e.error else ""
        stats = e.stats if e.stats is not None else "-"
        print(f"{e.id}: {status} {stats}{detail}")
    print(f"union: kernel_blocks={rep.kernel_blocks} {corpus.subsystem.name}: {rep.aggregate} "
          f"subsys_minus_baseline={rep.subsys_minus_baseline}")
    if rep.flagged:
        print(f"{len(rep.flagged)} entries diverged", file=sys.stderr)
        return 2
    return 0


# -- parser -------------------------------------------------------------------


def _add_subsystem_flags(p, with_map=True):
    if with_map:
        p.add_argument("--map", help="block map file (default: the built-in target's map)")
    p.add_argument("--regex", help=f"subsystem path regex (env SUBFUZZ_REGEX, default {DEFAULT_PATTERN!r})")
    p.add_argument("--name", default="vfs", help="subsystem label (default: vfs)")


def build_parser():
    parser = _Parser(prog="subfuzz", description="Subsystem-filtered coverage-guided fuzzing toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fuzz", help="run the feedback loop and write a corpus directory")
    p.add_argument("--seed", type=lambda s: int(s, 0), help="RNG seed (env SUBFUZZ_SEED, default 0)")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-len", type=int, default=12, help="maximum calls per program")
    p.add_argument("--disable", metavar="FILE", help="file listing syscalls to disable, one per line")
    p.add_argument("--baseline", nargs="+", metavar="TRACE", help="trace files excluded from new-coverage accounting")
    p.add_argument("--out", required=True, help="corpus output directory")
    _add_subsystem_flags(p, with_map=False)
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("run", help="execute one program file")
    p.add_argument("program")
    p.add_argument("--trace-out", metavar="FILE")
    p.add_argument("--no-faults", action="store_true", help="disable injected bugs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("blockmap", help="write the target's block map")
    p.add_argument("--out")
    p.set_defaults(func=cmd_blockmap)

    p = sub.add_parser("syscalls", help="list the target's syscall table")
    p.add_argument("--non-vfs", action="store_true", help="print only syscalls unrelated to the filesystem layer")
    p.set_defaults(func=cmd_syscalls)

    p = sub.add_parser("classify", help="count subsystem blocks in a block map")
    _add_subsystem_flags(p)
    p.add_argument("--out", help="write subsystem addresses in trace format")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("coverage", help="subsystem coverage of trace files")
    p.add_argument("traces", nargs="+")
    _add_subsystem_flags(p)
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("minimize", help="greedy cost-weighted set cover")
    p.add_argument("--items", help="CSV with id,cost,trace_file")
    p.add_argument("--corpus", help="corpus directory (runtime cost as weight)")
    p.add_argument("--epsilon", type=float, default=0.0, help="allowed uncovered fraction, in [0, 1)")
    p.add_argument("--out")
    _add_subsystem_flags(p)
    p.set_defaults(func=cmd_minimize)

    p = sub.add_parser("report", help="table, venn, series or combine CSV")
    p.add_argument("kind", choices=("table", "venn", "series", "combine"))
    p.add_argument("--suites", help="CSV with suite,tests,trace_file (';' separates several traces)")
    p.add_argument("--a", nargs="+", metavar="TRACE")
    p.add_argument("--b", nargs="+", metavar="TRACE")
    p.add_argument("--log", help="fuzzlog.csv")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--out")
    _add_subsystem_flags(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="re-execute a corpus and check stored traces")
    p.add_argument("corpus")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ProgramError, CoverageFormatError) as exc:
        print(f"subfuzz: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, IntegrityError, EngineError, OSError, ValueError, KeyError) as exc:
        print(f"subfuzz: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
