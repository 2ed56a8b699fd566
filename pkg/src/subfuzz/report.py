"""Suite coverage table, three-set region counts and cumulative coverage series."""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from decimal import ROUND_HALF_UP, Decimal

from .coverage import SubsystemSet, round_pct, stats_from_counts, union_all


class IntegrityError(ValueError):
    """A fuzz log whose cumulative counts go backwards."""


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- suite table --------------------------------------------------------------


@dataclass(frozen=True)
class SuiteRow:
    suite: str
    tests: int
    covered: int
    pct: float


def suite_table(suites, subsystem: SubsystemSet):
    """One row per ``(name, test_count, traces)`` suite plus a TOTAL row.

    A suite covers the union of its traces. The TOTAL row is the union over
    all suites, not the column sum, since suites overlap.
    """
    suites = list(suites)
    if not suites:
        raise ValueError("suite list is empty")
    if subsystem.total == 0:
        raise ValueError("subsystem has no blocks")
    rows, per_suite = [], []
    for name, tests, traces in suites:
        covered = union_all(traces) & subsystem.blocks
        per_suite.append(covered)
        st = stats_from_counts(len(covered), subsystem.total)
        rows.append(SuiteRow(name, int(tests), st.covered, st.pct))
    total = union_all(per_suite)
    st = stats_from_counts(len(total), subsystem.total)
    rows.append(SuiteRow("TOTAL", sum(r.tests for r in rows), st.covered, st.pct))
    return rows


def table_csv(rows) -> str:
    return _csv(("suite", "tests", "covered", "pct"),
                ((r.suite, r.tests, r.covered, f"{r.pct:.1f}%") for r in rows))


# -- venn ---------------------------------------------------------------------

VENN_LABELS = ("both", "in_a_only", "in_b_only", "uncovered", "a_outside", "b_outside", "both_outside")


@dataclass(frozen=True)
class VennCounts:
    both: int
    in_a_only: int
    in_b_only: int
    uncovered: int
    a_outside: int
    b_outside: int
    both_outside: int

    def as_dict(self):
        return dict(zip(VENN_LABELS, astuple(self)))


def venn(universe, a, b) -> VennCounts:
    """Region sizes of sets ``a`` and ``b`` relative to ``universe``.

    In-universe regions partition the universe; the three ``*_outside``
    counts are |a - U|, |b - U| and |(a & b) - U|.
    """
    u = universe.blocks if isinstance(universe, SubsystemSet) else frozenset(universe)
    a, b = frozenset(a), frozenset(b)
    au, bu = a & u, b & u
    return VennCounts(
        both=len(au & bu),
        in_a_only=len(au - bu),
        in_b_only=len(bu - au),
        uncovered=len(u - a - b),
        a_outside=len(a - u),
        b_outside=len(b - u),
        both_outside=len((a & b) - u),
    )


def venn_csv(counts: VennCounts) -> str:
    return _csv(("region", "count"), counts.as_dict().items())


# -- time series --------------------------------------------------------------


@dataclass(frozen=True)
class SeriesPoint:
    iteration: int
    kernel_blocks: int
    subsys_blocks: int
    subsys_minus_baseline: int


def time_series(log, baseline=None, subsystem=None, block_map=None):
    """Cumulative coverage points at every admitted event and at the last iteration.

    ``subsystem`` and ``block_map``, when given, bound the counts; a count
    exceeding them or decreasing raises IntegrityError.
    """
    events = list(log)
    limit_k = block_map.total_blocks if block_map is not None else None
    limit_s = subsystem.total if subsystem is not None else None
    points = []
    prev = (0, 0, 0)
    for i, e in enumerate(events):
        cur = (e.kernel, e.subsys, e.subsys_minus_baseline)
        if any(c < p for c, p in zip(cur, prev)):
            raise IntegrityError(f"cumulative count decreased at iteration {e.iteration}")
        if e.subsys_minus_baseline > e.subsys or e.subsys > e.kernel:
            raise IntegrityError(f"inconsistent counts at iteration {e.iteration}")
        if (limit_k is not None and e.kernel > limit_k) or (limit_s is not None and e.subsys > limit_s):
            raise IntegrityError(f"count exceeds block totals at iteration {e.iteration}")
        if baseline is not None and subsystem is not None:
            room = subsystem.total - len(frozenset(baseline) & subsystem.blocks)
            if e.subsys_minus_baseline > room:
                raise IntegrityError(f"baseline complement exceeded at iteration {e.iteration}")
        prev = cur
        if e.outcome == "admitted" or i == len(events) - 1:
            points.append(SeriesPoint(e.iteration, *cur))
    if not points:
        points.append(SeriesPoint(0, 0, 0, 0))
    return points


def series_csv(points) -> str:
    return _csv(("iteration", "kernel", "subsys", "subsys_minus_baseline"), (astuple(p) for p in points))


# -- combined coverage ----------------------------------------------------------


@dataclass(frozen=True)
class CombinedStats:
    base_covered: int
    combined_covered: int
    total: int
    base_pct: float
    combined_pct: float
    gain_pp: float
    relative_gain_pct: float

    def as_rows(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def _round1(value: Decimal) -> float:
    return float(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def combine_stats(base, added, subsystem: SubsystemSet) -> CombinedStats:
    """Coverage of ``base``, of ``base | added``, and the gain between them.

    Gains are computed on exact counts and rounded only for display, so
    ``gain_pp`` can differ by 0.1 from the difference of the two rounded
    percentages, and ``relative_gain_pct`` is not the ratio of rounded values.
    """
    if subsystem.total == 0:
        raise ValueError("subsystem has no blocks")
    base = frozenset(base) & subsystem.blocks
    if not base:
        raise ValueError("base coverage is empty; relative gain undefined")
    combined = base | (frozenset(added) & subsystem.blocks)
    total = subsystem.total
    gain = len(combined) - len(base)
    return CombinedStats(
        base_covered=len(base),
        combined_covered=len(combined),
        total=total,
        base_pct=round_pct(len(base), total),
        combined_pct=round_pct(len(combined), total),
        gain_pp=_round1(Decimal(100) * gain / Decimal(total)),
        relative_gain_pct=_round1(Decimal(100) * gain / Decimal(len(base))),
    )


def combined_csv(stats: CombinedStats) -> str:
    return _csv(("metric", "value"), stats.as_rows())
