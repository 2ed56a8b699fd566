"""Cost-weighted greedy set cover over test/program coverage."""

from __future__ import annotations

import csv
import io
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_block_set, check_epsilon
from .coverage import read_trace


@dataclass(frozen=True)
class MinimizeItem:
    id: str
    blocks: frozenset
    cost: float = 1

    def __post_init__(self):
        if not self.cost > 0:
            raise ValueError(f"item {self.id!r}: cost must be positive, got {self.cost!r}")
        object.__setattr__(self, "blocks", as_block_set(self.blocks))


@dataclass(frozen=True)
class Selection:
    kept: tuple
    new_blocks: tuple
    costs: tuple
    covered: frozenset
    lost: frozenset
    total_cost: float = 0
    universe: frozenset = field(default=frozenset(), repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("rank", "id", "new_blocks", "cost"))
        for rank, (item_id, new, cost) in enumerate(zip(self.kept, self.new_blocks, self.costs), 1):
            w.writerow((rank, item_id, new, _fmt_cost(cost)))
        return buf.getvalue()


def _fmt_cost(cost):
    return str(int(cost)) if float(cost).is_integer() else repr(float(cost))


def coverage_target(universe_size, epsilon) -> int:
    """Smallest block count satisfying covered >= (1 - epsilon) * |universe|."""
    keep = 1 - Fraction(repr(float(epsilon)))
    return math.ceil(keep * universe_size)


def _check_items(items):
    items = list(items)
    seen = set()
    for it in items:
        if it.id in seen:
            raise ValueError(f"duplicate item id {it.id!r}")
        seen.add(it.id)
    return items


def minimize(items, epsilon=0.0) -> Selection:
    """Greedy weighted set cover.

    Each round keeps the item with the most newly covered blocks per unit of
    cost (ties: more new blocks, then the smaller id). Stops once the kept
    items cover at least ``(1 - epsilon)`` of the union or nothing adds
    coverage.
    """
    epsilon = check_epsilon(epsilon)
    items = _check_items(items)
    universe = frozenset().union(*(it.blocks for it in items)) if items else frozenset()
    target = coverage_target(len(universe), epsilon)
    covered = set()
    kept, news, costs = [], [], []
    remaining = {it.id: it for it in items}
    while len(covered) < target and remaining:
        best, best_key = None, None
        for it in remaining.values():
            gain = len(it.blocks - covered)
            if not gain:
                continue
            key = (Fraction(gain) / Fraction(it.cost), gain)
            if best is None or key > best_key or (key == best_key and it.id < best.id):
                best, best_key = it, key
        if best is None:
            break
        new = best.blocks - covered
        covered |= new
        kept.append(best.id)
        news.append(len(new))
        costs.append(best.cost)
        del remaining[best.id]
        # items that can no longer contribute are dropped for good
        remaining = {k: v for k, v in remaining.items() if not v.blocks <= covered}
    covered = frozenset(covered)
    return Selection(tuple(kept), tuple(news), tuple(costs), covered, universe - covered,
                     sum(costs), universe)


def redundancy_report(items):
    """(id, number of blocks no other item covers) for every item, in input order."""
    items = _check_items(items)
    counts = Counter()
    for it in items:
        counts.update(it.blocks)
    return [(it.id, sum(1 for b in it.blocks if counts[b] == 1)) for it in items]


def read_items_csv(path, subsystem=None):
    """Load ``id,cost,trace_file`` rows; trace paths are relative to the CSV.

    Blocks are restricted to ``subsystem`` when one is given.
    """
    base = os.path.dirname(os.path.abspath(path))
    items = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["id", "cost", "trace_file"]:
            raise ValueError("items CSV header must be id,cost,trace_file")
        for lineno, row in enumerate(reader, 2):
            try:
                cost = float(row["cost"]) if row["cost"].strip() else 1.0
            except ValueError:
                raise ValueError(f"line {lineno}: bad cost {row['cost']!r}") from None
            trace = read_trace(os.path.join(base, row["trace_file"].strip()))
            blocks = trace & subsystem.blocks if subsystem is not None else trace
            items.append(MinimizeItem(row["id"].strip(), frozenset(blocks), cost))
    return items


def items_from_corpus(corpus):
    """Corpus entries as minimize items: subsystem blocks, runtime cost."""
    blocks = corpus.subsystem.blocks
    return [MinimizeItem(e.id, e.full_trace & blocks, e.runtime_cost) for e in corpus.entries]


class GreedyMinimizer(TransformerMixin, BaseEstimator):
    """``fit(items)`` computes ``selection_``; ``transform(items)`` keeps the selected ones."""

    def __init__(self, epsilon=0.0):
        self.epsilon = epsilon

    def fit(self, X, y=None):
        self.selection_ = minimize(X, self.epsilon)
        self.kept_ids_ = list(self.selection_.kept)
        return self

    def transform(self, X):
        check_is_fitted(self, "selection_")
        keep = set(self.kept_ids_)
        return [it for it in X if it.id in keep]

    def score(self, X=None, y=None):
        """Fraction of the input union still covered by the selection."""
        check_is_fitted(self, "selection_")
        sel = self.selection_
        return len(sel.covered) / len(sel.universe) if sel.universe else 1.0
