"""kcov-style traces, addr2line-style block maps and subsystem classification."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_block_set, check_block_map

DEFAULT_PATTERN = r"/fs/|/mm/|fs\.h|mm\.h"


class CoverageFormatError(ValueError):
    """Malformed trace or block-map text."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


_HEX_RE = re.compile(r"^0x[0-9a-f]+$")


def _decode(data):
    if isinstance(data, (bytes, bytearray)):
        return data.decode("utf-8")
    return data


def _parse_addr(token, lineno):
    if not _HEX_RE.match(token):
        raise CoverageFormatError(f"not a 0x-prefixed lowercase hex address: {token!r}", lineno)
    value = int(token, 16)
    if value >> 64:
        raise CoverageFormatError(f"address exceeds 64 bits: {token}", lineno)
    return value


class CoverageTrace(frozenset):
    """Set of basic-block addresses observed during one or more executions."""

    def serialize(self) -> str:
        return serialize_trace(self)


def parse_trace(data) -> CoverageTrace:
    """Parse one ``0x<hex>`` address per line; duplicates collapse."""
    blocks = set()
    for lineno, line in enumerate(_decode(data).split("\n"), 1):
        token = line.strip()
        if token:
            blocks.add(_parse_addr(token, lineno))
    return CoverageTrace(blocks)


def serialize_trace(blocks: Iterable[int]) -> str:
    return "".join(f"{a:#x}\n" for a in sorted(blocks))


def read_trace(path) -> CoverageTrace:
    with open(path, "rb") as fh:
        return parse_trace(fh.read())


def write_trace(path, blocks) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(serialize_trace(blocks))


class BlockMap:
    """Address -> source paths (more than one path when code was inlined)."""

    def __init__(self, entries=None):
        self.entries = {}
        for addr, paths in (entries or {}).items():
            paths = list(paths)
            if not paths or any(not p for p in paths):
                raise ValueError(f"block {addr:#x} has an empty source path")
            self.entries[int(addr)] = paths

    @property
    def total_blocks(self) -> int:
        return len(self.entries)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, addr):
        return addr in self.entries

    def __getitem__(self, addr):
        return self.entries[addr]

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other):
        return isinstance(other, BlockMap) and self.entries == other.entries

    def addresses(self) -> frozenset:
        return frozenset(self.entries)

    def serialize(self) -> str:
        return "".join(f"{a:#x}\t{','.join(self.entries[a])}\n" for a in sorted(self.entries))


def parse_block_map(data) -> BlockMap:
    """Parse ``0x<addr>\\t<path>[,<path>...]`` lines."""
    entries = {}
    for lineno, line in enumerate(_decode(data).split("\n"), 1):
        if not line.strip():
            continue
        addr_tok, sep, rest = line.rstrip("\r").partition("\t")
        addr = _parse_addr(addr_tok.strip(), lineno)
        if not sep or not rest.strip():
            raise CoverageFormatError(f"missing path field for {addr_tok.strip()}", lineno)
        paths = [p.strip() for p in rest.split(",")]
        if any(not p for p in paths):
            raise CoverageFormatError("empty path in path list", lineno)
        if addr in entries:
            raise CoverageFormatError(f"duplicate address {addr:#x}", lineno)
        entries[addr] = paths
    return BlockMap(entries)


def read_block_map(path) -> BlockMap:
    with open(path, "rb") as fh:
        return parse_block_map(fh.read())


def write_block_map(path, block_map: BlockMap) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(block_map.serialize())


@dataclass(frozen=True)
class SubsystemSet:
    name: str
    regex: str
    blocks: frozenset = field(default_factory=frozenset)

    @property
    def total(self) -> int:
        return len(self.blocks)

    def __contains__(self, addr):
        return addr in self.blocks


def _normalize(path):
    return path if path.startswith("/") else "/" + path


def path_matches(pattern, path) -> bool:
    """Unanchored search of ``pattern`` in ``path`` (given a leading ``/``)."""
    if isinstance(pattern, str):
        pattern = re.compile(pattern)
    return pattern.search(_normalize(path)) is not None


def classify(block_map: BlockMap, name="vfs", regex=DEFAULT_PATTERN) -> SubsystemSet:
    """Blocks with at least one source path matching ``regex``."""
    try:
        rx = re.compile(regex)
    except re.error as exc:
        raise ValueError(f"invalid subsystem regex {regex!r}: {exc}") from None
    blocks = frozenset(a for a, paths in block_map.entries.items()
                       if any(rx.search(_normalize(p)) for p in paths))
    return SubsystemSet(name, regex, blocks)


def round_pct(covered, total) -> float:
    """Percentage rounded half-up to one decimal, computed exactly."""
    value = (Decimal(100) * covered / Decimal(total)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return float(value)


@dataclass(frozen=True)
class CoverageStats:
    covered: int
    total: int
    pct: float

    def __str__(self):
        return f"{self.covered}/{self.total} ({self.pct:.1f}%)"


def stats_from_counts(covered, total) -> CoverageStats:
    if total <= 0:
        raise ValueError("subsystem has no blocks; percentage undefined")
    if not 0 <= covered <= total:
        raise ValueError(f"covered count {covered} outside [0, {total}]")
    return CoverageStats(covered, total, round_pct(covered, total))


def coverage_stats(covered, subsystem: SubsystemSet) -> CoverageStats:
    """Coverage of ``subsystem``; addresses outside it are ignored."""
    if subsystem.total == 0:
        raise ValueError(f"subsystem {subsystem.name!r} has no blocks; percentage undefined")
    n = len(subsystem.blocks.intersection(covered))
    return stats_from_counts(n, subsystem.total)


def set_ops(a, b):
    """Return (union, intersection, a minus b) as frozensets."""
    a, b = frozenset(a), frozenset(b)
    return a | b, a & b, a - b


def union_all(sets) -> frozenset:
    out = set()
    for s in sets:
        out.update(s)
    return frozenset(out)


class SubsystemClassifier(TransformerMixin, BaseEstimator):
    """Learn the subsystem block set of a block map and filter traces by it.

    ``fit`` takes a BlockMap (or block-map text). ``predict`` returns one
    boolean per address; ``transform`` restricts each trace to the subsystem.
    """

    def __init__(self, pattern=DEFAULT_PATTERN, name="vfs"):
        self.pattern = pattern
        self.name = name

    def fit(self, X, y=None):
        block_map = check_block_map(X)
        self.subsystem_ = classify(block_map, self.name, self.pattern)
        self.n_blocks_ = block_map.total_blocks
        return self

    def predict(self, X):
        check_is_fitted(self, "subsystem_")
        return [int(a) in self.subsystem_.blocks for a in X]

    def transform(self, X):
        check_is_fitted(self, "subsystem_")
        return [CoverageTrace(as_block_set(t) & self.subsystem_.blocks) for t in X]

    def score(self, X, y=None):
        """Fraction of subsystem blocks covered by the union of traces ``X``."""
        check_is_fitted(self, "subsystem_")
        return coverage_stats(union_all(as_block_set(t) for t in X), self.subsystem_).covered / self.subsystem_.total
