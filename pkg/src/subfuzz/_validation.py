"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numbers


def as_block_set(blocks) -> frozenset:
    """Coerce an iterable of addresses (ints or ``0x`` strings) to a frozenset of ints."""
    if isinstance(blocks, (str, bytes)):
        from .coverage import parse_trace

        return parse_trace(blocks)
    out = set()
    for b in blocks:
        if isinstance(b, str):
            b = int(b, 16)
        if not isinstance(b, numbers.Integral) or isinstance(b, bool) or b < 0 or b >> 64:
            raise ValueError(f"invalid block address {b!r}")
        out.add(int(b))
    return frozenset(out)


def check_block_map(X):
    from .coverage import BlockMap, parse_block_map

    if isinstance(X, BlockMap):
        return X
    if isinstance(X, (str, bytes)):
        return parse_block_map(X)
    if isinstance(X, dict):
        return BlockMap(X)
    raise TypeError(f"expected a BlockMap, mapping or block-map text, got {type(X).__name__}")


def check_epsilon(epsilon) -> float:
    if not isinstance(epsilon, numbers.Real) or not 0 <= epsilon < 1:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon!r}")
    return float(epsilon)


def check_positive_int(value, name, minimum=1) -> int:
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
