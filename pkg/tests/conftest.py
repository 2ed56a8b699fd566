import glob
import os

import pytest

from subfuzz.coverage import classify
from subfuzz.program import parse_program
from subfuzz.target import emit_block_map

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture_path(*parts):
    return os.path.join(FIXTURES, *parts)


def load_prog(*parts):
    with open(fixture_path(*parts)) as fh:
        return parse_program(fh.read())


def full_tour_programs():
    return [load_prog("full_tour", os.path.basename(p))
            for p in sorted(glob.glob(fixture_path("full_tour", "*.prog")))]


@pytest.fixture(scope="session")
def block_map():
    return emit_block_map()


@pytest.fixture(scope="session")
def vfs(block_map):
    return classify(block_map)


# reference suite table: suite, tests, covered VFS blocks, printed percentage
TABLE1 = [
    ("dio", 30, 8312, 11.0),
    ("fcntl-locktests", 1, 2420, 3.2),
    ("filecaps", 1, 2518, 3.3),
    ("fs", 65, 17495, 23.2),
    ("fs_ext4", 4, 13081, 17.3),
    ("fs_perms_simple", 18, 5081, 6.7),
    ("fsx", 1, 6572, 8.7),
    ("io", 2, 6817, 9.0),
    ("syscalls", 1181, 24217, 32.1),
]
TABLE1_TOTAL = ("TOTAL", 1303, 26229, 34.7)
VFS_TOTAL = 75531
OUTSIDE = 1000  # extra non-VFS blocks in the synthetic map


def table1_block_map():
    from subfuzz.coverage import BlockMap

    entries = {a: ["fs/x.c"] for a in range(VFS_TOTAL)}
    entries.update({a: ["kernel/y.c"] for a in range(VFS_TOTAL, VFS_TOTAL + OUTSIDE)})
    return BlockMap(entries)


def table1_suite_sets():
    """One block set per suite with the reference covered counts and a union of exactly 26229.

    Every suite covers a prefix of the range [0, 26229) except fs_ext4, which
    covers its tail; fs_ext4 overlaps syscalls, so the union is the whole range.
    """
    total = TABLE1_TOTAL[2]
    sets = {}
    for name, _, covered, _ in TABLE1:
        if name == "fs_ext4":
            sets[name] = frozenset(range(total - covered, total))
        else:
            sets[name] = frozenset(range(covered))
    return sets


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
