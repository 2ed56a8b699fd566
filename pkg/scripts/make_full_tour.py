"""Regenerate the fuzz-derived part of tests/fixtures/full_tour.

Fuzzes a few seeds with the non-filesystem syscalls disabled, reduces the
union of the corpora with the greedy minimizer and writes the kept programs
as ``fuzz_NNN.prog``. Hand-written ``hand_*.prog`` files are left alone.
"""

import argparse
import glob
import os

from subfuzz.coverage import classify
from subfuzz.engine import FuzzConfig, fuzz
from subfuzz.minimizer import MinimizeItem, minimize
from subfuzz.program import serialize_program
from subfuzz.target import default_disabled, emit_block_map


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures", "full_tour"))
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--iterations", type=int, default=20000)
    args = ap.parse_args()

    vfs = classify(emit_block_map())
    programs, items = {}, []
    for seed in range(args.seeds):
        corpus, _ = fuzz(FuzzConfig(seed=seed, iterations=args.iterations, subsystem=vfs,
                                    disabled_syscalls=frozenset(default_disabled())))
        for e in corpus.entries:
            if e.id not in programs:
                programs[e.id] = e.program
                items.append(MinimizeItem(e.id, e.full_trace & vfs.blocks, 1))
    sel = minimize(items)
    for old in glob.glob(os.path.join(args.out, "fuzz_*.prog")):
        os.remove(old)
    for rank, pid in enumerate(sel.kept):
        with open(os.path.join(args.out, f"fuzz_{rank:03d}.prog"), "w", newline="\n") as fh:
            fh.write(serialize_program(programs[pid]))
    print(f"wrote {len(sel.kept)} programs covering {len(sel.covered)}/{vfs.total} VFS blocks")


if __name__ == "__main__":
    main()
