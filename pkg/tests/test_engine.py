import filecmp
import os
import random

import pytest
from sklearn.base import clone

from conftest import load_prog
from subfuzz.coverage import BlockMap, classify, coverage_stats, read_trace, write_trace
from subfuzz.engine import (DEFAULT_WEIGHTS, EngineError, FuzzConfig, FuzzLog, LogEvent, SubsystemFuzzer, admit,
                            fuzz, generate, load_corpus, mutate, repair, replay, save_corpus)
from subfuzz.program import Call, Program, Ref, is_valid, parse_program, serialize_program
from subfuzz.target import SYSCALLS, MiniKernel, default_disabled
from subfuzz.target.syscalls import SYSCALLS_BY_NAME

ALL = {s.name for s in SYSCALLS}

# seed whose 10^4-iteration default run reaches an injected bug
CRASH_SEED = 2


@pytest.fixture(scope="module")
def small_run(vfs):
    return fuzz(FuzzConfig(seed=5, iterations=1500, subsystem=vfs))


# -- generation -----------------------------------------------------------------


def test_generate_only_open():
    rng = random.Random(1)
    for _ in range(50):
        p = generate(rng, disabled=ALL - {"open"})
        assert {c.name for c in p} == {"open"}
        assert [c.result for c in p] == list(range(len(p)))


def test_generate_skips_consumers_without_producers():
    disabled = {s.name for s in SYSCALLS if s.returns == "fd"}
    rng = random.Random(2)
    for _ in range(300):
        p = generate(rng, disabled=disabled)
        assert not any(c.name == "read" for c in p)
        assert is_valid(p)


def test_generate_deterministic_and_bounded():
    a = [generate(random.Random(7)) for _ in range(3)]
    b = [generate(random.Random(7)) for _ in range(3)]
    assert a == b
    rng = random.Random(8)
    for _ in range(500):
        p = generate(rng, max_len=5)
        assert 1 <= len(p) <= 5


def test_generate_all_disabled_errors():
    with pytest.raises(EngineError, match="all syscalls disabled"):
        generate(random.Random(0), disabled=ALL)
    with pytest.raises(EngineError, match="all syscalls disabled"):
        FuzzConfig(disabled_syscalls=ALL)


def test_generate_validity_and_disable_list():
    rng = random.Random(3)
    dis = default_disabled()
    for _ in range(10000):
        p = generate(rng, disabled=dis)
        assert is_valid(p)
        assert not {c.name for c in p} & dis


# -- mutation -------------------------------------------------------------------


def test_repair_rewires_or_drops():
    # removing the binding call leaves read dangling; nothing earlier produces an fd
    calls = [Call("read", (Ref(0), 0x20))]
    assert repair(calls) == Program(())
    calls = [Call("open", ("./file1", 0, 0), 1), Call("getpid"), Call("read", (Ref(0), 0x20))]
    fixed = repair(calls)
    assert fixed.calls[0].result == 0
    assert fixed.calls[2] == Call("read", (Ref(0), 0x20))
    assert is_valid(fixed)


def test_remove_mutation_keeps_program_valid():
    p = parse_program('r0 = open("./file0", 0x2, 0x0)\nread(r0, 0x20)\nwrite(r0, 0x10)\n')
    rng = random.Random(0)
    for _ in range(100):
        q = mutate(p, rng, weights={"remove": 1})
        assert is_valid(q) and q != p and len(q) <= 2


def test_mutate_arg_flags_stay_in_domain():
    p = parse_program('r0 = open("./file0", 0x2, 0x0)\n')
    mask = SYSCALLS_BY_NAME["open"].args[1].flag_mask
    rng = random.Random(4)
    for _ in range(500):
        q = mutate(p, rng, weights={"mutate_arg": 1})
        assert q.calls[0].args[1] & ~mask == 0
        assert is_valid(q)


def test_random_mutations_validate():
    rng = random.Random(9)
    donors = [load_prog("listing1.prog")] + [generate(rng) for _ in range(20)]
    p = donors[0]
    changed = 0
    for _ in range(10000):
        q = mutate(p, rng, donors=donors)
        assert is_valid(q)
        assert 1 <= len(q) <= 12
        changed += q != p
        p = q if rng.random() < 0.9 else rng.choice(donors)
    assert changed == 10000


def test_mutate_respects_disable_list():
    rng = random.Random(10)
    dis = default_disabled()
    p = generate(rng, disabled=dis)
    for _ in range(2000):
        p = mutate(p, rng, disabled=dis, weights={"insert": 3, "remove": 1, "mutate_arg": 4})
        assert not {c.name for c in p} & dis


# -- admission ------------------------------------------------------------------


def test_admit_examples():
    sub = classify(BlockMap({i: ["fs/a.c" if i < 10 else "net/b.c"] for i in range(20)}))
    assert admit({1, 2, 3, 15}, sub, {0}) == {1, 2, 3}
    assert admit({15, 16}, sub, set()) == frozenset()
    assert admit({1, 2}, sub, {1, 2, 3}) == frozenset()
    assert admit({1, 2, 3}, sub, set(), baseline={1, 2}) == {3}


# -- fuzz loop ------------------------------------------------------------------


def test_fuzz_determinism_on_disk(tmp_path, vfs):
    cfg = dict(seed=7, iterations=1500, subsystem=vfs)
    for name in ("a", "b"):
        corpus, log = fuzz(FuzzConfig(**cfg))
        save_corpus(corpus, log, tmp_path / name)
    a, b = sorted(os.listdir(tmp_path / "a")), sorted(os.listdir(tmp_path / "b"))
    assert a == b
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", a, shallow=False)
    assert not mismatch and not errors


def test_admission_soundness(small_run, vfs):
    corpus, log = small_run
    seen = set()
    for e in corpus.entries:
        assert e.signature
        assert e.signature <= vfs.blocks & e.full_trace
        assert not e.signature & seen
        seen |= e.signature


def test_log_monotone_and_admissions(small_run):
    corpus, log = small_run
    assert len(log) == 1500
    sigs = {e.admitted_at: len(e.signature) for e in corpus.entries}
    prev = None
    for ev in log:
        if prev is not None:
            assert ev.kernel >= prev.kernel and ev.subsys >= prev.subsys
            delta = ev.subsys_minus_baseline - prev.subsys_minus_baseline
            assert delta == sigs.get(ev.iteration, 0)
        assert (ev.outcome == "admitted") == (ev.iteration in sigs)
        prev = ev
    assert log.events[-1].subsys == len(set().union(*(e.signature for e in corpus.entries)))


def test_crash_opacity(vfs):
    crashes = []

    class CountingKernel(MiniKernel):
        def execute(self, program, faults_enabled=None):
            r = super().execute(program, faults_enabled)
            crashes.append(r.crashed)
            return r

    corpus, log = fuzz(FuzzConfig(seed=CRASH_SEED, iterations=10000, subsystem=vfs), kernel_factory=CountingKernel)
    assert len(log) == 10000
    assert log.count("rejected_crash") == sum(crashes) >= 1
    k = MiniKernel()
    for e in corpus.entries:
        assert not k.execute(e.program).crashed


def test_baseline_mode(vfs):
    base = set(sorted(vfs.blocks)[::3])
    corpus, log = fuzz(FuzzConfig(seed=1, iterations=1000, subsystem=vfs, baseline=base))
    for e in corpus.entries:
        assert not e.signature & base
    last = log.events[-1]
    assert last.subsys_minus_baseline == len((corpus.covered & vfs.blocks) - base)
    assert last.subsys_minus_baseline < last.subsys


def test_disable_list_totality(vfs):
    dis = frozenset(default_disabled())
    corpus, _ = fuzz(FuzzConfig(seed=3, iterations=800, subsystem=vfs, disabled_syscalls=dis))
    for e in corpus.entries:
        assert not {c.name for c in e.program} & dis


def test_multi_worker_invariants(vfs):
    corpus, log = fuzz(FuzzConfig(seed=4, iterations=600, workers=4, subsystem=vfs))
    assert len(log) == 600
    seen = set()
    for e in corpus.entries:
        assert e.signature and e.signature <= vfs.blocks and not e.signature & seen
        seen |= e.signature
    assert [ev.iteration for ev in log] == list(range(600))


def test_config_validation():
    with pytest.raises(ValueError):
        FuzzConfig(iterations=-1)
    with pytest.raises(ValueError):
        FuzzConfig(workers=0)
    with pytest.raises(ValueError):
        FuzzConfig(mutation_weights={"insert": 0, "remove": 0})
    with pytest.raises(ValueError):
        FuzzConfig(mutation_weights={"teleport": 1})
    with pytest.raises(ValueError):
        FuzzConfig(disabled_syscalls={"nosuch"})
    assert FuzzConfig().mutation_weights == DEFAULT_WEIGHTS


def test_target_init_failure_aborts(vfs):
    def broken():
        raise RuntimeError("no target")

    with pytest.raises(EngineError, match="target initialization failed"):
        fuzz(FuzzConfig(iterations=1, subsystem=vfs), kernel_factory=broken)


def test_zero_iterations(vfs):
    corpus, log = fuzz(FuzzConfig(iterations=0, subsystem=vfs))
    assert len(corpus) == 0 and len(log) == 0


# -- persistence and replay ---------------------------------------------------------


def test_save_load_round_trip(tmp_path, small_run):
    corpus, log = small_run
    save_corpus(corpus, log, tmp_path)
    loaded, loaded_log = load_corpus(tmp_path)
    assert [e.id for e in loaded] == [e.id for e in corpus]
    assert [e.signature for e in loaded] == [e.signature for e in corpus]
    assert [e.full_trace for e in loaded] == [e.full_trace for e in corpus]
    assert loaded_log.events == log.events
    for e in corpus.entries:
        with open(tmp_path / f"{e.id}.prog") as fh:
            assert fh.read() == serialize_program(e.program)


def test_fuzzlog_csv_round_trip_and_errors(small_run):
    _, log = small_run
    assert FuzzLog.from_csv(log.to_csv()).events == log.events
    with pytest.raises(ValueError):
        FuzzLog.from_csv("a,b\n")
    with pytest.raises(ValueError):
        FuzzLog.from_csv("iteration,program,outcome,kernel,subsys,subsys_minus_baseline\n0,x,exploded,1,1,1\n")
    flog = FuzzLog()
    flog.append(LogEvent(0, "x", "admitted", 5, 3, 3))
    with pytest.raises(EngineError):
        flog.append(LogEvent(1, "y", "rejected_no_new", 4, 3, 3))


def test_replay_fresh_corpus(small_run, vfs):
    corpus, log = small_run
    rep = replay(corpus)
    assert rep.flagged == []
    last = log.events[-1]
    assert (rep.kernel_blocks, rep.subsys_blocks, rep.subsys_minus_baseline) == (
        last.kernel, last.subsys, last.subsys_minus_baseline)
    assert rep.aggregate == coverage_stats(corpus.covered, vfs)


def test_replay_flags_one_corrupted_trace(tmp_path, small_run):
    corpus, log = small_run
    save_corpus(corpus, log, tmp_path)
    victim = corpus.entries[len(corpus.entries) // 2].id
    trace = set(read_trace(tmp_path / f"{victim}.trace"))
    trace.pop()
    write_trace(tmp_path / f"{victim}.trace", trace)
    loaded, _ = load_corpus(tmp_path)
    rep = replay(loaded)
    assert [e.id for e in rep.flagged] == [victim]


def test_replay_continues_after_failing_entry(small_run):
    corpus, _ = small_run

    class Flaky(MiniKernel):
        def execute(self, program, faults_enabled=None):
            if program == corpus.entries[0].program:
                raise RuntimeError("boom")
            return super().execute(program, faults_enabled)

    rep = replay(corpus, kernel=Flaky())
    assert len(rep.flagged) == 1 and rep.flagged[0].error == "boom"
    assert len(rep.entries) == len(corpus)


# -- estimator --------------------------------------------------------------------


def test_subsystem_fuzzer_estimator(tmp_path):
    est = SubsystemFuzzer(seed=3, iterations=300)
    params = est.get_params()
    assert params["seed"] == 3 and params["pattern"] is None
    est.fit()
    assert 0 < est.score() <= 1
    twin = clone(est).fit()
    assert [e.id for e in twin.corpus_] == [e.id for e in est.corpus_]
    whole = clone(est).set_params(pattern=".*").fit()
    assert whole.subsystem_.total > est.subsystem_.total
    est.save(tmp_path)
    assert (tmp_path / "manifest.json").exists()
