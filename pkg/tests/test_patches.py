"""Precondition patches: copy planning, caching, command synthesis."""

from hypothesis import given, settings, strategies as st

from miniplane.commands import Kind
from miniplane.datamgr import DataManager
from miniplane.wtpatch import (PatchCache, apply_patch_to_dm, compute_patch,
                               patch_commands, patch_covers)
from miniplane.worker import patch_command_id


def dm_with(latest, instances):
    dm = DataManager()
    for obj, holders in instances.items():
        dm.create(obj, min(holders))
        dm.latest[obj] = latest[obj]
        dm.instances[obj] = dict(holders)
    return dm


def test_one_pair_per_failure_from_lowest_holder():
    dm = dm_with({5: 3, 6: 2},
                 {5: {4: 3, 2: 3, 1: 1}, 6: {3: 2, 1: 2}})
    failures = [(1, 5), (2, 6), (1, 6)]
    patch = compute_patch(70, 9, failures, dm)
    assert patch.pairs == frozenset(failures)
    # sorted by (worker, obj); source is the lowest latest holder
    assert [(c.obj, c.src, c.dst, c.edge) for c in patch.copies] == [
        (5, 2, 1, 0),    # holders of v3 are {2,4}: lowest is 2
        (6, 1, 1, 1),    # worker 1 already holds 6 latest elsewhere-bound
        (6, 1, 2, 2),
    ]


def test_patch_restores_validation():
    dm = dm_with({5: 3}, {5: {2: 3, 1: 1}})
    failures = [(1, 5)]
    patch = compute_patch(70, 9, failures, dm)
    apply_patch_to_dm(patch, dm)
    assert dm.instances[5][1] == 3
    assert patch_covers(patch, failures, dm)    # now trivially covered


def test_cache_hit_on_identical_transition():
    dm = dm_with({5: 3}, {5: {2: 3, 1: 1}})
    cache = PatchCache()
    key = (9, ("tpl", 4, 0))
    assert cache.lookup(key, [(1, 5)], dm) is None
    patch = compute_patch(70, 9, [(1, 5)], dm)
    cache.store(key, patch)
    got = cache.lookup(key, [(1, 5)], dm)
    assert got is patch
    assert (cache.hits, cache.misses) == (1, 1)


def test_cache_miss_when_source_went_stale():
    dm = dm_with({5: 3}, {5: {2: 3, 1: 1}})
    cache = PatchCache()
    patch = compute_patch(70, 9, [(1, 5)], dm)
    cache.store(("k",), patch)
    dm.apply_write(5, 4)            # worker 2 no longer holds the latest
    assert cache.lookup(("k",), [(1, 5)], dm) is None
    assert cache.misses == 1


def test_cache_miss_on_uncovered_failure():
    dm = dm_with({5: 3, 6: 1}, {5: {2: 3, 1: 1}, 6: {2: 1}})
    cache = PatchCache()
    cache.store(("k",), compute_patch(70, 9, [(1, 5)], dm))
    assert cache.lookup(("k",), [(1, 5), (1, 6)], dm) is None


def test_superset_patch_still_covers():
    # fewer failures than the cached patch repairs: reusable as-is
    dm = dm_with({5: 3, 6: 2}, {5: {2: 3}, 6: {2: 2}})
    cache = PatchCache()
    cache.store(("k",), compute_patch(70, 9, [(1, 5), (1, 6)], dm))
    assert cache.lookup(("k",), [(1, 6)], dm) is not None


def test_patch_commands_shape():
    dm = dm_with({5: 3, 6: 2}, {5: {2: 3}, 6: {3: 2}})
    patch = compute_patch(70, 9, [(1, 5), (1, 6)], dm)
    cmds = patch_commands(patch, seq=4)
    assert sorted(cmds) == [1, 2, 3]
    (r1, r2), (s1,), (s2,) = cmds[1], cmds[2], cmds[3]
    assert (s1.kind, s1.peer, s1.read_set) == (Kind.SEND_COPY, 1,
                                               frozenset({5}))
    assert (r1.kind, r1.peer, r1.write_set) == (Kind.RECEIVE_COPY, 2,
                                                frozenset({5}))
    assert (s2.peer, r2.peer) == (1, 3)
    # matching tag on each pair: (patch scope, sched 0, seq, edge)
    assert s1.tag == r1.tag == (70, 0, 4, 0)
    assert s2.tag == r2.tag == (70, 0, 4, 1)


patch_ids = st.integers(min_value=0, max_value=2**23 - 1)
seqs = st.integers(min_value=0, max_value=2**28 - 1)
idxs = st.integers(min_value=0, max_value=2**12 - 1)


@settings(max_examples=300)
@given(st.sets(st.tuples(patch_ids, seqs, idxs), min_size=2, max_size=40))
def test_patch_command_ids_unique_and_disjoint(triples):
    ids = [patch_command_id(p, s, i) for p, s, i in triples]
    assert len(set(ids)) == len(ids)          # injective over the range
    assert all(i >> 63 for i in ids)          # never collides with others


@settings(max_examples=200)
@given(seq_a=seqs, seq_b=seqs)
def test_repeat_invocations_get_fresh_ids_same_tags_differ_by_seq(seq_a,
                                                                  seq_b):
    dm = dm_with({5: 3}, {5: {2: 3}})
    patch = compute_patch(70, 9, [(1, 5)], dm)
    a = [c for lst in patch_commands(patch, seq_a).values() for c in lst]
    b = [c for lst in patch_commands(patch, seq_b).values() for c in lst]
    if seq_a == seq_b:
        assert {c.id for c in a} == {c.id for c in b}
    else:
        assert not ({c.id for c in a} & {c.id for c in b})
        assert all(x.tag[2] == seq_a for x in a)
        assert all(x.tag[2] == seq_b for x in b)
