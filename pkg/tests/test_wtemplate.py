"""Worker-template splitting: copy synthesis, preconditions, placement
deltas, and the self-satisfaction property behind the fast path."""

import pytest
from hypothesis import given, settings, strategies as st

from miniplane.commands import Kind
from miniplane.ctemplate import RecordingBuffer, TemplateError, compile_template
from miniplane.datamgr import DataManager
from miniplane.transport.wire import TaskDesc
from miniplane.wtemplate import (FRESH_ID, TRAILING, build_worker_templates,
                                 compute_fixups, validate_preconditions,
                                 wire_rows)


def compile_tasks(tasks, template=1):
    buf = RecordingBuffer(template, "blk")
    for fn, reads, writes in tasks:
        buf.record(TaskDesc(fn=fn, reads=tuple(reads), writes=tuple(writes),
                            params=b""))
    return compile_template(buf)


def kinds(half, w):
    return [r.kind for r in half.halves[w].rows if r is not None]


def test_cross_worker_flow_becomes_matched_copy_pair():
    ct = compile_tasks([(1, (), (1,)),      # producer on worker 1
                        (2, (1,), (2,))])   # consumer on worker 2
    half = build_worker_templates(ct, (1, 2))
    w1, w2 = half.halves[1].rows, half.halves[2].rows
    assert [r.kind for r in w1] == [Kind.EXECUTE, Kind.SEND_COPY]
    assert [r.kind for r in w2] == [Kind.RECEIVE_COPY, Kind.EXECUTE]
    send, recv = w1[1], w2[0]
    assert send.reads == (1,) and recv.writes == (1,)
    assert (send.peer, recv.peer) == (2, 1)
    assert send.edge == recv.edge == 0          # one shared transfer edge
    assert send.transfer == recv.transfer == (1, 0, 2)
    assert half.transfer_edges == {(1, 0, 2): 0}
    assert half.edge_count == 1
    # ordering: send waits for the producer, consumer waits for the receive
    assert send.before == (0,)
    assert recv.before == ()
    assert w2[1].before == (0,)
    assert half.participants == [1, 2]


def test_colocated_flow_needs_no_copies():
    ct = compile_tasks([(1, (), (1,)), (2, (1,), (2,))])
    half = build_worker_templates(ct, (2, 2))
    assert list(half.halves) == [2]
    assert kinds(half, 2) == [Kind.EXECUTE, Kind.EXECUTE]
    assert half.edge_count == 0 and half.transfer_edges == {}


def test_receive_orders_behind_prior_local_reader():
    # worker 1 reads object 5, worker 2 overwrites it, worker 1 reads it
    # again: the incoming copy must not clobber 5 before the first read
    ct = compile_tasks([(1, (5,), (6,)), (2, (), (5,)), (3, (5,), (7,))])
    half = build_worker_templates(ct, (1, 2, 1))
    w1 = half.halves[1].rows
    assert [r.kind for r in w1] == [Kind.EXECUTE, Kind.RECEIVE_COPY,
                                    Kind.EXECUTE]
    assert w1[1].writes == (5,)
    assert w1[1].before == (0,)     # write-after-read on the same worker
    assert w1[2].before == (1,)


def test_preconditions_follow_first_access_rule():
    # 5 is read before any in-block write: a precondition.  6 is written
    # first: only its version needs pinning, freshness is irrelevant.
    ct = compile_tasks([(1, (5,), (6,)), (2, (6,), (5,))])
    half = build_worker_templates(ct, (3, 3))
    assert half.preconditions == {3: (5,)}
    assert half.write_first == {3: ((6, 0),)}


def test_trailing_copy_restores_disturbed_precondition():
    # worker 1 needs 5 fresh at entry; worker 2 overwrites 5 inside the
    # block, so a trailing pair ships it back before the block reports
    ct = compile_tasks([(1, (5,), (6,)), (2, (6,), (5,))])
    half = build_worker_templates(ct, (1, 2))
    w1, w2 = half.halves[1].rows, half.halves[2].rows
    assert [r.kind for r in w1] == [Kind.EXECUTE, Kind.SEND_COPY,
                                    Kind.RECEIVE_COPY]
    assert [r.kind for r in w2] == [Kind.RECEIVE_COPY, Kind.EXECUTE,
                                    Kind.SEND_COPY]
    trail_send, trail_recv = w2[2], w1[2]
    assert trail_send.transfer == trail_recv.transfer == (5, TRAILING, 1)
    assert trail_recv.writes == (5,)
    # the send waits for the rewrite of 5; the receive for the local read
    assert trail_send.before == (1,)
    assert trail_recv.before == (0,)


def test_assignment_arity_checked():
    ct = compile_tasks([(1, (), (1,)), (2, (1,), (2,))])
    with pytest.raises(TemplateError,
                       match="assignment arity 3 != task count 2"):
        build_worker_templates(ct, (1, 2, 1))


def test_id_plan_slots():
    ct = compile_tasks([(1, (), (1,)), (2, (1,), (2,))])
    half = build_worker_templates(ct, (1, 2))
    assert half.halves[1].id_plan == [0, FRESH_ID]        # execute, send
    assert half.halves[2].id_plan == [FRESH_ID, 1]        # receive, execute
    h = half.halves[2]
    h.rebuild_id_plan()
    assert h.id_plan == [FRESH_ID, 1]
    assert h.live_count == 2


def test_wire_rows_keep_tombstone_positions():
    ct = compile_tasks([(1, (), (1,))])
    half = build_worker_templates(ct, (1,))
    rows = list(half.halves[1].rows) + [None]
    shipped = wire_rows(rows)
    assert shipped[-1] is None
    assert shipped[0].kind == Kind.EXECUTE


def test_iterative_single_worker_template_is_fast_path():
    # read-modify-write loop body: state read then overwritten, scratch
    # written first; nothing leaves the worker
    ct = compile_tasks([(1, (1, 2), (3,)), (2, (1, 3), (1,))])
    half = build_worker_templates(ct, (4, 4))
    assert half.fast_path_ok
    assert half.preconditions == {4: (1, 2)}
    assert half.write_first == {4: ((3, 0),)}
    assert kinds(half, 4) == [Kind.EXECUTE, Kind.EXECUTE]


def test_stale_entry_write_first_disables_fast_path():
    # worker 2 writes 9 blind after worker 1 already bumped it in-block:
    # its pre-run replica version depends on placement, not the template
    ct = compile_tasks([(1, (), (9,)), (2, (), (9,))])
    half = build_worker_templates(ct, (1, 2))
    assert half.write_first[2] == ((9, 1),)
    assert not half.fast_path_ok


# --- placement-delta oracle -------------------------------------------

def seeded_dm(pool, half):
    dm = DataManager()
    for obj in pool:
        dm.create(obj, 1)
    for w, objs in half.preconditions.items():
        for obj in objs:
            dm.record_replica(obj, w, dm.latest[obj])
    return dm


def replay_per_task(tasks, assignment, dm):
    """The block's placement effect, one task at a time: a stale read is
    preceded by a copy, a write bumps the version, and every entry
    precondition is restored at the end.  Preconditions are re-derived
    from scratch here rather than taken from the build.
    """
    preconds = []
    written = set()
    touched = set()
    for (fn, reads, writes), w in zip(tasks, assignment):
        for obj in reads:
            if obj not in written and (w, obj) not in touched:
                preconds.append((w, obj))
            touched.add((w, obj))
        for obj in writes:
            written.add(obj)
            touched.add((w, obj))
    for (fn, reads, writes), w in zip(tasks, assignment):
        for obj in reads:
            if dm.instances[obj].get(w) != dm.latest[obj]:
                dm.record_replica(obj, w, dm.latest[obj])
        for obj in writes:
            dm.apply_write(obj, w)
    for w, obj in preconds:
        if dm.instances[obj].get(w) != dm.latest[obj]:
            dm.record_replica(obj, w, dm.latest[obj])
    return preconds


objects = st.integers(min_value=1, max_value=8)
task_lists = st.lists(
    st.tuples(st.integers(min_value=1, max_value=3),
              st.sets(objects, max_size=3).map(lambda s: tuple(sorted(s))),
              st.sets(objects, min_size=1, max_size=2)
              .map(lambda s: tuple(sorted(s)))),
    min_size=1, max_size=20)
assignments = st.lists(st.integers(min_value=1, max_value=3),
                       min_size=1, max_size=20)


@settings(max_examples=200, deadline=None)
@given(tasks=task_lists, assign=assignments)
def test_dm_delta_matches_per_task_replay(tasks, assign):
    assignment = tuple(assign[i % len(assign)] for i in range(len(tasks)))
    ct = compile_tasks(tasks)
    half = build_worker_templates(ct, assignment)
    pool = sorted({o for _, r, w in tasks for o in r + w})

    dm_a = seeded_dm(pool, half)
    dm_b = seeded_dm(pool, half)
    half.apply_dm_delta(dm_a)
    preconds = replay_per_task(tasks, assignment, dm_b)

    assert dm_a.latest == dm_b.latest
    assert dm_a.instances == dm_b.instances
    # the build's preconditions equal the independently derived ones
    # (the build keeps an empty entry for every participating worker)
    derived = {}
    for w, obj in preconds:
        derived.setdefault(w, set()).add(obj)
    assert {w: tuple(sorted(s)) for w, s in derived.items()} \
        == {w: t for w, t in half.preconditions.items() if t}


@settings(max_examples=200, deadline=None)
@given(tasks=task_lists, assign=assignments,
       rounds=st.integers(min_value=1, max_value=4))
def test_template_is_self_satisfying(tasks, assign, rounds):
    # once the preconditions hold, every instantiation leaves them
    # holding again; on fast-path templates the fixup pass stays empty
    assignment = tuple(assign[i % len(assign)] for i in range(len(tasks)))
    ct = compile_tasks(tasks)
    half = build_worker_templates(ct, assignment)
    pool = sorted({o for _, r, w in tasks for o in r + w})
    dm = seeded_dm(pool, half)
    assert validate_preconditions(half, dm) == []
    half.apply_dm_delta(dm)     # cold run may still need version pins
    assert validate_preconditions(half, dm) == []
    for _ in range(rounds):
        if half.fast_path_ok:
            # warm: each write-first replica sits at exactly the version
            # the next run expects, so skipping the fixup pass is sound
            assert compute_fixups(half, dm) == {}
        half.apply_dm_delta(dm)
        assert validate_preconditions(half, dm) == []


def test_validation_reports_failures_and_counts_checks():
    ct = compile_tasks([(1, (5,), (6,)), (2, (7,), (8,))])
    half = build_worker_templates(ct, (1, 2))
    dm = DataManager()
    for obj in (5, 6, 7, 8):
        dm.create(obj, 3)
    dm.record_replica(5, 1, 1)
    dm.apply_write(7, 3)            # worker 2's copy of 7 is now stale
    counter = [0]
    assert validate_preconditions(half, dm, counter) == [(2, 7)]
    assert counter[0] == 2          # one check per precondition object
    counter = [0]
    fix = compute_fixups(half, dm, counter)
    assert counter[0] == 2          # (6 on w1, 8 on w2)
    assert fix == {1: [(6, 1)], 2: [(8, 1)]}


def test_fixups_empty_in_steady_state():
    ct = compile_tasks([(1, (1,), (2,)), (2, (1, 2), (1,))])
    half = build_worker_templates(ct, (1, 1))
    dm = DataManager()
    dm.create(1, 9)                 # objects live elsewhere at first
    dm.create(2, 9)
    dm.record_replica(1, 1, 1)      # satisfy the precondition on 1
    counter = [0]
    first = compute_fixups(half, dm, counter)
    assert first == {1: [(2, 1)]}   # cold start: replica of 2 missing
    assert counter[0] == 1
    half.apply_dm_delta(dm)
    for _ in range(5):
        assert compute_fixups(half, dm) == {}
        half.apply_dm_delta(dm)
