"""Controller-side template tables: compilation, edges, instantiation."""

import pytest
from hypothesis import given, settings, strategies as st

import miniplane.ctemplate as ct
from miniplane.ctemplate import (ControllerTemplate, RecordingBuffer,
                                 TemplateError, compile_template)
from miniplane.transport.wire import TaskDesc


def build(template, tasks, name="blk"):
    buf = RecordingBuffer(template, name)
    for fn, reads, writes in tasks:
        buf.record(TaskDesc(fn=fn, reads=tuple(reads), writes=tuple(writes),
                            params=b""))
    return compile_template(buf)


def test_diamond_edges():
    tpl = build(1, [(1, (), (1,)),       # t0 produces 1
                    (2, (1,), (2,)),     # t1 consumes 1
                    (3, (1,), (3,)),     # t2 consumes 1
                    (4, (2, 3), (4,))])  # t3 joins
    assert [r.before for r in tpl.rows] == [(), (0,), (0,), (1, 2)]
    assert tpl.read_set == {1, 2, 3}
    assert tpl.write_set == {1, 2, 3, 4}
    assert tpl.inputs == frozenset()     # everything read is block-produced
    assert tpl.write_counts == {1: 1, 2: 1, 3: 1, 4: 1}


def test_write_after_read_edge():
    tpl = build(1, [(1, (5,), (6,)),     # reads 5
                    (2, (), (5,))])      # then overwrites it
    assert tpl.rows[1].before == (0,)


def test_write_after_write_edge():
    tpl = build(1, [(1, (), (5,)), (2, (), (5,))])
    assert tpl.rows[1].before == (0,)


def test_inputs_are_reads_before_any_block_write():
    tpl = build(1, [(1, (7,), (8,)),     # 7 read first: an input
                    (2, (8,), (7,)),     # 8 was block-written first: not
                    (3, (7,), (9,))])    # 7 again, already known
    assert tpl.inputs == {7}
    assert tpl.write_counts == {8: 1, 7: 1, 9: 1}


def test_empty_template():
    tpl = build(3, [])
    assert tpl.task_count == 0
    assert tpl.instantiate([]) == []
    assert tpl.read_set == frozenset() and tpl.write_set == frozenset()


def test_compile_is_pure():
    tasks = [(1, (1,), (2,)), (2, (2,), (3,)), (1, (1, 3), (2,))]
    assert build(9, tasks).dump() == build(9, tasks).dump()


def test_dump_shape():
    tpl = build(2, [(7, (1,), (2,)), (8, (2,), (3,))], name="step")
    assert tpl.dump().splitlines() == [
        "template 2 'step' tasks 2",
        "row 0 fn=7 R{1} W{2} B{}",
        "row 1 fn=8 R{2} W{3} B{0}",
    ]


def test_instantiate_maps_indices_to_ids():
    tpl = build(1, [(1, (), (1,)), (2, (1,), (2,)), (3, (1, 2), (3,))])
    got = tpl.instantiate([40, 41, 42], [b"", b"xy", b""])
    assert [t.id for t in got] == [40, 41, 42]
    assert [t.before_ids for t in got] == [(), (40,), (40, 41)]
    assert [t.fn for t in got] == [1, 2, 3]
    assert got[1].params == b"xy"
    assert got[0].params == b""   # empty override keeps the recorded blob


def test_instantiate_arity_errors():
    tpl = build(5, [(1, (), (1,)), (2, (1,), (2,))])
    with pytest.raises(TemplateError,
                       match="template 5 expects 2 task ids, got 3"):
        tpl.instantiate([10, 11, 12])
    with pytest.raises(TemplateError,
                       match="template 5 expects 2 params, got 1"):
        tpl.instantiate([10, 11], [b"x"])


def test_instantiate_rejects_stale_and_duplicate_ids():
    tpl = build(6, [(1, (), (1,)), (2, (1,), (2,))])
    tpl.instantiate([10, 11])
    with pytest.raises(TemplateError,
                       match="template 6 given non-fresh task ids"):
        tpl.instantiate([11, 12])          # 11 was already used
    tpl.instantiate([12, 13])              # watermark moved past the failure
    with pytest.raises(TemplateError, match="non-fresh"):
        tpl.instantiate([14, 14])          # duplicate within one call
    with pytest.raises(TemplateError, match="non-fresh"):
        tpl.instantiate([5, 14])           # below the watermark
    got = tpl.instantiate([20, 14])        # unordered but fresh is fine
    assert [t.id for t in got] == [20, 14]
    with pytest.raises(TemplateError, match="non-fresh"):
        tpl.instantiate([21, 15])          # watermark is the max, 20


def test_forward_edge_guard():
    class Broken:
        def access(self, token, reads, writes):
            return {token + 1}   # points at a row not yet emitted

    orig = ct.AccessTracker
    ct.AccessTracker = Broken
    try:
        with pytest.raises(TemplateError,
                           match="forward edge in template 4 row 0"):
            build(4, [(1, (1,), (2,))])
    finally:
        ct.AccessTracker = orig


def brute_force_edges(tasks, i):
    """Direct hazard edges for row i, by quadratic rescan."""
    reads_i, writes_i = tasks[i][1], tasks[i][2]
    deps = set()
    for obj in set(reads_i) | set(writes_i):
        writers = [j for j in range(i) if obj in tasks[j][2]]
        if writers:
            deps.add(writers[-1])
    for obj in writes_i:
        writers = [j for j in range(i) if obj in tasks[j][2]]
        start = writers[-1] + 1 if writers else 0
        deps.update(j for j in range(start, i)
                    if obj in tasks[j][1] and obj not in tasks[j][2])
    return tuple(sorted(deps))


objs = st.integers(min_value=1, max_value=6)


@settings(max_examples=200)
@given(tasks=st.lists(
    st.tuples(st.integers(min_value=1, max_value=3),
              st.sets(objs, max_size=3).map(tuple),
              st.sets(objs, min_size=1, max_size=2).map(tuple)),
    max_size=12))
def test_edges_match_brute_force(tasks):
    tpl = build(1, tasks)
    for i, row in enumerate(tpl.rows):
        assert all(j < i for j in row.before)
        assert row.before == brute_force_edges(tasks, i)


@settings(max_examples=100)
@given(tasks=st.lists(
    st.tuples(st.integers(min_value=1, max_value=3),
              st.sets(objs, max_size=3).map(tuple),
              st.sets(objs, max_size=2).map(tuple)),
    min_size=1, max_size=10),
    base=st.integers(min_value=0, max_value=2**32))
def test_instantiate_isomorphism(tasks, base):
    # the concrete block is the table with indices renamed to ids
    tpl = build(1, tasks)
    ids = [base + 1 + i for i in range(len(tasks))]
    got = tpl.instantiate(ids)
    for i, t in enumerate(got):
        row = tpl.rows[i]
        assert t.id == ids[i]
        assert (t.fn, t.reads, t.writes) == (row.fn, row.reads, row.writes)
        assert t.before_ids == tuple(ids[j] for j in row.before)
