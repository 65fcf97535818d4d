"""Command model: validation, debug text, id allocation."""

import pytest
from hypothesis import given, strategies as st

from miniplane.commands import (Command, IdAllocator, Kind, MAX_U64,
                                ValidationContext, validate_command)

CTX = ValidationContext(known_functions=frozenset({1, 2, 3}))


def test_minimal_execute_is_valid():
    cmd = Command(id=1, kind=Kind.EXECUTE, read_set=frozenset({4}),
                  write_set=frozenset({5}), function_id=1)
    assert validate_command(cmd, CTX) is None


def test_unknown_function_id():
    cmd = Command(id=1, kind=Kind.EXECUTE, function_id=99)
    assert validate_command(cmd, CTX) == "unknown function id 99"


def test_execute_without_function():
    cmd = Command(id=1, kind=Kind.EXECUTE)
    assert validate_command(cmd, CTX) == "execute command without function id"


def test_cross_worker_before_edge_rejected():
    ctx = ValidationContext(known_functions=frozenset({1}),
                            same_worker_commands=frozenset({10, 11}))
    ok = Command(id=12, kind=Kind.EXECUTE, function_id=1,
                 before_set=frozenset({10, 11}))
    assert validate_command(ok, ctx) is None
    bad = Command(id=12, kind=Kind.EXECUTE, function_id=1,
                  before_set=frozenset({10, 77}))
    assert validate_command(bad, ctx) == \
        "before set refers to command 77 on another worker"


def test_self_dependency_rejected():
    cmd = Command(id=5, kind=Kind.EXECUTE, function_id=1,
                  before_set=frozenset({5}))
    assert validate_command(cmd, CTX) == "command depends on itself"


def test_id_zero_rejected_unless_lenient():
    cmd = Command(id=0, kind=Kind.EXECUTE, function_id=1)
    assert validate_command(cmd, CTX) == "command id out of range"
    lenient = ValidationContext(known_functions=frozenset({1}),
                                strict_ids=False)
    assert validate_command(cmd, lenient) is None


@pytest.mark.parametrize("kind,fields,expect", [
    (Kind.CREATE_DATA, dict(function_id=1),
     "function id on non-execute command"),
    (Kind.SEND_COPY, dict(read_set=frozenset({1})),
     "copy command without peer worker"),
    (Kind.CREATE_DATA, dict(peer=2), "peer worker on non-copy command"),
    (Kind.LOAD_FILE, dict(write_set=frozenset({1})),
     "file command without path"),
    (Kind.EXECUTE, dict(function_id=1, path="/tmp/x"),
     "path on non-file command"),
    (Kind.SEND_COPY, dict(peer=1, read_set=frozenset({1, 2})),
     "send copy must read exactly one object and write none"),
    (Kind.SEND_COPY, dict(peer=1, read_set=frozenset({1}),
                          write_set=frozenset({2})),
     "send copy must read exactly one object and write none"),
    (Kind.RECEIVE_COPY, dict(peer=1, write_set=frozenset()),
     "receive copy must write exactly one object and read none"),
    (Kind.CREATE_DATA, dict(read_set=frozenset({1}),
                            write_set=frozenset({2})),
     "create must not read"),
    (Kind.DESTROY_DATA, dict(read_set=frozenset({1}),
                             write_set=frozenset({2})),
     "destroy must not write"),
])
def test_field_misuse(kind, fields, expect):
    cmd = Command(id=1, kind=kind, **fields)
    assert validate_command(cmd, CTX) == expect


def test_copy_pair_commands_validate():
    tag = (7, 0, 3, 1)
    send = Command(id=2, kind=Kind.SEND_COPY, read_set=frozenset({9}),
                   peer=4, tag=tag)
    recv = Command(id=3, kind=Kind.RECEIVE_COPY, write_set=frozenset({9}),
                   peer=1, tag=tag)
    assert validate_command(send, CTX) is None
    assert validate_command(recv, CTX) is None


def test_debug_text_format():
    cmd = Command(id=42, kind=Kind.EXECUTE, read_set=frozenset({3, 1}),
                  write_set=frozenset({2}), before_set=frozenset({40, 7}),
                  function_id=1)
    assert cmd.debug_text() == "EXECUTE#42 R{1,3} W{2} B{7,40}"


def test_debug_text_empty_sets():
    cmd = Command(id=1, kind=Kind.CREATE_DATA, write_set=frozenset({5}))
    assert cmd.debug_text() == "CREATE_DATA#1 R{} W{5} B{}"


ids = st.integers(min_value=1, max_value=MAX_U64)
idsets = st.frozensets(ids, max_size=5)


@given(cid=ids, reads=idsets, writes=idsets, before=idsets,
       params=st.binary(max_size=32),
       fn=st.one_of(st.none(), st.integers(min_value=0, max_value=2**32 - 1)))
def test_validate_is_total(cid, reads, writes, before, params, fn):
    # never raises, whatever the field combination
    for kind in Kind:
        cmd = Command(id=cid, kind=kind, read_set=reads, write_set=writes,
                      before_set=before, params=params, function_id=fn)
        out = validate_command(cmd, CTX)
        assert out is None or isinstance(out, str)


def test_allocator_monotonic_and_dense():
    alloc = IdAllocator()
    first = [alloc.take() for _ in range(5)]
    assert first == [1, 2, 3, 4, 5]
    batch = alloc.take_many(3)
    assert batch == [6, 7, 8]
    assert alloc.take() == 9


def test_allocator_bump_past():
    alloc = IdAllocator()
    alloc.bump_past(100)
    assert alloc.take() == 101
    alloc.bump_past(50)   # never goes backwards
    assert alloc.take() == 102
