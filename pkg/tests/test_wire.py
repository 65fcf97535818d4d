"""Wire format: golden bytes, kind codes, round trips, fuzz totality."""

import struct

import pytest
from hypothesis import given, settings, strategies as st

from miniplane.commands import Command, Kind
from miniplane.transport import wire
from miniplane.transport.wire import (EDIT_APPEND, EDIT_RETARGET, EDIT_SUBST,
                                      EDIT_TOMBSTONE, EditList, EditOp,
                                      MessageKind, TaskDesc, TransportError,
                                      WireRow, decode_frame, encode_frame)


def test_kind_codes_frozen():
    # stable numeric codes: changing any is a protocol version bump
    assert {k.name: int(k) for k in MessageKind} == {
        "STAGE_SUBMIT": 1, "TEMPLATE_BEGIN": 2, "TEMPLATE_FINISH": 3,
        "TEMPLATE_INSTANTIATE": 4, "CT_ACK": 5, "WT_INSTALL": 6,
        "WT_INSTANTIATE": 7, "PATCH_INVOKE": 8, "EDIT_LIST": 9,
        "TASK_DISPATCH": 10, "COPY_DISPATCH": 11, "BLOCK_DONE": 12,
        "TASK_DONE": 13, "HEARTBEAT": 14, "HALT": 15, "CHECKPOINT_SAVE": 16,
        "CHECKPOINT_LOAD": 17, "SCALAR_FETCH": 18, "SCALAR_VALUE": 19,
        "REGISTER_WORKER": 20, "DATA_TRANSFER": 21,
    }


def test_wt_instantiate_golden_bytes():
    # handwritten layout, composed without the wire module's writers
    payload = b"".join([
        struct.pack("<Q", 7),            # template id
        struct.pack("<I", 2),            # sched version
        struct.pack("<Q", 5),            # instantiation seq
        struct.pack("<I", 3),            # id count
        struct.pack("<QQQ", 100, 101, 102),
        struct.pack("<I", 3),            # param count
        struct.pack("<I", 0) * 3,        # three empty blobs
        struct.pack("<I", 0),            # no edit batches
        struct.pack("<I", 0),            # no version fixups
    ])
    golden = b"NMB1" + struct.pack("<HI", 7, len(payload)) + payload
    msg = wire.WtInstantiate(template=7, sched_version=2, seq=5,
                             ids=[100, 101, 102], params=[b"", b"", b""])
    assert encode_frame(msg) == golden
    back = decode_frame(golden)
    assert (back.template, back.sched_version, back.seq) == (7, 2, 5)
    assert back.ids == [100, 101, 102]
    assert back.params == [b"", b"", b""]
    assert back.edits == [] and back.fixups == []


def test_heartbeat_round_trip_identity():
    msg = wire.Heartbeat(worker=3, seq=17)
    assert decode_frame(encode_frame(msg)) == msg


def test_header_is_ten_bytes():
    frame = encode_frame(wire.Heartbeat())
    assert frame[:4] == b"NMB1"
    kind, length = struct.unpack_from("<HI", frame, 4)
    assert kind == 14
    assert length == len(frame) - 10


def test_bad_magic_rejected():
    frame = bytearray(encode_frame(wire.Heartbeat()))
    frame[0] = ord("X")
    with pytest.raises(TransportError, match="bad magic"):
        decode_frame(bytes(frame))


def test_truncated_frame_rejected():
    frame = encode_frame(wire.Heartbeat(worker=1, seq=2))
    with pytest.raises(TransportError):
        decode_frame(frame[:7])
    with pytest.raises(TransportError, match="length mismatch"):
        decode_frame(frame[:-1])


def test_unknown_kind_rejected():
    frame = b"NMB1" + struct.pack("<HI", 99, 0)
    with pytest.raises(TransportError, match="unknown message kind 99"):
        decode_frame(frame)


@settings(max_examples=500)
@given(blob=st.binary(max_size=200))
def test_fuzz_never_panics(blob):
    try:
        decode_frame(blob)
    except TransportError:
        pass   # the only acceptable failure mode


@settings(max_examples=300)
@given(blob=st.binary(max_size=120))
def test_fuzz_with_valid_header_never_panics(blob):
    # plausible header, garbage payload
    frame = b"NMB1" + struct.pack("<HI", 7, len(blob)) + blob
    try:
        decode_frame(frame)
    except TransportError:
        pass


def test_idsets_travel_ascending():
    cmd = Command(id=1, kind=Kind.EXECUTE, read_set=frozenset({9, 2, 5}),
                  write_set=frozenset({4, 3}), function_id=1)
    frame = encode_frame(wire.TaskDispatch(command=cmd))
    payload = frame[10:]
    # read set starts right after the command id and kind byte
    count = struct.unpack_from("<I", payload, 9)[0]
    vals = struct.unpack_from("<%dQ" % count, payload, 13)
    assert list(vals) == [2, 5, 9]


u64s = st.integers(min_value=0, max_value=2**64 - 1)
u32s = st.integers(min_value=0, max_value=2**32 - 1)
small = st.integers(min_value=0, max_value=2**20)
blobs = st.binary(max_size=40)


@st.composite
def commands(draw):
    kind = draw(st.sampled_from(list(Kind)))
    peered = kind in (Kind.SEND_COPY, Kind.RECEIVE_COPY)
    filed = kind in (Kind.LOAD_FILE, Kind.SAVE_FILE)
    return Command(
        id=draw(st.integers(min_value=1, max_value=2**64 - 1)),
        kind=kind,
        read_set=frozenset(draw(st.sets(small, max_size=4))),
        write_set=frozenset(draw(st.sets(small, max_size=4))),
        before_set=frozenset(draw(st.sets(small, max_size=4))),
        params=draw(blobs),
        function_id=draw(u32s) if kind == Kind.EXECUTE else None,
        peer=draw(u32s) if peered else None,
        path=draw(st.text(max_size=12)) if filed else None,
        tag=(draw(u64s), draw(u32s), draw(u64s), draw(u32s))
        if draw(st.booleans()) else None)


@settings(max_examples=200)
@given(cmd=commands(), fixups=st.lists(st.tuples(small, small), max_size=3))
def test_command_round_trip(cmd, fixups):
    msg = wire.TaskDispatch(command=cmd, fixups=fixups)
    back = decode_frame(encode_frame(msg))
    assert back.command == cmd
    assert back.fixups == fixups


@st.composite
def rows(draw):
    if draw(st.booleans()) and draw(st.booleans()):
        return None   # tombstone
    return WireRow(kind=draw(st.sampled_from([Kind.EXECUTE, Kind.SEND_COPY,
                                              Kind.RECEIVE_COPY])),
                   fn=draw(u32s),
                   reads=tuple(sorted(draw(st.sets(small, max_size=3)))),
                   writes=tuple(sorted(draw(st.sets(small, max_size=3)))),
                   before=tuple(draw(st.lists(u32s, max_size=3))),
                   peer=draw(u32s), edge=draw(u32s), params=draw(blobs))


@settings(max_examples=200)
@given(tid=u64s, sv=u32s, rs=st.lists(rows(), max_size=6))
def test_install_round_trip_with_tombstones(tid, sv, rs):
    back = decode_frame(encode_frame(wire.WtInstall(
        template=tid, sched_version=sv, rows=rs)))
    assert (back.template, back.sched_version) == (tid, sv)
    assert back.rows == rs


def test_tombstone_row_is_one_zero_byte():
    frame = encode_frame(wire.WtInstall(template=1, sched_version=0,
                                        rows=[None]))
    payload = frame[10:]
    assert payload == struct.pack("<QII", 1, 0, 1) + b"\x00"


@st.composite
def edit_ops(draw):
    op = draw(st.sampled_from([EDIT_SUBST, EDIT_TOMBSTONE, EDIT_APPEND,
                               EDIT_RETARGET]))
    if op == EDIT_SUBST:
        return EditOp(op, pos=draw(u32s), row=draw(rows()))
    if op == EDIT_TOMBSTONE:
        return EditOp(op, pos=draw(u32s))
    if op == EDIT_APPEND:
        return EditOp(op, row=draw(rows()))
    return EditOp(op, pos=draw(u32s),
                  before=tuple(draw(st.lists(u32s, max_size=3))))


@settings(max_examples=200)
@given(ops=st.lists(edit_ops(), max_size=5), fv=u32s, tv=u32s)
def test_edit_list_round_trip(ops, fv, tv):
    msg = EditList(template=3, from_version=fv, to_version=tv, edits=ops)
    back = decode_frame(encode_frame(msg))
    assert back == msg


def round_trips(msg):
    assert decode_frame(encode_frame(msg)) == msg


def test_every_message_kind_round_trips():
    cmd = Command(id=4, kind=Kind.SEND_COPY, read_set=frozenset({8}),
                  peer=2, tag=(1, 0, 2, 3))
    row = WireRow(kind=Kind.EXECUTE, fn=2, reads=(1,), writes=(2,),
                  before=(0,), params=b"p")
    batch = EditList(template=9, from_version=1, to_version=2,
                     edits=[EditOp(EDIT_TOMBSTONE, pos=4)])
    for msg in [
        wire.StageSubmit(tasks=[TaskDesc(fn=1, reads=(1, 2), writes=(3,),
                                         params=b"xy")]),
        wire.TemplateBegin(name="loop"),
        wire.TemplateFinish(template=6),
        wire.TemplateInstantiate(template=6, task_ids=[70, 71],
                                 params=[b"", b"q"]),
        wire.CtAck(value=6, ok=False, err="nope"),
        wire.WtInstall(template=6, sched_version=1, rows=[row, None]),
        wire.WtInstantiate(template=6, sched_version=1, seq=2, ids=[70],
                           params=[b"z"], edits=[batch], fixups=[(3, 9)]),
        wire.PatchInvoke(patch=11, seq=4),
        batch,
        wire.TaskDispatch(command=cmd, fixups=[(1, 5)]),
        wire.CopyDispatch(patch=11, seq=4, commands=[cmd]),
        wire.BlockDone(scope=6, seq=2, executed=14, is_patch=True),
        wire.TaskDone(command=4, ok=False, err="boom"),
        wire.Heartbeat(worker=2, seq=9),
        wire.Halt(generation=3, flush=True),
        wire.CheckpointSave(snapshot=5, directory="/tmp/s", manifest=[(1, 2)],
                            reply=True, ok=False, err="disk"),
        wire.CheckpointLoad(snapshot=5, directory="/tmp/s", manifest=[(1, 2)],
                            reply=False, ok=True, err=""),
        wire.ScalarFetch(request=31, obj=7),
        wire.ScalarValue(request=31, obj=7, version=4, payload=b"\x01\x02"),
        wire.RegisterWorker(worker=3, host="127.0.0.1", port=4501, pid=777),
        wire.DataTransfer(tag=(6, 1, 2, 0), obj=7, version=4, payload=b"d"),
    ]:
        round_trips(msg)


def test_register_worker_carries_pid():
    back = decode_frame(encode_frame(wire.RegisterWorker(pid=4242)))
    assert back.pid == 4242


def test_counters_track_counts_and_bytes():
    c = wire.MsgCounters()
    hb = encode_frame(wire.Heartbeat())
    c.add(MessageKind.HEARTBEAT, len(hb))
    c.add(MessageKind.HEARTBEAT, len(hb))
    c.add(MessageKind.HALT, 10)
    assert c.total() == 3
    assert c.total_bytes() == 2 * len(hb) + 10
    assert c.snapshot() == {"HEARTBEAT": (2, 2 * len(hb)), "HALT": (1, 10)}
    c.clear()
    assert c.total() == 0
