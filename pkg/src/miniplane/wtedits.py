"""In-place worker-template edits.

Moving k tasks to different workers must not force a reinstall: the
controller diffs the template built for the new assignment against the
installed rows and ships per-worker edit batches.  A removed task's
array slot is reused by the copy row that substitutes for it (the
receive that returns its output, or the send that ships its input), so
rows that referenced the removed slot keep working unchanged; rows a
batch does not mention stay byte-identical.  Rows with no substitute
leave a tombstone, and brand-new rows extend the tail.

Before-set entries pointing at tombstones count as satisfied.  A
substituted slot keeps surviving references working unchanged: they now
wait for the copy row, which itself orders after the moved task's
remote execution, so the original ordering is preserved transitively.
Ordering edges that reuse cannot preserve — the new carrier of an edge
is a fresh row rather than a reused slot — are rewritten in place with
retarget ops.  If slot reuse would ever create a cycle, the diff falls
back to reinstalling that worker's rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from miniplane.commands import Kind
from miniplane.ctemplate import ControllerTemplate, TemplateError
from miniplane.transport.wire import (EDIT_APPEND, EDIT_RETARGET, EDIT_SUBST,
                                      EDIT_TOMBSTONE, EditList, EditOp,
                                      WireRow)
from miniplane.wtemplate import (ControllerHalf, WorkerHalf, WRow,
                                 build_worker_templates, wire_rows)


def row_identity(r: WRow) -> tuple:
    if r.kind == Kind.EXECUTE:
        return ("t", r.ct_row)
    mark = "s" if r.kind == Kind.SEND_COPY else "r"
    return (mark,) + r.transfer


def row_wire_equal(a: WRow, b: WRow) -> bool:
    return (a.kind == b.kind and a.fn == b.fn and a.reads == b.reads
            and a.writes == b.writes and a.before == b.before
            and a.peer == b.peer and a.edge == b.edge and a.params == b.params)


def check_dag(rows: list[WRow | None]) -> bool:
    """True when the live rows form a DAG under before edges (entries
    pointing at tombstones or out of range are ignored).
    """
    n = len(rows)
    indeg = [0] * n
    children: list[list[int]] = [[] for _ in range(n)]
    live = 0
    for i, r in enumerate(rows):
        if r is None:
            continue
        live += 1
        for p in r.before:
            if p < n and rows[p] is not None:
                indeg[i] += 1
                children[p].append(i)
    stack = [i for i, r in enumerate(rows) if r is not None and indeg[i] == 0]
    seen = 0
    while stack:
        i = stack.pop()
        seen += 1
        for c in children[i]:
            indeg[c] -= 1
            if indeg[c] == 0:
                stack.append(c)
    return seen == live


@dataclass(slots=True)
class EditPlan:
    new_half: ControllerHalf
    batches: dict[int, EditList]        # per worker, possibly empty
    installs: dict[int, list[WireRow]]  # workers needing a fresh install
    moved_tasks: int


def apply_edit_ops(rows: list[WireRow | None],
                   ops: list[EditOp]) -> list[WireRow | None]:
    """Worker-side (and golden-check) application of one batch."""
    out = list(rows)
    for e in ops:
        if e.op == EDIT_SUBST:
            if e.pos >= len(out):
                raise TemplateError("substitution past tail at %d" % e.pos)
            out[e.pos] = e.row
        elif e.op == EDIT_TOMBSTONE:
            if e.pos >= len(out):
                raise TemplateError("tombstone past tail at %d" % e.pos)
            out[e.pos] = None
        elif e.op == EDIT_APPEND:
            out.append(e.row)
        elif e.op == EDIT_RETARGET:
            if e.pos >= len(out) or out[e.pos] is None:
                raise TemplateError("retarget of dead row at %d" % e.pos)
            r = out[e.pos]
            out[e.pos] = WireRow(kind=r.kind, fn=r.fn, reads=r.reads,
                                 writes=r.writes, before=e.before, peer=r.peer,
                                 edge=r.edge, params=r.params)
        else:
            raise TemplateError("unknown edit op %d" % e.op)
    return out


def diff_for_assignment(ct: ControllerTemplate, old: ControllerHalf,
                        new_assignment: tuple[int, ...]) -> EditPlan:
    built = build_worker_templates(ct, new_assignment,
                                   sched_version=old.sched_version + 1)
    moved = sum(1 for a, b in zip(old.assignment, new_assignment) if a != b)

    # Transfer edges must agree between the two rows of a pair, across
    # workers: surviving transfers keep their old edge id, new ones get
    # fresh ids above everything the old half used.
    edge_map: dict[tuple, int] = {}
    next_edge = old.edge_count
    for key in sorted(built.transfer_edges, key=built.transfer_edges.get):
        if key in old.transfer_edges:
            edge_map[key] = old.transfer_edges[key]
        else:
            edge_map[key] = next_edge
            next_edge += 1

    def with_edge(r: WRow) -> WRow:
        if r.transfer is None:
            return r
        return WRow(kind=r.kind, fn=r.fn, reads=r.reads, writes=r.writes,
                    before=r.before, peer=r.peer, edge=edge_map[r.transfer],
                    params=r.params, ct_row=r.ct_row, transfer=r.transfer)

    new_halves: dict[int, WorkerHalf] = {}
    batches: dict[int, EditList] = {}
    installs: dict[int, list[WireRow]] = {}
    workers = sorted(set(old.halves) | set(built.halves))
    for w in workers:
        old_half = old.halves.get(w)
        built_half = built.halves.get(w)
        built_rows = built_half.rows if built_half else []
        if old_half is None:
            # brand-new participant: plain install, no edit batch
            rows = [with_edge(r) for r in built_rows]
            half = WorkerHalf(worker=w, rows=rows)
            half.rebuild_id_plan()
            new_halves[w] = half
            installs[w] = wire_rows(rows)
            continue

        old_rows = old_half.rows
        old_by_key = {row_identity(r): p for p, r in enumerate(old_rows)
                      if r is not None}
        new_by_key = {row_identity(r): p for p, r in enumerate(built_rows)}
        removed = sorted(p for k, p in old_by_key.items() if k not in new_by_key)
        added = [p for p, r in enumerate(built_rows)
                 if row_identity(r) not in old_by_key]

        # pair removed slots with substituting copy rows
        subst_at: dict[int, int] = {}   # old position -> built position
        pool = list(added)
        for p in removed:
            key = row_identity(old_rows[p])
            pick = None
            if key[0] == "t":
                i = key[1]
                outs = set(ct.rows[i].writes)
                ins = set(ct.rows[i].reads)
                for bp in pool:
                    br = built_rows[bp]
                    if (br.kind == Kind.RECEIVE_COPY and br.transfer[0] in outs
                            and br.transfer[1] == i):
                        pick = bp
                        break
                if pick is None:
                    for bp in pool:
                        br = built_rows[bp]
                        if br.kind == Kind.SEND_COPY and br.transfer[0] in ins:
                            pick = bp
                            break
            else:
                obj = key[1]
                kind = old_rows[p].kind
                for bp in pool:
                    br = built_rows[bp]
                    if (br.transfer is not None and br.kind == kind
                            and br.transfer[0] == obj):
                        pick = bp
                        break
            if pick is not None:
                subst_at[p] = pick
                pool.remove(pick)

        # final position of every built row
        pos_of_built: dict[int, int] = {}
        for key, bp in new_by_key.items():
            if key in old_by_key:
                pos_of_built[bp] = old_by_key[key]
        for p, bp in subst_at.items():
            pos_of_built[bp] = p
        tail = len(old_rows)
        appended: list[int] = []
        for bp in pool:
            pos_of_built[bp] = tail
            appended.append(bp)
            tail += 1

        # assemble final rows; incoming rows get before sets translated
        # to final positions
        final: list[WRow | None] = list(old_rows)
        final.extend([None] * (tail - len(old_rows)))
        ops: list[EditOp] = []
        for p in removed:
            if p not in subst_at:
                final[p] = None
                ops.append(EditOp(EDIT_TOMBSTONE, pos=p))
        incoming = sorted(subst_at.items()) + [(pos_of_built[bp], bp)
                                               for bp in appended]
        for p, bp in incoming:
            br = with_edge(built_rows[bp])
            translated = tuple(sorted(pos_of_built[d] for d in br.before))
            row = WRow(kind=br.kind, fn=br.fn, reads=br.reads,
                       writes=br.writes, before=translated, peer=br.peer,
                       edge=br.edge, params=br.params, ct_row=br.ct_row,
                       transfer=br.transfer)
            final[p] = row
            if p < len(old_rows):
                ops.append(EditOp(EDIT_SUBST, pos=p, row=row.to_wire()))
            else:
                ops.append(EditOp(EDIT_APPEND, row=row.to_wire()))
        # kept rows follow the rebuild: where a slot was reused the
        # translated edges land on the same positions and the row stays
        # byte-identical, but an ordering edge whose old target is now a
        # tombstone (say a write-after-read edge that used to point at a
        # departed send, with the reader itself moved onto this worker)
        # must be retargeted at the edge's new carrier, and a row whose
        # transfer endpoint moved is substituted in place
        for key, bp in new_by_key.items():
            if key not in old_by_key:
                continue
            p = old_by_key[key]
            br = with_edge(built_rows[bp])
            kept = old_rows[p]
            translated = tuple(sorted(pos_of_built[d] for d in br.before))
            same_content = (br.kind == kept.kind and br.reads == kept.reads
                            and br.writes == kept.writes
                            and br.peer == kept.peer and br.edge == kept.edge
                            and br.params == kept.params and br.fn == kept.fn)
            if same_content and translated == kept.before:
                continue
            row = WRow(kind=br.kind, fn=br.fn, reads=br.reads,
                       writes=br.writes, before=translated, peer=br.peer,
                       edge=br.edge, params=br.params, ct_row=br.ct_row,
                       transfer=br.transfer)
            final[p] = row
            if same_content:
                ops.append(EditOp(EDIT_RETARGET, pos=p, before=translated))
            else:
                ops.append(EditOp(EDIT_SUBST, pos=p, row=row.to_wire()))

        ops.sort(key=lambda e: (0 if e.op != EDIT_APPEND else 1, e.pos))
        if not check_dag(final):
            # slot reuse produced a cycle; reinstall this worker instead
            rows = [with_edge(r) for r in built_rows]
            half = WorkerHalf(worker=w, rows=rows)
            half.rebuild_id_plan()
            new_halves[w] = half
            installs[w] = wire_rows(rows)
            continue
        half = WorkerHalf(worker=w, rows=final)
        half.rebuild_id_plan()
        new_halves[w] = half
        batches[w] = EditList(template=ct.template,
                              from_version=old.sched_version, edits=ops)
        # the mechanical application a worker performs must land exactly
        # on what the controller now believes that worker holds
        applied = apply_edit_ops([r.to_wire() if r is not None else None
                                  for r in old_rows], ops)
        want = [r.to_wire() if r is not None else None for r in final]
        if applied != want:
            raise TemplateError("edit batch does not reproduce new rows")

    new_half = ControllerHalf(
        template=ct.template, assignment=tuple(new_assignment),
        sched_version=old.sched_version + 1, halves=new_halves,
        preconditions=built.preconditions, write_first=built.write_first,
        delta_latest=built.delta_latest,
        delta_instances=built.delta_instances,
        edge_count=next_edge, transfer_edges=edge_map,
        fast_path_ok=built.fast_path_ok)
    return EditPlan(new_half=new_half, batches=batches, installs=installs,
                    moved_tasks=moved)
