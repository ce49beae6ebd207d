"""Owner-built update vectors for grants, revocations, inserts and deletes.

An :class:`Update` is a list of table operations plus the new public
parameters. The same :func:`apply_update` runs on cleartext tables and on a
server's shares, so a test can mutate both and compare. Additive operations
carry deltas; a server receiving shares of a delta adds them cellwise.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field

import numpy as np

from ..codec import H, content_length, hash_chain
from ..errors import BadUpdate, ContentTooLong, LayoutOverflow, RowFull
from ..field import EVAL_POINTS, FieldRng, share_array
from .build import (
    DeployParams,
    Structures,
    access_value,
    addr_entry,
    ap_row,
    content_row,
    keyword_encoding,
    layout_optinv,
    padded_row,
)

KINDS = ("add", "set", "insert", "append", "replace")


@dataclass
class UpdateOp:
    """One table operation.

    ``add``/``set`` address ``values`` at ``rows`` x ``cols`` (None = all);
    ``insert`` places ``values`` before ``index`` along ``axis``; ``append``
    adds them at the end of ``axis``; ``replace`` swaps the whole table.
    """

    kind: str
    table: str
    values: np.ndarray
    rows: np.ndarray | None = None
    cols: np.ndarray | None = None
    axis: int = 0
    index: int = 0


@dataclass
class Update:
    ops: list[UpdateOp]
    params: DeployParams
    leaks: bool = False
    update_id: str = field(default_factory=lambda: uuid.uuid4().hex)


def _idx(values) -> np.ndarray | None:
    return None if values is None else np.asarray(values, dtype=np.int64).reshape(-1)


def _region(arr: np.ndarray, rows, cols):
    if arr.ndim == 1:
        if rows is not None:
            raise BadUpdate("one-dimensional tables take column coordinates only")
        return (slice(None),) if cols is None else (cols,)
    r = slice(None) if rows is None else rows
    c = slice(None) if cols is None else cols
    if rows is not None and cols is not None:
        return np.ix_(rows, cols)
    return (r, c)


def apply_update(tables: Structures, update: Update) -> Structures:
    """Return new tables with ``update`` applied; the input is left untouched.

    Raises:
        BadUpdate: unknown table, coordinates out of range, or shape mismatch.
    """
    f = tables.params.field
    arrays = dict(tables.arrays)
    for op in update.ops:
        if op.kind not in KINDS:
            raise BadUpdate(f"unknown operation {op.kind!r}")
        if op.kind == "replace":
            arrays[op.table] = np.array(op.values, dtype=np.int64) % f.p
            continue
        if op.table not in arrays:
            raise BadUpdate(f"bundle has no table {op.table!r}")
        arr = arrays[op.table]
        values = np.asarray(op.values, dtype=np.int64) % f.p
        try:
            if op.kind in ("add", "set"):
                for idx, size in ((op.rows, arr.shape[0]), (op.cols, arr.shape[-1])):
                    if idx is not None and idx.size and (idx.min() < 0 or idx.max() >= size):
                        raise BadUpdate("update coordinates out of range")
                region = _region(arr, op.rows, op.cols)
                new = arr.copy()
                if op.kind == "add":
                    new[region] = f.vadd(new[region], values.reshape(new[region].shape))
                else:
                    new[region] = values.reshape(new[region].shape)
            elif op.kind == "insert":
                if not 0 <= op.index <= arr.shape[op.axis]:
                    raise BadUpdate("insert position out of range")
                if arr.ndim == 1:
                    new = np.insert(arr, op.index, values.reshape(-1))
                else:
                    count = values.shape[op.axis]
                    new = np.insert(arr, [op.index] * count, values, axis=op.axis)
            elif arr.ndim == 1:
                new = np.concatenate([arr, values.reshape(-1)])
            elif op.axis == 0:
                new = np.concatenate([arr, values.reshape(-1, arr.shape[1])], axis=0)
            else:
                new = np.concatenate([arr, values.reshape(arr.shape[0], -1)], axis=1)
        except (ValueError, IndexError) as exc:
            raise BadUpdate(str(exc)) from exc
        arrays[op.table] = new
    return type(tables)(**{**tables.__dict__, "params": update.params.copy(), "arrays": arrays})


def share_update(update: Update, rng: FieldRng | None = None, eval_points=EVAL_POINTS) -> dict[int, Update]:
    """Split every value block of ``update`` into per-server shares."""
    rng = rng or FieldRng()
    f = update.params.field
    per_server = {x: [] for x in eval_points}
    for op in update.ops:
        shares = share_array(np.asarray(op.values, dtype=np.int64), f, rng, eval_points=eval_points)
        for x in eval_points:
            per_server[x].append(UpdateOp(op.kind, op.table, shares[x], op.rows, op.cols, op.axis, op.index))
    return {
        x: Update(ops, update.params.copy(), update.leaks, update.update_id)
        for x, ops in per_server.items()
    }


# access rights


def _check_real_column(params: DeployParams, column: int) -> None:
    if column in (params.fake_allowed, params.fake_denied) or not 0 <= column < params.columns:
        raise BadUpdate(f"column {column} is not a real keyword column")


def access_update(params: DeployParams, seed: bytes, client_id: str, keyword: str, column: int, grant: bool) -> Update:
    """Add ∓ the non-access value at ``column`` of the client's capability row."""
    _check_real_column(params, column)
    row = params.client_row(client_id)
    value = access_value(seed, keyword, client_id, params)
    vec = np.zeros((1, params.columns), dtype=object)
    vec[0, column] = -value if grant else value
    return Update([UpdateOp("add", "caps", params.field.array(vec), rows=_idx([row]))], params.copy())


def grant_update(params, seed, client_id, keyword, column) -> Update:
    return access_update(params, seed, client_id, keyword, column, grant=True)


def revoke_update(params, seed, client_id, keyword, column) -> Update:
    return access_update(params, seed, client_id, keyword, column, grant=False)


def delete_keyword_update(
    params: DeployParams,
    seed: bytes,
    keyword: str,
    column: int,
    current: np.ndarray,
    fast: bool = False,
) -> Update:
    """Move every client's cell in ``column`` to its non-access value.

    ``current`` is the column's cleartext cells (one per client) as read by the
    owner. The default sends a full-matrix delta so the column stays hidden;
    ``fast`` sends only the column and reveals it.
    """
    _check_real_column(params, column)
    f = params.field
    targets = [access_value(seed, keyword, cid, params) for cid in params.clients]
    delta = f.array([t - int(c) for t, c in zip(targets, current)])
    if fast:
        op = UpdateOp("add", "caps", delta.reshape(-1, 1), cols=_idx([column]))
        return Update([op], params.copy(), leaks=True)
    full = np.zeros((params.alpha, params.columns), dtype=np.int64)
    full[:, column] = delta
    return Update([UpdateOp("add", "caps", full)], params.copy())


# keyword insertion


def add_keyword_update(params: DeployParams, seed: bytes, keyword: str, allowed: set[str]) -> Update:
    """Append a column for ``keyword`` with an empty posting list."""
    f = params.field
    enc = keyword_encoding(keyword, params)
    col = params.columns
    new = params.copy(columns=col + 1)
    caps = [[0 if cid in allowed else access_value(seed, keyword, cid, params)] for cid in params.clients]
    ops = [
        UpdateOp("append", "keywords", np.array([enc], dtype=np.int64)),
        UpdateOp("append", "posdig", np.array([H(col + 1, field=f)], dtype=np.int64)),
        UpdateOp("append", "caps", f.array(caps).reshape(params.alpha, 1), axis=1),
    ]
    if params.layout == "padded":
        row = padded_row([], params.slots, enc, f)
        ops.append(UpdateOp("append", "index", np.array([row], dtype=np.int64)))
    else:
        n = params.x * params.y
        block = [hash_chain([], enc, f)] + [0] * (params.y - 1)
        ops.append(UpdateOp("append", "optinv", f.array(block)))
        ops.append(UpdateOp("append", "addr", f.array([addr_entry(n + 1, 1, enc, f)])))
        new.x = params.x + 1
    if params.ap_mode == "full":
        zeros = np.zeros((params.records, 1), dtype=np.int64)
        ops.append(UpdateOp("insert", "ap", zeros, axis=1, index=params.columns))
    return Update(ops, new)


# file insertion


def add_file_update(params: DeployParams, file_id: int, words: list[str], positions: list[int]) -> Update:
    """Append the record for a new file; its keywords are linked separately."""
    f = params.field
    if file_id <= params.delta:
        raise BadUpdate(f"file id {file_id} is already allocated")
    if content_length(words, f) > params.eta:
        raise ContentTooLong(f"file {file_id} needs more than η={params.eta} elements")
    new = params.copy(delta=file_id)
    ops = []
    if params.ap_mode == "reduced" and len(positions) > params.gamma_ap:
        extra = len(positions) - params.gamma_ap
        zeros = np.zeros((params.records, extra), dtype=np.int64)
        ops.append(UpdateOp("insert", "ap", zeros, axis=1, index=params.gamma_ap))
        new.gamma_ap = len(positions)
    gap = list(range(params.delta + 1, file_id))
    ids = [0] * len(gap) + [file_id]
    aps = [ap_row([], new) for _ in gap] + [ap_row(positions, new)]
    contents = [content_row([], 0, new) for _ in gap] + [content_row(words, file_id, new)]
    ops += [
        UpdateOp("append", "file_ids", np.array(ids, dtype=np.int64)),
        UpdateOp("append", "ap", f.array(aps)),
        UpdateOp("append", "content", f.array(contents)),
    ]
    return Update(ops, new)


def add_fid_padded_update(
    params: DeployParams,
    column: int,
    file_id: int,
    row: np.ndarray,
    encoding: int,
    extend: bool = True,
) -> Update:
    """Place ``file_id`` in the keyword's next free slot.

    ``row`` is the keyword's current cleartext row (ids, marker, digest). When
    the row is full, ``extend`` widens every row by one slot first.

    Raises:
        RowFull: the row has no free slot and ``extend`` is false.
    """
    f = params.field
    slots = params.slots
    count = int(row[slots]) - 1
    old_digest = int(row[slots + 1])
    if int(row[slots]) != count + 1 or not 0 <= count <= slots:
        raise BadUpdate("row marker is corrupt")
    ops = []
    new = params.copy()
    if count == slots:
        if not extend:
            raise RowFull(f"keyword row {column} has no free slot")
        zeros = np.zeros((params.columns, 1), dtype=np.int64)
        ops.append(UpdateOp("insert", "index", zeros, axis=1, index=slots))
        new.slots = slots + 1
    cols = [count, new.slots, new.slots + 1]
    block = np.zeros((params.columns, 3), dtype=np.int64)
    block[column] = f.array([file_id, 1, H(file_id, old_digest, field=f) - old_digest])
    ops.append(UpdateOp("add", "index", block, cols=_idx(cols)))
    new.gamma = max(params.gamma, count + 1)
    return Update(ops, new)


def _spans(addr: np.ndarray) -> list[tuple[int, int]]:
    return [(int(r[0]), int(r[1])) for r in addr]


def relayout_update(params: DeployParams, encodings: np.ndarray, span_ids: list[list[int]]) -> Update:
    """Rebuild OptInv and AddrList wholesale; reveals that a relayout happened."""
    f = params.field
    labels = [int(e) for e in encodings]
    slots, addresses, x, y = layout_optinv(
        list(zip(span_ids, labels)), [params.reserve] * params.columns, params.y, f
    )
    table = [addr_entry(sip, cut, enc, f) for (sip, cut), enc in zip(addresses, labels)]
    new = params.copy(x=x)
    new.gamma = max(params.gamma, max(len(s) for s in span_ids))
    ops = [
        UpdateOp("replace", "optinv", np.array(slots, dtype=np.int64)),
        UpdateOp("replace", "addr", f.array(table).reshape(params.columns, 4)),
    ]
    return Update(ops, new, leaks=True)


def span_contents(addr: np.ndarray, optinv: np.ndarray) -> list[list[int]]:
    return [[int(v) for v in optinv[sip - 1:sip + cut - 2]] for sip, cut in _spans(addr)]


def add_fid_optimized_update(
    params: DeployParams,
    column: int,
    file_id: int,
    addr: np.ndarray,
    optinv: np.ndarray,
    encodings: np.ndarray,
) -> Update:
    """Extend a keyword's OptInv span by one id.

    Uses the reserve slot right after the span when it exists; otherwise falls
    back to a full relayout flagged as access-pattern revealing.
    """
    f = params.field
    spans = _spans(addr)
    sip, cut = spans[column]
    if cut + 1 > params.y:
        raise LayoutOverflow(f"span of {cut + 1} slots exceeds row width {params.y}")
    nxt = sip + cut
    occupied = {pos for s, c in spans for pos in range(s, s + c)}
    if nxt <= params.x * params.y and nxt not in occupied:
        enc = int(encodings[column])
        old_digest = int(optinv[nxt - 2])
        new_digest = H(file_id, old_digest, field=f)
        ops = [
            UpdateOp("add", "optinv", f.array([file_id - old_digest, new_digest]), cols=_idx([nxt - 2, nxt - 1])),
            UpdateOp(
                "add",
                "addr",
                f.array([[0, 1, H(sip, cut + 1, enc, field=f) - H(sip, cut, enc, field=f), H(nxt, field=f)]]),
                rows=_idx([column]),
            ),
        ]
        new = params.copy()
        new.gamma = max(params.gamma, cut)
        return Update(ops, new)
    ids = span_contents(addr, optinv)
    ids[column].append(file_id)
    return relayout_update(params, encodings, ids)


# deletion of a single posting


def delete_fid_padded_update(
    params: DeployParams,
    column: int,
    file_id: int,
    row: np.ndarray,
    encoding: int,
    fast: bool = False,
) -> Update:
    """Remove ``file_id`` from a padded row, compacting the remaining ids."""
    f = params.field
    slots = params.slots
    count = int(row[slots]) - 1
    ids = [int(v) for v in row[:count]]
    if file_id not in ids:
        raise BadUpdate(f"file {file_id} is not listed under column {column}")
    ids.remove(file_id)
    delta = f.vsub(np.array(padded_row(ids, slots, encoding, f), dtype=np.int64), row)
    if fast:
        return Update([UpdateOp("add", "index", delta.reshape(1, -1), rows=_idx([column]))], params.copy(), leaks=True)
    full = np.zeros((params.columns, slots + 2), dtype=np.int64)
    full[column] = delta
    return Update([UpdateOp("add", "index", full)], params.copy())


def delete_fid_optimized_update(
    params: DeployParams,
    column: int,
    file_id: int,
    addr: np.ndarray,
    optinv: np.ndarray,
    encoding: int,
    fast: bool = False,
) -> Update:
    """Remove ``file_id`` from a span, shifting later ids left and freeing the last slot."""
    f = params.field
    sip, cut = _spans(addr)[column]
    ids = [int(v) for v in optinv[sip - 1:sip + cut - 2]]
    if file_id not in ids:
        raise BadUpdate(f"file {file_id} is not listed under column {column}")
    ids.remove(file_id)
    new_span = ids + [hash_chain(ids, encoding, f), 0]
    positions = np.arange(sip - 1, sip - 1 + cut)
    span_delta = f.vsub(np.array(new_span, dtype=np.int64), optinv[positions])
    addr_delta = f.vsub(np.array(addr_entry(sip, cut - 1, encoding, f), dtype=np.int64), addr[column])
    if fast:
        ops = [
            UpdateOp("add", "optinv", span_delta, cols=positions),
            UpdateOp("add", "addr", addr_delta.reshape(1, 4), rows=_idx([column])),
        ]
        return Update(ops, params.copy(), leaks=True)
    full_slots = np.zeros(params.x * params.y, dtype=np.int64)
    full_slots[positions] = span_delta
    full_addr = np.zeros((params.columns, 4), dtype=np.int64)
    full_addr[column] = addr_delta
    return Update([UpdateOp("add", "optinv", full_slots), UpdateOp("add", "addr", full_addr)], params.copy())


def make_update(kind: str, params: DeployParams, **kwargs) -> Update:
    """Dispatch to the constructor for ``kind``.

    Kinds: ``grant``, ``revoke``, ``add_keyword``, ``add_file``, ``add_fid``,
    ``delete_keyword``, ``delete_fid``. ``add_fid`` and ``delete_fid`` pick the
    padded or optimized variant from ``params.layout``.
    """
    if kind == "grant":
        return grant_update(params, **kwargs)
    if kind == "revoke":
        return revoke_update(params, **kwargs)
    if kind == "add_keyword":
        return add_keyword_update(params, **kwargs)
    if kind == "add_file":
        return add_file_update(params, **kwargs)
    if kind == "delete_keyword":
        return delete_keyword_update(params, **kwargs)
    if kind == "add_fid":
        if params.layout == "padded":
            return add_fid_padded_update(params, **kwargs)
        return add_fid_optimized_update(params, **kwargs)
    if kind == "delete_fid":
        if params.layout == "padded":
            return delete_fid_padded_update(params, **kwargs)
        return delete_fid_optimized_update(params, **kwargs)
    raise ValueError(f"unknown update kind {kind!r}")
