"""A server node: one share bundle, per-session query state, owner updates.

The arithmetic of every phase lives in module-level functions over share
arrays so fixtures can feed hand-computed shares straight in. ``ServerNode``
wires them into generator handlers (see :mod:`docstar.mpc`) that a driver runs
either in-process or over TCP.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .codec import H
from .datamodel.build import DeployParams, ServerBundle
from .datamodel.updates import Update, UpdateOp, apply_update
from .errors import (
    AccessDenied,
    BadUpdate,
    DocStarError,
    MalformedClientVector,
    PeerTimeout,
    ProtocolAbort,
    ProtocolError,
)
from .field import EVAL_POINTS, Field, FieldRng
from .mpc import PoolBook, Round, Step, open_many, reduce_degree
from .transport.frames import Frame, MsgType

log = logging.getLogger(__name__)

MAX_SESSIONS = 4096


# phase arithmetic on local shares


def phase1_answer(f: Field, keywords, uw: int, caps_row, rn, m0=None) -> np.ndarray:
    """``(sw[i] − uw + AC[i]) · RN[i] + M0[i]`` for every column."""
    diff = f.vadd(f.vsub(keywords, uw), caps_row)
    ans = f.vmul(diff, rn)
    return ans if m0 is None else f.vadd(ans, m0)


def owner_scan(f: Field, keywords, uw: int, caps_row=None) -> np.ndarray:
    """Phase 1 without the random multiplier, used by the owner to locate columns."""
    diff = f.vsub(keywords, uw)
    return diff if caps_row is None else f.vadd(diff, caps_row)


def test_a(f: Field, v) -> np.ndarray:
    """Σ v along the last axis (degree 1)."""
    return f.vsum(v, axis=-1)


def test_b(f: Field, v) -> np.ndarray:
    """Σ v² along the last axis (degree 2)."""
    return f.vsum(f.vmul(v, v), axis=-1)


def test_c(f: Field, v) -> np.ndarray:
    """v² − v elementwise (degree 2)."""
    return f.vsub(f.vmul(v, v), v)


def access_dot(f: Field, caps_row, v) -> np.ndarray:
    """Σ AC[i] · v[i]; opens to 0 iff every selected column is allowed."""
    return f.matmul(np.asarray(v), np.asarray(caps_row))


def select_rows(f: Field, v, table) -> np.ndarray:
    """``v · table``: the row chosen by a one-hot ``v`` (or a batch of them)."""
    return f.matmul(np.asarray(v), np.asarray(table))


def optinv_hash_matrix(f: Field, x: int, y: int) -> np.ndarray:
    """H(linear position) laid out as the x × y OptInv matrix view."""
    return np.array([H(pos, field=f) for pos in range(1, x * y + 1)], dtype=np.int64).reshape(x, y)


def optinv_check(f: Field, hashes: np.ndarray, row_vecs, pos_vecs, hdv: int) -> int:
    """Σ_k Σ_j hrow_k[j] · (1 − pos_k[j]) − HdV with hrow_k = row_k · hashes."""
    hrow = f.matmul(np.asarray(row_vecs), hashes)
    comp = f.vsub(1, pos_vecs)
    return f.sub(f.vsum(f.vmul(hrow, comp)), hdv)


def optinv_fetch(f: Field, matrix, row_vecs, pos_vecs, rn) -> tuple[np.ndarray, np.ndarray]:
    """Column-select each requested row; mask positions with pos = 1 by ``RN · pos``.

    Returns ``(masked answer, unmasked selection)``, both shaped like ``pos_vecs``.
    """
    picked = f.matmul(np.asarray(row_vecs), np.asarray(matrix))
    return f.vadd(picked, f.vmul(rn.reshape(picked.shape), pos_vecs)), picked


def test2_values(f: Field, file_ids, v, u, window) -> np.ndarray:
    """(file_id · v) − (u · fidS) per fetch: 0 iff v picks an id the server returned."""
    return f.vsub(f.matmul(np.asarray(v), np.asarray(file_ids)), f.matmul(np.asarray(u), np.asarray(window)))


def test4_values(f: Field, kpv, posdig, hap) -> np.ndarray:
    """Σ kpv[i] · H(pos i) − H(AP) per fetch."""
    return f.vsub(f.matmul(np.asarray(kpv), np.asarray(posdig)), hap)


def masked_content(f: Field, content_rows, t5, rn) -> np.ndarray:
    """Content plus ``t5 · RN`` per word; opens cleanly iff t5 = 0."""
    t5 = np.asarray(t5, dtype=np.int64).reshape(-1, 1)
    return f.vadd(content_rows, f.vmul(rn.reshape(content_rows.shape), t5))


def scatter_bins(bins: list[list[int]], vectors: np.ndarray, records: int) -> np.ndarray:
    """Expand per-bin selectors to full-length selectors over all records."""
    out = np.zeros((len(bins), records), dtype=np.int64)
    for k, members in enumerate(bins):
        out[k, members] = vectors[k]
    return out


def abort_frame(session_id: bytes, test: str, reason: str, kind: str = "ProtocolAbort") -> Frame:
    return Frame(MsgType.ABORT, session_id, text=json.dumps({"test": test, "kind": kind, "reason": reason}))


# sessions


@dataclass
class QuerySession:
    session_id: bytes
    client_id: str | None
    row: int | None
    book: PoolBook
    owner: bool = False
    state: str = "open"
    hdv: np.ndarray | None = None
    window: np.ndarray | None = None
    fetch: np.ndarray | None = None
    hap: np.ndarray | None = None


def pool_size(params: DeployParams) -> int:
    """RN slots Phases 2 and 3 of one query consume, generated when Phase 2 starts.

    Phase 1 draws its ``columns`` slots from a separate pool filled at HELLO,
    so a query that ends after Phase 1 never pays for the larger pool.
    """
    b, gamma = params.columns, params.gamma
    window = params.slots if params.layout == "padded" else 2 * params.y
    n = 2 + window + gamma + gamma * (params.eta + 1)
    if params.layout == "optimized":
        n += 2 * params.y
    if params.ap_mode == "full":
        n += gamma * b
    return n


def window_size(params: DeployParams) -> int:
    """Entries a Phase 3 selector ranges over: the Phase 2 id slots plus a zero."""
    return (params.slots if params.layout == "padded" else 2 * params.y) + 1


def _ints(vec) -> np.ndarray:
    return np.asarray(vec, dtype=np.int64)


def _shaped(vectors: list[np.ndarray], count: int, length: int, what: str) -> np.ndarray:
    if len(vectors) != count or any(np.size(v) != length for v in vectors):
        raise ProtocolError(f"{what}: expected {count} vectors of length {length}")
    return np.stack([_ints(v) for v in vectors]) if count else np.zeros((0, length), dtype=np.int64)


class ServerNode:
    """One of the four servers.

    Args:
        bundle: this server's share bundle.
        plain_test1: open Σ AC·v directly instead of its degree-reduced, randomized form.
        fake_continue: when Test 1 fails, continue with the fake-denied column instead of aborting.
        rng: randomness for shares this node creates.
        adversary: optional hook object for fault injection in tests; may define
            ``on_peer(node, msg_type, dest, vectors)`` and ``on_reply(node, frame)``.
    """

    def __init__(
        self,
        bundle: ServerBundle,
        *,
        plain_test1: bool = False,
        fake_continue: bool = False,
        rng: FieldRng | None = None,
        points: tuple[int, ...] = EVAL_POINTS,
        adversary=None,
    ):
        self.bundle = bundle
        self.index = bundle.server_index
        self.points = tuple(points)
        self.rng = rng or FieldRng()
        self.plain_test1 = plain_test1
        self.fake_continue = fake_continue
        self.adversary = adversary
        self.sessions: OrderedDict[bytes, QuerySession] = OrderedDict()
        self.applied: set[str] = set()
        self._lock = threading.Lock()
        self._hashes: tuple[tuple[int, int, int], np.ndarray] | None = None
        self._params_text: tuple[DeployParams, str] | None = None
        self._fetch_table: tuple[ServerBundle, np.ndarray] | None = None

    @property
    def params(self) -> DeployParams:
        return self.bundle.params

    @property
    def field(self) -> Field:
        return self.bundle.params.field

    def tamper(self, msg_type: MsgType, dest: int, vectors: list[np.ndarray]) -> list[np.ndarray]:
        if self.adversary is not None and hasattr(self.adversary, "on_peer"):
            return self.adversary.on_peer(self, msg_type, dest, vectors)
        return vectors

    def _reply(self, frame: Frame) -> Frame:
        if self.adversary is not None and hasattr(self.adversary, "on_reply"):
            return self.adversary.on_reply(self, frame)
        return frame

    def _fetch_rows(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``v · file_ids``, ``v · AP`` and ``v · content`` from one product."""
        t = self.bundle.arrays
        if self._fetch_table is None or self._fetch_table[0] is not self.bundle:
            table = np.hstack([t["file_ids"].reshape(-1, 1), t["ap"], t["content"]])
            self._fetch_table = (self.bundle, table)
        out = self.field.matmul(v, self._fetch_table[1])
        w = t["ap"].shape[1]
        return out[:, 0], out[:, 1:1 + w], out[:, 1 + w:]

    def _params_json(self) -> str:
        params = self.params
        if self._params_text is None or self._params_text[0] is not params:
            self._params_text = (params, json.dumps(params.to_dict()))
        return self._params_text[1]

    def _hash_matrix(self) -> np.ndarray:
        key = (self.params.p, self.params.x, self.params.y)
        if self._hashes is None or self._hashes[0] != key:
            self._hashes = (key, optinv_hash_matrix(self.field, self.params.x, self.params.y))
        return self._hashes[1]

    # dispatch

    def handle(self, frame: Frame) -> Step:
        """Serve one client or owner request; yields inter-server rounds, returns the reply."""
        sid = frame.session_id
        try:
            if frame.msg_type == MsgType.HELLO:
                reply = yield from self._hello(frame)
            elif frame.msg_type == MsgType.ACK:
                self.sessions.pop(sid, None)
                reply = Frame(MsgType.ACK, sid)
            elif frame.msg_type == MsgType.UPDATE:
                reply = self._update(frame)
            else:
                session = self.sessions.get(sid)
                if session is None:
                    raise ProtocolError("unknown session")
                handler = self._handlers.get(frame.msg_type)
                if handler is None:
                    raise ProtocolError(f"{frame.msg_type.name} is not a request")
                reply = yield from handler(self, session, frame)
        except ProtocolAbort as exc:
            self.sessions.pop(sid, None)
            log.info("server %d aborted session %s: %s", self.index, sid.hex()[:8], exc)
            reply = abort_frame(sid, exc.test, str(exc), type(exc).__name__)
        except DocStarError as exc:
            self.sessions.pop(sid, None)
            test = "peer_timeout" if isinstance(exc, PeerTimeout) else "request"
            reply = abort_frame(sid, test, str(exc), type(exc).__name__)
        return self._reply(reply)

    def _expect(self, session: QuerySession, *states: str) -> None:
        if session.state not in states:
            raise ProtocolAbort("sequence", f"request not allowed in state {session.state}")

    # setup

    def _hello(self, frame: Frame) -> Step:
        info = json.loads(frame.text or "{}")
        owner = info.get("role") == "owner"
        client_id = info.get("client")
        row = None
        if client_id is not None:
            row = self.params.client_row(client_id)
        elif not owner:
            raise ProtocolError("HELLO must name a client")
        session = QuerySession(frame.session_id, client_id, row, PoolBook(frame.session_id), owner=owner)
        if not owner:
            yield from session.book.fill(self, self.params.columns)
        with self._lock:
            self.sessions[frame.session_id] = session
            while len(self.sessions) > MAX_SESSIONS:
                self.sessions.popitem(last=False)
        return Frame(MsgType.HELLO, frame.session_id, text=self._params_json())

    # phase 1

    def _p1(self, session: QuerySession, frame: Frame) -> Step:
        self._expect(session, "open")
        if session.owner:
            raise ProtocolAbort("sequence", "owner sessions cannot query")
        (uw,) = _shaped(frame.vectors, 1, 1, "P1_QUERY")[0]
        t = self.bundle.arrays
        rn, m0 = yield from session.book.take(self, self.params.columns)
        ans = phase1_answer(self.field, t["keywords"], int(uw), t["caps"][session.row], rn, m0)
        session.state = "p1"
        return Frame(MsgType.P1_ANS, session.session_id, [ans])

    # phase 2

    def _check_selector(self, session: QuerySession, v: np.ndarray) -> Step:
        """Tests A, B and 1 on the Phase 2 selector; returns the selector to use."""
        f = self.field
        caps = self.bundle.arrays["caps"][session.row]
        a, b = yield from open_many(self, [(test_a(f, v), 1, "A"), (test_b(f, v), 2, "B")])
        if int(a) != 1:
            raise MalformedClientVector("A", "selector does not sum to one")
        if int(b) != 1:
            raise MalformedClientVector("B", "selector is not one-hot")
        dot = access_dot(f, caps, v)
        mask, _ = yield from session.book.take(self, 2)
        if self.plain_test1:
            (t1,) = yield from open_many(self, [(np.array([dot]), 2, "1")])
        else:
            reduced = yield from reduce_degree(self, np.array([dot]), mask[:1])
            (t1,) = yield from open_many(self, [(f.vmul(reduced, mask[1:]), 2, "1")])
        if int(t1[0]) != 0:
            if not self.fake_continue:
                raise AccessDenied("1", "selected keyword is not accessible")
            v = np.zeros_like(v)
            v[self.params.fake_denied] = 1
        return v

    def _p2(self, session: QuerySession, frame: Frame) -> Step:
        self._expect(session, "p1")
        f = self.field
        params = self.params
        t = self.bundle.arrays
        v = _shaped(frame.vectors, 1, params.columns, "P2_VECTOR")[0]
        yield from session.book.fill(self, pool_size(params))
        v = yield from self._check_selector(session, v)
        if params.layout == "padded":
            row = select_rows(f, v, t["index"])
            masks, _ = yield from session.book.take(self, params.slots)
            ids = yield from reduce_degree(self, row[:params.slots], masks)
            session.window = np.concatenate([ids, [0]]).astype(np.int64)
            session.state = "p2"
            return Frame(MsgType.P2_ANS, session.session_id, [row])
        entry = select_rows(f, v, t["addr"])
        session.hdv = entry[3:4]
        session.state = "addr"
        return Frame(MsgType.ADDR_ANS, session.session_id, [entry[:3]])

    def _optinv(self, session: QuerySession, frame: Frame) -> Step:
        self._expect(session, "addr")
        f = self.field
        params = self.params
        x, y = params.x, params.y
        vecs = frame.vectors
        if len(vecs) != 4:
            raise ProtocolError("OPTINV_VECTORS carries two (row, pos) pairs")
        rows = _shaped([vecs[0], vecs[2]], 2, x, "row_vec")
        pos = _shaped([vecs[1], vecs[3]], 2, y, "pos_vec")
        hashes = self._hash_matrix()
        check = optinv_check(f, hashes, rows, pos, int(session.hdv[0]))
        a, b, c, ov = yield from open_many(self, [
            (test_a(f, rows), 1, "A"),
            (test_b(f, rows), 2, "B"),
            (test_c(f, pos), 2, "C"),
            (np.array([check]), 2, "optinv_verify"),
        ])
        if np.any(a != 1):
            raise MalformedClientVector("A", "row vector does not sum to one")
        if np.any(b != 1):
            raise MalformedClientVector("B", "row vector is not one-hot")
        if np.any(c != 0):
            raise MalformedClientVector("C", "position vector is not binary")
        if int(ov[0]) != 0:
            raise MalformedClientVector("optinv_verify", "vectors do not cover the keyword's span")
        rn, _ = yield from session.book.take(self, 2 * y)
        masked, picked = optinv_fetch(f, self.bundle.arrays["optinv"].reshape(x, y), rows, pos, rn)
        masks, _ = yield from session.book.take(self, 2 * y)
        window = yield from reduce_degree(self, masked.ravel(), masks)
        session.window = np.concatenate([window, [0]]).astype(np.int64)
        session.state = "p2"
        return Frame(MsgType.OPTINV_ANS, session.session_id, [masked[0], masked[1]])

    # phase 3

    def _p3(self, session: QuerySession, frame: Frame) -> Step:
        self._expect(session, "p2")
        f = self.field
        params = self.params
        t = self.bundle.arrays
        gamma, records, width = params.gamma, params.records, window_size(params)
        info = json.loads(frame.text or "{}")
        if len(frame.vectors) != 2 * gamma:
            raise ProtocolError(f"P3_VECTOR carries {2 * gamma} vectors")
        bins = info.get("bins")
        if bins is not None:
            if len(bins) != gamma or any(not 0 <= m <= params.delta for b in bins for m in b):
                raise ProtocolError("bins must be γ lists of record indexes")
            short = [_shaped([frame.vectors[k]], 1, len(bins[k]), "bin selector")[0] for k in range(gamma)]
            sums = [(test_a(f, s), test_b(f, s)) for s in short]
            a_v = np.array([s[0] for s in sums], dtype=np.int64)
            b_v = np.array([s[1] for s in sums], dtype=np.int64)
            v = scatter_bins(bins, short, records)
        else:
            v = _shaped(frame.vectors[:gamma], gamma, records, "file selector")
            a_v, b_v = test_a(f, v), test_b(f, v)
        u = _shaped(frame.vectors[gamma:], gamma, width, "id selector")
        ids, ap, content = self._fetch_rows(v)
        t2 = f.vsub(ids, f.matmul(u, session.window))
        opened = yield from open_many(self, [
            (a_v, 1, "A"), (b_v, 2, "B"),
            (test_a(f, u), 1, "A"), (test_b(f, u), 2, "B"),
            (t2, 2, "2"),
        ])
        for value, test, what in zip(opened, "ABAB2", ("file", "file", "id", "id", "")):
            if np.any(value != (0 if test == "2" else 1)):
                if test == "2":
                    raise MalformedClientVector("2", "selected file was not in the Phase 2 answer")
                raise MalformedClientVector(test, f"{what} selector is not one-hot")
        session.fetch = content
        session.hap = ap[:, -1]
        if params.ap_mode == "full":
            masks, _ = yield from session.book.take(self, gamma * params.columns)
            kpv = yield from reduce_degree(self, ap[:, :-1], masks.reshape(gamma, params.columns))
            reply = yield from self._return_files(session, kpv)
            return reply
        session.state = "p3"
        return Frame(MsgType.P3_POSITIONS, session.session_id, list(ap[:, :-1]))

    def _kpv(self, session: QuerySession, frame: Frame) -> Step:
        self._expect(session, "p3")
        kpv = _shaped(frame.vectors, self.params.gamma, self.params.columns, "P3_KPV")
        reply = yield from self._return_files(session, kpv)
        return reply

    def _return_files(self, session: QuerySession, kpv: np.ndarray) -> Step:
        f = self.field
        params = self.params
        t = self.bundle.arrays
        gamma = params.gamma
        c, t4 = yield from open_many(self, [
            (test_c(f, kpv), 2, "C"),
            (test4_values(f, kpv, t["posdig"], session.hap), 2, "4"),
        ])
        if np.any(c != 0):
            raise MalformedClientVector("C", "keyword position vector is not binary")
        if np.any(t4 != 0):
            raise MalformedClientVector("4", "keyword positions do not match the file")
        t5 = access_dot(f, t["caps"][session.row], kpv)
        masks, _ = yield from session.book.take(self, gamma)
        t5 = yield from reduce_degree(self, t5, masks)
        rn, _ = yield from session.book.take(self, gamma * (params.eta + 1))
        out = masked_content(f, session.fetch, t5, rn)
        session.state = "done"
        self.sessions.pop(session.session_id, None)
        return Frame(MsgType.P3_FILE, session.session_id, list(out))

    # owner

    def _owner_scan(self, session: QuerySession, frame: Frame) -> Step:
        if not session.owner:
            raise ProtocolAbort("sequence", "owner request on a client session")
        (uw,) = _shaped(frame.vectors, 1, 1, "OWNER_SCAN")[0]
        t = self.bundle.arrays
        info = json.loads(frame.text or "{}")
        row = None
        if info.get("client") is not None:
            row = t["caps"][self.params.client_row(info["client"])]
        yield from ()
        return Frame(MsgType.OWNER_ANS, session.session_id, [owner_scan(self.field, t["keywords"], int(uw), row)])

    def _owner_read(self, session: QuerySession, frame: Frame) -> Step:
        """Read a table: whole, or ``selector · table`` along ``axis``."""
        if not session.owner:
            raise ProtocolAbort("sequence", "owner request on a client session")
        info = json.loads(frame.text or "{}")
        name = info.get("table")
        if name not in self.bundle.arrays:
            raise ProtocolError(f"no table {name!r}")
        table = self.bundle.arrays[name]
        yield from ()
        if not frame.vectors:
            return Frame(MsgType.OWNER_ANS, session.session_id, [table.ravel()], text=json.dumps(list(table.shape)))
        sel = _ints(frame.vectors[0])
        if info.get("axis", 0) == 1:
            out = self.field.matmul(table, sel)
        else:
            out = self.field.matmul(sel, table)
        return Frame(MsgType.OWNER_ANS, session.session_id, [np.ravel(out)])

    # updates

    def _update(self, frame: Frame) -> Frame:
        update = decode_update(frame)
        with self._lock:
            if update.update_id not in self.applied:
                if self.field.p != update.params.p:
                    raise BadUpdate("update is for a different field")
                self.bundle = apply_update(self.bundle, update)
                self.applied.add(update.update_id)
        return Frame(MsgType.ACK, frame.session_id, text=update.update_id)

    _handlers = {
        MsgType.P1_QUERY: _p1,
        MsgType.P2_VECTOR: _p2,
        MsgType.OPTINV_VECTORS: _optinv,
        MsgType.P3_VECTOR: _p3,
        MsgType.P3_KPV: _kpv,
        MsgType.OWNER_SCAN: _owner_scan,
        MsgType.OWNER_READ: _owner_read,
    }


# update wire format


def encode_update(update: Update, session_id: bytes = bytes(16)) -> Frame:
    ops = []
    vectors = []
    for op in update.ops:
        values = np.asarray(op.values, dtype=np.int64)
        ops.append({
            "kind": op.kind,
            "table": op.table,
            "shape": list(values.shape),
            "rows": None if op.rows is None else [int(r) for r in op.rows],
            "cols": None if op.cols is None else [int(c) for c in op.cols],
            "axis": op.axis,
            "index": op.index,
        })
        vectors.append(values.ravel())
    text = json.dumps({
        "id": update.update_id, "leaks": update.leaks, "params": update.params.to_dict(), "ops": ops,
    })
    return Frame(MsgType.UPDATE, session_id, vectors, text)


def decode_update(frame: Frame) -> Update:
    try:
        info = json.loads(frame.text)
        ops = []
        if len(info["ops"]) != len(frame.vectors):
            raise BadUpdate("operation count does not match vector count")
        for spec, vec in zip(info["ops"], frame.vectors):
            values = _ints(vec).reshape(spec["shape"])
            rows = None if spec["rows"] is None else _ints(spec["rows"])
            cols = None if spec["cols"] is None else _ints(spec["cols"])
            ops.append(UpdateOp(spec["kind"], spec["table"], values, rows, cols, spec["axis"], spec["index"]))
        return Update(ops, DeployParams.from_dict(info["params"]), info["leaks"], info["id"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, BadUpdate):
            raise
        raise BadUpdate(f"malformed update frame: {exc}") from exc


__all__ = [
    "QuerySession",
    "Round",
    "ServerNode",
    "access_dot",
    "decode_update",
    "encode_update",
    "masked_content",
    "optinv_check",
    "optinv_fetch",
    "optinv_hash_matrix",
    "owner_scan",
    "phase1_answer",
    "pool_size",
    "scatter_bins",
    "select_rows",
    "test2_values",
    "test4_values",
    "test_a",
    "test_b",
    "test_c",
    "window_size",
]
