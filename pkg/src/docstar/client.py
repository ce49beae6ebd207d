"""Client and owner sides of the protocol.

:class:`Client` runs the three query phases against a server group (anything
with ``request(frames) -> replies`` and ``points``). :class:`Owner` uses the
same group for administrative reads and for pushing update shares.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .codec import H, content_digest, decode_content, hash_chain, tokenize
from .datamodel.build import DeployParams, keyword_encoding
from .datamodel.updates import Update, make_update, share_update, span_contents
from .errors import (
    AccessDenied,
    BadAddress,
    DocStarError,
    EncodingOverflow,
    InsufficientBins,
    MaliciousServerDetected,
    MalformedClientVector,
    NoAccessOrAbsent,
    ProtocolAbort,
    ServerMisbehavior,
    TamperedRandomness,
    UnknownClient,
    UnsupportedCharacter,
)
from .field import Field, FieldRng, consistent_open, open_array, share_array
from .server import encode_update, window_size
from .transport.frames import Frame, MsgType

_ABORTS = {
    cls.__name__: cls
    for cls in (ProtocolAbort, MalformedClientVector, AccessDenied, TamperedRandomness, MaliciousServerDetected)
}


RESAMPLE_LIMIT = 64


# vector builders


def build_onehot(length: int, index: int) -> np.ndarray:
    if not 0 <= index < length:
        raise IndexError(f"index {index} outside a vector of length {length}")
    vec = np.zeros(length, dtype=np.int64)
    vec[index] = 1
    return vec


def share_vector(vec, f: Field, rng: FieldRng, points=(1, 2, 3, 4), slope: int | None = None) -> dict[int, np.ndarray]:
    """Fresh degree-1 shares of every element, keyed by eval point."""
    return share_array(np.asarray(vec), f, rng, eval_points=points, slope=slope)


def build_optinv_vectors(sip: int, cut: int, x: int, y: int) -> tuple[np.ndarray, np.ndarray]:
    """Row selector and position mask for a span inside one matrix row.

    ``pos_vec`` is 0 exactly at the span's in-row offsets and 1 elsewhere.

    Raises:
        BadAddress: the span leaves ``[1, x·y]`` or crosses a row boundary.
    """
    if cut < 1 or sip < 1 or sip + cut - 1 > x * y:
        raise BadAddress(f"span ({sip}, {cut}) outside a {x}x{y} matrix")
    row, first = divmod(sip - 1, y)
    if first + cut > y:
        raise BadAddress(f"span ({sip}, {cut}) crosses a row boundary")
    pos = np.ones(y, dtype=np.int64)
    pos[first:first + cut] = 0
    return build_onehot(x, row), pos


def optinv_fetch_plan(sip: int, cut: int, x: int, y: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Always two (row, pos) pairs: one per row the span touches, padded with a fully masked pair."""
    if cut < 1 or sip < 1 or sip + cut - 1 > x * y:
        raise BadAddress(f"span ({sip}, {cut}) outside a {x}x{y} matrix")
    first_row_room = y - (sip - 1) % y
    if cut <= first_row_room:
        pair = build_optinv_vectors(sip, cut, x, y)
        return [pair, (pair[0].copy(), np.ones(y, dtype=np.int64))]
    head = build_optinv_vectors(sip, first_row_room, x, y)
    tail = build_optinv_vectors(sip + first_row_room, cut - first_row_room, x, y)
    return [head, tail]


def span_window_positions(sip: int, cut: int, y: int) -> list[int]:
    """Where each span slot lands in the concatenated two-row answer."""
    first_row = (sip - 1) // y
    out = []
    for pos in range(sip, sip + cut):
        row, offset = divmod(pos - 1, y)
        out.append((row - first_row) * y + offset)
    return out


def build_kpv(positions, columns: int) -> np.ndarray:
    """Keyword-position vector: ones at the (1-based) positions, zeros dropped."""
    kpv = np.zeros(columns, dtype=np.int64)
    for pos in positions:
        if pos:
            kpv[int(pos) - 1] = 1
    return kpv


def plan_multi_fetch(
    fids: list[int],
    delta: int,
    gamma: int,
    bins: int | list[list[int]],
    rng: FieldRng,
    overlap: int = 2,
) -> tuple[list[list[int]], list[int]]:
    """Assign each target file to a distinct bin.

    ``bins`` is either a bin count, in which case every file is placed in
    ``overlap`` random bins and the dummy record 0 in all of them, or explicit
    member lists. Returns the member lists and, per bin, the selected index
    into that bin (the dummy where no target is assigned).

    Raises:
        InsufficientBins: more targets than bins, or no distinct assignment exists.
    """
    targets = list(fids)
    if isinstance(bins, int):
        if bins < 1:
            raise InsufficientBins("need at least one bin")
        if len(targets) > bins:
            raise InsufficientBins(f"{len(targets)} targets need at least {len(targets)} bins")
        # random overlaps sometimes admit no distinct assignment; draw again
        for _ in range(RESAMPLE_LIMIT):
            members: list[list[int]] = [[0] for _ in range(bins)]
            for fid in range(1, delta + 1):
                for b in rng.sample(range(bins), min(overlap, bins)):
                    members[b].append(fid)
            members = [rng.shuffle(m) for m in members]
            try:
                return members, _assign(targets, members, rng)
            except InsufficientBins:
                continue
        raise InsufficientBins(f"no bin layout fits {len(targets)} targets")
    members = [list(m) for m in bins]
    if len(targets) > len(members):
        raise InsufficientBins(f"{len(targets)} targets need at least {len(targets)} bins")
    return members, _assign(targets, members, rng)


def _assign(targets: list[int], members: list[list[int]], rng: FieldRng) -> list[int]:
    holder: dict[int, int] = {}

    def place(fid: int, seen: set[int]) -> bool:
        # augmenting path over bins containing fid, tried in random order
        for b in rng.shuffle([b for b, m in enumerate(members) if fid in m]):
            if b in seen:
                continue
            seen.add(b)
            if b not in holder or place(holder[b], seen):
                holder[b] = fid
                return True
        return False

    for fid in rng.shuffle(targets):
        if not place(fid, set()):
            raise InsufficientBins(f"no free bin holds file {fid}")
    choice = []
    for b, m in enumerate(members):
        want = holder.get(b, 0)
        if want not in m:
            raise InsufficientBins(f"bin {b} has neither a target nor the dummy")
        choice.append(m.index(want))
    return choice


# results


@dataclass
class QueryResult:
    keyword: str
    column: int
    file_ids: list[int]
    delivered: dict[int, list[str]] = field(default_factory=dict)
    restricted: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "keyword": self.keyword,
            "files": [
                {"id": fid, "status": "delivered", "text": " ".join(self.delivered[fid])}
                if fid in self.delivered else {"id": fid, "status": "restricted"}
                for fid in self.file_ids
            ],
            "delivered": sorted(self.delivered),
            "restricted": sorted(self.restricted),
        }


def raise_if_abort(replies: dict[int, Frame]) -> None:
    for frame in replies.values():
        if frame.msg_type == MsgType.ABORT:
            info = json.loads(frame.text or "{}")
            if info.get("kind") == "UnknownClient":
                raise UnknownClient(info.get("reason", ""))
            cls = _ABORTS.get(info.get("kind"), ProtocolAbort)
            raise cls(info.get("test", "?"), info.get("reason", ""))


def _expect_type(replies: dict[int, Frame], msg_type: MsgType) -> None:
    raise_if_abort(replies)
    for z, frame in replies.items():
        if frame.msg_type != msg_type:
            raise ServerMisbehavior(0, f"server {z} replied {frame.msg_type.name}, expected {msg_type.name}")


class _Session:
    """Shared plumbing: session id, share fan-out and opening."""

    def __init__(self, servers, rng: FieldRng | None, verify: bool):
        self.servers = servers
        self.rng = rng or FieldRng()
        self.verify = verify
        self.points = tuple(servers.points)
        self.session_id = b""
        self.params: DeployParams | None = None

    @property
    def field(self) -> Field:
        return self.params.field

    def _hello(self, info: dict) -> DeployParams:
        self.session_id = self.rng.bytes(16)
        frame = Frame(MsgType.HELLO, self.session_id, text=json.dumps(info))
        replies = self.servers.request({z: frame for z in self.points})
        _expect_type(replies, MsgType.HELLO)
        texts = {frame.text for frame in replies.values()}
        if len(texts) != 1:
            raise ServerMisbehavior(0, "servers disagree on public parameters")
        self.params = DeployParams.from_dict(json.loads(texts.pop()))
        return self.params

    def _send(self, msg_type: MsgType, per_server: dict[int, list[np.ndarray]], text: str = "") -> dict[int, Frame]:
        frames = {z: Frame(msg_type, self.session_id, per_server[z], text) for z in self.points}
        return self.servers.request(frames)

    def _share_all(self, vectors: list[np.ndarray]) -> dict[int, list[np.ndarray]]:
        """Share a batch of vectors at once; one fresh polynomial per element."""
        if not vectors:
            return {z: [] for z in self.points}
        lengths = [np.size(v) for v in vectors]
        flat = np.concatenate([np.ravel(v) for v in vectors])
        shares = share_vector(flat, self.field, self.rng, self.points)
        cuts = np.cumsum(lengths)[:-1]
        return {z: np.split(shares[z], cuts) for z in self.points}

    def _open(self, replies: dict[int, Frame], degree: int, phase: int) -> list[np.ndarray]:
        """Open every vector of the replies; verify mode cross-checks all four servers."""
        f = self.field
        counts = {len(frame.vectors) for frame in replies.values()}
        if len(counts) != 1:
            raise ServerMisbehavior(phase, "servers returned different numbers of vectors")
        count = counts.pop()
        if count == 0:
            return []
        sizes = [np.size(replies[self.points[0]].vectors[k]) for k in range(count)]
        shares = {}
        for z in self.points:
            vecs = replies[z].vectors
            if [np.size(v) for v in vecs] != sizes:
                raise ServerMisbehavior(phase, "servers returned vectors of different lengths")
            shares[z] = np.concatenate([np.asarray(v, dtype=np.int64).ravel() for v in vecs])
        if self.verify:
            value, ok = consistent_open(shares, degree, f)
            if not ok:
                raise ServerMisbehavior(phase, f"phase {phase} answers are inconsistent across servers")
        else:
            value = open_array({z: shares[z] for z in self.points[:degree + 1]}, f)
        return np.split(value, np.cumsum(sizes)[:-1])

    def close(self) -> None:
        frame = Frame(MsgType.ACK, self.session_id)
        self.servers.request({z: frame for z in self.points})


class Client(_Session):
    """A searching client.

    Args:
        client_id: the identity the capability row is looked up by.
        servers: a server group (loopback cluster or TCP group).
        verify: cross-check all four servers and every digest.
        fake_continue: when Phase 1 finds nothing, run Phases 2-3 against the
            always-allowed fake column so the transcript looks like a hit.
        bins: fetch Phase 3 files through this many overlapped bins (must be γ).
    """

    def __init__(self, client_id: str, servers, *, verify: bool = False, fake_continue: bool = False,
                 rng: FieldRng | None = None, bins: int | None = None):
        super().__init__(servers, rng, verify)
        self.client_id = client_id
        self.fake_continue = fake_continue
        self.bins = bins

    def _encode(self, keyword: str, params: DeployParams) -> int:
        try:
            return keyword_encoding(keyword, params)
        except (EncodingOverflow, UnsupportedCharacter):
            # cannot be stored; send a random value so the transcript is unchanged
            return self.rng.element(params.field, nonzero=True)

    def run_query(self, keyword: str) -> QueryResult:
        """Run all three phases for ``keyword``.

        Raises:
            NoAccessOrAbsent: Phase 1 found no allowed column for the keyword.
            ProtocolAbort: a server check failed; ``.test`` names it.
            ServerMisbehavior: verify mode caught inconsistent answers.
        """
        params = self._hello({"client": self.client_id})
        f = params.field
        uw = self._encode(keyword, params)

        # phase 1: find the column whose answer opens to zero
        shares = share_vector(np.array([uw]), f, self.rng, self.points)
        replies = self._send(MsgType.P1_QUERY, {z: [shares[z]] for z in self.points})
        _expect_type(replies, MsgType.P1_ANS)
        (answer,) = self._open(replies, 2, 1)
        zeros = np.flatnonzero(answer == 0)
        if zeros.size:
            column, label, found = int(zeros[0]), uw, True
        elif self.fake_continue:
            column, label, found = params.fake_allowed, 0, False
        else:
            self.close()
            raise NoAccessOrAbsent(f"no accessible column for {keyword!r}")

        # phase 2: file ids of the column
        fids, window = self._phase2(params, column, label)

        # phase 3: fetch γ records, real targets first
        result = QueryResult(keyword, column, fids)
        self._phase3(params, fids, window, result)
        if not found:
            raise NoAccessOrAbsent(f"no accessible column for {keyword!r}")
        return result

    def _phase2(self, params: DeployParams, column: int, label: int) -> tuple[list[int], dict[int, int]]:
        f = params.field
        shares = self._share_all([build_onehot(params.columns, column)])
        replies = self._send(MsgType.P2_VECTOR, shares)
        if params.layout == "padded":
            _expect_type(replies, MsgType.P2_ANS)
            (row,) = self._open(replies, 2, 2)
            slots = params.slots
            count = int(row[slots]) - 1
            if not 0 <= count <= slots:
                raise ServerMisbehavior(2, "row marker out of range")
            fids = [int(v) for v in row[:count]]
            if self.verify and hash_chain(fids, label, f) != int(row[slots + 1]):
                raise ServerMisbehavior(2, "file ids do not match the row digest")
            return fids, {fid: j for j, fid in enumerate(fids)}
        _expect_type(replies, MsgType.ADDR_ANS)
        (entry,) = self._open(replies, 2, 2)
        sip, cut, hd = (int(v) for v in entry)
        if H(sip, cut, label, field=f) != hd:
            raise ServerMisbehavior(2, "address entry digest mismatch")
        try:
            plan = optinv_fetch_plan(sip, cut, params.x, params.y)
        except BadAddress as exc:
            raise ServerMisbehavior(2, str(exc)) from exc
        vectors = [v for pair in plan for v in pair]
        replies = self._send(MsgType.OPTINV_VECTORS, self._share_all(vectors))
        _expect_type(replies, MsgType.OPTINV_ANS)
        first, second = self._open(replies, 2, 2)
        joined = np.concatenate([first, second])
        where = span_window_positions(sip, cut, params.y)
        span = [int(joined[j]) for j in where]
        fids = span[:-1]
        if self.verify and hash_chain(fids, label, f) != span[-1]:
            raise ServerMisbehavior(2, "file ids do not match the span digest")
        return fids, {fid: j for fid, j in zip(fids, where)}

    def _phase3(self, params: DeployParams, fids: list[int], window: dict[int, int], result: QueryResult) -> None:
        f = params.field
        gamma, records = params.gamma, params.records
        width = window_size(params)
        if len(fids) > gamma or any(not 0 < fid <= params.delta for fid in fids):
            raise ServerMisbehavior(2, "file ids outside the public bounds")
        text = ""
        if self.bins:
            members, choice = plan_multi_fetch(fids, params.delta, gamma, gamma, self.rng)
            selectors = [build_onehot(len(m), c) for m, c in zip(members, choice)]
            targets = [m[c] for m, c in zip(members, choice)]
            text = json.dumps({"bins": members})
        else:
            targets = fids + [0] * (gamma - len(fids))
            selectors = [build_onehot(records, fid) for fid in targets]
        ids = [build_onehot(width, window[fid] if fid else width - 1) for fid in targets]
        replies = self._send(MsgType.P3_VECTOR, self._share_all(selectors + ids), text)
        if params.ap_mode == "reduced":
            _expect_type(replies, MsgType.P3_POSITIONS)
            positions = self._open(replies, 2, 3)
            kpvs = [build_kpv(pos, params.columns) for pos in positions]
            replies = self._send(MsgType.P3_KPV, self._share_all(kpvs))
        _expect_type(replies, MsgType.P3_FILE)
        rows = self._open(replies, 2, 3)
        for fid, row in zip(targets, rows):
            if not fid:
                continue
            elements = [int(v) for v in row[:-1]]
            if content_digest(elements, fid, f) == int(row[-1]):
                try:
                    result.delivered[fid] = decode_content(elements, f)
                    continue
                except ValueError:
                    pass
            result.restricted.append(fid)


class Owner(_Session):
    """The data owner's administrative session.

    ``seed`` is the secret behind non-access values; the owner needs it for
    grants, revocations and new keywords.
    """

    def __init__(self, servers, seed: bytes, rng: FieldRng | None = None):
        super().__init__(servers, rng, verify=True)
        self.seed = seed
        self._hello({"role": "owner"})

    def locate(self, keyword: str) -> int | None:
        """Column of ``keyword``, found with an unrandomized Phase 1 scan."""
        params = self.params
        try:
            enc = keyword_encoding(keyword, params)
        except (EncodingOverflow, UnsupportedCharacter):
            return None
        shares = share_vector(np.array([enc]), self.field, self.rng, self.points)
        replies = self._send(MsgType.OWNER_SCAN, {z: [shares[z]] for z in self.points})
        _expect_type(replies, MsgType.OWNER_ANS)
        (diff,) = self._open(replies, 1, 1)
        hits = [c for c in np.flatnonzero(diff == 0) if c not in (params.fake_allowed, params.fake_denied)]
        return int(hits[0]) if hits else None

    def read(self, table: str, index: int | None = None, axis: int = 0) -> np.ndarray:
        """Open a whole table, or one row (``axis=0``) / column (``axis=1``) of it obliviously."""
        text = json.dumps({"table": table, "axis": axis})
        if index is None:
            frame = Frame(MsgType.OWNER_READ, self.session_id, text=text)
            replies = self.servers.request({z: frame for z in self.points})
            _expect_type(replies, MsgType.OWNER_ANS)
            (flat,) = self._open(replies, 1, 0)
            return flat.reshape(json.loads(replies[self.points[0]].text))
        length = self._table_dim(table, axis)
        shares = self._share_all([build_onehot(length, index)])
        replies = self._send(MsgType.OWNER_READ, shares, text)
        _expect_type(replies, MsgType.OWNER_ANS)
        (out,) = self._open(replies, 2, 0)
        return out

    def _table_dim(self, table: str, axis: int) -> int:
        p = self.params
        dims = {
            "caps": (p.alpha, p.columns),
            "index": (p.columns, p.slots + 2),
            "addr": (p.columns, 4),
            "ap": (p.records, p.ap_width + 1),
            "content": (p.records, p.eta + 1),
        }
        return dims[table][axis]

    def push(self, update: Update) -> None:
        """Share ``update`` and deliver one share to each server."""
        per_server = share_update(update, self.rng, self.points)
        frames = {z: encode_update(per_server[z], self.session_id) for z in self.points}
        replies = self.servers.request(frames)
        _expect_type(replies, MsgType.ACK)
        self.params = update.params.copy()

    def _column(self, keyword: str) -> int:
        column = self.locate(keyword)
        if column is None:
            raise DocStarError(f"keyword {keyword!r} is not in the store")
        return column

    def grant(self, client_id: str, keyword: str) -> None:
        column = self._column(keyword)
        current = int(self.read("caps", column, axis=1)[self.params.client_row(client_id)])
        if current == 0:
            return
        self.push(make_update("grant", self.params, seed=self.seed, client_id=client_id, keyword=keyword, column=column))

    def revoke(self, client_id: str, keyword: str) -> None:
        column = self._column(keyword)
        current = int(self.read("caps", column, axis=1)[self.params.client_row(client_id)])
        if current != 0:
            return
        self.push(make_update("revoke", self.params, seed=self.seed, client_id=client_id, keyword=keyword, column=column))

    def add_keyword(self, keyword: str, allowed: set[str]) -> int:
        from .errors import DuplicateKeyword

        if self.locate(keyword) is not None:
            raise DuplicateKeyword(keyword)
        column = self.params.columns
        self.push(make_update("add_keyword", self.params, seed=self.seed, keyword=keyword, allowed=set(allowed)))
        return column

    def delete_keyword(self, keyword: str, fast: bool = False) -> None:
        column = self._column(keyword)
        current = self.read("caps", column, axis=1)
        self.push(make_update("delete_keyword", self.params, seed=self.seed, keyword=keyword,
                              column=column, current=current, fast=fast))

    def add_file(self, file_id: int, text: str | list[str]) -> list[str]:
        """Store a new file and link it under every stored keyword it contains."""
        words = tokenize(text) if isinstance(text, str) else list(text)
        linked = {}
        for word in dict.fromkeys(words):
            column = self.locate(word)
            if column is not None:
                linked[word] = column
        positions = sorted(c + 1 for c in linked.values())
        self.push(make_update("add_file", self.params, file_id=file_id, words=words, positions=positions))
        for word, column in linked.items():
            self.add_fid(word, column, file_id)
        return list(linked)

    def add_fid(self, keyword: str, column: int, file_id: int) -> None:
        params = self.params
        enc = keyword_encoding(keyword, params)
        if params.layout == "padded":
            row = self.read("index", column)
            update = make_update("add_fid", params, column=column, file_id=file_id, row=row, encoding=enc)
        else:
            update = make_update("add_fid", params, column=column, file_id=file_id,
                                 addr=self.read("addr"), optinv=self.read("optinv"),
                                 encodings=self.read("keywords"))
        self.push(update)

    def delete_fid(self, keyword: str, file_id: int, fast: bool = False) -> None:
        self._delete_fid_at(self._column(keyword), keyword_encoding(keyword, self.params), file_id, fast)

    def _delete_fid_at(self, column: int, enc: int, file_id: int, fast: bool) -> None:
        params = self.params
        if params.layout == "padded":
            update = make_update("delete_fid", params, column=column, file_id=file_id,
                                 row=self.read("index", column), encoding=enc, fast=fast)
        else:
            update = make_update("delete_fid", params, column=column, file_id=file_id,
                                 addr=self.read("addr"), optinv=self.read("optinv"), encoding=enc, fast=fast)
        self.push(update)

    def file_columns(self, file_id: int) -> list[int]:
        """Keyword columns recorded in the file's AP list."""
        params = self.params
        if not 0 < file_id <= params.delta:
            raise DocStarError(f"file {file_id} is not in the store")
        row = self.read("ap", file_id)[:-1]
        if params.ap_mode == "full":
            return [int(c) for c in np.flatnonzero(row)]
        return sorted(int(pos) - 1 for pos in row if pos)

    def delete_file(self, file_id: int, fast: bool = False) -> list[int]:
        """Unlink ``file_id`` from every keyword it was indexed under; returns those columns."""
        columns = self.file_columns(file_id)
        encodings = self.read("keywords")
        for column in columns:
            postings = self._postings_at(column)
            if file_id in postings:
                self._delete_fid_at(column, int(encodings[column]), file_id, fast)
        return columns

    def _postings_at(self, column: int) -> list[int]:
        if self.params.layout == "padded":
            row = self.read("index", column)
            return [int(v) for v in row[:int(row[self.params.slots]) - 1]]
        return span_contents(self.read("addr"), self.read("optinv"))[column]

    def postings(self, keyword: str) -> list[int]:
        """Current file ids under ``keyword`` (owner audit helper)."""
        return self._postings_at(self._column(keyword))