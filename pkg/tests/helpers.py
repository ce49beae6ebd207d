"""Shared builders for the test suite."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from docstar.datamodel import AccessState, Corpus, build_structures, share_structures
from docstar.field import EVAL_POINTS, Field, FieldRng
from docstar.server import ServerNode
from docstar.transport.loopback import LocalCluster, TrafficMeter, run_lockstep

EXAMPLE_P = 500009
EXAMPLE_FIELD = Field(EXAMPLE_P)
OWNER_SEED = b"test-owner-seed"


def table1_corpus() -> Corpus:
    """Three files, keywords are/ana/fig, Lisa may search only "are", Ava the other two."""
    return Corpus(
        files=[(1, "how are you".split()), (2, "are you ana".split()), (3, "fig is a fruit".split())],
        clients=[("Lisa", {"are"}), ("Ava", {"ana", "fig"})],
        keywords=["are", "ana", "fig"],
    )


def optimized_fixture_corpus():
    # "ana" in two files, as the AddrList example assumes
    return Corpus(
        files=[(1, "how are you".split()), (2, "are you ana".split()), (3, "fig is a fruit ana".split())],
        clients=[("Lisa", {"are"}), ("Ava", {"ana", "fig"})],
        keywords=["are", "ana", "fig"],
    )


def make_nodes(corpus: Corpus, layout: str = "padded", *, seed: int = 0, reserve=0,
               plain_test1: bool = False, fake_continue: bool = False, adversaries=None,
               **build_kw) -> list[ServerNode]:
    tables = build_structures(corpus, layout, reserve, seed=OWNER_SEED, **build_kw)
    bundles = share_structures(tables, FieldRng(seed))
    adversaries = adversaries or {}
    return [
        ServerNode(b, rng=FieldRng(seed * 10 + b.server_index), plain_test1=plain_test1,
                   fake_continue=fake_continue, adversary=adversaries.get(b.server_index))
        for b in bundles
    ]


def make_cluster(corpus: Corpus, layout: str = "padded", *, record: bool = False, **kw) -> LocalCluster:
    return LocalCluster(make_nodes(corpus, layout, **kw), TrafficMeter(record=record))


def oracle(corpus: Corpus) -> AccessState:
    return AccessState.from_corpus(corpus)


@dataclass
class Party:
    """Minimal protocol participant for driving mpc steps directly."""

    index: int
    field: Field
    rng: FieldRng
    points: tuple[int, ...] = EVAL_POINTS
    tamper_fn: object = None
    sent: list = dc_field(default_factory=list)

    def tamper(self, msg_type, dest, vectors):
        self.sent.append((msg_type, dest, [np.array(v) for v in vectors]))
        if self.tamper_fn is not None:
            return self.tamper_fn(self, msg_type, dest, vectors)
        return vectors


def parties(f: Field, seed: int = 0, points=EVAL_POINTS, tamper=None) -> dict[int, Party]:
    tamper = tamper or {}
    return {z: Party(z, f, FieldRng(seed * 100 + z), tuple(points), tamper.get(z)) for z in points}


def run_all(steps: dict) -> dict:
    """Run one generator per party to completion; values or raised exceptions."""
    return run_lockstep(steps)


class OracleStore:
    """Cleartext bookkeeping that mirrors owner operations onto an access state."""

    def __init__(self, corpus: Corpus):
        self.state = AccessState.from_corpus(corpus)

    def grant(self, client: str, keyword: str) -> None:
        self.state.access[client].add(keyword)

    def revoke(self, client: str, keyword: str) -> None:
        self.state.access[client].discard(keyword)

    def add_keyword(self, keyword: str, allowed) -> None:
        s = self.state
        s.keywords.append(keyword)
        s.postings[keyword] = []
        for cid in allowed:
            s.access[cid].add(keyword)

    def delete_keyword(self, keyword: str) -> None:
        for allowed in self.state.access.values():
            allowed.discard(keyword)

    def add_file(self, file_id: int, words: list[str]) -> None:
        s = self.state
        present = {k for k in s.keywords if k in set(words)}
        s.file_keywords[file_id] = present
        s.contents[file_id] = list(words)
        for k in present:
            s.postings[k].append(file_id)

    def delete_fid(self, keyword: str, file_id: int) -> None:
        self.state.postings[keyword].remove(file_id)

    def delete_file(self, file_id: int) -> None:
        for k in self.state.file_keywords.get(file_id, ()):
            if file_id in self.state.postings[k]:
                self.state.postings[k].remove(file_id)

    def query(self, client: str, keyword: str):
        return self.state.query(client, keyword)


# hand-driven sessions, for feeding servers vectors an honest client never sends


def start_session(cluster, client_id: str, seed: int = 0):
    from docstar.client import Client

    c = Client(client_id, cluster, rng=FieldRng(seed), verify=True)
    c._hello({"client": client_id})
    return c


def send_vectors(c, msg_type, vectors, text: str = ""):
    return c._send(msg_type, c._share_all([np.asarray(v) for v in vectors]), text)


def rejected_by(replies) -> str | None:
    """Name of the test behind an ABORT reply, or None."""
    import json

    from docstar.transport.frames import MsgType

    for frame in replies.values():
        if frame.msg_type == MsgType.ABORT:
            return json.loads(frame.text)["test"]
    return None


def run_phase1(c, keyword: str) -> int | None:
    from docstar.datamodel.build import keyword_encoding
    from docstar.transport.frames import MsgType

    uw = keyword_encoding(keyword, c.params)
    replies = send_vectors(c, MsgType.P1_QUERY, [np.array([uw])])
    (answer,) = c._open(replies, 2, 1)
    zeros = np.flatnonzero(answer == 0)
    return int(zeros[0]) if zeros.size else None


def run_to_phase3(c, keyword: str):
    """Honest Phases 1-2; returns (column, file ids, window positions)."""
    from docstar.datamodel.build import keyword_encoding

    column = run_phase1(c, keyword)
    fids, window = c._phase2(c.params, column, keyword_encoding(keyword, c.params))
    return column, fids, window
