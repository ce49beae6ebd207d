"""Inter-server sub-protocols written as generators.

Each protocol step runs inside one server and yields :class:`Round` objects
describing the frames it sends to peers and the peers it waits on; the
driver (loopback or TCP) resumes it with the received vectors. Writing the
steps this way lets one code path run four servers in lock-step inside a
test process and one server per process over real sockets.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Generator, Protocol

import numpy as np

from .errors import MaliciousServerDetected, TamperedRandomness
from .field import Field, FieldRng, consistent_open, share_array
from .transport.frames import MsgType

LEADER = 1


@dataclass
class Round:
    msg_type: MsgType
    outgoing: dict[int, list[np.ndarray]]
    expect: tuple[int, ...]


Inbox = dict[int, list[np.ndarray]]
Step = Generator[Round, Inbox, object]


class Party(Protocol):
    index: int
    points: tuple[int, ...]
    field: Field
    rng: FieldRng

    def tamper(self, msg_type: MsgType, dest: int, vectors: list[np.ndarray]) -> list[np.ndarray]: ...


def peers_of(party: Party) -> tuple[int, ...]:
    return tuple(x for x in party.points if x != party.index)


def _send(party: Party, msg_type: MsgType, outgoing: dict[int, list[np.ndarray]], expect) -> Round:
    tampered = {dest: party.tamper(msg_type, dest, vecs) for dest, vecs in outgoing.items()}
    return Round(msg_type, tampered, tuple(expect))


@dataclass
class TestOutcome:
    test_id: str
    local_share: np.ndarray
    interpolated: np.ndarray | None = None


@dataclass
class RnPool:
    """Degree-1 shares of jointly generated randoms plus degree-2 sharings of 0.

    ``m0`` is built from a second, independent batch of randoms ``r'`` as
    ``r'_z · z`` so a Phase 1 answer never shares its multiplier with its
    zero-randomizer.
    """

    pool_id: int
    shares: np.ndarray
    m0: np.ndarray
    cursor: int = 0
    verified: bool = False

    @property
    def remaining(self) -> int:
        return self.shares.size - self.cursor

    @property
    def consumed(self) -> bool:
        return self.cursor >= self.shares.size

    def take(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        if n > self.remaining:
            raise ValueError(f"pool {self.pool_id} has {self.remaining} slots, {n} requested")
        lo, hi = self.cursor, self.cursor + n
        self.cursor = hi
        return self.shares[lo:hi], self.m0[lo:hi]


def open_many(party: Party, items: list[tuple[np.ndarray, int, str]]) -> Step:
    """Exchange several test values in one round and open each.

    ``items`` are ``(local shares, degree, test name)``. With more than
    ``degree + 1`` servers every ``(degree+1)``-subset must interpolate to the
    same value.

    Raises:
        MaliciousServerDetected: some subsets disagree; names the first such test.
    """
    values = [np.asarray(v, dtype=np.int64) for v, _, _ in items]
    peers = peers_of(party)
    inbox = yield _send(party, MsgType.TEST_SHARE, {w: [v.ravel() for v in values] for w in peers}, peers)
    received = {party.index: values}
    for w in peers:
        got = inbox[w]
        if len(got) != len(values):
            raise MaliciousServerDetected(items[0][2], f"server {w} sent a malformed test frame")
        for k, value in enumerate(values):
            if np.size(got[k]) != value.size:
                raise MaliciousServerDetected(items[k][2], f"server {w} sent a malformed test frame")
        received[w] = [np.asarray(g, dtype=np.int64) for g in got]
    opened: list = [None] * len(values)
    for degree in sorted({d for _, d, _ in items}):
        ks = [k for k, (_, d, _) in enumerate(items) if d == degree]
        sizes = [values[k].size for k in ks]
        shares = {z: np.concatenate([np.ravel(vecs[k]) for k in ks]) for z, vecs in received.items()}
        result, ok = consistent_open(shares, degree, party.field)
        if not ok:
            # find the first failing test for the report
            for k in ks:
                _, ok_k = consistent_open({z: np.ravel(v[k]) for z, v in received.items()}, degree, party.field)
                if not ok_k:
                    raise MaliciousServerDetected(items[k][2], f"shares for test {items[k][2]} are inconsistent")
            raise MaliciousServerDetected(items[ks[0]][2], "test shares are inconsistent")
        for k, part in zip(ks, np.split(result, np.cumsum(sizes)[:-1])):
            opened[k] = part.reshape(values[k].shape)
    return opened


def exchange_and_open(party: Party, values: np.ndarray, degree: int, test: str) -> Step:
    """Open a single test value; see :func:`open_many`."""
    (opened,) = yield from open_many(party, [(values, degree, test)])
    return opened


def rn_generate(party: Party, count: int, pool_id: int = 0) -> Step:
    """Every server contributes ``2·count`` private nonzero randoms and shares them.

    The first ``count`` summed shares become the pool's multipliers, the
    second ``count`` its zero-randomizers.
    """
    f = party.field
    own = party.rng.elements(f, 2 * count, nonzero=True)
    shares = share_array(own, f, party.rng, eval_points=party.points)
    peers = peers_of(party)
    inbox = yield _send(party, MsgType.RN_CONTRIB, {w: [shares[w]] for w in peers}, peers)
    total = shares[party.index].copy()
    for w in peers:
        total = f.vadd(total, np.asarray(inbox[w][0], dtype=np.int64))
    rn, base = total[:count], total[count:]
    return RnPool(pool_id, rn, f.vscale(base, party.index))


def rn_multipliers(common_seed: bytes, size: int, f: Field) -> np.ndarray:
    return FieldRng(hashlib.sha256(b"rn-verify" + common_seed).digest()).elements(f, size, nonzero=True)


def rn_verify(party: Party, pool: RnPool, common_seed: bytes) -> Step:
    """Check that the pool is a degree-1 sharing by opening a random combination.

    Every server computes ``a_z = Σ prg_i · shares_z[i]`` over both halves of
    the pool and the four values must lie on one line.

    Raises:
        TamperedRandomness: the combined values are not collinear.
    """
    f = party.field
    combined = np.concatenate([pool.shares, f.vscale(pool.m0, f.inv(party.index))])
    a = f.dot(rn_multipliers(common_seed, combined.size, f), combined)
    local = np.array([a], dtype=np.int64)
    peers = peers_of(party)
    inbox = yield _send(party, MsgType.RN_CHECK, {w: [local] for w in peers}, peers)
    points = {party.index: local}
    for w in peers:
        points[w] = np.asarray(inbox[w][0], dtype=np.int64)
    _, ok = consistent_open(points, 1, f)
    if not ok:
        raise TamperedRandomness("rn_verify", "random-number pool failed verification")
    pool.verified = True
    return pool


def reduce_degree(party: Party, obj: np.ndarray, mask: np.ndarray) -> Step:
    """Turn degree-2 shares into degree-1 shares of the same secrets.

    Each server adds a degree-1 random mask; the leader collects the masked
    shares, opens them (checking consistency when it has spare points),
    re-shares at degree 1, and everyone subtracts the mask again.
    """
    f = party.field
    obj = np.asarray(obj, dtype=np.int64)
    masked = f.vadd(obj.ravel(), np.asarray(mask, dtype=np.int64).ravel())
    others = tuple(x for x in party.points if x != LEADER)
    if party.index == LEADER:
        inbox = yield _send(party, MsgType.DEGRED_MASKED, {}, others)
        points = {LEADER: masked}
        for w in others:
            points[w] = np.asarray(inbox[w][0], dtype=np.int64)
        opened, ok = consistent_open(points, 2, f)
        if not ok:
            raise MaliciousServerDetected("degree_reduction", "masked shares are inconsistent")
        fresh = share_array(opened, f, party.rng, eval_points=party.points)
        yield _send(party, MsgType.DEGRED_RESHARE, {w: [fresh[w]] for w in others}, ())
        mine = fresh[LEADER]
    else:
        yield _send(party, MsgType.DEGRED_MASKED, {LEADER: [masked]}, ())
        inbox = yield _send(party, MsgType.DEGRED_RESHARE, {}, (LEADER,))
        mine = np.asarray(inbox[LEADER][0], dtype=np.int64)
    return f.vsub(mine, np.asarray(mask, dtype=np.int64).ravel()).reshape(obj.shape)


def session_seed(session_id: bytes, pool_id: int) -> bytes:
    """Public per-pool seed for rn_verify, derived from the session handshake."""
    return hashlib.sha256(b"pool" + session_id + pool_id.to_bytes(4, "big")).digest()


@dataclass
class PoolBook:
    """Per-session pool manager: generates, verifies and hands out slots."""

    session_id: bytes
    pools: list[RnPool] = field(default_factory=list)

    def fill(self, party: Party, count: int) -> Step:
        pool_id = len(self.pools)
        pool = yield from rn_generate(party, count, pool_id)
        yield from rn_verify(party, pool, session_seed(self.session_id, pool_id))
        self.pools.append(pool)
        return pool

    def take(self, party: Party, n: int) -> Step:
        """``n`` fresh slots, replenishing with a new verified pool if needed."""
        if not self.pools or self.pools[-1].remaining < n:
            yield from self.fill(party, n)
        return self.pools[-1].take(n)
