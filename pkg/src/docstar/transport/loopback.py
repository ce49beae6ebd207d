"""In-process transport: four server nodes driven in lock-step.

Every node's handler runs as a generator; each round the driver collects the
frames all nodes want to send, delivers them FIFO to the recipients and
resumes everyone. A node waiting on a peer that has stopped is resumed with
:class:`PeerTimeout`, which is how a one-sided abort surfaces here.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from ..errors import PeerTimeout
from .frames import Frame, MsgType, frame_size

PHASE_OF = {
    MsgType.HELLO: "setup",
    MsgType.P1_QUERY: "phase1",
    MsgType.P2_VECTOR: "phase2",
    MsgType.OPTINV_VECTORS: "phase2",
    MsgType.P3_VECTOR: "phase3",
    MsgType.P3_KPV: "phase3",
    MsgType.UPDATE: "admin",
    MsgType.OWNER_SCAN: "admin",
    MsgType.OWNER_READ: "admin",
    MsgType.ACK: "admin",
}
# randomness generation is precomputation, whichever request triggers it
POOL_TYPES = frozenset({MsgType.RN_CONTRIB, MsgType.RN_CHECK})
PHASES = ("setup", "phase1", "phase2", "phase3", "admin")
DIRECTIONS = ("c2s", "s2c", "s2s")


@dataclass
class TrafficMeter:
    """Counts frames, field elements and bytes per phase and direction.

    ``rounds[phase]`` counts client round trips. With ``record`` set, every
    frame is kept as ``(phase, direction, src, dst, frame)`` with 0 standing
    for the client.
    """

    record: bool = False
    elements: dict = field(default_factory=lambda: defaultdict(int))
    bytes: dict = field(default_factory=lambda: defaultdict(int))
    frames: dict = field(default_factory=lambda: defaultdict(int))
    rounds: dict = field(default_factory=lambda: defaultdict(int))
    transcript: list = field(default_factory=list)

    def count(self, phase: str, direction: str, src: int, dst: int, frame: Frame) -> None:
        key = (phase, direction)
        n = frame.elements
        self.elements[key] += n
        self.bytes[key] += frame_size(frame, n)
        self.frames[key] += 1
        if self.record:
            self.transcript.append((phase, direction, src, dst, frame))

    def reset(self) -> None:
        self.elements.clear()
        self.bytes.clear()
        self.frames.clear()
        self.rounds.clear()
        self.transcript.clear()

    def snapshot(self) -> dict:
        """``{phase: {direction_elements, direction_bytes, rounds}}`` for every phase seen."""
        out = {}
        for phase in PHASES:
            row = {}
            for d in DIRECTIONS:
                row[f"{d}_elements"] = self.elements.get((phase, d), 0)
                row[f"{d}_bytes"] = self.bytes.get((phase, d), 0)
            row["rounds"] = self.rounds.get(phase, 0)
            if any(row.values()):
                out[phase] = row
        return out


def run_lockstep(gens: dict, on_message=None) -> dict:
    """Drive protocol generators to completion.

    ``gens`` maps eval points to generators yielding :class:`~docstar.mpc.Round`.
    A message reaches its recipient only when the recipient is in a round of
    the same type, mirroring the typed mailboxes of the TCP transport.
    Returns each generator's return value, or the exception it raised.
    """
    results: dict = {}
    active = dict(gens)
    pending: dict = {z: None for z in active}
    while active:
        rounds = {}
        for z, gen in list(active.items()):
            try:
                sent = pending[z]
                rounds[z] = gen.throw(sent) if isinstance(sent, BaseException) else gen.send(sent)
            except StopIteration as stop:
                results[z] = stop.value
                del active[z]
            except Exception as exc:  # noqa: BLE001 - surfaced to the caller
                results[z] = exc
                del active[z]
        pending = {}
        for z, rnd in rounds.items():
            inbox = {}
            for src, other in rounds.items():
                vecs = other.outgoing.get(z)
                if vecs is not None and other.msg_type == rnd.msg_type:
                    inbox[src] = vecs
            missing = [w for w in rnd.expect if w not in inbox]
            if missing:
                pending[z] = PeerTimeout(f"server {z} got no {rnd.msg_type.name} from {missing}")
            else:
                pending[z] = inbox
        if on_message is not None:
            for src, rnd in rounds.items():
                for dest, vecs in rnd.outgoing.items():
                    on_message(src, dest, rnd.msg_type, vecs)
    return results


class LocalCluster:
    """Four :class:`~docstar.server.ServerNode` objects behind one request call."""

    def __init__(self, nodes, meter: TrafficMeter | None = None):
        self.nodes = {node.index: node for node in nodes}
        self.meter = meter or TrafficMeter()

    @property
    def points(self) -> tuple[int, ...]:
        return tuple(sorted(self.nodes))

    @property
    def params(self):
        return self.nodes[self.points[0]].params

    def request(self, frames: dict[int, Frame]) -> dict[int, Frame]:
        """Deliver one request frame per server and return their replies."""
        msg_type = next(iter(frames.values())).msg_type
        phase = PHASE_OF.get(msg_type, "admin")
        meter = self.meter
        for z, frame in frames.items():
            meter.count(phase, "c2s", 0, z, frame)
        gens = {z: self.nodes[z].handle(frame) for z, frame in frames.items()}
        session = next(iter(frames.values())).session_id

        def on_message(src, dest, t, vecs):
            meter.count("setup" if t in POOL_TYPES else phase, "s2s", src, dest, Frame(t, session, list(vecs)))

        results = run_lockstep(gens, on_message)
        replies = {}
        for z in sorted(results):
            value = results[z]
            if isinstance(value, BaseException):
                raise value
            replies[z] = value
            meter.count(phase, "s2c", z, 0, value)
        meter.rounds[phase] += 1
        return replies

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
