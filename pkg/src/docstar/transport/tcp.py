"""TCP transport: one process per server, one connection per (peer, session).

A server accepts two kinds of connections on its single address. Clients
send request frames and read one reply per request. Peers open a connection
per session and announce themselves with a HELLO whose text is
``{"peer": z}``; every later frame on it is filed in a mailbox keyed by
``(session, type, sender)`` where the waiting protocol step picks it up.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from collections import OrderedDict, defaultdict, deque

from ..errors import FramingError, PeerTimeout
from .frames import Frame, MsgType, encode_frame, read_frame
from .loopback import PHASE_OF, TrafficMeter

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
_FINAL = {MsgType.P3_FILE, MsgType.ABORT, MsgType.ACK}


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host, int(port)


class Mailbox:
    """Frames from peers, waited on by ``(session, type, sender)``."""

    def __init__(self, max_aborted: int = 4096):
        self._queues: dict = defaultdict(deque)
        self._aborted: OrderedDict[bytes, int] = OrderedDict()
        self._max_aborted = max_aborted
        self._cond = threading.Condition()

    def put(self, src: int, frame: Frame) -> None:
        with self._cond:
            if frame.msg_type == MsgType.ABORT:
                self._aborted[frame.session_id] = src
                while len(self._aborted) > self._max_aborted:
                    self._aborted.popitem(last=False)
            else:
                self._queues[(frame.session_id, frame.msg_type, src)].append(frame)
            self._cond.notify_all()

    def get(self, session_id: bytes, msg_type: MsgType, src: int, timeout: float) -> Frame:
        key = (session_id, msg_type, src)
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._queues.get(key) or session_id in self._aborted, timeout=timeout
            )
            queue = self._queues.get(key)
            if queue:
                frame = queue.popleft()
                if not queue:
                    del self._queues[key]
                return frame
            if ok and session_id in self._aborted:
                raise PeerTimeout(f"server {self._aborted[session_id]} aborted the session")
            raise PeerTimeout(f"no {msg_type.name} from server {src} within {timeout:.0f} s")

    def drop(self, session_id: bytes) -> None:
        with self._cond:
            for key in [k for k in self._queues if k[0] == session_id]:
                del self._queues[key]


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        host: TcpServer = self.server.host  # type: ignore[attr-defined]
        try:
            first = read_frame(self.rfile)
            if first is None:
                return
            if first.msg_type == MsgType.HELLO and first.text:
                info = json.loads(first.text)
                if isinstance(info, dict) and "peer" in info:
                    self._peer_loop(host, int(info["peer"]))
                    return
            frame = first
            while frame is not None:
                reply = host.serve_request(frame)
                self.wfile.write(encode_frame(reply))
                self.wfile.flush()
                frame = read_frame(self.rfile)
        except (FramingError, ConnectionError, json.JSONDecodeError) as exc:
            log.info("closing connection from %s: %s", self.client_address, exc)

    def _peer_loop(self, host: "TcpServer", src: int) -> None:
        while True:
            frame = read_frame(self.rfile)
            if frame is None:
                return
            host.mailbox.put(src, frame)


class _ThreadingServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class TcpServer:
    """Serve one :class:`~docstar.server.ServerNode` over TCP.

    Args:
        node: the server node.
        address: ``(host, port)`` to listen on; port 0 picks a free port.
        peers: ``{eval point: (host, port)}`` of the other servers.
        timeout: seconds to wait for a peer message before aborting the session.
    """

    def __init__(self, node, address: tuple[str, int], peers: dict[int, tuple[str, int]],
                 timeout: float = DEFAULT_TIMEOUT):
        self.node = node
        self.peers = dict(peers)
        self.timeout = timeout
        self.mailbox = Mailbox()
        self._conns: dict[tuple[int, bytes], socket.socket] = {}
        self._conn_lock = threading.Lock()
        self._server = _ThreadingServer(address, _Handler, bind_and_activate=True)
        self._server.host = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None
        self.on_update = None  # called with the node after each applied update

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "TcpServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        with self._conn_lock:
            for conn in self._conns.values():
                conn.close()
            self._conns.clear()

    # peer links

    def _peer_socket(self, dest: int, session_id: bytes) -> socket.socket:
        key = (dest, session_id)
        with self._conn_lock:
            conn = self._conns.get(key)
            if conn is None:
                if dest not in self.peers:
                    raise PeerTimeout(f"no address for server {dest}")
                try:
                    conn = socket.create_connection(self.peers[dest], timeout=self.timeout)
                except OSError as exc:
                    raise PeerTimeout(f"server {dest} unreachable: {exc}") from exc
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                hello = Frame(MsgType.HELLO, session_id, text=json.dumps({"peer": self.node.index}))
                conn.sendall(encode_frame(hello))
                self._conns[key] = conn
            return conn

    def _peer_send(self, dest: int, frame: Frame) -> None:
        conn = self._peer_socket(dest, frame.session_id)
        try:
            conn.sendall(encode_frame(frame))
        except OSError as exc:
            raise PeerTimeout(f"lost connection to server {dest}: {exc}") from exc

    def _close_session(self, session_id: bytes) -> None:
        with self._conn_lock:
            for key in [k for k in self._conns if k[1] == session_id]:
                self._conns.pop(key).close()
        self.mailbox.drop(session_id)

    # request driver

    def serve_request(self, frame: Frame) -> Frame:
        """Run the node's handler for one request, moving its rounds over the peer links."""
        sid = frame.session_id
        gen = self.node.handle(frame)
        sent: object = None
        while True:
            try:
                rnd = gen.throw(sent) if isinstance(sent, BaseException) else gen.send(sent)
            except StopIteration as stop:
                reply = stop.value
                break
            try:
                for dest, vecs in rnd.outgoing.items():
                    self._peer_send(dest, Frame(rnd.msg_type, sid, list(vecs)))
                inbox = {}
                for src in rnd.expect:
                    inbox[src] = self.mailbox.get(sid, rnd.msg_type, src, self.timeout).vectors
                sent = inbox
            except PeerTimeout as exc:
                sent = exc
        if reply.msg_type == MsgType.ABORT:
            for dest in self.peers:
                try:
                    self._peer_send(dest, Frame(MsgType.ABORT, sid, text=reply.text))
                except PeerTimeout:
                    pass
        if frame.msg_type == MsgType.UPDATE and reply.msg_type == MsgType.ACK and self.on_update:
            self.on_update(self.node)
        if reply.msg_type in _FINAL or frame.msg_type == MsgType.ACK:
            self._close_session(sid)
        return reply


class TcpServerGroup:
    """Client side: one connection to each of the four servers.

    Offers the same ``points`` / ``request`` interface as
    :class:`~docstar.transport.loopback.LocalCluster`. The meter sees client
    traffic only; server-to-server bytes are not visible from here.
    """

    def __init__(self, addresses: dict[int, tuple[str, int]], timeout: float = DEFAULT_TIMEOUT,
                 meter: TrafficMeter | None = None):
        self.addresses = dict(addresses)
        self.timeout = timeout
        self.meter = meter or TrafficMeter()
        self._socks: dict[int, socket.socket] = {}
        self._files: dict = {}

    @property
    def points(self) -> tuple[int, ...]:
        return tuple(sorted(self.addresses))

    def _conn(self, z: int):
        if z not in self._socks:
            try:
                sock = socket.create_connection(self.addresses[z], timeout=self.timeout)
            except OSError as exc:
                raise PeerTimeout(f"server {z} at {self.addresses[z]} unreachable: {exc}") from exc
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._socks[z] = sock
            self._files[z] = sock.makefile("rb")
        return self._socks[z], self._files[z]

    def request(self, frames: dict[int, Frame]) -> dict[int, Frame]:
        msg_type = next(iter(frames.values())).msg_type
        phase = PHASE_OF.get(msg_type, "admin")
        try:
            for z, frame in frames.items():
                sock, _ = self._conn(z)
                self.meter.count(phase, "c2s", 0, z, frame)
                sock.sendall(encode_frame(frame))
            replies = {}
            for z in frames:
                _, stream = self._conn(z)
                reply = read_frame(stream)
                if reply is None:
                    raise PeerTimeout(f"server {z} closed the connection")
                self.meter.count(phase, "s2c", z, 0, reply)
                replies[z] = reply
        except (OSError, socket.timeout) as exc:
            self.close()
            raise PeerTimeout(f"lost contact with a server during {phase}: {exc}") from exc
        self.meter.rounds[phase] += 1
        return replies

    def close(self) -> None:
        for stream in self._files.values():
            stream.close()
        for sock in self._socks.values():
            sock.close()
        self._socks.clear()
        self._files.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
