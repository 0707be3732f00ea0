"""Rank fabric: all-gather, asynchronous all-to-all, and all-reduce.

Two transports share one protocol. :class:`InProcGroup` runs every rank as
a thread of the current process and connects them with per-pair FIFO
queues. :class:`SocketFabric` connects one process per rank over TCP with
length-prefixed frames::

    <u32 round id> <u32 sender rank> <u64 tag count>
    <u8 channel> <u32 row width> <u64 value count>
    tag_count x u64 tags, value_count x f64 values     (little-endian)

All collectives follow the SPMD contract: every rank calls them in the same
order. Messages are matched by channel and checked by round id.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from minigraph.errors import CommError, ProtocolError

A2A, GATHER, REDUCE, BCAST = range(4)
ERROR_ROUND = 0xFFFFFFFF
DEFAULT_TIMEOUT = 120.0

_HEAD = struct.Struct("<IIQ")
_SUB = struct.Struct("<BIQ")


@dataclass
class Message:
    round_id: int
    sender: int
    tags: np.ndarray
    values: np.ndarray
    dim: int = 0

    @property
    def nbytes(self) -> int:
        return 8 * (len(self.tags) + self.values.size)


@dataclass
class CommHandle:
    round_id: int
    dim: int
    peers: list
    waited: bool = False
    issued_at: float = field(default_factory=time.perf_counter)


class Fabric:
    """Collective operations on top of ``_send``/``_recv`` point-to-point."""

    def __init__(self, rank: int, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout
        self.bytes_sent = 0
        self.outstanding = 0
        self.max_outstanding = 0
        self._a2a_round = 0
        self._coll_round = 0

    def _send(self, dst: int, channel: int, msg: Message):
        raise NotImplementedError

    def _recv(self, src: int, channel: int) -> Message:
        raise NotImplementedError

    def close(self):
        pass

    @property
    def peers(self) -> list:
        return [r for r in range(self.world_size) if r != self.rank]

    # -- all-gather (used for the initial halo-list exchange)

    def bcast_allgather(self, payload) -> list:
        """Every rank's integer list, indexed by rank."""
        rid = self._coll_round
        self._coll_round += 1
        own = np.asarray(payload, dtype=np.int64).copy()
        for p in self.peers:
            self._send(p, GATHER, Message(rid, self.rank, own, np.zeros(0)))
        out = [None] * self.world_size
        out[self.rank] = own
        for p in self.peers:
            msg = self._recv(p, GATHER)
            self._check_round(msg, rid, "all-gather")
            out[p] = msg.tags
        return out

    # -- asynchronous all-to-all

    def alltoall_async(self, payloads: dict, dim: int, round_id: int | None = None) -> CommHandle:
        """Send ``payloads[peer] = (tags, rows)`` to each peer and return at once.

        Peers missing from ``payloads`` receive an empty message, so every
        rank always matches every other rank's round.
        """
        if round_id is None:
            round_id = self._a2a_round
        self._a2a_round = round_id + 1
        for p in self.peers:
            tags, rows = payloads.get(p, (np.zeros(0, np.int64), np.zeros((0, dim))))
            tags = np.asarray(tags, dtype=np.int64)
            rows = np.asarray(rows, dtype=np.float64).reshape(len(tags), dim)
            msg = Message(round_id, self.rank, tags.copy(), rows.copy(), dim)
            self.bytes_sent += msg.nbytes
            self._send(p, A2A, msg)
        self.outstanding += 1
        self.max_outstanding = max(self.max_outstanding, self.outstanding)
        return CommHandle(round_id, dim, self.peers)

    def comm_wait(self, handle: CommHandle):
        """Block until every peer's payload for ``handle``'s round is in.

        Returns ``(tags, rows)`` concatenated by ascending sender rank.
        """
        if handle.waited:
            raise ProtocolError(f"round {handle.round_id} was already waited on")
        handle.waited = True
        tags, rows = [np.zeros(0, np.int64)], [np.zeros((0, handle.dim))]
        for p in handle.peers:
            msg = self._recv(p, A2A)
            self._check_round(msg, handle.round_id, "all-to-all")
            if msg.dim != handle.dim and len(msg.tags):
                raise ProtocolError(f"rank {p} sent width {msg.dim}, expected {handle.dim}")
            tags.append(msg.tags)
            rows.append(msg.values.reshape(len(msg.tags), handle.dim))
        self.outstanding -= 1
        return np.concatenate(tags), np.concatenate(rows)

    # -- all-reduce

    def allreduce_sum(self, vec) -> np.ndarray:
        """Elementwise sum over ranks, reduced on rank 0 in ascending rank order."""
        rid = self._coll_round
        self._coll_round += 1
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if self.world_size == 1:
            return vec.copy()
        if self.rank != 0:
            self._send(0, REDUCE, Message(rid, self.rank, np.zeros(0, np.int64), vec.copy()))
            msg = self._recv(0, BCAST)
            if msg.round_id == ERROR_ROUND:
                raise ProtocolError("all-reduce length mismatch across ranks")
            self._check_round(msg, rid, "all-reduce")
            return msg.values
        acc = vec.copy()
        bad = False
        for p in self.peers:
            msg = self._recv(p, REDUCE)
            self._check_round(msg, rid, "all-reduce")
            if msg.values.shape != acc.shape:
                bad = True
                continue
            acc = acc + msg.values
        reply_id = ERROR_ROUND if bad else rid
        for p in self.peers:
            self._send(p, BCAST, Message(reply_id, 0, np.zeros(0, np.int64), acc.copy()))
        if bad:
            raise ProtocolError("all-reduce length mismatch across ranks")
        return acc

    @staticmethod
    def _check_round(msg, expected, what):
        if msg.round_id != expected:
            raise ProtocolError(
                f"{what}: rank {msg.sender} is at round {msg.round_id}, expected {expected}"
            )


# -- in-process transport -------------------------------------------------------


class InProcGroup:
    """Shared queues for ``world_size`` in-process ranks."""

    def __init__(self, world_size: int, timeout: float = DEFAULT_TIMEOUT, maxsize: int = 256):
        self.world_size = world_size
        self.timeout = timeout
        self.abort = threading.Event()
        self.queues = {
            (s, d, c): queue.Queue(maxsize=maxsize)
            for s in range(world_size) for d in range(world_size) for c in range(4)
            if s != d
        }

    def fabric(self, rank: int) -> "InProcFabric":
        return InProcFabric(self, rank)

    def run(self, fn, *args):
        """Run ``fn(fabric, rank, *args)`` on one thread per rank; return results by rank."""
        results = [None] * self.world_size
        errors = []

        def body(r):
            try:
                results[r] = fn(self.fabric(r), r, *args)
            except BaseException as exc:  # noqa: BLE001 - re-raised below
                errors.append((r, exc))
                self.abort.set()

        if self.world_size == 1:
            body(0)
        else:
            threads = [threading.Thread(target=body, args=(r,), name=f"rank{r}") for r in range(self.world_size)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        if errors:
            errors.sort(key=lambda e: isinstance(e[1], CommError))
            raise errors[0][1]
        return results


class InProcFabric(Fabric):
    def __init__(self, group: InProcGroup, rank: int):
        super().__init__(rank, group.world_size, group.timeout)
        self.group = group

    def _send(self, dst, channel, msg):
        try:
            self.group.queues[(self.rank, dst, channel)].put(msg, timeout=self.timeout)
        except queue.Full:
            raise CommError(f"rank {self.rank}: queue to rank {dst} is full") from None

    def _recv(self, src, channel):
        q = self.group.queues[(src, self.rank, channel)]
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                return q.get(timeout=0.05)
            except queue.Empty:
                if self.group.abort.is_set():
                    raise CommError(f"rank {self.rank}: peer failure, aborting") from None
                if time.monotonic() > deadline:
                    raise CommError(f"rank {self.rank}: timed out waiting for rank {src}") from None


# -- socket transport -------------------------------------------------------------


def encode_frame(channel: int, msg: Message) -> bytes:
    tags = np.asarray(msg.tags, dtype="<u8")
    vals = np.asarray(msg.values, dtype="<f8").ravel()
    return b"".join([
        _HEAD.pack(msg.round_id, msg.sender, len(tags)),
        _SUB.pack(channel, msg.dim, len(vals)),
        tags.tobytes(),
        vals.tobytes(),
    ])


def _read_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EOFError("connection closed")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock):
    """Read one frame; returns ``(channel, Message)``."""
    round_id, sender, ntags = _HEAD.unpack(_read_exact(sock, _HEAD.size))
    channel, dim, nvals = _SUB.unpack(_read_exact(sock, _SUB.size))
    tags = np.frombuffer(_read_exact(sock, 8 * ntags), dtype="<u8").astype(np.int64)
    vals = np.frombuffer(_read_exact(sock, 8 * nvals), dtype="<f8").astype(np.float64)
    if channel == A2A:
        vals = vals.reshape(ntags, dim)
    return channel, Message(round_id, sender, tags, vals, dim)


class SocketFabric(Fabric):
    """One TCP listener per rank at ``base_port + rank``; full mesh of connections."""

    def __init__(self, rank, world_size, host="127.0.0.1", base_port=29500, timeout=DEFAULT_TIMEOUT):
        super().__init__(rank, world_size, timeout)
        self.host = host
        self.base_port = base_port
        self._inbox = {(s, c): queue.Queue() for s in range(world_size) for c in range(4) if s != rank}
        self._out: dict[int, socket.socket] = {}
        self._locks = {p: threading.Lock() for p in self.peers}
        self._closed = False
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, base_port + rank))
        self._listener.listen(world_size)
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)
        self._acceptor.start()
        self._connect_all()

    def _accept_loop(self):
        for _ in range(self.world_size - 1):
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            (peer,) = struct.unpack("<I", _read_exact(conn, 4))
            threading.Thread(target=self._reader, args=(conn, peer), daemon=True).start()

    def _reader(self, conn, peer):
        try:
            while True:
                channel, msg = read_frame(conn)
                self._inbox[(peer, channel)].put(msg)
        except (EOFError, OSError):
            conn.close()

    def _connect_all(self):
        deadline = time.monotonic() + self.timeout
        for p in self.peers:
            while True:
                try:
                    s = socket.create_connection((self.host, self.base_port + p), timeout=self.timeout)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise CommError(f"rank {self.rank}: cannot reach rank {p}") from None
                    time.sleep(0.05)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s.sendall(struct.pack("<I", self.rank))
            self._out[p] = s

    def _send(self, dst, channel, msg):
        frame = encode_frame(channel, msg)
        with self._locks[dst]:
            self._out[dst].sendall(frame)

    def _recv(self, src, channel):
        try:
            return self._inbox[(src, channel)].get(timeout=self.timeout)
        except queue.Empty:
            raise CommError(f"rank {self.rank}: timed out waiting for rank {src}") from None

    def close(self):
        if self._closed:
            return
        self._closed = True
        for s in self._out.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        self._listener.close()


def free_port_base(world_size: int) -> int:
    """Find ``world_size`` consecutive free localhost ports (best effort)."""
    for _ in range(50):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        base = s.getsockname()[1]
        s.close()
        if base + world_size >= 65535:
            continue
        ok = True
        for r in range(world_size):
            t = socket.socket()
            try:
                t.bind(("127.0.0.1", base + r))
            except OSError:
                ok = False
            finally:
                t.close()
            if ok is False:
                break
        if ok:
            return base
    raise CommError("no free port range found")
