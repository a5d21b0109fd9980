"""Non-blocking point-to-point exchange of interface buffers between ranks.

Two backends share one matching engine: ``InProcessTransport`` (threads in one
process) and ``SocketTransport`` (one OS process per rank over TCP).

Socket wire format, one frame per envelope::

    <Q epoch> <I edge> <B kind> <I sender> <I length>   little-endian, 21 bytes
    length x <f8>                                      payload, little-endian

A data connection opens with a handshake ``<B 1> <I sender rank> <I 0>``;
registration with the rendezvous rank uses ``<B 0> <I rank> <I listen port>``.
"""

from __future__ import annotations

import itertools
import os
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DeadlockError, NonFiniteError, ProtocolError

SOLUTION, FLUX, RESIDUAL = 0, 1, 2
KIND_NAMES = {SOLUTION: "solution", FLUX: "flux", RESIDUAL: "residual"}
METHOD_KINDS = {"pinn": {SOLUTION}, "cpinn": {SOLUTION, FLUX}, "xpinn": {SOLUTION, RESIDUAL}}

HEADER = struct.Struct("<QIBII")
HANDSHAKE = struct.Struct("<BII")
DEFAULT_TIMEOUT = 60.0
RENDEZVOUS_ENV = "DDPINN_RENDEZVOUS"


@dataclass(frozen=True)
class Envelope:
    epoch: int
    edge: int
    kind: int
    sender: int
    receiver: int
    payload: np.ndarray

    @property
    def length(self):
        return int(self.payload.size)

    @property
    def key(self):
        return (self.epoch, self.edge, self.kind, self.sender)


_ids = itertools.count()


@dataclass
class PendingOp:
    direction: str  # "send" or "recv"
    key: tuple = None
    handle: int = field(default_factory=lambda: next(_ids))
    done: bool = False
    buffer: np.ndarray = None

    def _complete(self, buffer=None):
        if self.done:
            raise ProtocolError("operation completed twice", epoch=self.key[0], edge=self.key[1])
        self.buffer = buffer
        self.done = True


def _completed(direction, key=None):
    op = PendingOp(direction, key)
    op._complete(np.zeros(0))
    return op


class Transport:
    """Matching engine. Subclasses implement ``_transmit`` and ``barrier``."""

    def __init__(self, rank, world_size, method="xpinn", timeout=DEFAULT_TIMEOUT):
        self.rank = rank
        self.world_size = world_size
        self.kinds = METHOD_KINDS[method]
        self.timeout = timeout
        self._cv = threading.Condition()
        self._held = {}      # key -> payload that arrived before its irecv
        self._waiting = {}   # key -> PendingOp
        self._seen = set()   # every key ever delivered, for duplicate detection
        self._errors = []
        self.sent = {}       # epoch -> envelopes sent
        self.received = {}   # epoch -> envelopes matched by irecv

    # -- delivery side (may run on another thread)
    def _deliver(self, env: Envelope):
        with self._cv:
            key = env.key
            if env.kind not in self.kinds:
                self._errors.append(ProtocolError(f"unexpected payload kind {KIND_NAMES.get(env.kind, env.kind)}",
                                                  epoch=env.epoch, edge=env.edge, kind=env.kind))
            elif key in self._seen:
                self._errors.append(ProtocolError("duplicate envelope", epoch=env.epoch, edge=env.edge,
                                                  kind=env.kind))
            else:
                self._seen.add(key)
                op = self._waiting.pop(key, None)
                if op is None:
                    self._held[key] = env.payload
                else:
                    op._complete(env.payload)
                    self._count(self.received, env.epoch)
            self._cv.notify_all()

    @staticmethod
    def _count(table, epoch):
        table[epoch] = table.get(epoch, 0) + 1

    # -- worker side
    def isend(self, env: Envelope, neighbor):
        if neighbor is None:
            return _completed("send", env.key)
        if not 0 <= neighbor < self.world_size or neighbor == self.rank:
            raise ProtocolError(f"unknown rank {neighbor}", epoch=env.epoch, edge=env.edge, kind=env.kind)
        payload = np.ascontiguousarray(env.payload, dtype="<f8").ravel()
        bad = np.flatnonzero(~np.isfinite(payload))
        if bad.size:
            raise NonFiniteError(f"non-finite payload on edge {env.edge} at epoch {env.epoch}", int(bad[0]))
        payload = payload.copy()
        payload.flags.writeable = False
        env = Envelope(env.epoch, env.edge, env.kind, self.rank, neighbor, payload)
        self._transmit(env)
        self._count(self.sent, env.epoch)
        return _completed("send", env.key)

    def irecv(self, epoch, edge, kind, neighbor):
        key = (epoch, edge, kind, neighbor)
        if neighbor is None:
            return _completed("recv", key)
        if kind not in self.kinds:
            raise ProtocolError(f"payload kind {KIND_NAMES.get(kind, kind)} not used by this method",
                                epoch=epoch, edge=edge, kind=kind)
        with self._cv:
            if key in self._waiting:
                raise ProtocolError("receive already posted", epoch=epoch, edge=edge, kind=kind)
            op = PendingOp("recv", key)
            if key in self._held:
                op._complete(self._held.pop(key))
                self._count(self.received, epoch)
            else:
                self._waiting[key] = op
            return op

    def wait_all(self, ops, timeout=None):
        timeout = self.timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        with self._cv:
            while True:
                if self._errors:
                    raise self._errors.pop(0)
                open_ops = [op for op in ops if not op.done]
                if not open_ops:
                    return
                left = deadline - time.monotonic()
                if left <= 0:
                    raise DeadlockError([op.key[:3] for op in open_ops], timeout)
                self._cv.wait(left)

    def held_epochs(self):
        with self._cv:
            return sorted({k[0] for k in self._held})

    def _transmit(self, env):
        raise NotImplementedError

    def barrier(self):
        """Block until every rank arrives; returns seconds spent waiting."""
        raise NotImplementedError

    def close(self):
        pass


# ---------------------------------------------------------------- in-process


class _Hub:
    def __init__(self, world_size, jitter, seed):
        self.endpoints = []
        self.barrier = threading.Barrier(world_size)
        self.jitter = jitter
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    def delay(self):
        if not self.jitter:
            return 0.0
        with self._lock:
            return self._rng.uniform(0.0, self.jitter)


class InProcessTransport(Transport):
    """All ranks in one process. ``jitter`` > 0 delays each delivery randomly (fuzzing)."""

    def __init__(self, rank, hub, method, timeout):
        super().__init__(rank, len(hub.endpoints) or hub.barrier.parties, method, timeout)
        self.hub = hub

    def _transmit(self, env):
        target = self.hub.endpoints[env.receiver]
        delay = self.hub.delay()
        if delay > 0:
            t = threading.Timer(delay, target._deliver, args=(env,))
            t.daemon = True
            t.start()
        else:
            target._deliver(env)

    def barrier(self):
        t0 = time.perf_counter()
        try:
            self.hub.barrier.wait(self.timeout)
        except threading.BrokenBarrierError:
            raise DeadlockError([], self.timeout) from None
        return time.perf_counter() - t0


# ---------------------------------------------------------------- sockets


def _read_exact(fh, n):
    data = fh.read(n)
    if data is None or len(data) != n:
        raise EOFError
    return data


def parse_address(addr):
    host, _, port = str(addr).rpartition(":")
    if not host or not port.isdigit():
        raise ProtocolError(f"rendezvous address must be host:port, got {addr!r}")
    return host, int(port)


class SocketTransport(Transport):
    """One rank per process. Rank 0 listens on the rendezvous address, collects
    every rank's listening port and broadcasts the directory; data connections
    to peers open lazily on first send."""

    def __init__(self, rank, world_size, rendezvous, method="xpinn", timeout=DEFAULT_TIMEOUT):
        super().__init__(rank, world_size, method, timeout)
        if not 0 <= rank < world_size:
            raise ProtocolError(f"rank {rank} outside world of size {world_size}")
        self._closing = False
        self._peers = {}
        self._peer_lock = threading.Lock()
        self._threads = []
        self._control = {}
        host, port = parse_address(rendezvous)
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind((host, port) if rank == 0 else (host, 0))
        except OSError as exc:
            raise ProtocolError(f"rank {rank}: cannot listen for rendezvous at {host}:{port}: {exc}") from None
        self._listener.listen(world_size + 4)
        self._directory = {}
        if rank == 0:
            self._rendezvous_root()
        else:
            self._rendezvous_member(host, port)
        self._spawn(self._accept_loop)

    def _spawn(self, fn, *args):
        t = threading.Thread(target=fn, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    # -- startup
    def _rendezvous_root(self):
        my_host, my_port = self._listener.getsockname()
        self._directory[0] = (my_host, my_port)
        self._listener.settimeout(self.timeout)
        pending = []
        try:
            while len(self._control) < self.world_size - 1:
                conn, addr = self._listener.accept()
                conn.settimeout(None)
                fh = conn.makefile("rb")
                kind, peer, port = HANDSHAKE.unpack(_read_exact(fh, HANDSHAKE.size))
                if kind == 0:
                    self._control[peer] = conn
                    self._directory[peer] = (addr[0], port)
                else:
                    # a data stream from a rank that finished rendezvous early
                    pending.append((conn, fh))
        except socket.timeout:
            raise ProtocolError(f"rendezvous timed out with {len(self._control) + 1}/{self.world_size} ranks") from None
        self._listener.settimeout(None)
        blob = self._encode_directory()
        for conn in self._control.values():
            conn.sendall(blob)
        for conn, fh in pending:
            self._spawn(self._read_loop, conn, fh)

    def _encode_directory(self):
        parts = [struct.pack("<I", self.world_size)]
        for r in range(self.world_size):
            h, p = self._directory[r]
            hb = h.encode()
            parts.append(struct.pack("<IH", len(hb), p) + hb)
        return b"".join(parts)

    def _rendezvous_member(self, host, port):
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                conn = socket.create_connection((host, port), timeout=5)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise ProtocolError(f"rank {self.rank}: rendezvous at {host}:{port} unreachable") from None
                time.sleep(0.05)
        conn.settimeout(None)
        conn.sendall(HANDSHAKE.pack(0, self.rank, self._listener.getsockname()[1]))
        fh = conn.makefile("rb")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        for r in range(n):
            length, p = struct.unpack("<IH", _read_exact(fh, 6))
            self._directory[r] = (_read_exact(fh, length).decode(), p)
        self._control[0] = conn
        self._control_reader = fh

    # -- data path
    def _accept_loop(self):
        while not self._closing:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            # the buffered reader may already hold frames; keep using it
            fh = conn.makefile("rb")
            try:
                HANDSHAKE.unpack(_read_exact(fh, HANDSHAKE.size))
            except (EOFError, OSError):
                conn.close()
                continue
            self._spawn(self._read_loop, conn, fh)

    def _read_loop(self, conn, fh):
        try:
            while True:
                epoch, edge, kind, sender, length = HEADER.unpack(_read_exact(fh, HEADER.size))
                payload = np.frombuffer(_read_exact(fh, 8 * length), dtype="<f8")
                self._deliver(Envelope(epoch, edge, kind, sender, self.rank, payload))
        except (EOFError, OSError):
            pass
        finally:
            conn.close()

    def _peer(self, rank):
        with self._peer_lock:
            if rank not in self._peers:
                host, port = self._directory[rank]
                if host in ("0.0.0.0", ""):
                    host = "127.0.0.1"
                sock = socket.create_connection((host, port), timeout=self.timeout)
                sock.settimeout(None)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.sendall(HANDSHAKE.pack(1, self.rank, 0))
                self._peers[rank] = (sock, threading.Lock())
            return self._peers[rank]

    def _transmit(self, env):
        sock, lock = self._peer(env.receiver)
        frame = HEADER.pack(env.epoch, env.edge, env.kind, env.sender, env.length) + env.payload.tobytes()
        with lock:
            sock.sendall(frame)

    def barrier(self):
        t0 = time.perf_counter()
        if self.world_size == 1:
            return 0.0
        try:
            if self.rank == 0:
                for conn in self._control.values():
                    conn.settimeout(self.timeout)
                    if conn.recv(1) != b"B":
                        raise ProtocolError("barrier: control connection closed")
                for conn in self._control.values():
                    conn.sendall(b"R")
            else:
                conn = self._control[0]
                conn.sendall(b"B")
                conn.settimeout(self.timeout)
                if conn.recv(1) != b"R":
                    raise ProtocolError("barrier: control connection closed")
        except socket.timeout:
            raise DeadlockError([], self.timeout) from None
        return time.perf_counter() - t0

    def close(self):
        self._closing = True
        for sock, _ in self._peers.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        for conn in self._control.values():
            conn.close()
        self._listener.close()


def make_transport(mode, world_size, method="xpinn", rank=None, rendezvous=None,
                   timeout=DEFAULT_TIMEOUT, jitter=0.0, seed=0):
    """In-process mode returns one transport per rank; socket mode returns this rank's."""
    if world_size < 1:
        raise ProtocolError("world size must be >= 1")
    if mode == "in-process":
        hub = _Hub(world_size, jitter, seed)
        hub.endpoints = [None] * world_size
        for r in range(world_size):
            hub.endpoints[r] = InProcessTransport(r, hub, method, timeout)
        return list(hub.endpoints)
    if mode == "socket":
        rendezvous = rendezvous or os.environ.get(RENDEZVOUS_ENV)
        if rendezvous is None or rank is None:
            raise ProtocolError("socket mode needs a rank and a rendezvous address")
        return SocketTransport(rank, world_size, rendezvous, method, timeout)
    raise ProtocolError(f"unknown transport mode {mode!r}")
