"""Message transports for the master/worker runtime.

Three interchangeable implementations of one contract: the master assigns a
task to a worker and receives completed results one at a time.

* :class:`ThreadTransport` runs workers on OS threads (real concurrency,
  nondeterministic arrival order).
* :class:`VirtualTransport` replays a seeded virtual-time schedule; runs are
  bitwise reproducible.
* :class:`TcpMasterTransport` / :func:`run_worker` speak the AUWP byte
  protocol over TCP so workers can be separate OS processes.

AUWP framing (length-implied, little-endian):

    bytes 0-3   magic "AUWP"
    byte  4     u8 version (= 1)
    byte  5     u8 message type (ASSIGN=1, RESULT=2, SHUTDOWN=3, HELLO=4)
    bytes 6-9   u32 worker id
    bytes 10-17 u64 iteration stamp
    bytes 18-21 u32 matrix count
    then per matrix: u64 rows, u64 cols, rows*cols f64 payload (row-major)
"""

from __future__ import annotations

import enum
import heapq
import queue
import selectors
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import AuwError

WIRE_MAGIC = b"AUWP"
WIRE_VERSION = 1
_FRAME_HEADER = struct.Struct("<4sBBIQI")
_MAT_HEADER = struct.Struct("<QQ")
_MAX_MAT_BYTES = 1 << 33  # sanity cap on a single declared payload

DEFAULT_HANDSHAKE_TIMEOUT = 10.0
DEFAULT_IO_TIMEOUT = 300.0


class MsgType(enum.IntEnum):
    ASSIGN = 1
    RESULT = 2
    SHUTDOWN = 3
    HELLO = 4


class DecodeError(AuwError):
    """Base class for malformed AUWP frames."""


class BadMagicError(DecodeError):
    pass


class UnsupportedVersionError(DecodeError):
    pass


class UnknownMessageTypeError(DecodeError):
    pass


class TruncatedFrameError(DecodeError):
    pass


class NonFinitePayloadError(DecodeError):
    pass


class TrailingDataError(DecodeError):
    pass


class WorkerCrashError(AuwError):
    """A worker stopped responding or reported a failure."""

    def __init__(self, worker_id: int, detail: str = ""):
        super().__init__(f"worker {worker_id} crashed{': ' + detail if detail else ''}")
        self.worker_id = worker_id


class HandshakeError(AuwError):
    pass


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    worker_id: int
    iteration_stamp: int
    matrices: tuple[np.ndarray, ...] = ()


@dataclass(frozen=True)
class TaskMsg:
    """Master-to-worker assignment: a snapshot of the shared factor plus the
    worker's current abundance block. Payloads are value copies, never views."""

    endmembers: np.ndarray
    version: int
    abundances: np.ndarray


@dataclass(frozen=True)
class ResultMsg:
    """Worker-to-master result, stamped with the snapshot version it used."""

    worker_id: int
    abundances: np.ndarray
    version: int


def encode_message(msg: WireMessage) -> bytes:
    if not isinstance(msg.msg_type, MsgType):
        raise UnknownMessageTypeError(f"unknown message type {msg.msg_type!r}")
    parts = [_FRAME_HEADER.pack(WIRE_MAGIC, WIRE_VERSION, int(msg.msg_type),
                                msg.worker_id, msg.iteration_stamp, len(msg.matrices))]
    for m in msg.matrices:
        m = np.ascontiguousarray(m, dtype=np.float64)
        if m.ndim != 2:
            raise NonFinitePayloadError("payload matrices must be 2-D")
        if m.size and not np.all(np.isfinite(m)):
            raise NonFinitePayloadError("refusing to encode non-finite payload")
        parts.append(_MAT_HEADER.pack(m.shape[0], m.shape[1]))
        parts.append(m.tobytes(order="C"))
    return b"".join(parts)


def _parse_message(read_exact) -> WireMessage:
    """Parse one frame through a read-exact callback (shared by buffer and socket paths)."""
    header = read_exact(_FRAME_HEADER.size)
    magic, version, mtype, worker_id, stamp, count = _FRAME_HEADER.unpack(header)
    if magic != WIRE_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    try:
        msg_type = MsgType(mtype)
    except ValueError:
        raise UnknownMessageTypeError(f"unknown message type {mtype}") from None
    matrices = []
    for _ in range(count):
        rows, cols = _MAT_HEADER.unpack(read_exact(_MAT_HEADER.size))
        nbytes = rows * cols * 8
        if nbytes > _MAX_MAT_BYTES:
            raise TruncatedFrameError(f"declared payload of {nbytes} bytes exceeds cap")
        payload = read_exact(nbytes)
        m = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
        if m.size and not np.all(np.isfinite(m)):
            raise NonFinitePayloadError("frame carries non-finite payload")
        matrices.append(m)
    return WireMessage(msg_type, worker_id, stamp, tuple(matrices))


def decode_message(data: bytes) -> WireMessage:
    """Decode exactly one frame from a byte string.

    Raises a :class:`DecodeError` subclass on any malformed input; never any
    other exception, whatever the bytes.
    """
    pos = 0

    def read_exact(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFrameError(f"frame needs {pos + n} bytes, have {len(data)}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    msg = _parse_message(read_exact)
    if pos != len(data):
        raise TrailingDataError(f"{len(data) - pos} trailing bytes after frame")
    return msg


class _DelaySampler:
    """Per-worker artificial delays: fixed milliseconds or seeded uniform ranges."""

    def __init__(self, omega: int, delays_ms=None, seed: int = 0):
        if delays_ms is not None and len(delays_ms) != omega:
            raise AuwError(f"need {omega} delay entries, got {len(delays_ms)}")
        self._spec = list(delays_ms) if delays_ms is not None else [0.0] * omega
        children = np.random.SeedSequence([seed, 0xD31A]).spawn(omega)
        self._rngs = [np.random.default_rng(c) for c in children]

    def sample(self, worker_id: int) -> float:
        entry = self._spec[worker_id]
        if isinstance(entry, (tuple, list)):
            lo, hi = entry
            return float(self._rngs[worker_id].uniform(lo, hi))
        return float(entry)


class VirtualTransport:
    """Deterministic virtual-time scheduler.

    Tasks complete after ``base_ms`` plus the worker's sampled delay; the
    master always pops the earliest completion (ties broken by submission
    order), so a fixed seed fixes the whole schedule.
    """

    def __init__(self, compute, omega: int, delays_ms=None, seed: int = 0,
                 base_ms: float = 1.0):
        self.omega = omega
        self._compute = compute
        self._sampler = _DelaySampler(omega, delays_ms, seed)
        self._base_ms = base_ms
        self._heap: list = []
        self._seq = 0
        self._now = 0.0

    def assign(self, worker_id: int, task: TaskMsg) -> None:
        done = self._now + self._base_ms + self._sampler.sample(worker_id)
        heapq.heappush(self._heap, (done, self._seq, worker_id, task))
        self._seq += 1

    def recv(self) -> ResultMsg:
        if not self._heap:
            raise AuwError("recv with no outstanding assignments")
        done, _, worker_id, task = heapq.heappop(self._heap)
        self._now = done
        a_hat = self._compute(worker_id, task)
        return ResultMsg(worker_id, a_hat, task.version)

    def now_ms(self) -> float:
        return self._now

    def shutdown(self) -> None:
        self._heap.clear()


@dataclass
class _WorkerFailure:
    worker_id: int
    detail: str


class ThreadTransport:
    """Real-concurrency scheduler: one OS thread per worker, queue-based inbox."""

    _SHUTDOWN = object()

    def __init__(self, compute, omega: int, delays_ms=None, seed: int = 0):
        self.omega = omega
        self._compute = compute
        self._sampler = _DelaySampler(omega, delays_ms, seed)
        self._inbox: queue.Queue = queue.Queue()
        self._tasks = [queue.Queue() for _ in range(omega)]
        self._t0 = time.perf_counter()
        self._threads = [
            threading.Thread(target=self._worker_loop, args=(w,), daemon=True)
            for w in range(omega)
        ]
        for t in self._threads:
            t.start()

    def _worker_loop(self, worker_id: int) -> None:
        while True:
            task = self._tasks[worker_id].get()
            if task is self._SHUTDOWN:
                return
            try:
                delay = self._sampler.sample(worker_id)
                if delay > 0:
                    time.sleep(delay / 1000.0)
                a_hat = self._compute(worker_id, task)
            except Exception as exc:  # surfaced to the master as a crash
                self._inbox.put(_WorkerFailure(worker_id, repr(exc)))
                return
            self._inbox.put(ResultMsg(worker_id, a_hat, task.version))

    def assign(self, worker_id: int, task: TaskMsg) -> None:
        self._tasks[worker_id].put(task)

    def recv(self) -> ResultMsg:
        item = self._inbox.get()
        if isinstance(item, _WorkerFailure):
            raise WorkerCrashError(item.worker_id, item.detail)
        return item

    def now_ms(self) -> float:
        return (time.perf_counter() - self._t0) * 1000.0

    def shutdown(self) -> None:
        for q in self._tasks:
            q.put(self._SHUTDOWN)
        for t in self._threads:
            t.join(timeout=5.0)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def send_frame(sock: socket.socket, msg: WireMessage) -> None:
    sock.sendall(encode_message(msg))


def recv_frame(sock: socket.socket) -> WireMessage:
    return _parse_message(lambda n: _recv_exact(sock, n))


class TcpMasterTransport:
    """Master-side TCP transport: one blocking connection per worker.

    Workers introduce themselves with HELLO carrying their id; duplicates and
    out-of-range ids are rejected. Results are multiplexed through a readiness
    poll, so cross-connection arrival order is whatever the network delivers.
    """

    def __init__(self, bind_addr: tuple[str, int], omega: int,
                 handshake_timeout: float = DEFAULT_HANDSHAKE_TIMEOUT,
                 io_timeout: float = DEFAULT_IO_TIMEOUT):
        self.omega = omega
        self._io_timeout = io_timeout
        self._handshake_timeout = handshake_timeout
        self._listener = socket.create_server(bind_addr)
        self._socks: dict[int, socket.socket] = {}
        self._selector = selectors.DefaultSelector()
        self._t0 = time.perf_counter()
        self._closed = False

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()

    def wait_for_workers(self) -> None:
        """Accept connections until every worker id has checked in."""
        deadline = time.monotonic() + self._handshake_timeout
        self._listener.settimeout(self._handshake_timeout)
        while len(self._socks) < self.omega:
            if time.monotonic() > deadline:
                raise HandshakeError(
                    f"only {len(self._socks)}/{self.omega} workers connected "
                    f"within {self._handshake_timeout}s")
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            conn.settimeout(self._handshake_timeout)
            try:
                hello = recv_frame(conn)
            except (DecodeError, ConnectionError, socket.timeout):
                conn.close()
                continue
            wid = hello.worker_id
            if hello.msg_type != MsgType.HELLO or wid >= self.omega or wid in self._socks:
                try:
                    send_frame(conn, WireMessage(MsgType.SHUTDOWN, wid, 0))
                finally:
                    conn.close()
                continue
            send_frame(conn, WireMessage(MsgType.HELLO, wid, 0))
            conn.settimeout(self._io_timeout)
            self._socks[wid] = conn
            self._selector.register(conn, selectors.EVENT_READ, wid)
        self._t0 = time.perf_counter()

    def assign(self, worker_id: int, task: TaskMsg) -> None:
        msg = WireMessage(MsgType.ASSIGN, worker_id, task.version,
                          (task.endmembers, task.abundances))
        try:
            send_frame(self._socks[worker_id], msg)
        except OSError as exc:
            raise WorkerCrashError(worker_id, repr(exc)) from exc

    def recv(self) -> ResultMsg:
        events = self._selector.select(timeout=self._io_timeout)
        if not events:
            raise WorkerCrashError(-1, f"no worker result within {self._io_timeout}s")
        key = events[0][0]
        wid = key.data
        try:
            frame = recv_frame(key.fileobj)
        except (ConnectionError, OSError, socket.timeout) as exc:
            raise WorkerCrashError(wid, repr(exc)) from exc
        except DecodeError as exc:
            raise WorkerCrashError(wid, f"undecodable frame: {exc}") from exc
        if frame.msg_type != MsgType.RESULT or len(frame.matrices) != 1:
            raise WorkerCrashError(wid, f"unexpected frame {frame.msg_type.name}")
        return ResultMsg(frame.worker_id, frame.matrices[0], frame.iteration_stamp)

    def now_ms(self) -> float:
        return (time.perf_counter() - self._t0) * 1000.0

    def shutdown(self) -> None:
        if self._closed:
            return
        self._closed = True
        for wid, sock in self._socks.items():
            try:
                send_frame(sock, WireMessage(MsgType.SHUTDOWN, wid, 0))
            except OSError:
                pass
        # drain in-flight results so workers do not block on their final send
        end = time.monotonic() + 2.0
        for sock in self._socks.values():
            sock.settimeout(max(0.1, end - time.monotonic()))
            try:
                while True:
                    if not sock.recv(1 << 16):
                        break
            except (OSError, socket.timeout):
                pass
            sock.close()
        self._selector.close()
        self._listener.close()


def run_worker(connect_addr: tuple[str, int], y_block: np.ndarray, worker_id: int,
               delay_ms: float = 0.0, handshake_timeout: float = DEFAULT_HANDSHAKE_TIMEOUT,
               io_timeout: float = DEFAULT_IO_TIMEOUT) -> int:
    """Worker process loop: handshake, then compute assignments until SHUTDOWN.

    Returns the number of completed tasks. Raises :class:`HandshakeError` if
    the master rejects the worker id, :class:`ConnectionError` if the master
    disappears mid-run.
    """
    from .model import prox_gradient_abundance

    sock = socket.create_connection(connect_addr, timeout=handshake_timeout)
    try:
        send_frame(sock, WireMessage(MsgType.HELLO, worker_id, 0))
        ack = recv_frame(sock)
        if ack.msg_type != MsgType.HELLO:
            raise HandshakeError(f"master rejected worker {worker_id}")
        sock.settimeout(io_timeout)
        done = 0
        while True:
            frame = recv_frame(sock)
            if frame.msg_type == MsgType.SHUTDOWN:
                return done
            if frame.msg_type != MsgType.ASSIGN or len(frame.matrices) != 2:
                raise HandshakeError(f"unexpected frame {frame.msg_type.name}")
            endmembers, abundances = frame.matrices
            if delay_ms > 0:
                time.sleep(delay_ms / 1000.0)
            a_hat, _ = prox_gradient_abundance(y_block, abundances, endmembers)
            send_frame(sock, WireMessage(MsgType.RESULT, worker_id,
                                         frame.iteration_stamp, (a_hat,)))
            done += 1
    finally:
        sock.close()
