"""Binary wire protocol shared by the embedding store and aggregation server.

Frame layout (all integers little-endian):

    u32 payload_len | u8 opcode | payload

Requests carry the plain opcode; a success response echoes the request
opcode with the high bit set; a failure is an ERROR frame (opcode 0x7F)
whose payload is u16 code + UTF-8 message.

The same frames travel over both transports: `tcp` moves them through a
loopback socket, `inproc` hands the encoded bytes straight to the server
core. There is no third format.
"""
from __future__ import annotations

import socket
import struct
import threading
import time
from select import select

import numpy as np

# embedding store opcodes
OP_HELLO = 0x01
OP_GET_NEIGHBORS = 0x02
OP_BATCH_GET = 0x03
OP_BATCH_SET = 0x04
OP_STATS = 0x05
OP_ERROR = 0x7F
# aggregation opcodes
OP_REGISTER = 0x10
OP_GET_MODEL = 0x11
OP_PUT_MODEL = 0x12
OP_ROUND_DONE = 0x13

RESP_BIT = 0x80

ERR_BAD_OPCODE = 1
ERR_MALFORMED = 2
ERR_MISSING_KEY = 3
ERR_DIM_MISMATCH = 4
ERR_LAYER_RANGE = 5
ERR_NO_HELLO = 6
ERR_STATE = 7
ERR_TIMEOUT = 8
ERR_BAD_CLIENT = 9
ERR_BAD_ROUND = 10
ERR_BAD_PAYLOAD = 11

MAX_PAYLOAD = 1 << 28  # 256 MiB guard against garbage length prefixes

_HEADER = struct.Struct("<IB")
KEY_DTYPE = np.dtype([("node", "<u8"), ("layer", "u1")])
NEIGHBOR_DTYPE = np.dtype([("local", "<u8"), ("remote", "<u8"), ("owner", "<u4")])


def record_dtype(dim: int) -> np.dtype:
    return np.dtype([("node", "<u8"), ("layer", "u1"), ("version", "<u4"), ("vec", "<f4", (dim,))])


class ProtocolError(Exception):
    """Recoverable request failure; the server answers with an ERROR frame."""

    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code
        self.msg = msg


class FrameError(Exception):
    """Unrecoverable framing problem; the connection is torn down."""


class ServerError(Exception):
    """Client-side view of an ERROR frame."""

    def __init__(self, code: int, msg: str):
        super().__init__(f"server error {code}: {msg}")
        self.code = code
        self.msg = msg


def pack_frame(opcode: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise FrameError("payload too large")
    return _HEADER.pack(len(payload), opcode) + payload


def pack_error(exc: ProtocolError) -> bytes:
    msg = exc.msg.encode("utf-8")[:4096]
    return pack_frame(OP_ERROR, struct.pack("<H", exc.code) + msg)


def parse_buffer(buf: bytearray):
    """Pop complete frames off the front of buf; returns list of (op, payload)."""
    frames = []
    while True:
        if len(buf) < _HEADER.size:
            return frames
        length, opcode = _HEADER.unpack_from(buf, 0)
        if length > MAX_PAYLOAD:
            raise FrameError(f"frame length {length} exceeds limit")
        end = _HEADER.size + length
        if len(buf) < end:
            return frames
        frames.append((opcode, bytes(buf[_HEADER.size : end])))
        del buf[:end]


def read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 16))
        if not chunk:
            raise FrameError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket):
    head = read_exact(sock, _HEADER.size)
    length, opcode = _HEADER.unpack(head)
    if length > MAX_PAYLOAD:
        raise FrameError(f"frame length {length} exceeds limit")
    return opcode, read_exact(sock, length)


def check_response(opcode: int, payload: bytes, request_op: int) -> bytes:
    if opcode == OP_ERROR:
        if len(payload) < 2:
            raise FrameError("truncated error frame")
        (code,) = struct.unpack_from("<H", payload, 0)
        raise ServerError(code, payload[2:].decode("utf-8", "replace"))
    if opcode != (request_op | RESP_BIT):
        raise FrameError(f"unexpected response opcode {opcode:#x} for request {request_op:#x}")
    return payload


# ---------------------------------------------------------------- payload codecs

def enc_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def dec_u32(payload: bytes, what: str) -> int:
    if len(payload) != 4:
        raise ProtocolError(ERR_MALFORMED, f"{what}: expected 4-byte payload")
    return struct.unpack("<I", payload)[0]


def enc_keys(nodes: np.ndarray, layers: np.ndarray) -> bytes:
    arr = np.empty(len(nodes), dtype=KEY_DTYPE)
    arr["node"] = nodes
    arr["layer"] = layers
    return struct.pack("<I", len(nodes)) + arr.tobytes()


def dec_keys(payload: bytes):
    if len(payload) < 4:
        raise ProtocolError(ERR_MALFORMED, "batch_get: missing count")
    (count,) = struct.unpack_from("<I", payload, 0)
    body = payload[4:]
    if len(body) != count * KEY_DTYPE.itemsize:
        raise ProtocolError(ERR_MALFORMED, "batch_get: count does not match payload size")
    arr = np.frombuffer(body, dtype=KEY_DTYPE)
    return arr["node"].astype(np.int64), arr["layer"].astype(np.int64)


def enc_records(nodes, layers, versions, vectors: np.ndarray) -> bytes:
    count, dim = vectors.shape
    arr = np.empty(count, dtype=record_dtype(dim))
    arr["node"] = nodes
    arr["layer"] = layers
    arr["version"] = versions
    arr["vec"] = vectors
    return struct.pack("<IH", count, dim) + arr.tobytes()


def dec_records(payload: bytes):
    if len(payload) < 6:
        raise ProtocolError(ERR_MALFORMED, "record batch: missing header")
    count, dim = struct.unpack_from("<IH", payload, 0)
    body = payload[6:]
    if dim == 0:
        raise ProtocolError(ERR_MALFORMED, "record batch: zero dim")
    dt = record_dtype(dim)
    if len(body) != count * dt.itemsize:
        raise ProtocolError(ERR_MALFORMED, "record batch: count/dim do not match payload size")
    arr = np.frombuffer(body, dtype=dt)
    return (
        arr["node"].astype(np.int64),
        arr["layer"].astype(np.int64),
        arr["version"].astype(np.int64),
        arr["vec"],  # float32 view into the payload
    )


def enc_neighbors(local, remote, owner) -> bytes:
    arr = np.empty(len(local), dtype=NEIGHBOR_DTYPE)
    arr["local"] = local
    arr["remote"] = remote
    arr["owner"] = owner
    return struct.pack("<I", len(local)) + arr.tobytes()


def dec_neighbors(payload: bytes):
    (count,) = struct.unpack_from("<I", payload, 0)
    arr = np.frombuffer(payload[4:], dtype=NEIGHBOR_DTYPE)
    if arr.size != count:
        raise ProtocolError(ERR_MALFORMED, "neighbor list count mismatch")
    return (
        arr["local"].astype(np.int64),
        arr["remote"].astype(np.int64),
        arr["owner"].astype(np.int64),
    )


# ---------------------------------------------------------------- connections

class Connection:
    """One logical client connection; at most one in-flight request_many."""

    def request(self, opcode: int, payload: bytes):
        raise NotImplementedError

    def request_many(self, frames):
        return [self.request(op, pl) for op, pl in frames]

    def close(self):
        pass


class InprocConnection(Connection):
    """Direct call into a server core, still round-tripping encoded bytes."""

    def __init__(self, core):
        self.core = core
        self.state: dict = {"client_id": None}

    def request(self, opcode: int, payload: bytes):
        try:
            return self.core.handle(self.state, opcode, bytes(payload))
        except ProtocolError as exc:
            frame = pack_error(exc)
            return parse_buffer(bytearray(frame))[0]


class TcpConnection(Connection):
    def __init__(self, host: str, port: int, timeout: float = 300.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.timeout = timeout

    def request(self, opcode: int, payload: bytes):
        self.sock.sendall(pack_frame(opcode, payload))
        return read_frame(self.sock)

    def request_many(self, frames):
        """Pipelined exchange: keep sending while draining responses.

        Interleaving the reads with the sends means neither side can stall
        on a full socket buffer, no matter how large the batch is.
        """
        out = b"".join(pack_frame(op, pl) for op, pl in frames)
        expected = len(frames)
        responses = []
        inbuf = bytearray()
        sent = 0
        view = memoryview(out)
        deadline = time.monotonic() + self.timeout
        self.sock.setblocking(False)
        try:
            while sent < len(out) or len(responses) < expected:
                if time.monotonic() > deadline:
                    raise FrameError("pipelined request timed out")
                want_write = [self.sock] if sent < len(out) else []
                readable, writable, _ = select([self.sock], want_write, [], 1.0)
                if readable:
                    chunk = self.sock.recv(1 << 16)
                    if not chunk:
                        raise FrameError("connection closed during pipeline")
                    inbuf.extend(chunk)
                    responses.extend(parse_buffer(inbuf))
                if writable:
                    try:
                        sent += self.sock.send(view[sent : sent + (1 << 16)])
                    except BlockingIOError:
                        pass
        finally:
            self.sock.setblocking(True)
            self.sock.settimeout(self.timeout)
        return responses

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class TcpServer:
    """Threaded frame server: one thread per connection, shared core.

    delay_s injects a fixed sleep before each frame is processed, to make
    per-message network cost visible in timing experiments.
    """

    def __init__(self, core, host: str = "127.0.0.1", port: int = 0, delay_s: float = 0.0):
        self.core = core
        self.delay_s = delay_s
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.host, self.port = self._listener.getsockname()[:2]
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket):
        state: dict = {"client_id": None}
        try:
            while not self._stop.is_set():
                try:
                    opcode, payload = read_frame(conn)
                except FrameError:
                    break
                if self.delay_s:
                    time.sleep(self.delay_s)
                try:
                    resp_op, resp_payload = self.core.handle(state, opcode, payload)
                    conn.sendall(pack_frame(resp_op, resp_payload))
                except ProtocolError as exc:
                    conn.sendall(pack_error(exc))
        except OSError:
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def close(self):
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
