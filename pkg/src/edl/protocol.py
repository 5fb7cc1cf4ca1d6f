"""Wire format shared by students, teachers and the coordinator.

A frame is a 4-byte big-endian payload length followed by that many bytes
of UTF-8 JSON. The JSON value must be an object with a string "type" field
drawn from MESSAGE_TYPES. Frames above 16 MiB are rejected on both sides.
Messages are plain dicts; floats ride as JSON decimals (shortest
round-trip), so numeric payloads survive encode/decode bit-identically.

See PROTOCOL.md at the repository root for one worked hex example per
message type.
"""

from __future__ import annotations

import json
import socket
import struct
import threading

HEADER_SIZE = 4
MAX_FRAME_BYTES = 16 * 1024 * 1024

MESSAGE_TYPES = frozenset({
    "REGISTER", "REGISTER_ACK",
    "HEARTBEAT", "HEARTBEAT_ACK",
    "ACQUIRE_TEACHERS", "ACQUIRE_REPLY",
    "RELEASE_TEACHER", "RELEASE_ACK",
    "REPORT_FAILURE", "REPORT_ACK",
    "INFER_REQUEST", "INFER_REPLY",
    "LIST_TEACHERS", "LIST_REPLY",
    "CHUNK",
    "ERROR",
})

# Fields that must be present for a message of each type to be well formed.
REQUIRED_FIELDS: dict[str, tuple[str, ...]] = {
    "REGISTER": ("node_id", "address"),
    "REGISTER_ACK": ("node_id", "ttl_ms"),
    "HEARTBEAT": ("node_id",),
    "HEARTBEAT_ACK": ("node_id",),
    "ACQUIRE_TEACHERS": ("student_id", "count"),
    "ACQUIRE_REPLY": ("teachers",),
    "RELEASE_TEACHER": ("student_id", "node_id"),
    "RELEASE_ACK": ("node_id",),
    "REPORT_FAILURE": ("student_id", "node_id"),
    "REPORT_ACK": ("node_id",),
    "INFER_REQUEST": ("batch_id", "inputs"),
    "INFER_REPLY": ("batch_id", "probs", "temperature"),
    "LIST_TEACHERS": (),
    "LIST_REPLY": ("teachers",),
    "CHUNK": ("generation", "step", "chunk_index", "payload"),
    "ERROR": ("reason",),
}


class ProtocolError(ValueError):
    """Malformed frame or message."""


class FrameTooLarge(ProtocolError):
    """Frame length exceeds MAX_FRAME_BYTES."""


class NeedMoreData(Exception):
    """The buffer does not yet hold a complete frame."""


class ConnectionClosed(ConnectionError):
    """Peer went away; raised only at frame boundaries or as a clean error."""


def validate_message(msg: dict) -> dict:
    if not isinstance(msg, dict):
        raise ProtocolError(f"message must be a JSON object, got {type(msg).__name__}")
    mtype = msg.get("type")
    if not isinstance(mtype, str):
        raise ProtocolError("message lacks a string 'type' field")
    if mtype not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {mtype!r}")
    missing = [f for f in REQUIRED_FIELDS[mtype] if f not in msg]
    if missing:
        raise ProtocolError(f"{mtype} missing required fields {missing}")
    return msg


def encode(msg: dict) -> bytes:
    """Message dict -> one self-delimiting frame."""
    validate_message(msg)
    try:
        payload = json.dumps(msg, separators=(",", ":"), allow_nan=False).encode("utf-8")
    except ValueError as exc:
        raise ProtocolError(f"unencodable message: {exc}") from exc
    if len(payload) > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"payload is {len(payload)} bytes, max {MAX_FRAME_BYTES}")
    return struct.pack(">I", len(payload)) + payload


def _reject_nonfinite(_value: str):
    raise ProtocolError("non-finite JSON numbers are not allowed")


def decode(buf: bytes | bytearray) -> tuple[dict, int]:
    """First message in ``buf`` plus the byte count consumed.

    Raises NeedMoreData if the buffer holds only part of a frame,
    FrameTooLarge for oversize headers, and ProtocolError for anything
    that is not a valid message. Never raises anything else, no matter
    the input bytes.
    """
    if len(buf) < HEADER_SIZE:
        raise NeedMoreData(f"have {len(buf)} header bytes of {HEADER_SIZE}")
    (length,) = struct.unpack(">I", bytes(buf[:HEADER_SIZE]))
    if length > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"frame header claims {length} bytes, max {MAX_FRAME_BYTES}")
    end = HEADER_SIZE + length
    if len(buf) < end:
        raise NeedMoreData(f"frame needs {end} bytes, have {len(buf)}")
    try:
        msg = json.loads(bytes(buf[HEADER_SIZE:end]).decode("utf-8"),
                         parse_constant=_reject_nonfinite)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"payload is not valid JSON: {exc}") from exc
    return validate_message(msg), end


class FrameDecoder:
    """Incremental decoder for a byte stream of concatenated frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[dict]:
        """Append stream bytes; return every now-complete message in order."""
        self._buf.extend(data)
        out = []
        while True:
            try:
                msg, used = decode(self._buf)
            except NeedMoreData:
                return out
            del self._buf[:used]
            out.append(msg)

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------------------
# Message constructors (requests on the left of each pair, replies right)


def register(node_id: str, address: str) -> dict:
    return {"type": "REGISTER", "node_id": node_id, "address": address}


def register_ack(node_id: str, ttl_ms: int) -> dict:
    return {"type": "REGISTER_ACK", "node_id": node_id, "ttl_ms": ttl_ms}


def heartbeat(node_id: str) -> dict:
    return {"type": "HEARTBEAT", "node_id": node_id}


def heartbeat_ack(node_id: str) -> dict:
    return {"type": "HEARTBEAT_ACK", "node_id": node_id}


def acquire_teachers(student_id: str, count: int) -> dict:
    return {"type": "ACQUIRE_TEACHERS", "student_id": student_id, "count": count}


def acquire_reply(teachers: list[dict]) -> dict:
    return {"type": "ACQUIRE_REPLY", "teachers": teachers}


def release_teacher(student_id: str, node_id: str) -> dict:
    return {"type": "RELEASE_TEACHER", "student_id": student_id, "node_id": node_id}


def report_failure(student_id: str, node_id: str) -> dict:
    return {"type": "REPORT_FAILURE", "student_id": student_id, "node_id": node_id}


def infer_request(batch_id: str, inputs: list[list[float]]) -> dict:
    return {"type": "INFER_REQUEST", "batch_id": batch_id, "inputs": inputs}


def infer_reply(batch_id: str, probs: list[list[float]], temperature: float) -> dict:
    return {"type": "INFER_REPLY", "batch_id": batch_id, "probs": probs,
            "temperature": temperature}


def list_teachers() -> dict:
    return {"type": "LIST_TEACHERS"}


def error(reason: str, **extra) -> dict:
    msg = {"type": "ERROR", "reason": reason}
    msg.update(extra)
    return msg


# ---------------------------------------------------------------------------
# Blocking framed connection over a TCP socket


class FrameConnection:
    """One reliable byte-stream connection speaking frames.

    Thread contract: at most one logical reader and one logical writer.
    Sends are serialized by an internal lock so whole frames never
    interleave; a mid-frame drop surfaces as ConnectionClosed.
    """

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._decoder = FrameDecoder()
        self._queued: list[dict] = []
        self._send_lock = threading.Lock()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    @classmethod
    def connect(cls, address: str, timeout: float | None = 10.0) -> "FrameConnection":
        host, port = split_address(address)
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        return cls(sock)

    def send(self, msg: dict) -> None:
        frame = encode(msg)
        with self._send_lock:
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                raise ConnectionClosed(f"send failed: {exc}") from exc

    def recv(self, timeout: float | None = None) -> dict:
        """Next message; blocks. ConnectionClosed on EOF or reset."""
        if self._queued:
            return self._queued.pop(0)
        try:
            self._sock.settimeout(timeout)
        except OSError as exc:
            raise ConnectionClosed(f"socket gone: {exc}") from exc
        try:
            while True:
                try:
                    data = self._sock.recv(65536)
                except socket.timeout:
                    raise TimeoutError("recv timed out")
                except OSError as exc:
                    raise ConnectionClosed(f"recv failed: {exc}") from exc
                if not data:
                    if self._decoder.pending_bytes:
                        raise ConnectionClosed("peer dropped mid-frame")
                    raise ConnectionClosed("peer closed the connection")
                msgs = self._decoder.feed(data)
                if msgs:
                    self._queued = msgs[1:]
                    return msgs[0]
        finally:
            try:
                self._sock.settimeout(None)
            except OSError:
                pass

    def request(self, msg: dict, timeout: float | None = 30.0) -> dict:
        """send + recv for strict request/reply exchanges."""
        self.send(msg)
        return self.recv(timeout=timeout)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def fileno(self) -> int:
        return self._sock.fileno()

    @property
    def socket(self) -> socket.socket:
        return self._sock


def split_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {address!r}")
    return host, int(port)


def open_listener(address: str) -> socket.socket:
    """Bound, listening TCP socket; port 0 picks an ephemeral port."""
    host, port = split_address(address)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(64)
    return sock


def listener_address(sock: socket.socket) -> str:
    host, port = sock.getsockname()[:2]
    return f"{host}:{port}"
