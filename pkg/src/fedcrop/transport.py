"""Byte-exact framing of model updates, plus loopback and TCP channels.

Frame layout (all integers little-endian)::

    magic "FLMU" | version u8 | msg_type u8 | round u32 | sender u32 |
    payload_len u64 | payload | crc32(payload) u32

Parameter payload::

    tensor_count u32, then per tensor:
    name_len u16 | utf-8 name | dtype u8 (0=f32, 1=f64) | ndims u8 |
    dims u32 * ndims | values (row-major)
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable

import numpy as np

from .errors import (ChecksumError, ConnectionLost, EncodingError, ProtocolError, RoundSyncError,
                     TruncationError)
from .params import ParameterSet, Tensor

log = logging.getLogger(__name__)

MAGIC = b"FLMU"
VERSION = 1
HEADER = struct.Struct("<4sBBIIQ")
TRAILER = struct.Struct("<I")
HEADER_SIZE = HEADER.size  # 22
FRAME_OVERHEAD = HEADER_SIZE + TRAILER.size  # 26
MAX_PAYLOAD = 1 << 32

DTYPE_F32 = 0
DTYPE_F64 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}


class MessageType(IntEnum):
    HELLO = 0x01
    MODEL_PARAMS = 0x02
    MODEL_UPDATE = 0x03
    RELEASE = 0x04
    METRICS_REPORT = 0x05
    PREDICT_REQUEST = 0x06
    PREDICT_RESPONSE = 0x07


class RoundTimeout(RoundSyncError):
    """No frame arrived before the barrier deadline."""


@dataclass(frozen=True)
class Frame:
    msg_type: MessageType
    round: int
    sender_id: int
    payload: bytes = b""


def encode(msg_type, round: int, sender_id: int, payload: bytes = b"") -> bytes:
    payload = bytes(payload)
    if len(payload) >= MAX_PAYLOAD:
        raise EncodingError(f"payload of {len(payload)} bytes exceeds the 4 GiB cap")
    if not (0 <= round < 1 << 32 and 0 <= sender_id < 1 << 32):
        raise EncodingError("round and sender id must fit in 32 bits")
    try:
        msg_type = MessageType(msg_type)
    except ValueError:
        raise EncodingError(f"unknown message type {msg_type!r}") from None
    header = HEADER.pack(MAGIC, VERSION, int(msg_type), round, sender_id, len(payload))
    return header + payload + TRAILER.pack(zlib.crc32(payload))


class FrameDecoder:
    """Incremental decoder; tolerates any fragmentation of the byte stream."""

    def __init__(self):
        self._buf = bytearray()

    @property
    def pending(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while True:
            frame = self._next()
            if frame is None:
                return frames
            frames.append(frame)

    def finish(self) -> None:
        """Signal end of stream; leftover bytes mean a frame was cut short."""
        if self._buf:
            raise TruncationError(f"stream ended with {len(self._buf)} bytes of an incomplete frame")

    def _next(self) -> Frame | None:
        buf = self._buf
        n = len(buf)
        if n >= 4 and bytes(buf[:4]) != MAGIC:
            raise ProtocolError(f"bad magic {bytes(buf[:4])!r}")
        if n >= 5 and buf[4] != VERSION:
            raise ProtocolError(f"unsupported protocol version {buf[4]}")
        if n >= 6 and buf[5] not in MessageType._value2member_map_:
            raise ProtocolError(f"unknown message type 0x{buf[5]:02x}")
        if n < HEADER_SIZE:
            return None
        _, _, mtype, rnd, sender, length = HEADER.unpack_from(buf)
        if length >= MAX_PAYLOAD:
            raise ProtocolError(f"declared payload length {length} exceeds the cap")
        end = HEADER_SIZE + length + TRAILER.size
        if n < end:
            return None
        payload = bytes(buf[HEADER_SIZE:HEADER_SIZE + length])
        (crc,) = TRAILER.unpack_from(buf, HEADER_SIZE + length)
        if crc != zlib.crc32(payload):
            raise ChecksumError(f"crc mismatch in frame from sender {sender} round {rnd}")
        del buf[:end]
        return Frame(MessageType(mtype), rnd, sender, payload)


def decode_all(chunks: Iterable[bytes] | bytes) -> list[Frame]:
    """Every frame in a finite stream; a trailing partial frame is an error."""
    if isinstance(chunks, (bytes, bytearray, memoryview)):
        chunks = [bytes(chunks)]
    dec = FrameDecoder()
    frames = []
    for chunk in chunks:
        frames.extend(dec.feed(chunk))
    dec.finish()
    return frames


def decode(chunks: Iterable[bytes] | bytes) -> Frame:
    """Exactly one frame reassembled from ``chunks``."""
    if isinstance(chunks, (bytes, bytearray, memoryview)):
        chunks = [bytes(chunks)]
    dec = FrameDecoder()
    for chunk in chunks:
        frames = dec.feed(chunk)
        if frames:
            return frames[0]
    dec.finish()
    raise TruncationError("stream ended before a complete frame")


# ---------------------------------------------------------------------------
# payloads


def encode_params(params: ParameterSet, dtype: int = DTYPE_F64) -> bytes:
    if dtype not in _DTYPES:
        raise EncodingError(f"unknown dtype code {dtype}")
    out = [struct.pack("<I", len(params))]
    for t in params:
        name = t.name.encode("utf-8")
        if len(name) >= 1 << 16 or len(t.shape) > 255:
            raise EncodingError(f"tensor {t.name!r} cannot be encoded")
        out.append(struct.pack("<H", len(name)) + name)
        out.append(struct.pack("<BB", dtype, len(t.shape)))
        out.append(struct.pack(f"<{len(t.shape)}I", *t.shape))
        out.append(t.array.astype(_DTYPES[dtype], copy=False).tobytes(order="C"))
    return b"".join(out)


def decode_params(payload: bytes) -> ParameterSet:
    view = memoryview(payload)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ProtocolError("parameter payload is truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("tensor name is not UTF-8") from None
        dtype, ndims = struct.unpack("<BB", take(2))
        if dtype not in _DTYPES:
            raise ProtocolError(f"unknown dtype code {dtype}")
        dims = struct.unpack(f"<{ndims}I", take(4 * ndims))
        n = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(take(n * _DTYPES[dtype].itemsize), dtype=_DTYPES[dtype])
        tensors.append(Tensor(name, values.astype(np.float64).reshape(dims)))
    if pos != len(view):
        raise ProtocolError(f"{len(view) - pos} trailing bytes after parameter payload")
    return ParameterSet(tensors)


def encode_report(meta: dict, params: ParameterSet | None = None) -> bytes:
    """JSON metadata with an optional parameter block (e.g. a gradient)."""
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    tail = encode_params(params) if params is not None else b""
    return struct.pack("<I", len(text)) + text + tail


def decode_report(payload: bytes) -> tuple[dict, ParameterSet | None]:
    if len(payload) < 4:
        raise ProtocolError("report payload is truncated")
    (n,) = struct.unpack_from("<I", payload)
    if 4 + n > len(payload):
        raise ProtocolError("report payload is truncated")
    try:
        meta = json.loads(payload[4:4 + n].decode("utf-8"))
    except ValueError as exc:
        raise ProtocolError(f"bad report JSON: {exc}") from None
    rest = payload[4 + n:]
    return meta, (decode_params(rest) if rest else None)


# ---------------------------------------------------------------------------
# channels


class Channel:
    """A bidirectional, ordered, frame-oriented link to one peer."""

    def __init__(self):
        self._decoder = FrameDecoder()
        self._ready: list[Frame] = []
        self._send_lock = threading.Lock()
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, msg_type, round: int, sender_id: int, payload: bytes = b"") -> int:
        data = encode(msg_type, round, sender_id, payload)
        with self._send_lock:
            self._write(data)
            self.bytes_sent += len(data)
        return len(data)

    def recv(self, timeout: float | None = None) -> Frame:
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._ready:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            chunk = self._read(remaining)
            if not chunk:
                self._decoder.finish()
                raise ConnectionLost("peer closed the channel")
            self.bytes_received += len(chunk)
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.pop(0)

    def close(self) -> None:
        raise NotImplementedError

    def _write(self, data: bytes) -> None:
        raise NotImplementedError

    def _read(self, timeout: float | None) -> bytes:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass(frozen=True)
class LinkModel:
    """Emulated link: each write sleeps ``latency + bytes / bandwidth``."""

    latency: float = 0.0
    bandwidth: float = 0.0  # bytes per second; 0 = unlimited

    def delay(self, nbytes: int) -> float:
        return self.latency + (nbytes / self.bandwidth if self.bandwidth > 0 else 0.0)


class LoopbackChannel(Channel):
    """In-process channel end; build pairs with :func:`loopback_pair`."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, link: LinkModel | None = None,
                 chunk_size: int | None = None):
        super().__init__()
        self._inbox = inbox
        self._outbox = outbox
        self._link = link
        self._chunk = chunk_size
        self._closed = False

    def _write(self, data: bytes) -> None:
        if self._closed:
            raise ConnectionLost("channel is closed")
        if self._link is not None:
            pause = self._link.delay(len(data))
            if pause > 0:
                time.sleep(pause)
        if self._chunk:
            for i in range(0, len(data), self._chunk):
                self._outbox.put(data[i:i + self._chunk])
        else:
            self._outbox.put(data)

    def _read(self, timeout):
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise RoundTimeout(f"no data within {timeout:.1f}s") from None

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(b"")


def loopback_pair(link: LinkModel | None = None, chunk_size: int | None = None) -> tuple[LoopbackChannel, LoopbackChannel]:
    a_to_b, b_to_a = queue.Queue(), queue.Queue()
    return (LoopbackChannel(b_to_a, a_to_b, link, chunk_size),
            LoopbackChannel(a_to_b, b_to_a, link, chunk_size))


class TcpChannel(Channel):
    def __init__(self, sock: socket.socket):
        super().__init__()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock

    def _write(self, data: bytes) -> None:
        try:
            self.sock.settimeout(None)
            self.sock.sendall(data)
        except OSError as exc:
            raise ConnectionLost(f"send failed: {exc}") from None

    def _read(self, timeout):
        try:
            self.sock.settimeout(timeout)
            return self.sock.recv(1 << 16)
        except socket.timeout:
            raise RoundTimeout(f"no data within {timeout:.1f}s") from None
        except OSError as exc:
            raise ConnectionLost(f"receive failed: {exc}") from None

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, backlog: int = 64):
        self.sock = socket.create_server((host, port), backlog=backlog)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> TcpChannel:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise RoundTimeout(f"no connection within {timeout}s") from None
        conn.settimeout(None)
        return TcpChannel(conn)

    def close(self) -> None:
        self.sock.close()


def connect(host: str, port: int, timeout: float = 10.0, retry_interval: float = 0.05) -> TcpChannel:
    """Dial ``host:port``, retrying until ``timeout`` (peers may start late)."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
            sock.settimeout(None)
            return TcpChannel(sock)
        except OSError as exc:
            if time.monotonic() >= deadline:
                raise ConnectionLost(f"cannot reach {host}:{port}: {exc}") from None
            time.sleep(retry_interval)


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


# ---------------------------------------------------------------------------


def send_params(channel: Channel, params: ParameterSet, msg_type=MessageType.MODEL_UPDATE,
                round: int = 0, sender_id: int = 0, dtype: int = DTYPE_F64) -> int:
    return channel.send(msg_type, round, sender_id, encode_params(params, dtype))


def recv_params(channel: Channel, msg_type=None, timeout: float | None = None) -> tuple[Frame, ParameterSet]:
    frame = channel.recv(timeout)
    if msg_type is not None and frame.msg_type != msg_type:
        raise ProtocolError(f"expected {MessageType(msg_type).name}, got {frame.msg_type.name}")
    return frame, decode_params(frame.payload)
