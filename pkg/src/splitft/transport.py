"""Binary framing, codec, and carriers; the boundary where bytes are counted.

Wire format (little-endian throughout):

    frame   := magic "SFT1" | version u8 | type u8 | length u32 | payload
    mat     := rows u32 | cols u32 | rows*cols floats
    u32s (ids, rounds, counts, ranks) are 4 bytes each

Version 1 carries matrices as f32 (the transmitted precision, applied
only at this boundary); version 2 is the lossless f64 mode. Message
payloads list their fields in declaration order:

    SmashedData        := client_id | round | mat(activations)
    SmashedGrad        := client_id | round | mat(grad)
    AdapterDeltaSet    := client_id | count | delta*
    AggregatedAdapters := count | delta*
    LayerAssignment    := client_id | l_new
    delta              := layer_index | mat(da) | mat(db) | rank
"""

from __future__ import annotations

import socket
import struct
from collections import deque

import numpy as np

from .errors import CodecError, TransportError
from .lora import AdapterDelta
from .messages import (
    AdapterDeltaSet,
    AggregatedAdapters,
    LayerAssignment,
    ProtocolMessage,
    SmashedData,
    SmashedGrad,
)

MAGIC = b"SFT1"
VERSION_F32 = 1
VERSION_F64 = 2
HEADER_LEN = 10  # magic(4) + version(1) + type(1) + length(4)

TYPE_SMASHED_DATA = 1
TYPE_SMASHED_GRAD = 2
TYPE_DELTA_SET = 3
TYPE_AGGREGATED = 4
TYPE_ASSIGNMENT = 5

_TYPE_OF = {
    SmashedData: TYPE_SMASHED_DATA,
    SmashedGrad: TYPE_SMASHED_GRAD,
    AdapterDeltaSet: TYPE_DELTA_SET,
    AggregatedAdapters: TYPE_AGGREGATED,
    LayerAssignment: TYPE_ASSIGNMENT,
}

TYPE_NAMES = {
    TYPE_SMASHED_DATA: "SmashedData",
    TYPE_SMASHED_GRAD: "SmashedGrad",
    TYPE_DELTA_SET: "AdapterDeltaSet",
    TYPE_AGGREGATED: "AggregatedAdapters",
    TYPE_ASSIGNMENT: "LayerAssignment",
}


def _pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _pack_mat(m: np.ndarray, lossless: bool) -> bytes:
    m = np.ascontiguousarray(m, dtype=np.float64)
    rows, cols = m.shape
    data = m.astype("<f8" if lossless else "<f4").tobytes()
    return _pack_u32(rows) + _pack_u32(cols) + data


def _unpack_u32(buf: bytes, off: int) -> tuple[int, int]:
    if off + 4 > len(buf):
        raise CodecError("payload truncated while reading u32")
    return struct.unpack_from("<I", buf, off)[0], off + 4


def _unpack_mat(buf: bytes, off: int, lossless: bool) -> tuple[np.ndarray, int]:
    rows, off = _unpack_u32(buf, off)
    cols, off = _unpack_u32(buf, off)
    width = 8 if lossless else 4
    end = off + rows * cols * width
    if end > len(buf):
        raise CodecError("payload truncated while reading matrix data")
    flat = np.frombuffer(buf, dtype="<f8" if lossless else "<f4", count=rows * cols, offset=off)
    return flat.astype(np.float64).reshape(rows, cols), end


def _pack_delta(d: AdapterDelta, lossless: bool) -> bytes:
    return (
        _pack_u32(d.layer_index)
        + _pack_mat(d.da, lossless)
        + _pack_mat(d.db, lossless)
        + _pack_u32(d.rank)
    )


def _unpack_delta(buf: bytes, off: int, lossless: bool) -> tuple[AdapterDelta, int]:
    layer, off = _unpack_u32(buf, off)
    da, off = _unpack_mat(buf, off, lossless)
    db, off = _unpack_mat(buf, off, lossless)
    rank, off = _unpack_u32(buf, off)
    return AdapterDelta(layer_index=layer, da=da, db=db, rank=rank), off


def encode(msg: ProtocolMessage, lossless: bool = False) -> bytes:
    """Serialize a message into one self-delimiting frame."""
    msg_type = _TYPE_OF[type(msg)]
    if isinstance(msg, SmashedData):
        payload = _pack_u32(msg.client_id) + _pack_u32(msg.round) + _pack_mat(msg.activations, lossless)
    elif isinstance(msg, SmashedGrad):
        payload = _pack_u32(msg.client_id) + _pack_u32(msg.round) + _pack_mat(msg.grad, lossless)
    elif isinstance(msg, AdapterDeltaSet):
        payload = _pack_u32(msg.client_id) + _pack_u32(len(msg.deltas))
        payload += b"".join(_pack_delta(d, lossless) for d in msg.deltas)
    elif isinstance(msg, AggregatedAdapters):
        payload = _pack_u32(len(msg.deltas))
        payload += b"".join(_pack_delta(d, lossless) for d in msg.deltas)
    else:
        payload = _pack_u32(msg.client_id) + _pack_u32(msg.l_new)
    version = VERSION_F64 if lossless else VERSION_F32
    return MAGIC + bytes((version, msg_type)) + _pack_u32(len(payload)) + payload


def decode(frame: bytes) -> ProtocolMessage:
    """Inverse of encode. Raises CodecError on any malformed frame."""
    if len(frame) < HEADER_LEN:
        raise CodecError(f"frame shorter than header: {len(frame)} bytes")
    if frame[:4] != MAGIC:
        raise CodecError(f"bad magic {frame[:4]!r}")
    version, msg_type = frame[4], frame[5]
    if version not in (VERSION_F32, VERSION_F64):
        raise CodecError(f"unknown version {version}")
    lossless = version == VERSION_F64
    (length,) = struct.unpack_from("<I", frame, 6)
    payload = frame[HEADER_LEN:]
    if len(payload) != length:
        raise CodecError(f"payload length {len(payload)} != declared {length}")

    if msg_type == TYPE_SMASHED_DATA:
        cid, off = _unpack_u32(payload, 0)
        rnd, off = _unpack_u32(payload, off)
        mat, off = _unpack_mat(payload, off, lossless)
        return SmashedData(client_id=cid, round=rnd, activations=mat)
    if msg_type == TYPE_SMASHED_GRAD:
        cid, off = _unpack_u32(payload, 0)
        rnd, off = _unpack_u32(payload, off)
        mat, off = _unpack_mat(payload, off, lossless)
        return SmashedGrad(client_id=cid, round=rnd, grad=mat)
    if msg_type == TYPE_DELTA_SET:
        cid, off = _unpack_u32(payload, 0)
        count, off = _unpack_u32(payload, off)
        deltas = []
        for _ in range(count):
            d, off = _unpack_delta(payload, off, lossless)
            deltas.append(d)
        return AdapterDeltaSet(client_id=cid, deltas=tuple(deltas))
    if msg_type == TYPE_AGGREGATED:
        count, off = _unpack_u32(payload, 0)
        deltas = []
        for _ in range(count):
            d, off = _unpack_delta(payload, off, lossless)
            deltas.append(d)
        return AggregatedAdapters(deltas=tuple(deltas))
    if msg_type == TYPE_ASSIGNMENT:
        cid, off = _unpack_u32(payload, 0)
        l_new, off = _unpack_u32(payload, off)
        return LayerAssignment(client_id=cid, l_new=l_new)
    raise CodecError(f"unknown message type {msg_type}")


class Channel:
    """In-memory FIFO between one sender and one receiver, counting bytes."""

    def __init__(self, lossless: bool = False):
        self.lossless = lossless
        self._queue: deque[bytes] = deque()
        self.bytes_sent = 0
        self.closed = False

    def close(self) -> None:
        self.closed = True

    def send(self, msg: ProtocolMessage) -> int:
        if self.closed:
            raise TransportError("channel is closed")
        frame = encode(msg, self.lossless)
        self._queue.append(frame)
        self.bytes_sent += len(frame)
        return len(frame)

    def recv(self) -> ProtocolMessage:
        if not self._queue:
            if self.closed:
                raise TransportError("channel is closed")
            raise TransportError("channel is empty")
        return decode(self._queue.popleft())


def channel_send(channel: Channel, msg: ProtocolMessage) -> int:
    return channel.send(msg)


def channel_recv(channel: Channel) -> ProtocolMessage:
    return channel.recv()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise CodecError(f"stream ended mid-frame ({len(buf)}/{n} bytes)")
        buf += chunk
    return buf


def stream_send(sock: socket.socket, msg: ProtocolMessage, lossless: bool = False) -> int:
    """Write one frame to a byte stream; returns the frame length."""
    frame = encode(msg, lossless)
    try:
        sock.sendall(frame)
    except OSError as exc:
        raise TransportError(f"stream send failed: {exc}") from exc
    return len(frame)


def stream_recv(sock: socket.socket) -> ProtocolMessage:
    """Read exactly one frame from a byte stream and decode it."""
    try:
        header = _recv_exact(sock, HEADER_LEN)
        (length,) = struct.unpack_from("<I", header, 6)
        payload = _recv_exact(sock, length) if length else b""
    except OSError as exc:
        raise TransportError(f"stream recv failed: {exc}") from exc
    return decode(header + payload)


class MemoryCarrier:
    """Round-trips messages through the codec in process."""

    def __init__(self, lossless: bool):
        self.lossless = lossless

    def transfer(self, msg: ProtocolMessage) -> tuple[ProtocolMessage, int]:
        frame = encode(msg, self.lossless)
        return decode(frame), len(frame)

    def close(self) -> None:
        pass


class StreamCarrier:
    """Round-trips messages through a real local byte stream.

    Send and receive are interleaved so frames larger than the kernel
    socket buffer cannot deadlock the single-threaded simulator.
    """

    def __init__(self, lossless: bool):
        self.lossless = lossless
        self._tx, self._rx = socket.socketpair()
        self._tx.setblocking(False)

    def transfer(self, msg: ProtocolMessage) -> tuple[ProtocolMessage, int]:
        frame = encode(msg, self.lossless)
        sent = 0
        received = bytearray()
        while sent < len(frame):
            try:
                sent += self._tx.send(frame[sent:])
            except BlockingIOError:
                received += self._rx.recv(65536)
        while len(received) < len(frame):
            received += self._rx.recv(65536)
        return decode(bytes(received)), len(frame)

    def close(self) -> None:
        self._tx.close()
        self._rx.close()


def make_carrier(kind: str, lossless: bool):
    if kind == "memory":
        return MemoryCarrier(lossless)
    if kind == "stream":
        return StreamCarrier(lossless)
    raise TransportError(f"unknown carrier {kind!r}")
