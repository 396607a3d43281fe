import socket
import struct

import numpy as np
import pytest

from splitft.errors import CodecError, TransportError
from splitft.lora import AdapterDelta
from splitft.messages import (
    AdapterDeltaSet,
    AggregatedAdapters,
    LayerAssignment,
    SmashedData,
    SmashedGrad,
)
from splitft.numkit import Rng, gaussian
from splitft.transport import (
    HEADER_LEN,
    MAGIC,
    Channel,
    channel_recv,
    channel_send,
    decode,
    encode,
    stream_recv,
    stream_send,
)


def sample_messages(seed=0):
    rng = Rng(seed)
    delta = AdapterDelta(layer_index=2, da=gaussian(rng, 4, 2, 1.0),
                         db=gaussian(rng, 2, 4, 1.0), rank=2)
    return [
        SmashedData(client_id=1, round=3, activations=gaussian(rng, 6, 4, 1.0)),
        SmashedGrad(client_id=1, round=3, grad=gaussian(rng, 6, 4, 1.0)),
        AdapterDeltaSet(client_id=2, deltas=(delta,)),
        AggregatedAdapters(deltas=(delta, delta)),
        LayerAssignment(client_id=4, l_new=3),
    ]


def assert_message_equal(a, b, exact):
    assert type(a) is type(b)
    for field in a.__dataclass_fields__:
        va, vb = getattr(a, field), getattr(b, field)
        if isinstance(va, np.ndarray):
            if exact:
                assert np.array_equal(va, vb)
            else:
                assert np.array_equal(va.astype(np.float32), vb.astype(np.float32))
        elif isinstance(va, tuple):
            assert len(va) == len(vb)
            for da, db in zip(va, vb):
                assert_message_equal(da, db, exact)
        else:
            assert va == vb


class TestCodec:
    @pytest.mark.parametrize("lossless", [False, True])
    def test_round_trip_all_types(self, lossless):
        for msg in sample_messages():
            out = decode(encode(msg, lossless))
            assert_message_equal(msg, out, exact=lossless)

    def test_f32_narrowing_applied(self):
        value = 0.1  # not representable in f32
        msg = SmashedData(client_id=0, round=0, activations=np.array([[value]]))
        out = decode(encode(msg, lossless=False))
        assert out.activations[0, 0] == np.float64(np.float32(value))
        assert out.activations[0, 0] != value
        exact = decode(encode(msg, lossless=True))
        assert exact.activations[0, 0] == value

    def test_known_float_bytes_at_documented_offset(self):
        msg = SmashedData(client_id=0, round=0, activations=np.array([[1.0]]))
        frame = encode(msg)
        # payload: client_id(4) round(4) rows(4) cols(4) then f32 data
        data_offset = HEADER_LEN + 16
        assert frame[data_offset : data_offset + 4] == bytes([0x00, 0x00, 0x80, 0x3F])

    def test_header_layout(self):
        msg = LayerAssignment(client_id=7, l_new=2)
        frame = encode(msg)
        assert frame[:4] == MAGIC == b"SFT1"
        assert frame[4] == 1  # f32 version
        assert frame[5] == 5  # LayerAssignment tag
        (length,) = struct.unpack_from("<I", frame, 6)
        assert length == len(frame) - HEADER_LEN == 8

    def test_empty_delta_set_fixed_size(self):
        frame = encode(AdapterDeltaSet(client_id=3, deltas=()))
        (length,) = struct.unpack_from("<I", frame, 6)
        assert length == 8  # client_id + count

    def test_truncated_frame(self):
        frame = encode(sample_messages()[0])
        with pytest.raises(CodecError):
            decode(frame[: len(frame) - 3])
        with pytest.raises(CodecError):
            decode(frame[:6])

    def test_bad_magic(self):
        frame = bytearray(encode(sample_messages()[4]))
        frame[0] = 0x00
        with pytest.raises(CodecError):
            decode(bytes(frame))

    def test_self_delimiting_concatenation(self):
        msgs = sample_messages()
        blob = b"".join(encode(m) for m in msgs)
        decoded = []
        off = 0
        while off < len(blob):
            (length,) = struct.unpack_from("<I", blob, off + 6)
            decoded.append(decode(blob[off : off + HEADER_LEN + length]))
            off += HEADER_LEN + length
        assert len(decoded) == len(msgs)
        for a, b in zip(msgs, decoded):
            assert_message_equal(a, b, exact=False)


class TestChannel:
    def test_fifo_order(self):
        ch = Channel()
        msgs = sample_messages()
        for m in msgs:
            channel_send(ch, m)
        for m in msgs:
            assert_message_equal(m, channel_recv(ch), exact=False)

    def test_byte_counter_is_exact(self):
        ch = Channel()
        msg = SmashedData(client_id=0, round=1, activations=np.zeros((2 * 8, 16)))
        n = channel_send(ch, msg)
        # matrix data alone is 2*8*16 f32 = 1024 bytes
        overhead = HEADER_LEN + 4 + 4 + 4 + 4
        assert n == 1024 + overhead
        assert ch.bytes_sent == len(encode(msg))

    def test_closed_channel(self):
        ch = Channel()
        ch.close()
        with pytest.raises(TransportError):
            channel_send(ch, sample_messages()[4])
        with pytest.raises(TransportError):
            channel_recv(ch)


class TestStreamCarrier:
    def test_stream_delivers_byte_identical_frames(self):
        tx, rx = socket.socketpair()
        try:
            for msg in sample_messages():
                frame = encode(msg)
                stream_send(tx, msg)
                got = rx.recv(len(frame), socket.MSG_WAITALL)
                assert got == frame
        finally:
            tx.close()
            rx.close()

    def test_stream_recv_round_trip(self):
        tx, rx = socket.socketpair()
        try:
            for msg in sample_messages():
                stream_send(tx, msg, lossless=True)
                assert_message_equal(msg, stream_recv(rx), exact=True)
        finally:
            tx.close()
            rx.close()

    def test_truncated_stream(self):
        tx, rx = socket.socketpair()
        try:
            frame = encode(sample_messages()[0])
            tx.sendall(frame[: len(frame) - 5])
            tx.close()
            with pytest.raises(CodecError):
                stream_recv(rx)
        finally:
            rx.close()

    def test_large_frame_does_not_deadlock(self):
        from splitft.transport import StreamCarrier

        carrier = StreamCarrier(lossless=True)
        big = SmashedData(client_id=0, round=0,
                          activations=gaussian(Rng(1), 512, 512, 1.0))
        out, n = carrier.transfer(big)
        assert n == len(encode(big, lossless=True))
        assert np.array_equal(out.activations, big.activations)
        carrier.close()
