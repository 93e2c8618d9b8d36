from __future__ import annotations

import struct
import threading
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcrop import transport
from fedcrop.errors import ChecksumError, ConnectionLost, EncodingError, ProtocolError, TruncationError
from fedcrop.params import ParameterSet
from fedcrop.transport import (FRAME_OVERHEAD, Frame, FrameDecoder, MessageType, decode, decode_all,
                               decode_params, encode, encode_params, loopback_pair)


def sample_params(seed=0):
    rng = np.random.default_rng(seed)
    return ParameterSet.from_arrays({"lstm/W_forget": rng.normal(size=(3, 5)), "b": rng.normal(size=3),
                                     "out/W": rng.normal(size=(2, 2, 2))})


def test_empty_frame_layout():
    raw = encode(MessageType.HELLO, 7, 9)
    assert len(raw) == FRAME_OVERHEAD == 26
    assert raw[:4] == b"FLMU" and raw[4] == 1 and raw[5] == 0x01
    assert struct.unpack("<IIQ", raw[6:22]) == (7, 9, 0)
    assert raw[22:] == struct.pack("<I", zlib.crc32(b""))


def test_header_fields_little_endian():
    raw = encode(MessageType.MODEL_UPDATE, 0x01020304, 0x0A0B0C0D, b"xyz")
    assert raw[6:10] == bytes([4, 3, 2, 1])
    assert raw[10:14] == bytes([0x0D, 0x0C, 0x0B, 0x0A])
    assert raw[14:22] == (3).to_bytes(8, "little")
    assert raw[22:25] == b"xyz"


def test_message_type_codes():
    assert [m.value for m in MessageType] == list(range(1, 8))
    assert MessageType.RELEASE == 4 and MessageType.PREDICT_RESPONSE == 7


@settings(max_examples=200, deadline=None)
@given(mtype=st.sampled_from(list(MessageType)), rnd=st.integers(0, 2**32 - 1),
       sender=st.integers(0, 2**32 - 1), payload=st.binary(max_size=300))
def test_round_trip(mtype, rnd, sender, payload):
    assert decode(encode(mtype, rnd, sender, payload)) == Frame(mtype, rnd, sender, payload)


def test_byte_at_a_time():
    raw = encode(MessageType.MODEL_PARAMS, 3, 1, b"payload bytes")
    assert decode([raw[i:i + 1] for i in range(len(raw))]) == decode(raw)


def test_back_to_back_frames():
    a = encode(MessageType.MODEL_UPDATE, 1, 2, b"first")
    b = encode(MessageType.METRICS_REPORT, 1, 2, b"second")
    frames = decode_all(a + b)
    assert [f.payload for f in frames] == [b"first", b"second"]


def test_bad_magic_version_type():
    raw = bytearray(encode(MessageType.HELLO, 0, 0, b"x"))
    with pytest.raises(ProtocolError, match="magic"):
        decode(b"XXXX" + bytes(raw[4:]))
    bad = bytearray(raw)
    bad[4] = 2
    with pytest.raises(ProtocolError, match="version"):
        decode(bytes(bad))
    bad = bytearray(raw)
    bad[5] = 0x09
    with pytest.raises(ProtocolError, match="type"):
        decode(bytes(bad))


def test_every_payload_flip_detected():
    raw = encode(MessageType.MODEL_UPDATE, 1, 1, bytes(range(40)))
    for pos in range(22, 22 + 40):
        for bit in range(8):
            bad = bytearray(raw)
            bad[pos] ^= 1 << bit
            with pytest.raises(ChecksumError):
                decode(bytes(bad))


def test_truncated_stream():
    raw = encode(MessageType.HELLO, 0, 0, b"abc")
    with pytest.raises(TruncationError):
        decode_all(raw[:-1])
    dec = FrameDecoder()
    assert dec.feed(raw[:10]) == []
    assert dec.pending == 10


def test_encode_rejects_bad_input():
    with pytest.raises(EncodingError):
        encode(0x42, 0, 0)
    with pytest.raises(EncodingError):
        encode(MessageType.HELLO, 2**32, 0)


def test_oversized_payload_rejected(monkeypatch):
    monkeypatch.setattr(transport, "MAX_PAYLOAD", 8)
    with pytest.raises(EncodingError):
        encode(MessageType.HELLO, 0, 0, b"123456789")


def test_param_payload_layout():
    p = ParameterSet.from_arrays({"ab": np.array([[1.0, 2.0]])})
    raw = encode_params(p)
    expected = (struct.pack("<I", 1) + struct.pack("<H", 2) + b"ab" + bytes([1, 2])
                + struct.pack("<II", 1, 2) + struct.pack("<2d", 1.0, 2.0))
    assert raw == expected
    raw32 = encode_params(p, transport.DTYPE_F32)
    assert raw32[8] == 0 and raw32.endswith(struct.pack("<2f", 1.0, 2.0))


def test_params_round_trip_bit_exact():
    p = sample_params()
    q = decode_params(encode_params(p))
    assert p.bit_equal(q) and q.names == p.names


def test_empty_parameter_set():
    q = decode_params(encode_params(ParameterSet([])))
    assert len(q) == 0
    assert decode(encode(MessageType.MODEL_PARAMS, 0, 0, encode_params(ParameterSet([])))).payload == \
        struct.pack("<I", 0)


def test_truncated_param_payload():
    raw = encode_params(sample_params())
    with pytest.raises(ProtocolError):
        decode_params(raw[:-3])
    with pytest.raises(ProtocolError):
        decode_params(raw + b"\0")


def test_report_payload():
    meta = {"loss": 0.5, "n": 3}
    back, params = transport.decode_report(transport.encode_report(meta, sample_params()))
    assert back == meta and params.bit_equal(sample_params())
    assert transport.decode_report(transport.encode_report(meta))[1] is None


@pytest.mark.parametrize("chunk", [None, 1, 7, 4096])
def test_loopback_round_trip(chunk):
    a, b = loopback_pair(chunk_size=chunk)
    p = sample_params(3)
    transport.send_params(a, p, MessageType.MODEL_UPDATE, 4, 2)
    frame, q = transport.recv_params(b, MessageType.MODEL_UPDATE, timeout=1)
    assert (frame.round, frame.sender_id) == (4, 2)
    assert p.bit_equal(q)
    assert a.bytes_sent == b.bytes_received


def test_loopback_close_is_connection_loss():
    a, b = loopback_pair()
    a.close()
    with pytest.raises(ConnectionLost):
        b.recv(timeout=1)
    with pytest.raises(ConnectionLost):
        a.send(MessageType.HELLO, 0, 0)


def test_timeout_is_round_error():
    _, b = loopback_pair()
    with pytest.raises(transport.RoundTimeout):
        b.recv(timeout=0.05)


def test_unexpected_message_type():
    a, b = loopback_pair()
    a.send(MessageType.HELLO, 0, 0)
    with pytest.raises(ProtocolError):
        transport.recv_params(b, MessageType.MODEL_UPDATE, timeout=1)


def test_tcp_round_trip():
    listener = transport.TcpListener("127.0.0.1", 0)
    host, port = listener.address
    p = sample_params(5)
    got = {}

    def serve():
        ch = listener.accept(timeout=5)
        got["frame"], got["params"] = transport.recv_params(ch, timeout=5)
        transport.send_params(ch, got["params"], MessageType.MODEL_PARAMS, 9, 0)
        ch.close()

    t = threading.Thread(target=serve)
    t.start()
    ch = transport.connect(host, port, timeout=5)
    transport.send_params(ch, p, MessageType.MODEL_UPDATE, 1, 3)
    frame, echoed = transport.recv_params(ch, timeout=5)
    t.join()
    listener.close()
    assert got["params"].bit_equal(p) and echoed.bit_equal(p)
    assert frame.round == 9
    with pytest.raises(ConnectionLost):
        ch.recv(timeout=5)
    ch.close()


def test_tcp_truncated_frame_detected():
    listener = transport.TcpListener("127.0.0.1", 0)
    host, port = listener.address

    def serve():
        ch = listener.accept(timeout=5)
        ch.sock.sendall(encode(MessageType.HELLO, 0, 0, b"abcdef")[:-2])
        ch.close()

    t = threading.Thread(target=serve)
    t.start()
    ch = transport.connect(host, port, timeout=5)
    with pytest.raises(TruncationError):
        ch.recv(timeout=5)
    t.join()
    listener.close()
    ch.close()


def test_unreachable_peer():
    listener = transport.TcpListener("127.0.0.1", 0)
    port = listener.address[1]
    listener.close()
    with pytest.raises(ConnectionLost):
        transport.connect("127.0.0.1", port, timeout=0.2)


def test_parse_address():
    assert transport.parse_address("10.0.0.1:7000") == ("10.0.0.1", 7000)
    with pytest.raises(ValueError):
        transport.parse_address("nohost")
