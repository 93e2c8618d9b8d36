"""Frames, checksums and partial reads.

Every message between nodes is a length-prefixed frame with a CRC32 over its
payload. Model parameters travel as a self-describing tensor list. This demo
encodes a model, damages a copy, and feeds a stream to the decoder in
awkward pieces.

    python3 demos/02_wire_protocol.py
"""

from __future__ import annotations

from fedcrop.errors import ChecksumError
from fedcrop.learner import LearnerConfig, init_model
from fedcrop.transport import MessageType, decode, decode_all, decode_params, encode, encode_params

params = init_model(LearnerConfig(), seed=0)
payload = encode_params(params)
frame = encode(MessageType.MODEL_UPDATE, round=3, sender_id=2, payload=payload)
print(f"{params.size} float64 values -> {len(frame)} bytes on the wire")

back = decode(frame)
print(back.msg_type.name, "round", back.round, "from", back.sender_id,
      "| parameters identical:", decode_params(back.payload).bit_equal(params))

damaged = bytearray(frame)
damaged[100] ^= 0x01
try:
    decode(bytes(damaged))
except ChecksumError as exc:
    print("flipped one bit ->", type(exc).__name__, exc)

# three frames, delivered 7 bytes at a time
stream = b"".join(encode(MessageType.HELLO, 0, i, b'{"id": %d}' % i) for i in range(3))
pieces = [stream[i:i + 7] for i in range(0, len(stream), 7)]
print(len(pieces), "chunks ->", [f.sender_id for f in decode_all(pieces)])
