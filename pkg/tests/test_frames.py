"""Length-prefixed JSON frame codec."""

import json
import socket
import struct
import threading

import pytest
from hypothesis import given, strategies as st

from nefele import frames


def test_encode_decode_round_trip():
    obj = {"t": "ping", "probe": 7, "updates": []}
    assert frames.decode(frames.encode(obj)) == obj


def test_encode_requires_type_field():
    with pytest.raises(frames.FrameError):
        frames.encode({"probe": 7})


def test_length_prefix_is_big_endian():
    data = frames.encode({"t": "x"})
    (n,) = struct.unpack(">I", data[:4])
    assert n == len(data) - 4
    assert json.loads(data[4:]) == {"t": "x"}


def test_decode_rejects_truncated():
    data = frames.encode({"t": "x"})
    with pytest.raises(frames.FrameError):
        frames.decode(data[:-1])
    with pytest.raises(frames.FrameError):
        frames.decode(data + b"junk")
    with pytest.raises(frames.FrameError):
        frames.decode(b"\x00\x00")


def test_decode_rejects_non_dict_and_missing_t():
    for obj in ([1, 2], "s", 4):
        raw = json.dumps(obj).encode()
        with pytest.raises(frames.FrameError):
            frames.decode(struct.pack(">I", len(raw)) + raw)
    raw = b'{"x": 1}'
    with pytest.raises(frames.FrameError):
        frames.decode(struct.pack(">I", len(raw)) + raw)


def test_decode_rejects_invalid_json_and_utf8():
    for raw in (b"{not json", b"\xff\xfe{}"):
        with pytest.raises(frames.FrameError):
            frames.decode(struct.pack(">I", len(raw)) + raw)


def test_oversize_frame_rejected():
    big = struct.pack(">I", frames.MAX_FRAME + 1) + b"x"
    with pytest.raises(frames.FrameError):
        frames.decode(big)


def test_max_payload_fits_through_codec():
    # A full-size binary payload must survive base64 + framing.
    payload = bytes(range(256)) * (frames.MAX_PAYLOAD // 256)
    assert len(payload) == frames.MAX_PAYLOAD
    obj = {"t": "msg", "payload": frames.b64(payload)}
    data = frames.encode(obj)
    assert len(data) <= frames.MAX_FRAME + 4
    back = frames.decode(data)
    assert frames.unb64(back["payload"]) == payload


def test_b64_rejects_garbage():
    with pytest.raises(frames.FrameError):
        frames.unb64("!!!not base64!!!")


@given(st.dictionaries(st.text(max_size=8), st.one_of(
    st.integers(-1000, 1000), st.text(max_size=16), st.booleans(), st.none()),
    max_size=6))
def test_round_trip_property(extra):
    obj = dict(extra)
    obj["t"] = "x"
    assert frames.decode(frames.encode(obj)) == obj


def test_stream_read_write_over_socket():
    a, b = socket.socketpair()
    sent = [{"t": "one", "n": 1}, {"t": "two", "payload": frames.b64(b"\x00\x01")}]
    got = []

    def reader():
        while True:
            f = frames.read_frame(b)
            if f is None:
                return
            got.append(f)

    t = threading.Thread(target=reader)
    t.start()
    for obj in sent:
        frames.write_frame(a, obj)
    a.close()
    t.join(timeout=5)
    b.close()
    assert got == sent


def test_stream_eof_mid_frame_raises():
    a, b = socket.socketpair()
    data = frames.encode({"t": "x", "k": "v"})
    a.sendall(data[:7])
    a.close()
    with pytest.raises(frames.FrameError):
        frames.read_frame(b)
    b.close()


def test_stream_clean_eof_returns_none():
    a, b = socket.socketpair()
    a.close()
    assert frames.read_frame(b) is None
    b.close()
