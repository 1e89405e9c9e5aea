"""Common frame format: 4-byte big-endian length prefix + UTF-8 JSON body.

Every transport in the system (gossip datagrams, inter-node TCP streams, the
local control socket) carries these frames.  Each body is a JSON object with a
mandatory "t" field naming the frame type.  Message payload bytes travel
base64-encoded under "payload".
"""

from __future__ import annotations

import base64
import json
import socket
import struct

# Payload cap is 1 MiB; frames must also fit the base64-inflated payload plus
# a small header allowance.
MAX_PAYLOAD = 1 << 20
MAX_FRAME = (MAX_PAYLOAD * 4) // 3 + 4096

_LEN = struct.Struct(">I")


class FrameError(Exception):
    pass


def encode(obj: dict) -> bytes:
    if "t" not in obj:
        raise FrameError("frame object missing 't'")
    body = json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise FrameError(f"frame too large: {len(body)} bytes")
    return _LEN.pack(len(body)) + body


def decode(data: bytes) -> dict:
    """Decode one complete frame from `data` (e.g. a UDP datagram)."""
    if len(data) < 4:
        raise FrameError("short frame header")
    (n,) = _LEN.unpack_from(data)
    if n > MAX_FRAME:
        raise FrameError(f"declared frame length {n} exceeds limit")
    if len(data) != 4 + n:
        raise FrameError(f"frame length mismatch: declared {n}, got {len(data) - 4}")
    return _decode_body(data[4:])


def _decode_body(body: bytes) -> dict:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"bad frame body: {exc}") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("t"), str):
        raise FrameError("frame body must be an object with a string 't'")
    return obj


def read_frame(sock: socket.socket) -> dict | None:
    """Read one frame from a stream socket; None on clean EOF at a boundary."""
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (n,) = _LEN.unpack(header)
    if n > MAX_FRAME:
        raise FrameError(f"declared frame length {n} exceeds limit")
    body = _read_exact(sock, n)
    if body is None:
        raise FrameError("EOF mid-frame")
    return _decode_body(body)


def write_frame(sock: socket.socket, obj: dict) -> None:
    sock.sendall(encode(obj))


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    """Read exactly n bytes; None on EOF before the first byte, error mid-read."""
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if got == 0:
                return None
            raise FrameError("EOF mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def b64(payload: bytes) -> str:
    return base64.b64encode(payload).decode("ascii")


def unb64(s: str) -> bytes:
    try:
        return base64.b64decode(s.encode("ascii"), validate=True)
    except Exception as exc:
        raise FrameError(f"bad base64 payload: {exc}") from exc
