"""Control-socket wire format.

Frames are a 4-byte big-endian length prefix followed by UTF-8 JSON with a
mandatory "t" field; message payload bytes travel base64-encoded under
"payload".  This module implements the documented format independently so the
SDK stays installable without the server package.
"""

from __future__ import annotations

import base64
import json
import socket
import struct

MAX_PAYLOAD = 1 << 20
MAX_FRAME = (MAX_PAYLOAD * 4) // 3 + 4096

_LEN = struct.Struct(">I")


class WireError(Exception):
    pass


def encode(obj: dict) -> bytes:
    if "t" not in obj:
        raise WireError("frame object missing 't'")
    body = json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise WireError(f"frame too large: {len(body)} bytes")
    return _LEN.pack(len(body)) + body


def read_frame(sock: socket.socket) -> dict | None:
    """Read one frame; None on clean EOF at a frame boundary."""
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (n,) = _LEN.unpack(header)
    if n > MAX_FRAME:
        raise WireError(f"declared frame length {n} exceeds limit")
    body = _read_exact(sock, n)
    if body is None:
        raise WireError("EOF mid-frame")
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"bad frame body: {exc}") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("t"), str):
        raise WireError("frame body must be an object with a string 't'")
    return obj


def write_frame(sock: socket.socket, obj: dict) -> None:
    sock.sendall(encode(obj))


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if got == 0:
                return None
            raise WireError("EOF mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def b64(payload: bytes) -> str:
    return base64.b64encode(payload).decode("ascii")


def unb64(s: str) -> bytes:
    try:
        return base64.b64decode(s.encode("ascii"), validate=True)
    except Exception as exc:
        raise WireError(f"bad base64 payload: {exc}") from exc
