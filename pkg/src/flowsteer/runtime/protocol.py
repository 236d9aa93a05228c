"""Wire protocol: length-prefixed JSON messages, plus WebSocket framing.

Every message is a JSON object {"kind", "seq", "payload"}; kinds are closed,
sequence numbers strictly increase per connection direction. Frames travel
as base64 of the raw little-endian float32 grid plus a shape triple.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

PROTOCOL_VERSION = "flowsteer-console/1"

KINDS = frozenset({
    "hello", "frame_update", "state_update", "instruction", "start_episode",
    "stop_episode", "subgoal_preview", "progress_update", "ack", "error",
})


@dataclass
class ProtocolMessage:
    kind: str
    seq: int
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if self.seq < 0:
            raise ValueError("negative sequence number")


def encode_message(msg: ProtocolMessage) -> bytes:
    body = json.dumps({"kind": msg.kind, "seq": msg.seq,
                       "payload": msg.payload},
                      separators=(",", ":"), sort_keys=True).encode()
    return struct.pack("<I", len(body)) + body


def decode_body(body: bytes) -> ProtocolMessage:
    obj = json.loads(body.decode())
    if not isinstance(obj, dict) or set(obj) != {"kind", "seq", "payload"}:
        raise ValueError("malformed message object")
    return ProtocolMessage(obj["kind"], int(obj["seq"]), obj["payload"])


class MessageReader:
    """Incremental decoder for the length-prefixed stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < 4:
                return out
            (n,) = struct.unpack("<I", self._buf[:4])
            if len(self._buf) < 4 + n:
                return out
            body = bytes(self._buf[4:4 + n])
            del self._buf[:4 + n]
            out.append(decode_body(body))


def encode_frame(frame: np.ndarray) -> dict:
    frame = np.asarray(frame, dtype=np.float32)
    return {"shape": list(frame.shape),
            "data": base64.b64encode(frame.astype("<f4").tobytes()).decode()}


def decode_frame(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(obj["shape"]).copy()


class SequenceChecker:
    """Enforces strictly increasing sequence numbers on one direction."""

    def __init__(self):
        self.last = -1

    def check(self, msg: ProtocolMessage) -> ProtocolMessage:
        if msg.seq <= self.last:
            raise ValueError(f"sequence {msg.seq} not greater than {self.last}")
        self.last = msg.seq
        return msg


# -- WebSocket framing (for browser clients) ----------------------------------

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


def websocket_accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _WS_GUID).encode()).digest()
    return base64.b64encode(digest).decode()


def ws_encode_text(payload: bytes) -> bytes:
    """Server-to-client unmasked text frame (no fragmentation)."""
    header = bytearray([0x81])
    n = len(payload)
    if n < 126:
        header.append(n)
    elif n < 1 << 16:
        header.append(126)
        header += struct.pack(">H", n)
    else:
        header.append(127)
        header += struct.pack(">Q", n)
    return bytes(header) + payload


class WsReader:
    """Incremental client-to-server frame decoder (masked frames required)."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        """Returns a list of (opcode, payload_bytes)."""
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < 2:
                return out
            b0, b1 = self._buf[0], self._buf[1]
            opcode = b0 & 0x0F
            masked = bool(b1 & 0x80)
            n = b1 & 0x7F
            pos = 2
            if n == 126:
                if len(self._buf) < 4:
                    return out
                (n,) = struct.unpack(">H", self._buf[2:4])
                pos = 4
            elif n == 127:
                if len(self._buf) < 10:
                    return out
                (n,) = struct.unpack(">Q", self._buf[2:10])
                pos = 10
            need = pos + (4 if masked else 0) + n
            if len(self._buf) < need:
                return out
            if masked:
                mask = self._buf[pos:pos + 4]
                raw = bytearray(self._buf[pos + 4:need])
                for i in range(len(raw)):
                    raw[i] ^= mask[i % 4]
                payload = bytes(raw)
            else:
                payload = bytes(self._buf[pos:need])
            del self._buf[:need]
            out.append((opcode, payload))
