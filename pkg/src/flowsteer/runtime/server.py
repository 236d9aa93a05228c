"""Console endpoint: duplex JSON protocol over TCP.

Two framings share one message schema: raw length-prefixed JSON ("lp") and
WebSocket text frames ("ws") for browser clients. The protocol version is
exchanged in a hello message; a mismatch refuses the connection.
"""

from __future__ import annotations

import json
import socket
import threading

from flowsteer.data.serialize import save_episode_file

from .protocol import (
    PROTOCOL_VERSION, MessageReader, ProtocolMessage, WsReader, decode_body,
    encode_frame, encode_message, websocket_accept_key, ws_encode_text,
)


class _Conn:
    """One client connection; framing-aware send/receive."""

    def __init__(self, sock: socket.socket, framing: str):
        self.sock = sock
        self.framing = framing
        self.send_lock = threading.Lock()
        self.out_seq = 0
        self.in_last = -1
        self.greeted = False
        self.closed = False

    def handshake(self) -> bool:
        if self.framing != "ws":
            return True
        data = b""
        while b"\r\n\r\n" not in data:
            part = self.sock.recv(4096)
            if not part:
                return False
            data += part
        key = None
        for line in data.split(b"\r\n"):
            if line.lower().startswith(b"sec-websocket-key:"):
                key = line.split(b":", 1)[1].strip().decode()
        if key is None:
            return False
        accept = websocket_accept_key(key)
        self.sock.sendall(
            b"HTTP/1.1 101 Switching Protocols\r\n"
            b"Upgrade: websocket\r\nConnection: Upgrade\r\n"
            b"Sec-WebSocket-Accept: " + accept.encode() + b"\r\n\r\n")
        return True

    def send(self, kind: str, payload: dict) -> None:
        if self.closed:
            return
        with self.send_lock:
            msg = ProtocolMessage(kind, self.out_seq, payload)
            self.out_seq += 1
            try:
                if self.framing == "ws":
                    body = json.dumps(
                        {"kind": msg.kind, "seq": msg.seq,
                         "payload": msg.payload},
                        separators=(",", ":"), sort_keys=True).encode()
                    self.sock.sendall(ws_encode_text(body))
                else:
                    self.sock.sendall(encode_message(msg))
            except OSError:
                self.closed = True

    def messages(self):
        """Generator of inbound ProtocolMessages (or ('bad', exc) markers)."""
        reader = WsReader() if self.framing == "ws" else MessageReader()
        while True:
            try:
                data = self.sock.recv(65536)
            except OSError:
                return
            if not data:
                return
            if self.framing == "ws":
                for opcode, payload in reader.feed(data):
                    if opcode == 8:  # close
                        return
                    if opcode not in (1, 2):
                        continue
                    yield self._parse(payload)
            else:
                chunks, bad = [], None
                try:
                    chunks = reader.feed(data)
                except ValueError as e:
                    yield ("bad", e)
                    continue
                for msg in chunks:
                    yield self._check(msg)

    def _parse(self, body: bytes):
        try:
            return self._check(decode_body(body))
        except ValueError as e:
            return ("bad", e)

    def _check(self, msg):
        if isinstance(msg, tuple):
            return msg
        if msg.seq <= self.in_last:
            return ("bad", ValueError(f"sequence {msg.seq} out of order"))
        self.in_last = msg.seq
        return msg


class ConsoleServer:
    """Accepts console clients and bridges them onto runtime sessions."""

    def __init__(self, session_factory, out_dir=None, host: str = "127.0.0.1",
                 port: int = 0, framing: str = "ws", frame_decimation: int = 1,
                 vocabulary=None):
        if framing not in ("ws", "lp"):
            raise ValueError("framing must be 'ws' or 'lp'")
        self.session_factory = session_factory
        self.out_dir = out_dir
        self.vocabulary = list(vocabulary or [])
        self.framing = framing
        self.frame_decimation = max(1, frame_decimation)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(4)
        self.address = self._sock.getsockname()
        self._threads = []
        self._stopping = False
        self.session = None
        self._run_thread = None
        self.saved_paths = []

    def start(self):
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)
        return self.address

    def close(self):
        self._stopping = True
        try:
            self._sock.close()
        except OSError:
            pass
        if self.session is not None:
            self.session.stop()
        if self._run_thread is not None:
            self._run_thread.join(timeout=10)

    # -- internals ------------------------------------------------------------

    def _accept_loop(self):
        while not self._stopping:
            try:
                sock, _ = self._sock.accept()
            except OSError:
                return
            t = threading.Thread(target=self._serve_client, args=(sock,),
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_client(self, sock):
        conn = _Conn(sock, self.framing)
        try:
            if not conn.handshake():
                sock.close()
                return
            for msg in conn.messages():
                if isinstance(msg, tuple):  # malformed: reply, keep connection
                    conn.send("error", {"message": str(msg[1])})
                    continue
                if not conn.greeted:
                    if (msg.kind != "hello" or
                            msg.payload.get("protocol") != PROTOCOL_VERSION):
                        conn.send("error", {"message": "protocol mismatch",
                                            "expected": PROTOCOL_VERSION})
                        return  # refuse the connection
                    conn.greeted = True
                    conn.send("ack", {"of": msg.seq,
                                      "protocol": PROTOCOL_VERSION,
                                      "vocabulary": self.vocabulary})
                    continue
                self._handle(conn, msg)
        finally:
            conn.closed = True
            try:
                sock.close()
            except OSError:
                pass

    def _handle(self, conn: _Conn, msg: ProtocolMessage):
        if msg.kind == "start_episode":
            if self.session is not None and self.session.running:
                conn.send("error", {"of": msg.seq,
                                    "message": "episode already running"})
                return
            self.session = self.session_factory()
            self._attach_stream(conn, self.session)
            self._run_thread = threading.Thread(
                target=self._run_session, args=(conn, self.session),
                daemon=True)
            self._run_thread.start()
            conn.send("ack", {"of": msg.seq})
        elif msg.kind == "instruction":
            text = msg.payload.get("text", "")
            try:
                step = self.session.submit_instruction(text) \
                    if self.session else None
                if step is None:
                    raise ValueError("no episode running")
            except ValueError as e:
                conn.send("error", {"of": msg.seq, "message": str(e)})
                return
            conn.send("ack", {"of": msg.seq, "step": step, "text": text})
        elif msg.kind == "stop_episode":
            if self.session is not None:
                self.session.stop()
                if self._run_thread is not None:
                    self._run_thread.join(timeout=30)
            conn.send("ack", {"of": msg.seq,
                              "saved": self.saved_paths[-1]
                              if self.saved_paths else None})
        elif msg.kind == "hello":
            conn.send("ack", {"of": msg.seq, "protocol": PROTOCOL_VERSION,
                              "vocabulary": self.vocabulary})
        else:
            conn.send("error", {"of": msg.seq,
                                "message": f"unexpected kind {msg.kind!r}"})

    def _attach_stream(self, conn: _Conn, session):
        decim = self.frame_decimation

        def listener(name, payload):
            if name == "frame_update":
                if payload["step"] % decim:
                    return
                conn.send("frame_update", {
                    "step": payload["step"],
                    "views": {v: encode_frame(f)
                              for v, f in payload["views"].items()}})
            elif name == "state_update":
                conn.send("state_update", {
                    "step": payload["step"], "progress": payload["progress"],
                    "subtask": payload["subtask"],
                    "context_version": payload["context_version"]})
                conn.send("progress_update", {"step": payload["step"],
                                              "progress": payload["progress"]})
            elif name == "subgoal_preview":
                conn.send("subgoal_preview", {
                    "views": {v: encode_frame(f)
                              for v, f in payload["frames"].items()}})

        session.listeners.append(listener)

    def _run_session(self, conn: _Conn, session):
        result = session.run()
        if self.out_dir is not None:
            from flowsteer.data.manifest import episode_filename
            path = str(self.out_dir / episode_filename(
                result.episode.episode_id))
            save_episode_file(path, result.episode)
            self.saved_paths.append(path)
        conn.send("state_update", {"step": result.steps,
                                   "progress": result.progress,
                                   "subtask": None,
                                   "context_version": -1,
                                   "status": result.status})
        self.last_result = result
