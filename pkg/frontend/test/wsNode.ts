/**
 * Minimal WebSocket client over a raw TCP socket for Node-based tests:
 * performs the HTTP upgrade, sends masked text frames, parses the server's
 * unmasked frames. Presents the SocketLike interface the console client
 * expects, so tests exercise the exact production message path.
 */

import { randomBytes } from "node:crypto";
import { Socket, connect } from "node:net";

import { SocketLike } from "../src/client.js";

export function nodeWebSocket(url: string): SocketLike {
  const m = /^ws:\/\/([^:/]+):(\d+)/.exec(url);
  if (!m) throw new Error(`unsupported url ${url}`);
  const host = m[1]!;
  const port = Number(m[2]);

  let upgraded = false;
  let buf = Buffer.alloc(0);
  const sock: Socket = connect(port, host);

  const like: SocketLike = {
    onopen: null,
    onmessage: null,
    onclose: null,
    send(text: string) {
      sock.write(encodeClientFrame(Buffer.from(text, "utf8")));
    },
    close() {
      sock.end();
    },
  };

  sock.on("connect", () => {
    const key = randomBytes(16).toString("base64");
    sock.write(
      `GET / HTTP/1.1\r\nHost: ${host}:${port}\r\n` +
        "Upgrade: websocket\r\nConnection: Upgrade\r\n" +
        `Sec-WebSocket-Key: ${key}\r\nSec-WebSocket-Version: 13\r\n\r\n`,
    );
  });

  sock.on("data", (data: Buffer) => {
    buf = Buffer.concat([buf, data]);
    if (!upgraded) {
      const end = buf.indexOf("\r\n\r\n");
      if (end === -1) return;
      const header = buf.subarray(0, end).toString();
      buf = buf.subarray(end + 4);
      if (!/ 101 /.test(header)) {
        sock.destroy();
        return;
      }
      upgraded = true;
      like.onopen?.();
    }
    let frame = parseServerFrame(buf);
    while (frame) {
      buf = buf.subarray(frame.consumed);
      if (frame.opcode === 8) {
        sock.end();
        return;
      }
      if (frame.opcode === 1) {
        like.onmessage?.(frame.payload.toString("utf8"));
      }
      frame = parseServerFrame(buf);
    }
  });

  sock.on("close", () => like.onclose?.());
  sock.on("error", () => undefined); // close handler covers teardown

  return like;
}

function encodeClientFrame(payload: Buffer): Buffer {
  const mask = randomBytes(4);
  const n = payload.length;
  let header: Buffer;
  if (n < 126) {
    header = Buffer.from([0x81, 0x80 | n]);
  } else if (n < 1 << 16) {
    header = Buffer.alloc(4);
    header[0] = 0x81;
    header[1] = 0x80 | 126;
    header.writeUInt16BE(n, 2);
  } else {
    header = Buffer.alloc(10);
    header[0] = 0x81;
    header[1] = 0x80 | 127;
    header.writeBigUInt64BE(BigInt(n), 2);
  }
  const masked = Buffer.from(payload);
  for (let i = 0; i < masked.length; i++) {
    masked[i] = masked[i]! ^ mask[i % 4]!;
  }
  return Buffer.concat([header, mask, masked]);
}

function parseServerFrame(
  buf: Buffer,
): { opcode: number; payload: Buffer; consumed: number } | null {
  if (buf.length < 2) return null;
  const opcode = buf[0]! & 0x0f;
  let n = buf[1]! & 0x7f;
  let pos = 2;
  if (n === 126) {
    if (buf.length < 4) return null;
    n = buf.readUInt16BE(2);
    pos = 4;
  } else if (n === 127) {
    if (buf.length < 10) return null;
    n = Number(buf.readBigUInt64BE(2));
    pos = 10;
  }
  if (buf.length < pos + n) return null;
  return { opcode, payload: buf.subarray(pos, pos + n), consumed: pos + n };
}
