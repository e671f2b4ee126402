"""Interactive frame-streaming service: websocket control messages + binary frames.

A browser (or the bundled client class) connects, receives a `hello` describing
the checkpoint, and streams `view_request` messages while steering; the server
renders with a latest-wins mailbox per session and answers each rendered frame
with a `frame_meta` echo followed by one binary payload (PNG or raw RGB8).
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry as geo
from . import pipeline as pl
from .scenegraph import CameraIntrinsics

log = logging.getLogger("dynsplat.viewer")

PROTOCOL_VERSION = 1
WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
CONTENT_TYPES = {
    ".html": "text/html", ".js": "text/javascript", ".css": "text/css",
    ".png": "image/png", ".ico": "image/x-icon", ".map": "application/json",
}


def intrinsics_for(width: int, height: int, fov_deg: float) -> CameraIntrinsics:
    f = 0.5 * height / np.tan(np.radians(fov_deg) / 2.0)
    return CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)


def encode_frame(buffers, depth_view: bool, encoding: str):
    if depth_view:
        d = buffers.depth
        finite = np.isfinite(d)
        if np.any(finite):
            lo = float(np.min(d[finite]))
            hi = float(np.percentile(d[finite], 98.0))
            hi = hi if hi > lo else lo + 1.0
            norm = np.clip((d - lo) / (hi - lo), 0.0, 1.0)
        else:
            norm = np.zeros_like(d)
        norm = np.where(finite, 1.0 - norm, 0.0)
        img = (np.repeat(norm[..., None], 3, axis=2) * 255).astype(np.uint8)
    else:
        img = (np.clip(buffers.color, 0, 1) * 255 + 0.5).astype(np.uint8)
    if encoding == "raw":
        return img.tobytes()
    out = io.BytesIO()
    Image.fromarray(img, "RGB").save(out, format="PNG")
    return out.getvalue()


# ---------------------------------------------------------------------------
# websocket framing (RFC 6455 subset: text/binary/ping/pong/close, no fragmentation)

def ws_accept_key(key: str) -> str:
    return base64.b64encode(hashlib.sha1((key + WS_GUID).encode()).digest()).decode()


def ws_encode(opcode: int, payload: bytes, mask: bool = False) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    mask_bit = 0x80 if mask else 0
    if n < 126:
        head += bytes([mask_bit | n])
    elif n < 65536:
        head += bytes([mask_bit | 126]) + struct.pack(">H", n)
    else:
        head += bytes([mask_bit | 127]) + struct.pack(">Q", n)
    if mask:
        key = b"\x12\x34\x56\x78"
        body = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
        return head + key + body
    return head + payload


class SockReader:
    """Buffered socket reads; `leftover` carries bytes consumed past a handshake."""

    def __init__(self, sock, leftover: bytes = b""):
        self.sock = sock
        self.buf = leftover

    def read_exact(self, n: int) -> bytes:
        while len(self.buf) < n:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionError("socket closed")
            self.buf += chunk
        out, self.buf = self.buf[:n], self.buf[n:]
        return out


def ws_decode(reader: SockReader):
    """Reads one frame; returns (opcode, payload)."""
    b0, b1 = reader.read_exact(2)
    opcode = b0 & 0x0F
    masked = bool(b1 & 0x80)
    n = b1 & 0x7F
    if n == 126:
        (n,) = struct.unpack(">H", reader.read_exact(2))
    elif n == 127:
        (n,) = struct.unpack(">Q", reader.read_exact(8))
    key = reader.read_exact(4) if masked else None
    payload = reader.read_exact(n) if n else b""
    if masked and payload:
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return opcode, payload


# ---------------------------------------------------------------------------


class Session:
    """Per-connection state: depth-1 mailbox and in-flight flag."""

    def __init__(self, conn):
        self.conn = conn
        self.send_lock = threading.Lock()
        self.state_lock = threading.Lock()
        self.pending = None
        self.busy = False

    def send_json(self, obj):
        with self.send_lock:
            self.conn.sendall(ws_encode(0x1, json.dumps(obj).encode()))

    def send_binary(self, payload: bytes):
        with self.send_lock:
            self.conn.sendall(ws_encode(0x2, payload))


class ViewerServer:
    def __init__(self, model, port: int = 8765, host: str = "127.0.0.1",
                 max_size: int = 800, threads: int = 1, ui_dir=None):
        self.model = model
        self.host = host
        self.port = port
        self.max_size = max_size
        self.threads = threads
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.pool = ThreadPoolExecutor(max_workers=max(threads, 1))
        self._listener = None
        self._accept_thread = None
        self._running = False

    # -- lifecycle ----------------------------------------------------------
    def start(self):
        self._listener = socket.create_server((self.host, self.port))
        self.port = self._listener.getsockname()[1]
        self._running = True
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        log.info("viewer listening on %s:%d", self.host, self.port)
        return self

    def serve_forever(self):
        self.start()
        try:
            while self._running:
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def stop(self):
        self._running = False
        if self._listener:
            try:
                self._listener.close()
            except OSError:
                pass
        self.pool.shutdown(wait=False)

    def _accept_loop(self):
        while self._running:
            try:
                conn, addr = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._handle_connection, args=(conn,), daemon=True).start()

    # -- HTTP entry ----------------------------------------------------------
    def _handle_connection(self, conn):
        try:
            request = b""
            while b"\r\n\r\n" not in request:
                chunk = conn.recv(4096)
                if not chunk:
                    return
                request += chunk
            head, leftover = request.split(b"\r\n\r\n", 1)
            head = head.decode("latin-1")
            lines = head.split("\r\n")
            path = lines[0].split(" ")[1] if len(lines[0].split(" ")) > 1 else "/"
            headers = {}
            for line in lines[1:]:
                if ":" in line:
                    k, v = line.split(":", 1)
                    headers[k.strip().lower()] = v.strip()
            if headers.get("upgrade", "").lower() == "websocket":
                self._websocket_session(conn, headers, leftover)
            else:
                self._serve_static(conn, path)
        except (ConnectionError, OSError):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _serve_static(self, conn, path):
        if self.ui_dir is None:
            body = b"dynsplat viewer: websocket endpoint only (connect with the web client)"
            conn.sendall(b"HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\n"
                         + f"Content-Length: {len(body)}\r\n\r\n".encode() + body)
            return
        rel = path.split("?")[0].lstrip("/") or "index.html"
        target = (self.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) or not target.is_file():
            conn.sendall(b"HTTP/1.1 404 Not Found\r\nContent-Length: 9\r\n\r\nnot found")
            return
        body = target.read_bytes()
        ctype = CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        conn.sendall(
            f"HTTP/1.1 200 OK\r\nContent-Type: {ctype}\r\nContent-Length: {len(body)}"
            "\r\nConnection: close\r\n\r\n".encode() + body
        )

    # -- websocket session ----------------------------------------------------
    def _hello(self):
        sequences = sorted(self.model.graph.sequences)
        seq = self.model.graph.sequences[sequences[0]]
        cam = next(iter(seq.cameras.values()), None)
        center = self.model.scene_center
        default_pos = center + np.array([0.0, -2.5, 1.2]) * self.model.scene_scale
        return {
            "type": "hello", "version": PROTOCOL_VERSION,
            "sequences": sequences,
            "time_range": [-1.0, 1.0],
            "max_size": self.max_size,
            "scene_center": [float(v) for v in center],
            "scene_scale": float(self.model.scene_scale),
            "default_pose": {
                "pos": [float(v) for v in default_pos],
                "quat": [1.0, 0.0, 0.0, 0.0],
            },
            "default_fov_deg": 50.0,
        }

    def _websocket_session(self, conn, headers, leftover: bytes = b""):
        key = headers.get("sec-websocket-key", "")
        conn.sendall(
            ("HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\n"
             f"Connection: Upgrade\r\nSec-WebSocket-Accept: {ws_accept_key(key)}\r\n\r\n").encode()
        )
        session = Session(conn)
        session.send_json(self._hello())
        reader = SockReader(conn, leftover)
        while self._running:
            try:
                opcode, payload = ws_decode(reader)
            except (ConnectionError, OSError):
                return
            if opcode == 0x8:  # close
                try:
                    conn.sendall(ws_encode(0x8, b""))
                except OSError:
                    pass
                return
            if opcode == 0x9:  # ping
                with session.send_lock:
                    conn.sendall(ws_encode(0xA, payload))
                continue
            if opcode != 0x1:
                continue
            try:
                msg = json.loads(payload.decode())
            except (UnicodeDecodeError, json.JSONDecodeError):
                session.send_json({"type": "error", "version": PROTOCOL_VERSION,
                                   "message": "malformed message", "request": None})
                continue
            if msg.get("type") != "view_request":
                session.send_json({"type": "error", "version": PROTOCOL_VERSION,
                                   "message": f"unknown message type {msg.get('type')!r}",
                                   "request": msg})
                continue
            self._enqueue(session, msg)

    def _enqueue(self, session: Session, msg):
        with session.state_lock:
            session.pending = msg  # latest-wins: older queued request is dropped
            if session.busy:
                return
            session.busy = True
        self.pool.submit(self._drain, session)

    def _drain(self, session: Session):
        while True:
            with session.state_lock:
                msg = session.pending
                session.pending = None
                if msg is None:
                    session.busy = False
                    return
            try:
                self._render_and_send(session, msg)
            except (ConnectionError, OSError):
                with session.state_lock:
                    session.busy = False
                return
            except Exception as exc:  # render failure: error frame, session stays open
                log.exception("render failed")
                try:
                    session.send_json({"type": "error", "version": PROTOCOL_VERSION,
                                       "message": f"render failed: {exc}", "request": msg})
                except (ConnectionError, OSError):
                    with session.state_lock:
                        session.busy = False
                    return

    def _render_and_send(self, session: Session, msg):
        width = int(msg.get("width", 320))
        height = int(msg.get("height", 240))
        if width > self.max_size or height > self.max_size or width < 8 or height < 8:
            session.send_json({"type": "error", "version": PROTOCOL_VERSION,
                               "message": f"size {width}x{height} out of bounds",
                               "request": msg})
            return
        seqs = sorted(self.model.graph.sequences)
        sequence = msg.get("sequence", seqs[0])
        if sequence not in self.model.graph.sequences:
            session.send_json({"type": "error", "version": PROTOCOL_VERSION,
                               "message": f"unknown sequence {sequence!r}", "request": msg})
            return
        t = float(np.clip(msg.get("time", 0.0), -1.0, 1.0))
        pose_d = msg.get("pose", {})
        q = geo.quat_normalize(np.asarray(pose_d.get("quat", [1, 0, 0, 0]), dtype=np.float64))
        pos = np.asarray(pose_d.get("pos", [0, 0, 0]), dtype=np.float64)
        pose = geo.RigidTransform(geo.quat_to_rotmat(q), pos)
        intr = intrinsics_for(width, height, float(msg.get("fov_deg", 50.0)))
        encoding = msg.get("encoding", "png")

        t0 = time.perf_counter()
        buffers, _ = pl.render_view(
            self.model, sequence, t, pose=pose, intr=intr, threads=self.threads,
            show_objects=bool(msg.get("show_objects", True)),
            show_background=bool(msg.get("show_background", True)),
        )
        render_ms = (time.perf_counter() - t0) * 1000.0
        payload = encode_frame(buffers, bool(msg.get("depth_view", False)), encoding)
        session.send_json({
            "type": "frame_meta", "version": PROTOCOL_VERSION,
            "width": width, "height": height, "encoding": encoding,
            "render_ms": render_ms, "request": msg,
        })
        session.send_binary(payload)


class ViewerClient:
    """Minimal scripted client for tests and automation."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        key = base64.b64encode(b"0123456789abcdef").decode()
        self.sock.sendall(
            (f"GET /ws HTTP/1.1\r\nHost: {host}:{port}\r\nUpgrade: websocket\r\n"
             f"Connection: Upgrade\r\nSec-WebSocket-Key: {key}\r\n"
             "Sec-WebSocket-Version: 13\r\n\r\n").encode()
        )
        resp = b""
        while b"\r\n\r\n" not in resp:
            chunk = self.sock.recv(4096)
            if not chunk:
                raise ConnectionError("handshake failed")
            resp += chunk
        if b"101" not in resp.split(b"\r\n", 1)[0]:
            raise ConnectionError(f"handshake rejected: {resp[:80]!r}")
        self.reader = SockReader(self.sock, resp.split(b"\r\n\r\n", 1)[1])
        self.hello = self.recv_json()

    def send_json(self, obj):
        self.sock.sendall(ws_encode(0x1, json.dumps(obj).encode(), mask=True))

    def recv_message(self):
        opcode, payload = ws_decode(self.reader)
        if opcode == 0x1:
            return "text", json.loads(payload.decode())
        if opcode == 0x2:
            return "binary", payload
        if opcode == 0x8:
            raise ConnectionError("server closed")
        return "control", payload

    def recv_json(self):
        kind, msg = self.recv_message()
        if kind != "text":
            raise ValueError(f"expected text frame, got {kind}")
        return msg

    def request_frame(self, **fields):
        """Send one view_request and wait for its frame; returns (meta, payload)."""
        msg = {"type": "view_request", "version": PROTOCOL_VERSION, **fields}
        self.send_json(msg)
        while True:
            kind, got = self.recv_message()
            if kind == "text":
                if got.get("type") == "error":
                    return got, None
                if got.get("type") == "frame_meta":
                    kind2, payload = self.recv_message()
                    if kind2 != "binary":
                        raise ValueError("frame_meta not followed by a binary frame")
                    return got, payload

    def decode_image(self, meta, payload) -> np.ndarray:
        if meta["encoding"] == "raw":
            return np.frombuffer(payload, np.uint8).reshape(
                meta["height"], meta["width"], 3
            ).astype(np.float32) / 255.0
        with Image.open(io.BytesIO(payload)) as im:
            return np.asarray(im.convert("RGB"), np.float32) / 255.0

    def close(self):
        try:
            self.sock.sendall(ws_encode(0x8, b"", mask=True))
        except OSError:
            pass
        self.sock.close()
