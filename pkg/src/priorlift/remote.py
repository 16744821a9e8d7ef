"""Out-of-process guidance oracle over a local TCP socket.

Wire format (protocol version 1). Every message is one JSON header line
terminated by ``\\n``, followed by zero or more raw little-endian float32
payloads whose shapes the header declares.

Request::

    {"version": 1, "op": "predict_noise", "shape": [H, W, 3], "t": 500,
     "prompt": "a corgi" | null, "has_condition": true,
     "condition_shape": [H, W, 3], "camera": {...} | null}
    <x_t payload> [<condition payload>]

    {"version": 1, "op": "hello"}

Response::

    {"version": 1, "status": "ok", "shape": [H, W, 3]}  <payload>
    {"version": 1, "status": "ok", "supports_condition": b, "supports_text": b}
    {"version": 1, "status": "error", "message": "..."}

One request per connection keeps the client stateless and the server trivial.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
from typing import Optional, Tuple

import numpy as np
import torch

from .camera import CameraPose
from .errors import BackendError, FormatError

PROTOCOL_VERSION = 1


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if data is None or len(data) != n:
        raise FormatError(f"connection closed after {0 if data is None else len(data)} of {n} payload bytes")
    return data


def _read_header(fh) -> dict:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise FormatError("connection closed before a complete header line")
    try:
        header = json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}") from exc
    if header.get("version") != PROTOCOL_VERSION:
        raise FormatError(f"protocol version {header.get('version')!r}, expected {PROTOCOL_VERSION}")
    return header


def _read_array(fh, shape) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape)) if shape else 1
    return np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4").reshape(shape)


def _encode(header: dict, *arrays) -> bytes:
    body = b"".join(np.ascontiguousarray(np.asarray(a, dtype="<f4")).tobytes() for a in arrays)
    return json.dumps(header, sort_keys=True).encode() + b"\n" + body


def _as_numpy(x) -> np.ndarray:
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)


class RemoteOracle:
    """Client side: a :class:`GuidanceOracle` backed by a socket server."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, timeout: float = 30.0):
        self.address = (host, int(port))
        self.timeout = timeout
        caps = self._call({"version": PROTOCOL_VERSION, "op": "hello"})[0]
        self.supports_condition = bool(caps.get("supports_condition", False))
        self.supports_text = bool(caps.get("supports_text", False))

    def _call(self, header: dict, *arrays) -> Tuple[dict, Optional[np.ndarray]]:
        try:
            with socket.create_connection(self.address, timeout=self.timeout) as sock:
                sock.sendall(_encode(header, *arrays))
                sock.shutdown(socket.SHUT_WR)
                with sock.makefile("rb") as fh:
                    reply = _read_header(fh)
                    if reply.get("status") != "ok":
                        raise BackendError(f"remote oracle error: {reply.get('message', 'unknown')}",
                                           op=header.get("op"), t=header.get("t"))
                    payload = _read_array(fh, reply["shape"]) if "shape" in reply else None
                    return reply, payload
        except OSError as exc:
            raise BackendError(f"remote oracle unreachable: {exc}", address=f"{self.address[0]}:{self.address[1]}",
                               op=header.get("op")) from exc

    def predict_noise(self, x_t, t, prompt, condition=None, camera: Optional[CameraPose] = None):
        x = _as_numpy(x_t)
        header = {
            "version": PROTOCOL_VERSION,
            "op": "predict_noise",
            "shape": list(x.shape),
            "t": int(t),
            "prompt": prompt,
            "has_condition": condition is not None,
            "camera": None if camera is None else camera.to_dict(),
        }
        arrays = [x]
        if condition is not None:
            c = _as_numpy(condition)
            header["condition_shape"] = list(c.shape)
            arrays.append(c)
        _, out = self._call(header, *arrays)
        if out is None or out.shape != x.shape:
            raise BackendError("remote oracle returned a mismatched payload", t=int(t))
        return torch.from_numpy(out.copy()).to(x_t.dtype if isinstance(x_t, torch.Tensor) else torch.float32)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        oracle = self.server.oracle
        try:
            header = _read_header(self.rfile)
            op = header.get("op")
            if op == "hello":
                reply = {"version": PROTOCOL_VERSION, "status": "ok",
                         "supports_condition": bool(oracle.supports_condition),
                         "supports_text": bool(oracle.supports_text)}
                self.wfile.write(_encode(reply))
                return
            if op != "predict_noise":
                raise FormatError(f"unknown op {op!r}")
            x = torch.from_numpy(_read_array(self.rfile, header["shape"]).copy())
            cond = None
            if header.get("has_condition"):
                cond = torch.from_numpy(_read_array(self.rfile, header["condition_shape"]).copy())
            cam = header.get("camera")
            cam = CameraPose.from_dict(cam) if cam else None
            out = _as_numpy(oracle.predict_noise(x, header["t"], header.get("prompt"), condition=cond, camera=cam))
            self.wfile.write(_encode({"version": PROTOCOL_VERSION, "status": "ok", "shape": list(out.shape)}, out))
        except Exception as exc:  # noqa: BLE001 - reported to the client
            self.wfile.write(_encode({"version": PROTOCOL_VERSION, "status": "error",
                                      "message": f"{type(exc).__name__}: {exc}"}))


class OracleServer(socketserver.ThreadingTCPServer):
    """Serve any in-process oracle on ``host:port`` (port 0 picks a free one)."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, oracle, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.oracle = oracle

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "OracleServer":
        threading.Thread(target=self.serve_forever, daemon=True).start()
        return self

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()
        self.server_close()
