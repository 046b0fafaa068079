"""Line-delimited JSON wire protocol to external detector processes.

Requests carry the image as base64 little-endian float32 in row-major
(y, x, channel) order:

    {"id": 1, "width": w, "height": h, "channels": c, "pixels": "..."}

Responses list detections with full probability vectors as JSON numbers
(exact float64 round-trip):

    {"id": 1, "detections": [{"x1":..,"y1":..,"x2":..,"y2":..,"probs":[..]}]}

A ping ``{"id": 0, "ping": true}`` answers ``{"id": 0, "pong": true,
"class_count": C}``. Transport is either a TCP connection or the standard
streams of a spawned server process.
"""

from __future__ import annotations

import base64
import json
import socket
import subprocess
from dataclasses import dataclass

import numpy as np

from .detection import BoundingBox, Detection
from .oracle import ImageTensor, OracleUnavailable, QueryBudget

DEFAULT_TIMEOUT = 30.0


def encode_image(request_id: int, image: ImageTensor) -> str:
    payload = np.ascontiguousarray(image.pixels, dtype="<f4")
    return json.dumps(
        {
            "id": request_id,
            "width": image.width,
            "height": image.height,
            "channels": image.channels,
            "pixels": base64.b64encode(payload.tobytes()).decode("ascii"),
        },
        separators=(",", ":"),
    )


def decode_pixels(payload: dict) -> np.ndarray:
    w, h, c = int(payload["width"]), int(payload["height"]), int(payload["channels"])
    raw = base64.b64decode(payload["pixels"])
    if len(raw) != w * h * c * 4:
        raise ValueError(f"expected {w * h * c * 4} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, c)


def encode_detections(request_id: int, dets: list[Detection]) -> str:
    return json.dumps(
        {
            "id": request_id,
            "detections": [
                {
                    "x1": d.box.x1,
                    "y1": d.box.y1,
                    "x2": d.box.x2,
                    "y2": d.box.y2,
                    "probs": [float(p) for p in d.probs],
                }
                for d in dets
            ],
        },
        separators=(",", ":"),
    )


def decode_detections(payload: dict) -> list[Detection]:
    dets = []
    for entry in payload["detections"]:
        box = BoundingBox(entry["x1"], entry["y1"], entry["x2"], entry["y2"])
        dets.append(Detection(box=box, probs=np.asarray(entry["probs"], dtype=np.float64)))
    return dets


class _SocketTransport:
    def __init__(self, host: str, port: int, timeout: float):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise OracleUnavailable(f"cannot reach detector at {host}:{port}: {exc}") from exc
        self._sock.settimeout(timeout)
        self._reader = self._sock.makefile("r", encoding="utf-8")

    def round_trip(self, line: str) -> str:
        try:
            self._sock.sendall((line + "\n").encode("utf-8"))
            reply = self._reader.readline()
        except OSError as exc:
            raise OracleUnavailable(f"detector connection failed: {exc}") from exc
        if not reply:
            raise OracleUnavailable("detector closed the connection")
        return reply

    def close(self) -> None:
        self._sock.close()


class _ProcessTransport:
    def __init__(self, argv: list[str], timeout: float):
        self.timeout = timeout
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise OracleUnavailable(f"cannot spawn detector {argv!r}: {exc}") from exc

    def round_trip(self, line: str) -> str:
        proc = self._proc
        if proc.poll() is not None:
            raise OracleUnavailable("detector process exited")
        try:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
            reply = proc.stdout.readline()
        except OSError as exc:
            raise OracleUnavailable(f"detector pipe failed: {exc}") from exc
        if not reply:
            raise OracleUnavailable("detector process closed its output")
        return reply

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()


@dataclass(frozen=True)
class WireEndpoint:
    """Parsed oracle endpoint: ``tcp:<host>:<port>`` or ``cmd:<argv...>``."""

    kind: str
    host: str = ""
    port: int = 0
    argv: tuple[str, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "WireEndpoint":
        if text.startswith("tcp:"):
            host, _, port = text[4:].rpartition(":")
            if not host or not port.isdigit():
                raise ValueError(f"bad tcp endpoint {text!r}, want tcp:<host>:<port>")
            return cls(kind="tcp", host=host, port=int(port))
        if text.startswith("cmd:"):
            argv = tuple(text[4:].split())
            if not argv:
                raise ValueError("empty command endpoint")
            return cls(kind="cmd", argv=argv)
        raise ValueError(f"unknown endpoint {text!r}, want tcp:... or cmd:...")


class WireOracle:
    """Budgeted detector client speaking the wire protocol."""

    def __init__(
        self,
        endpoint: WireEndpoint | str,
        budget: QueryBudget | None = None,
        timeout: float = DEFAULT_TIMEOUT,
    ):
        if isinstance(endpoint, str):
            endpoint = WireEndpoint.parse(endpoint)
        self.endpoint = endpoint
        self.budget = budget if budget is not None else QueryBudget()
        if endpoint.kind == "tcp":
            self._transport = _SocketTransport(endpoint.host, endpoint.port, timeout)
        else:
            self._transport = _ProcessTransport(list(endpoint.argv), timeout)
        self._next_id = 0

    def _exchange(self, line: str, request_id: int) -> dict:
        reply = self._transport.round_trip(line)
        try:
            payload = json.loads(reply)
        except json.JSONDecodeError as exc:
            raise OracleUnavailable(f"undecodable detector reply: {exc}") from exc
        if payload.get("id") != request_id:
            raise OracleUnavailable(
                f"detector answered id {payload.get('id')} to request {request_id}"
            )
        if "error" in payload:
            raise OracleUnavailable(f"detector error: {payload['error']}")
        return payload

    def ping(self) -> int:
        """Health check; returns the served class count."""
        self._next_id += 1
        rid = self._next_id
        payload = self._exchange(
            json.dumps({"id": rid, "ping": True}, separators=(",", ":")), rid
        )
        if not payload.get("pong"):
            raise OracleUnavailable("detector did not answer the ping")
        return int(payload["class_count"])

    def detect(self, image: ImageTensor) -> list[Detection]:
        self.budget.consume()
        self._next_id += 1
        rid = self._next_id
        payload = self._exchange(encode_image(rid, image), rid)
        return decode_detections(payload)

    def close(self) -> None:
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
