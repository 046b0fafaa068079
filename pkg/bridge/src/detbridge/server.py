"""The wire-protocol server loop.

Requests are handled strictly in arrival order per connection (detector
runtimes are rarely reentrant); concurrent connections are only accepted
when the wrapped model declares itself thread safe. A malformed request
produces an error response with the id echoed and the connection stays up.
"""

from __future__ import annotations

import argparse
import base64
import json
import socket
import sys
import threading
from dataclasses import dataclass

import numpy as np

from .models import load_model, normalize_probs


@dataclass(frozen=True)
class BridgeConfig:
    model: str = "echo"
    device: str = "cpu"
    class_count: int = 12
    score_threshold: float = 0.05
    listen: str | None = None  # host:port, or None for stdio
    allow_parallel: bool = False

    def __post_init__(self):
        if not 0.0 <= self.score_threshold < 1.0:
            raise ValueError("score threshold must lie in [0, 1)")
        if self.class_count < 2:
            raise ValueError("need at least two classes")


def _decode_request_pixels(request: dict) -> np.ndarray:
    w = int(request["width"])
    h = int(request["height"])
    c = int(request["channels"])
    if min(w, h, c) < 1:
        raise ValueError("image dimensions must be positive")
    raw = base64.b64decode(request["pixels"])
    expected = w * h * c * 4
    if len(raw) != expected:
        raise ValueError(f"expected {expected} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, c).astype(np.float64)


def handle_request(line: str, model, class_count: int) -> str:
    """One request line in, one response line out."""
    request_id = None
    try:
        request = json.loads(line)
        request_id = request.get("id")
        if request.get("ping"):
            return json.dumps(
                {"id": request_id, "pong": True, "class_count": class_count},
                separators=(",", ":"),
            )
        pixels = _decode_request_pixels(request)
        boxes, probs = model.detect(pixels)
        detections = []
        for box, vec in zip(boxes, probs):
            vec = normalize_probs(vec)
            if len(vec) != class_count:
                raise ValueError(
                    f"model emitted {len(vec)} classes, config says {class_count}"
                )
            detections.append(
                {
                    "x1": float(box[0]),
                    "y1": float(box[1]),
                    "x2": float(box[2]),
                    "y2": float(box[3]),
                    "probs": [float(p) for p in vec],
                }
            )
        return json.dumps(
            {"id": request_id, "detections": detections}, separators=(",", ":")
        )
    except Exception as exc:  # malformed request: answer, keep serving
        return json.dumps(
            {"id": request_id, "error": str(exc)}, separators=(",", ":")
        )


def _serve_stream(reader, writer, model, class_count: int) -> None:
    for line in reader:
        if not line.strip():
            continue
        writer.write(handle_request(line, model, class_count) + "\n")
        writer.flush()


def serve(config: BridgeConfig) -> None:
    """Answer requests until the peer disconnects (stdio) or forever (TCP)."""
    model = load_model(
        config.model, config.class_count, config.device, config.score_threshold
    )
    if config.listen is None:
        _serve_stream(sys.stdin, sys.stdout, model, config.class_count)
        return

    host, _, port = config.listen.rpartition(":")
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((host or "127.0.0.1", int(port)))
    server.listen(8)
    print(f"serving {config.model} on {server.getsockname()}", file=sys.stderr)
    parallel = config.allow_parallel and getattr(model, "thread_safe", False)
    while True:
        conn, _ = server.accept()

        def run(connection=conn):
            with connection:
                reader = connection.makefile("r", encoding="utf-8")
                writer = connection.makefile("w", encoding="utf-8")
                _serve_stream(reader, writer, model, config.class_count)

        if parallel:
            threading.Thread(target=run, daemon=True).start()
        else:
            run()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="detbridge", description="Serve a detector over the wire protocol"
    )
    parser.add_argument("--model", default="echo",
                        help="echo | torchvision:<name>")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--class-count", type=int, default=12)
    parser.add_argument("--score-threshold", type=float, default=0.05)
    parser.add_argument("--listen", default=None,
                        help="host:port TCP endpoint; default serves stdio")
    parser.add_argument("--stdio", action="store_true",
                        help="serve standard streams (the default)")
    parser.add_argument("--allow-parallel", action="store_true",
                        help="thread per connection, if the model is thread safe")
    args = parser.parse_args(argv)
    config = BridgeConfig(
        model=args.model,
        device=args.device,
        class_count=args.class_count,
        score_threshold=args.score_threshold,
        listen=None if args.stdio else args.listen,
        allow_parallel=args.allow_parallel,
    )
    try:
        serve(config)
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
