"""Line-delimited JSON retrieval endpoint over TCP: user in, top-k out.

Model, index, and catalog are frozen at startup; every request is answered
independently, so concurrent identical requests get identical bodies.
Latency is reported only when the request opts in with "timing": true,
keeping default response bodies deterministic.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
import time

from . import retrieval
from .encoder import EntityCache

log = logging.getLogger(__name__)

MAX_REQUEST_BYTES = 262144


def _error(message, **extra):
    return {"error": message, **extra}


def handle_request(payload, model, cache, index, catalog, scorer=None):
    """Validate one request dict and produce the response dict."""
    if not isinstance(payload, dict):
        return _error("request must be a JSON object")
    user = payload.get("user")
    if not isinstance(user, dict) or "user_feats" not in user:
        return _error("missing user context: {'user': {'user_feats': ..., 'sequence': ...}}")
    domain = payload.get("domain")
    if not isinstance(domain, int) or not 0 <= domain < model.n_domains:
        return _error(f"unknown domain id {domain!r} (expected 0..{model.n_domains - 1})")
    k_top = payload.get("k_top", 10)
    if not isinstance(k_top, int) or k_top < 1:
        return _error(f"k_top must be a positive integer, got {k_top!r}")
    start = time.perf_counter()
    ids, scores = retrieval.retrieve(
        model,
        cache,
        index,
        user["user_feats"],
        user.get("sequence", []),
        domain,
        k_top=k_top,
        beam=payload.get("beam", 200),
        ef_search=payload.get("ef_search", 400),
        scorer=scorer,
    )
    response = {
        "ids": [int(i) for i in ids],
        "scores": [float(s) for s in scores],
        "classes": [catalog.classes[int(i)] for i in ids],
    }
    if payload.get("timing"):
        response["latency_ms"] = (time.perf_counter() - start) * 1000.0
    return response


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv = self.server
        while True:
            line = self.rfile.readline(MAX_REQUEST_BYTES + 1)
            if not line:
                return
            if len(line) > MAX_REQUEST_BYTES:
                self._reply(_error(f"request exceeds limit of {MAX_REQUEST_BYTES} bytes"))
                # drain the oversized line before continuing
                while not line.endswith(b"\n") and line:
                    line = self.rfile.readline(MAX_REQUEST_BYTES + 1)
                continue
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                self._reply(_error(f"malformed JSON: {exc.msg}"))
                continue
            try:
                response = handle_request(
                    payload, srv.model, srv.cache, srv.index, srv.catalog,
                    scorer=srv.scorer,
                )
            except Exception as exc:  # serving must not die on one bad request
                log.exception("request failed")
                response = _error(f"internal error: {exc}")
            self._reply(response)

    def _reply(self, obj):
        self.wfile.write(json.dumps(obj).encode() + b"\n")
        self.wfile.flush()


class MatchingServer(socketserver.ThreadingTCPServer):
    """Read-only serving of a trained checkpoint plus its index."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, model, catalog, index, host="127.0.0.1", port=0):
        self.model = model
        self.catalog = catalog
        self.cache = EntityCache.build(catalog, model.cfg)
        self.scorer = retrieval.Scorer(model, self.cache)
        self.index = index
        super().__init__((host, port), _Handler)

    @property
    def address(self):
        return self.server_address

    def start_background(self):
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


def request_once(host, port, payload, timeout=30.0):
    """One-shot client helper: send a request line, read the response line."""
    with socket.create_connection((host, port), timeout=timeout) as conn:
        conn.sendall(json.dumps(payload).encode() + b"\n")
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = conn.recv(65536)
            if not chunk:
                break
            buf += chunk
    return json.loads(buf)
