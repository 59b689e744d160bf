"""HTTP retrieval service.

``POST /retrieve {"question": str, "table_id": str, "k": int, "method"?: str}``
answers ``{"triples": [{"key", "text", "score", "stage"}], "latency_ms":
{"first_stage", "rerank"}}``. Unknown tables give 404, malformed requests 400.
Bodies are canonical JSON (sorted keys, compact separators).
"""

from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from ..retrieve import RETRIEVERS, RetrievalEngine, ScoredTriple, UnknownTableError

logger = logging.getLogger(__name__)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def triples_payload(results: list[ScoredTriple], labels) -> list[dict]:
    return [s.to_json(labels) for s in results]


def handle_retrieve(engine: RetrievalEngine, request: dict, default_method: str = "multistage") -> tuple[int, dict]:
    """Service logic without the HTTP layer; returns (status, body)."""
    try:
        question = request["question"]
        table_id = request["table_id"]
        k = int(request.get("k", engine.cfg.top_k))
        method = request.get("method", default_method)
        if not isinstance(question, str) or not isinstance(table_id, str):
            raise TypeError("question and table_id must be strings")
    except (KeyError, TypeError, ValueError) as e:
        return 400, {"error": "bad_request", "message": f"invalid request: {e}"}
    if method not in RETRIEVERS:
        return 400, {"error": "bad_request", "message": f"unknown method {method!r}"}
    report: dict = {}
    t0 = time.perf_counter()
    try:
        results = engine.retrieve(question, table_id, k, method, report=report)
    except UnknownTableError as e:
        return 404, {"error": "not_found", "message": str(e)}
    total = (time.perf_counter() - t0) * 1e3
    latency = report.get("latency_ms", {"first_stage": total, "rerank": 0.0})
    return 200, {"triples": triples_payload(results, engine.labels(table_id)), "latency_ms": latency}


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    # the socketserver default backlog of 5 resets bursts of concurrent clients
    request_queue_size = 128


def make_server(engine: RetrievalEngine, host: str = "127.0.0.1", port: int = 8080,
                default_method: str = "multistage") -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _send(self, status: int, body: dict) -> None:
            data = canonical_json(body)
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_POST(self):
            if self.path != "/retrieve":
                self._send(404, {"error": "not_found", "message": f"no route {self.path}"})
                return
            length = int(self.headers.get("Content-Length", 0))
            try:
                request = json.loads(self.rfile.read(length) or b"{}")
                if not isinstance(request, dict):
                    raise ValueError("body must be a JSON object")
            except ValueError as e:
                self._send(400, {"error": "bad_request", "message": str(e)})
                return
            try:
                status, body = handle_retrieve(engine, request, default_method)
            except Exception as e:  # keep serving
                logger.exception("retrieve failed")
                status, body = 500, {"error": "internal", "message": str(e)}
            self._send(status, body)

        def log_message(self, fmt, *args):
            logger.debug("%s - %s", self.address_string(), fmt % args)

    server = _Server((host, port), Handler)
    return server


def serve_retrieval(host: str, port: int, engine: RetrievalEngine, default_method: str = "multistage") -> None:
    server = make_server(engine, host, port, default_method)
    logger.info("serving on http://%s:%d/retrieve", *server.server_address[:2])
    try:
        server.serve_forever()
    finally:
        server.server_close()


def start_in_thread(engine: RetrievalEngine, host: str = "127.0.0.1", port: int = 0):
    """Start a server on a background thread; returns (server, base_url)."""
    server = make_server(engine, host, port)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    h, p = server.server_address[:2]
    return server, f"http://{h}:{p}"
