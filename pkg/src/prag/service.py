"""HTTP query service: POST /query and GET /health over a shared pipeline.

The server is threaded; the base model and index are shared read-only and
each request merges its own delta, so concurrent identical queries return
identical answers. Requests arriving before the pipeline finishes loading
get 503.
"""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .errors import PragError
from .pipeline import Mode, Pipeline


class QueryService:
    def __init__(self, host: str = "127.0.0.1", port: int = 8080):
        self.host = host
        self.port = port
        self.pipeline: Pipeline | None = None
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    def set_pipeline(self, pipeline: Pipeline) -> None:
        self.pipeline = pipeline

    def start(self) -> None:
        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *_args):
                pass

            def _send(self, status: int, payload: dict):
                body = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path != "/health":
                    self._send(404, {"error": "unknown path"})
                    return
                pipeline = service.pipeline
                if pipeline is None:
                    self._send(503, {"status": "loading"})
                    return
                self._send(200, {
                    "status": "ok",
                    "model_fingerprint": f"{pipeline.base.fingerprint:016x}",
                    "corpus_docs": len(pipeline.corpus),
                    "adapters": len(pipeline.store) if pipeline.store is not None else 0,
                })

            def do_POST(self):
                if self.path != "/query":
                    self._send(404, {"error": "unknown path"})
                    return
                pipeline = service.pipeline
                if pipeline is None:
                    self._send(503, {"status": "loading"})
                    return
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    body = json.loads(self.rfile.read(length).decode("utf-8"))
                    question = body["question"]
                    if not isinstance(question, str) or not question.strip():
                        raise ValueError("question must be a non-empty string")
                    mode = Mode.parse(body.get("mode", "parametric"))
                    k = body.get("k")
                    if k is not None:
                        k = int(k)
                except (ValueError, KeyError, json.JSONDecodeError) as exc:
                    self._send(400, {"error": str(exc)})
                    return
                try:
                    result = pipeline.answer(question, mode, k=k)
                except PragError as exc:
                    self._send(400, {"error": f"{type(exc).__name__}: {exc}"})
                    return
                self._send(200, result.to_dict())

        self._server = ThreadingHTTPServer((self.host, self.port), Handler)
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._thread.join()


def serve(pipeline_loader, host: str = "127.0.0.1", port: int = 8080) -> QueryService:
    """Bind immediately (503 until loaded), then load the pipeline and serve."""
    service = QueryService(host, port)
    service.start()
    service.set_pipeline(pipeline_loader())
    return service
