"""Read-only HTTP artifact service over a run's index.

Mirrors the portal download semantics: a filterable catalog, per-artifact
metadata, byte-exact downloads carrying an ``X-Content-Digest`` header, and
plot-ready metric JSON per task. Every mutating method is rejected with 405.
An artifact whose bytes no longer match the indexed digest is quarantined at
serve time and answered with an integrity-failure body.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlparse

from . import PIPELINE_VERSION
from .formats import sha256_file
from .pipeline import ArtifactIndex, IndexEntry

API_PREFIX = "/api/v1"


def _entry_payload(entry: IndexEntry, quarantined: bool = False) -> dict:
    payload = {
        "artifact_id": entry.artifact_id,
        "kind": entry.kind,
        "task_id": entry.task_id,
        "encoder_id": entry.encoder_id,
        "split": entry.split,
        "version": entry.version,
        "path": entry.path,
        "checksum": entry.checksum,
        "bytes": entry.bytes,
    }
    if quarantined:
        payload["quarantined"] = True
    return payload


class ArtifactService:
    """Request-independent state: the immutable index plus the quarantine set."""

    def __init__(self, index: ArtifactIndex):
        self.index = index
        self._quarantined: dict[str, str] = {}
        self._lock = threading.Lock()

    def is_quarantined(self, artifact_id: str) -> str | None:
        with self._lock:
            return self._quarantined.get(artifact_id)

    def quarantine(self, artifact_id: str, reason: str) -> None:
        with self._lock:
            self._quarantined[artifact_id] = reason

    # --- route handlers ----------------------------------------------------

    def catalog(self, query: dict) -> tuple[int, dict]:
        entries = self.index.filtered(
            kind=query.get("kind"),
            task=query.get("task"),
            encoder=query.get("encoder"),
            split=query.get("split"),
        )
        return 200, {
            "pipeline_version": PIPELINE_VERSION,
            "count": len(entries),
            "entries": [
                _entry_payload(e, quarantined=self.is_quarantined(e.artifact_id) is not None)
                for e in entries
            ],
        }

    def artifact_meta(self, artifact_id: str) -> tuple[int, dict]:
        entry = self.index.entry_by_id(artifact_id)
        if entry is None:
            return 404, {"error": "not_found", "artifact_id": artifact_id}
        return 200, _entry_payload(
            entry, quarantined=self.is_quarantined(artifact_id) is not None
        )

    def download(self, artifact_id: str) -> tuple[int, dict | bytes, str | None]:
        """Returns (status, body, digest); body is bytes on success, JSON otherwise."""
        entry = self.index.entry_by_id(artifact_id)
        if entry is None:
            return 404, {"error": "not_found", "artifact_id": artifact_id}, None
        reason = self.is_quarantined(artifact_id)
        if reason is not None:
            return 500, {
                "error": "integrity_failure",
                "artifact_id": artifact_id,
                "detail": reason,
            }, None
        path = self.index.run_dir / entry.path
        if not path.exists() or sha256_file(path) != entry.checksum:
            detail = "file missing" if not path.exists() else "digest mismatch with index"
            self.quarantine(artifact_id, detail)
            return 500, {
                "error": "integrity_failure",
                "artifact_id": artifact_id,
                "detail": detail,
            }, None
        return 200, path.read_bytes(), entry.checksum

    def task_metrics(self, task_id: str) -> tuple[int, dict]:
        plot_entries = [
            e for e in self.index.filtered(kind="metrics", task=task_id) if e.path.endswith(".json")
        ]
        if not plot_entries:
            return 404, {"error": "not_found", "task_id": task_id}
        payload = {"task_id": task_id, "encoders": {}}
        for entry in plot_entries:
            data = json.loads((self.index.run_dir / entry.path).read_text())
            payload["encoders"][entry.encoder_id] = data
        return 200, payload


def make_handler(service: ArtifactService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # keep test output clean
            pass

        def _send_json(self, status: int, payload: dict):
            body = json.dumps(payload, sort_keys=True).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _reject_mutation(self):
            self._send_json(405, {"error": "read_only", "detail": "mutating methods are not allowed"})

        do_POST = do_PUT = do_DELETE = do_PATCH = lambda self: self._reject_mutation()

        def do_GET(self):
            parsed = urlparse(self.path)
            parts = [unquote(p) for p in parsed.path.split("/") if p]
            query = {k: v[0] for k, v in parse_qs(parsed.query).items()}

            if parsed.path == f"{API_PREFIX}/health":
                self._send_json(200, {"status": "ok", "pipeline_version": PIPELINE_VERSION})
                return
            if parts[:3] == ["api", "v1", "artifacts"]:
                if len(parts) == 3:
                    self._send_json(*service.catalog(query))
                    return
                if len(parts) == 4:
                    self._send_json(*service.artifact_meta(parts[3]))
                    return
                if len(parts) == 5 and parts[4] == "download":
                    status, body, digest = service.download(parts[3])
                    if isinstance(body, dict):
                        self._send_json(status, body)
                        return
                    self.send_response(status)
                    self.send_header("Content-Type", "application/octet-stream")
                    self.send_header("Content-Length", str(len(body)))
                    self.send_header("X-Content-Digest", f"sha256:{digest}")
                    self.end_headers()
                    self.wfile.write(body)
                    return
            if parts[:3] == ["api", "v1", "metrics"] and len(parts) == 4:
                self._send_json(*service.task_metrics(parts[3]))
                return
            self._send_json(404, {"error": "not_found", "path": parsed.path})

    return Handler


def make_server(index: ArtifactIndex, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Bind (but do not start) the service; port 0 picks a free port."""
    service = ArtifactService(index)
    server = ThreadingHTTPServer((host, port), make_handler(service))
    server.service = service  # exposed for tests and quarantine inspection
    return server


def serve(index: ArtifactIndex, bind: str = "127.0.0.1:8080") -> None:
    """Blocking entry point used by the CLI."""
    host, _, port = bind.partition(":")
    server = make_server(index, host or "127.0.0.1", int(port or 8080))
    address = f"{server.server_address[0]}:{server.server_address[1]}"
    print(f"serving {len(index.entries)} artifacts at http://{address}{API_PREFIX}/")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
