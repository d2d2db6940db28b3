import json
import os
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

# Children spawned by tests inherit this; keeps BLAS single-threaded there.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from masc import BackboneSpec, EmbedderSpec, TrainConfig, train
from masc.synthetic import make_normal_corpus


class StubService:
    """Tiny JSON-over-HTTP stub for the embed/encode/chat contracts."""

    def __init__(self, dimension=8, fail_first=0, status=200, content="ok",
                 vector_dim=None):
        self.dimension = dimension
        self.vector_dim = vector_dim if vector_dim is not None else dimension
        self.fail_first = fail_first
        self.status = status
        self.content = content
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers["Content-Length"])
                body = json.loads(self.rfile.read(length))
                with stub._lock:
                    stub.requests.append({"path": self.path, "body": body})
                    if stub.fail_first > 0:
                        stub.fail_first -= 1
                        self.send_response(503)
                        self.end_headers()
                        return
                if stub.status != 200:
                    self.send_response(stub.status)
                    self.end_headers()
                    return
                if self.path.endswith("/embed"):
                    vectors = [
                        [float(len(t) % 7 + i) for i in range(stub.vector_dim)]
                        for t in body["texts"]
                    ]
                    payload = {"vectors": vectors}
                elif self.path.endswith("/encode"):
                    seq = np.asarray(body["sequence"], dtype=float)
                    vec = np.tanh(seq.mean(axis=0))
                    out = np.zeros(stub.vector_dim)
                    out[: min(len(vec), stub.vector_dim)] = vec[: stub.vector_dim]
                    payload = {"vector": out.tolist()}
                else:  # /chat
                    payload = {"content": stub.content}
                blob = json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(blob)))
                self.end_headers()
                self.wfile.write(blob)

        self._server = HTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def __enter__(self):
        self._thread.start()
        self.endpoint = f"http://127.0.0.1:{self._server.server_port}"
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        return False


@pytest.fixture
def stub_service():
    return StubService


SMALL_EMBEDDER = EmbedderSpec(kind="hashing", dimension=16)


@pytest.fixture(scope="session")
def small_trained():
    """A quickly trained small detector plus its training corpus."""
    corpus = make_normal_corpus(30, seed=11, T=5)
    cfg = TrainConfig(
        epochs=8,
        lr=1e-3,
        lam=0.2,
        seed=3,
        d_h=32,
        embedder=SMALL_EMBEDDER,
        backbone=BackboneSpec(hidden_dim=32, layers=2, seed=3),
    )
    model, report = train(cfg, corpus)
    return model, report, corpus


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    try:
        from tests.test_acceptance import CRITERIA
    except Exception:
        return
    lines = []
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(status, []):
            name = report.nodeid.split("::")[-1].split("[")[0]
            if name in CRITERIA and getattr(report, "when", "call") == "call":
                number, description = CRITERIA[name]
                lines.append((number, f"{label} criterion {number}: {description}"))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
