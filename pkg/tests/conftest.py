from __future__ import annotations

import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from llm4ts.corpus import load_bundled_corpus

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def corpus():
    return load_bundled_corpus()


def completion(text, usage=None) -> dict:
    body = {"id": "cmpl-test", "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text},
                         "finish_reason": "stop"}]}
    if usage is not None:
        body["usage"] = usage
    return body


class MockServer:
    """Local chat-completions endpoint that replays a script of (status, json body) replies.

    The last entry repeats once the script is exhausted.  ``hits`` counts requests.
    """

    def __init__(self):
        self.script: list[tuple[int, object]] = [(200, completion("FINAL ANSWER: YES"))]
        self.requests: list[dict] = []
        self.raw_bodies: list[bytes] = []
        self.headers: list[dict] = []
        self.delay = 0.0
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                raw = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                with server._lock:
                    idx = len(server.requests)
                    server.raw_bodies.append(raw)
                    server.requests.append(json.loads(raw or b"{}"))
                    server.headers.append(dict(self.headers))
                    status, body = server.script[min(idx, len(server.script) - 1)]
                if server.delay:
                    threading.Event().wait(server.delay)
                payload = body.encode() if isinstance(body, str) else json.dumps(body).encode()
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(payload)))
                    self.end_headers()
                    self.wfile.write(payload)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.daemon_threads = True
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def hits(self) -> int:
        return len(self.requests)

    def reply(self, *texts: str) -> None:
        self.script = [(200, completion(t)) for t in texts]

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def mock_server():
    srv = MockServer().start()
    yield srv
    srv.stop()


@pytest.fixture
def endpoint_cfg(mock_server):
    from llm4ts.client import EndpointConfig
    return EndpointConfig(base_url=mock_server.url, model="mock-model", api_key="sk-test",
                          timeout=5.0, backoff=0.0)


class NetworkGuard:
    """Counts outbound INET socket connects while installed."""

    def __init__(self):
        self.calls: list = []
        self._orig = socket.socket.connect
        self._orig_ex = socket.socket.connect_ex

    def install(self):
        guard = self

        def connect(sock, address):
            if sock.family in (socket.AF_INET, socket.AF_INET6):
                guard.calls.append(address)
            return guard._orig(sock, address)

        def connect_ex(sock, address):
            if sock.family in (socket.AF_INET, socket.AF_INET6):
                guard.calls.append(address)
            return guard._orig_ex(sock, address)

        socket.socket.connect = connect
        socket.socket.connect_ex = connect_ex

    def uninstall(self):
        socket.socket.connect = self._orig
        socket.socket.connect_ex = self._orig_ex


# --- acceptance summary --------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else "FAIL"
        if _ACCEPTANCE.get(n, ("PASS",))[0] != "FAIL":
            _ACCEPTANCE[n] = (status, item.name)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, name = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[ACCEPTANCE] criterion {n}: {status}  ({name})")
