"""OpenAI-compatible conformance server for integration tests.

Serves POST /chat/completions from the same deterministic generator as the
in-process mock backend, keyed by (server seed, model name, canonical prompt
text).  Usage in the response body is computed with the approx_chars rule on
the same canonical text the client measures, so a client talking to this
server can check reported against measured counts exactly.

Run standalone with:  python -m attnmoa.mockserver --port 8091 --seed 7
"""

from __future__ import annotations

import argparse
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .accounting import count_tokens
from .backends import LengthModel, shaped_mock_complete

log = logging.getLogger(__name__)


def _canonical_text(system: str | None, messages: list[tuple[str, str]]) -> str:
    # mirrors ChatRequest.canonical_text so both sides count the same string
    if len(messages) == 1:
        user = messages[0][1]
    else:
        user = "\n".join(f"{role}: {text}" for role, text in messages)
    return (system + "\n\n" + user) if system else user


class _Handler(BaseHTTPRequestHandler):
    server_version = "attnmoa-mock"

    def log_message(self, format: str, *args: object) -> None:
        log.debug("mockserver: " + format, *args)

    def _reply(self, status: int, doc: dict) -> None:
        payload = json.dumps(doc, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_POST(self) -> None:  # noqa: N802 (stdlib handler naming)
        server: MockChatServer = self.server  # type: ignore[assignment]
        if not self.path.rstrip("/").endswith("/chat/completions"):
            self._reply(404, {"error": {"message": f"no such route: {self.path}"}})
            return
        if server.take_injected_failure():
            self._reply(500, {"error": {"message": "injected failure"}})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length))
            model = body["model"]
            system = None
            messages: list[tuple[str, str]] = []
            for m in body["messages"]:
                if m["role"] == "system" and system is None and not messages:
                    system = m["content"]
                else:
                    messages.append((m["role"], m["content"]))
            if not messages:
                raise ValueError("no non-system messages")
        except (ValueError, KeyError, TypeError) as exc:
            self._reply(400, {"error": {"message": f"bad request: {exc}"}})
            return
        canonical = _canonical_text(system, messages)
        text = shaped_mock_complete(server.seed, model, canonical, server.length)
        self._reply(
            200,
            {
                "id": "mock",
                "object": "chat.completion",
                "model": model,
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
                "usage": {
                    "prompt_tokens": count_tokens(canonical),
                    "completion_tokens": count_tokens(text),
                },
            },
        )


class MockChatServer(ThreadingHTTPServer):
    """Deterministic chat-completions server; bind to port 0 for tests."""

    daemon_threads = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0, seed: int = 0, length: LengthModel = LengthModel()) -> None:
        super().__init__((host, port), _Handler)
        self.seed = seed
        self.length = length
        self._fail_next = 0
        self._fail_lock = threading.Lock()
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def inject_failures(self, n: int) -> None:
        """Make the next n requests fail with status 500 (for retry tests)."""
        with self._fail_lock:
            self._fail_next = n

    def take_injected_failure(self) -> bool:
        with self._fail_lock:
            if self._fail_next > 0:
                self._fail_next -= 1
                return True
            return False

    def start(self) -> "MockChatServer":
        self._thread = threading.Thread(target=self.serve_forever, name="attnmoa-mockserver", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        self.server_close()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="attnmoa.mockserver", description=__doc__.splitlines()[0])
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8091)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--mean", type=float, default=300.0, help="mean completion length in words")
    parser.add_argument("--std", type=float, default=60.0, help="completion length standard deviation")
    args = parser.parse_args(argv)
    server = MockChatServer(args.host, args.port, seed=args.seed, length=LengthModel(args.mean, args.std))
    print(f"serving chat completions on {server.base_url} (seed={args.seed})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
