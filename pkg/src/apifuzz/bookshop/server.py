"""Serve a BookshopApp over HTTP for network-target testing."""

from __future__ import annotations

import errno
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

from . import BookshopApp


class PortInUse(Exception):
    """The requested port is already bound."""


class _BookshopHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def _dispatch(self) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        parts = urlsplit(self.path)
        status, headers, payload = self.server.app.handle(  # type: ignore[attr-defined]
            self.command, parts.path, parts.query, dict(self.headers), body)
        try:
            self.send_response(status)
            for key, value in headers.items():
                self.send_header(key, value)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            if payload:
                self.wfile.write(payload)
        except (BrokenPipeError, ConnectionResetError):
            pass  # client gave up (e.g. timeout); nothing to answer

    do_GET = _dispatch
    do_POST = _dispatch
    do_PUT = _dispatch
    do_DELETE = _dispatch
    do_PATCH = _dispatch

    def log_message(self, fmt, *args):  # quiet by default
        pass


class BookshopServer:
    def __init__(self, app: BookshopApp, host: str, port: int):
        self.app = app
        try:
            self._httpd = ThreadingHTTPServer((host, port), _BookshopHandler)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(f"port {port} on {host} is already in use") from exc
            raise
        self._httpd.app = app  # type: ignore[attr-defined]
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name="bookshop", daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def base_url(self) -> str:
        host = self._httpd.server_address[0]
        return f"http://{host}:{self.port}"

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)


def serve(port: int = 0, host: str = "127.0.0.1", toggles=(),
          randomize_ids: bool = False, app: BookshopApp | None = None,
          **app_kwargs) -> BookshopServer:
    """Start the bookshop on a port (0 picks a free one) and return the handle."""
    if app is None:
        app = BookshopApp(toggles=toggles, randomize_ids=randomize_ids,
                          **app_kwargs)
    return BookshopServer(app, host, port)
