"""Request execution against a network endpoint or an in-process app.

Both targets return the same normalized :class:`HttpExchangeResult`, so the
generation loop, checker, and trace never care which transport ran the
request.  Transport failures (timeout, refused connection, protocol error)
are data on the result, never exceptions, and exactly one of ``status`` /
``transport_error`` is set.  One call makes at most one wire attempt; retry
policy, if anyone ever wants one, belongs to the caller.
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Any

import requests

TRANSPORT_TIMEOUT = "timeout"
TRANSPORT_REFUSED = "connection-refused"
TRANSPORT_PROTOCOL = "protocol-error"

DEFAULT_TIMEOUT = 30.0


@dataclass
class HttpExchangeResult:
    status: int | None
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""
    json_body: Any = None
    json_error: str | None = None
    latency: float = 0.0
    transport_error: str | None = None

    def __post_init__(self):
        assert (self.status is None) != (self.transport_error is None), \
            "exactly one of status/transport_error must be set"


def _parse_json_body(headers: dict[str, str], body: bytes):
    ctype = ""
    for key, value in headers.items():
        if key.lower() == "content-type":
            ctype = value.split(";")[0].strip().lower()
            break
    if not body or not (ctype == "application/json" or ctype.endswith("+json")):
        return None, None
    try:
        return json.loads(body.decode("utf-8")), None
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        return None, str(exc)


class NetworkTarget:
    """HTTP/1.1 over the wire; one pooled session per calling thread."""

    def __init__(self, base_url: str, default_headers: dict[str, str] | None = None,
                 verify: bool = True):
        self.base_url = base_url.rstrip("/")
        self.default_headers = dict(default_headers or {})
        self.verify = verify
        self._local = threading.local()

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            self._local.session = session
        return session

    def request(self, method: str, url_path: str, headers: dict[str, str],
                body: bytes | None, timeout: float):
        merged = dict(self.default_headers)
        merged.update(headers)
        response = self._session().request(
            method, self.base_url + url_path, headers=merged, data=body,
            timeout=timeout, verify=self.verify, allow_redirects=False)
        return response.status_code, dict(response.headers), response.content


class InProcessTarget:
    """Adapter over an application object exposing
    ``handle(method, path, query, headers, body) -> (status, headers, body)``.

    A small worker pool enforces the request timeout; a handler that stalls
    past the deadline is abandoned (it finishes on its own) and the call
    reports a timeout, mirroring the network behavior.
    """

    def __init__(self, app, max_workers: int = 32):
        self.app = app
        self.base_url = "in-process"
        self._pool = ThreadPoolExecutor(max_workers=max_workers,
                                        thread_name_prefix="inproc")

    def request(self, method: str, url_path: str, headers: dict[str, str],
                body: bytes | None, timeout: float):
        path, _, query = url_path.partition("?")
        future = self._pool.submit(self.app.handle, method, path, query,
                                   headers, body or b"")
        try:
            return future.result(timeout=timeout)
        except FutureTimeout:
            raise requests.Timeout(f"in-process handler exceeded {timeout}s")

    def close(self) -> None:
        self._pool.shutdown(wait=False)


def execute(plan, target, timeout: float = DEFAULT_TIMEOUT) -> HttpExchangeResult:
    """Run one request plan against a target and normalize the outcome."""
    headers = dict(plan.headers)
    body_bytes: bytes | None = None
    if plan.body is not None:
        body_bytes = json.dumps(plan.body, sort_keys=True).encode("utf-8")
        headers.setdefault("Content-Type", "application/json")

    started = time.perf_counter()
    try:
        status, resp_headers, resp_body = target.request(
            plan.method, plan.concrete_url, headers, body_bytes, timeout)
    except requests.Timeout:
        return HttpExchangeResult(
            status=None, latency=time.perf_counter() - started,
            transport_error=TRANSPORT_TIMEOUT)
    except requests.ConnectionError:
        return HttpExchangeResult(
            status=None, latency=time.perf_counter() - started,
            transport_error=TRANSPORT_REFUSED)
    except requests.RequestException as exc:
        return HttpExchangeResult(
            status=None, latency=time.perf_counter() - started,
            transport_error=f"{TRANSPORT_PROTOCOL}: {exc}")
    latency = time.perf_counter() - started
    json_body, json_error = _parse_json_body(resp_headers, resp_body)
    return HttpExchangeResult(
        status=status, headers=resp_headers, body=resp_body,
        json_body=json_body, json_error=json_error, latency=latency)


def probe(target, timeout: float = 5.0) -> bool:
    """One GET / to decide reachability; any HTTP answer counts as reachable."""
    try:
        target.request("GET", "/", {}, None, timeout)
        return True
    except requests.RequestException:
        return False
