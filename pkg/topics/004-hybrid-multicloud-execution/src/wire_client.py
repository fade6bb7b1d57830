#!/usr/bin/env python3
"""HTTP client side of the TES-subset wire API.

``RemoteTesEndpoint`` lets a live gateway register nodes (or other gateways)
served by another process. Transient failures (429/5xx, connection errors) are
retried with exponential backoff; anything else fails fast.
"""
from __future__ import annotations

import json
import logging
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from typing import Any

from core import HybridMeshError, MalformedSpec, SiteId, TaskSpec
from executors import AlreadyTerminal
from tes_layer import NodeUnreachable, TesTaskDoc, UnknownTask, View

log = logging.getLogger(__name__)

RETRY_STATUSES = (429, 500, 502, 503, 504)


class WireError(HybridMeshError):
    http_status = 502

    def __init__(self, message: str, *, status: int | None = None, body: str = "") -> None:
        super().__init__(message)
        self.status = status
        self.body = body


@dataclass(frozen=True)
class WireConfig:
    base_url: str
    timeout_s: float = 10.0
    retries: int = 3
    backoff_s: float = 0.8


def request_json(
    method: str,
    url: str,
    payload: dict[str, Any] | None = None,
    *,
    timeout_s: float = 10.0,
    retries: int = 3,
    backoff_s: float = 0.8,
) -> Any:
    data = json.dumps(payload).encode("utf-8") if payload is not None else None
    headers = {"Accept": "application/json", "User-Agent": "hybridmesh/0.1"}
    if data is not None:
        headers["Content-Type"] = "application/json"

    last_err: Exception | None = None
    for attempt in range(retries + 1):
        req = urllib.request.Request(url, data=data, headers=headers, method=method)
        try:
            with urllib.request.urlopen(req, timeout=timeout_s) as resp:
                body = resp.read().decode("utf-8")
                return json.loads(body) if body else {}
        except urllib.error.HTTPError as e:
            last_err = e
            try:
                body = e.read().decode("utf-8", errors="replace")
            except Exception:
                body = ""
            status = getattr(e, "code", None)
            if status in RETRY_STATUSES and attempt < retries:
                time.sleep(backoff_s * (2**attempt))
                continue
            raise WireError(f"{method} {url}: HTTP {status}: {body}".strip(), status=status, body=body) from e
        except (urllib.error.URLError, TimeoutError, ConnectionError) as e:
            last_err = e
            if attempt < retries:
                time.sleep(backoff_s * (2**attempt))
                continue
            raise WireError(f"{method} {url}: {e}") from e

    raise WireError(str(last_err) if last_err else "unknown error")


def _detail(err: WireError) -> str:
    try:
        return str(json.loads(err.body).get("detail") or err)
    except (ValueError, AttributeError):
        return str(err)


class RemoteTesEndpoint:
    """A TES node or gateway in another process, seen through its HTTP API."""

    def __init__(self, node_id: str, config: WireConfig, *, sites: frozenset[SiteId] | None = None) -> None:
        self._node_id = node_id
        self.config = config
        self._sites = sites

    @property
    def node_id(self) -> str:
        return self._node_id

    @property
    def sites(self) -> frozenset[SiteId]:
        if self._sites is None:
            self._sites = frozenset(self.service_info().get("sites") or [])
        return self._sites

    def _call(self, method: str, path: str, payload: dict[str, Any] | None = None) -> Any:
        url = self.config.base_url.rstrip("/") + path
        try:
            return request_json(
                method,
                url,
                payload,
                timeout_s=self.config.timeout_s,
                retries=self.config.retries,
                backoff_s=self.config.backoff_s,
            )
        except WireError as e:
            if e.status is None or e.status in RETRY_STATUSES:
                raise NodeUnreachable(f"{self.node_id}: {e}") from e
            if e.status == 404:
                raise UnknownTask(_detail(e)) from e
            if e.status == 409:
                raise AlreadyTerminal(_detail(e)) from e
            if e.status == 400:
                raise MalformedSpec(_detail(e)) from e
            raise

    def service_info(self) -> dict[str, Any]:
        return self._call("GET", "/v1/service-info")

    def create_task(self, spec: TaskSpec | dict[str, Any]) -> str:
        body = spec.to_dict() if isinstance(spec, TaskSpec) else dict(spec)
        return str(self._call("POST", "/v1/tasks", body)["id"])

    def get_task(self, task_id: str, view: View | str = View.FULL) -> TesTaskDoc:
        q = urllib.parse.urlencode({"view": View(view).value})
        data = self._call("GET", f"/v1/tasks/{urllib.parse.quote(task_id)}?{q}")
        return TesTaskDoc.from_dict(data)

    def list_tasks(self, view: View | str = View.MINIMAL) -> list[TesTaskDoc]:
        q = urllib.parse.urlencode({"view": View(view).value})
        data = self._call("GET", f"/v1/tasks?{q}")
        return [TesTaskDoc.from_dict(d) for d in data.get("tasks") or []]

    def cancel_task(self, task_id: str) -> None:
        self._call("POST", f"/v1/tasks/{urllib.parse.quote(task_id)}:cancel", {})
