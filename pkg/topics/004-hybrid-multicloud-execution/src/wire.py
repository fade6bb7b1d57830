#!/usr/bin/env python3
"""HTTP apps for live wire mode: TES node, gateway and metadata repository.

Served components run on the same classes as simulated ones. A
:class:`LiveRuntime` maps wall-clock seconds since start onto the simnet
engine before each request, under one lock, so staging and run timers,
lease expiry and failure windows fire in real time.
"""
from __future__ import annotations

import logging
import socket
import threading
import time
from contextlib import contextmanager
from typing import Any, Callable, Iterator

from fastapi import Body, FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from core import DataRef, HybridMeshError, SiteId, TaskSpec
from metadata_repo import Conflict, MetadataRepository
from settings import TOOL_NAME, TOOL_VERSION
from simnet import Engine
from tes_layer import Gateway, TesEndpoint, View

log = logging.getLogger(__name__)


class BindError(HybridMeshError):
    pass


class LiveRuntime:
    def __init__(self, engine: Engine, *, clock: Callable[[], float] = time.monotonic) -> None:
        self.engine = engine
        self._clock = clock
        self._start = clock()
        self._lock = threading.Lock()

    def elapsed(self) -> float:
        return max(0.0, self._clock() - self._start)

    @contextmanager
    def tick(self) -> Iterator[Engine]:
        with self._lock:
            self.engine.run_until(max(self.engine.now, self.elapsed()))
            yield self.engine


def check_bind(host: str, port: int) -> None:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
    except OSError as e:
        raise BindError(f"cannot listen on {host}:{port}: {e}") from e
    finally:
        sock.close()


def _error_body(exc: HybridMeshError) -> dict[str, Any]:
    body: dict[str, Any] = {"detail": str(exc), "error": type(exc).__name__}
    if isinstance(exc, Conflict):
        body["current"] = exc.current.to_dict()
    return body


def _install_error_handlers(app: FastAPI) -> None:
    @app.exception_handler(HybridMeshError)
    async def domain_error(_request: Request, exc: HybridMeshError) -> JSONResponse:
        return JSONResponse(status_code=exc.http_status, content=_error_body(exc))

    @app.exception_handler(RequestValidationError)
    async def bad_request(_request: Request, exc: RequestValidationError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc.errors()), "error": "MalformedSpec"})


# -- TES node / gateway -------------------------------------------------------


def create_tes_app(endpoint: TesEndpoint, runtime: LiveRuntime) -> FastAPI:
    app = FastAPI(title=f"{TOOL_NAME} TES", version=TOOL_VERSION)
    _install_error_handlers(app)
    gateway = endpoint if isinstance(endpoint, Gateway) else None

    @contextmanager
    def serving() -> Iterator[None]:
        answered = None
        if gateway is not None:
            with runtime.tick():
                due = gateway.sweep_due()
            # remote nodes may block for their whole retry budget
            if due:
                answered = gateway.collect_heartbeats()
        with runtime.tick():
            if gateway is not None and answered is not None:
                gateway.apply_heartbeats(answered)
            yield

    @app.get("/v1/service-info")
    def service_info() -> dict[str, Any]:
        with serving():
            return endpoint.service_info()

    @app.post("/v1/tasks")
    def create_task(body: dict[str, Any] = Body(...)) -> dict[str, str]:
        spec = TaskSpec.from_dict(body)
        with serving():
            return {"id": endpoint.create_task(spec)}

    @app.get("/v1/tasks")
    def list_tasks(view: View = Query(View.MINIMAL)) -> dict[str, Any]:
        with serving():
            return {"tasks": [doc.to_dict(view) for doc in endpoint.list_tasks(view)]}

    @app.get("/v1/tasks/{task_id}")
    def get_task(task_id: str, view: View = Query(View.FULL)) -> dict[str, Any]:
        with serving():
            return endpoint.get_task(task_id, view).to_dict(view)

    @app.post("/v1/tasks/{task_id}:cancel")
    def cancel_task(task_id: str) -> dict[str, Any]:
        with serving():
            endpoint.cancel_task(task_id)
            return {}

    if gateway is not None:

        @app.get("/v1/nodes")
        def list_nodes() -> dict[str, Any]:
            with serving():
                return {"nodes": [gateway.nodes[k].to_dict() for k in sorted(gateway.nodes)]}

        @app.post("/v1/nodes/{node_id}/heartbeat")
        def heartbeat(node_id: str) -> dict[str, Any]:
            with runtime.tick():
                return {"node_id": node_id, "health": gateway.heartbeat(node_id).value}

        @app.get("/v1/routes")
        def routes() -> dict[str, Any]:
            with runtime.tick():
                return {"decisions": [d.to_dict() for d in gateway.decisions]}

    return app


# -- metadata repository ------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RegisterBody(_Strict):
    batch_id: str = Field(min_length=1)
    input: dict[str, Any]


class ClaimBody(_Strict):
    site: SiteId
    expected_version: int
    lease_s: float


class ReportBody(_Strict):
    site: SiteId
    tag: str
    output: str | None = None


class ReleaseBody(_Strict):
    site: SiteId


def create_repo_app(repo: MetadataRepository, runtime: LiveRuntime) -> FastAPI:
    app = FastAPI(title=f"{TOOL_NAME} metadata repository", version=TOOL_VERSION)
    _install_error_handlers(app)

    @app.post("/batches", status_code=201)
    def register(body: RegisterBody) -> dict[str, Any]:
        ref = DataRef.from_dict(body.input)
        with runtime.tick():
            return repo.register_batch(body.batch_id, ref).to_dict()

    @app.get("/batches")
    def list_batches(tag: str | None = None) -> dict[str, Any]:
        with runtime.tick():
            return {"batches": [r.to_dict() for r in repo.list_batches(tag)]}

    @app.get("/batches/{batch_id}")
    def get_batch(batch_id: str) -> dict[str, Any]:
        with runtime.tick():
            return repo.get(batch_id).to_dict()

    @app.post("/batches/{batch_id}/claim")
    def claim(batch_id: str, body: ClaimBody) -> dict[str, Any]:
        with runtime.tick():
            return repo.claim(batch_id, body.site, body.expected_version, body.lease_s).to_dict()

    @app.post("/batches/{batch_id}/report")
    def report(batch_id: str, body: ReportBody) -> dict[str, Any]:
        with runtime.tick():
            return repo.report(batch_id, body.site, body.tag, output=body.output).to_dict()

    @app.post("/batches/{batch_id}/release")
    def release(batch_id: str, body: ReleaseBody) -> dict[str, Any]:
        with runtime.tick():
            return repo.release(batch_id, body.site).to_dict()

    @app.get("/counts")
    def counts() -> dict[str, int]:
        with runtime.tick():
            return repo.counts()

    return app
