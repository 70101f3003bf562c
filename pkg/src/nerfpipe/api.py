"""HTTP front end for the orchestrator.

Routes::

    POST /jobs                          create a job, returns an upload grant
    PUT  /jobs/{id}/data/{path}         upload one blob (Bearer upload token)
    POST /jobs/{id}/complete-upload     close uploads and enqueue
    GET  /jobs/{id}                     job view
    GET  /jobs                          job summaries
    GET  /jobs/{id}/result              result artifact bytes
    GET  /nodes                         fleet view
    POST /admin/evict/{node_id}         inject an eviction (simulation control)
    POST /admin/tick?seconds=S          advance the virtual clock

Errors come back as ``{"error": <exception class>, "detail": <message>}``.
"""

from __future__ import annotations

import logging
import tempfile
import threading
from contextlib import asynccontextmanager
from typing import Any, Callable, Optional

import httpx
from fastapi import Body, FastAPI, Query, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse, Response

from . import errors as E
from .clock import VirtualClock, WallClock, make_clock
from .config import ServiceConfig
from .fleet import Fleet
from .metadata import DataManifest, MetadataStore
from .orchestrator import Orchestrator
from .storage import BlobStore

log = logging.getLogger(__name__)

# most specific first
_STATUS = [
    (E.AuthError, 401),
    (E.ResultNotReadyError, 409),
    (E.NotFoundError, 404),
    (E.ValidationError, 422),
    (E.PreconditionError, 412),
    (E.ConflictError, 409),
    (E.TransitionError, 409),
    (E.UnsupportedClassError, 400),
    (E.NoCapacityError, 503),
    (E.ConfigError, 400),
    (E.NerfPipeError, 400),
]


def status_for(exc: Exception) -> int:
    for cls, code in _STATUS:
        if isinstance(exc, cls):
            return code
    return 500


def httpx_webhook_sender(timeout_s: float = 5.0) -> Callable[[str, dict], None]:
    """POST notification payloads as JSON; failures surface to the caller."""

    def send(url: str, payload: dict) -> None:
        httpx.post(url, json=payload, timeout=timeout_s).raise_for_status()

    return send


class Service:
    """One orchestrator stack plus the loop that keeps it moving."""

    def __init__(
        self,
        config: ServiceConfig,
        clock: Optional[VirtualClock] = None,
        webhook_sender: Optional[Callable[[str, dict], None]] = None,
    ):
        self.config = config
        self.clock = clock or make_clock(config.clock)
        self.store = BlobStore(config.storage_root, clock=self.clock.now)
        self.metadata = MetadataStore(config.metadata_path, clock=self.clock.now)
        self.fleet = Fleet(self.clock, self.store, config.fleet, seed=config.seed)
        self.orchestrator = Orchestrator(
            self.store, self.metadata, self.fleet, config.orchestrator, webhook_sender=webhook_sender
        )
        self.lock = threading.RLock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        # jobs in flight when the previous process stopped are repaired here
        self.startup_report = self.orchestrator.reconcile().as_dict()

    @property
    def virtual(self) -> bool:
        return not isinstance(self.clock, WallClock)

    def settle(self) -> None:
        """Fire due timers and pump until nothing is pending at the current time."""
        with self.lock:
            while True:
                self.clock.fire_due()
                self.orchestrator.pump()
                nxt = self.clock.next_event_time()
                if not self.fleet.outbox and (nxt is None or nxt > self.clock.now()):
                    return

    def advance(self, seconds: float) -> float:
        """Advance the virtual clock, handling every event on the way."""
        if not self.virtual:
            raise E.PreconditionError("the service runs on the wall clock; tick is unavailable")
        if not seconds >= 0:
            raise E.ValidationError("seconds must be >= 0")
        with self.lock:
            target = self.clock.now() + seconds
            self.settle()
            while True:
                nxt = self.clock.next_event_time()
                if nxt is None or nxt > target:
                    break
                self.clock.advance_to(nxt)
                self.settle()
            self.clock.advance_to(target)
            self.settle()
            return self.clock.now()

    def start_background(self) -> None:
        if self.virtual or self._thread is not None:
            return

        def loop():
            while not self._stop.wait(self.config.tick_interval_s):
                try:
                    self.settle()
                except Exception:  # keep the loop alive; the error is logged
                    log.exception("background tick failed")

        self._thread = threading.Thread(target=loop, name="nerfpipe-tick", daemon=True)
        self._thread.start()

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        self.metadata.close()


def create_app(service: Service) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app):
        service.start_background()
        yield
        service._stop.set()

    app = FastAPI(title="nerfpipe", lifespan=lifespan)
    app.state.service = service
    orch = service.orchestrator

    @app.exception_handler(E.NerfPipeError)
    async def _domain_error(request: Request, exc: E.NerfPipeError):
        return JSONResponse({"error": type(exc).__name__, "detail": str(exc)}, status_code=status_for(exc))

    def call(fn: Callable, *args, settle: bool = False, **kwargs) -> Any:
        with service.lock:
            out = fn(*args, **kwargs)
            if settle:
                service.settle()
            return out

    @app.post("/jobs", status_code=201)
    def create_job(payload: dict = Body(...)):
        raw = payload.get("manifest", payload)
        manifest = DataManifest.from_dict(raw)
        job, grant = call(orch.create_job, manifest, webhook_url=payload.get("webhook_url"))
        return {
            "job_id": job.id,
            "upload_url": f"/jobs/{job.id}/data/",
            "upload_token": grant.upload_token,
            "expires_at": grant.expires_at,
        }

    @app.put("/jobs/{job_id}/data/{path:path}")
    async def upload(job_id: str, path: str, request: Request):
        auth = request.headers.get("authorization", "")
        scheme, _, token = auth.partition(" ")
        if scheme.lower() != "bearer" or not token:
            raise E.AuthError("missing bearer upload token")
        with tempfile.SpooledTemporaryFile(max_size=16 << 20) as buf:
            async for chunk in request.stream():
                buf.write(chunk)
            buf.seek(0)
            blob = await run_in_threadpool(orch.upload, job_id, path, buf, token.strip())
        return {"blob": blob.path, "size": blob.size_bytes, "checksum": blob.checksum}

    @app.post("/jobs/{job_id}/complete-upload")
    def complete_upload(job_id: str, details: Optional[dict] = Body(None)):
        call(orch.complete_upload, job_id, details or {}, settle=True)
        return orch.get_status(job_id)

    @app.get("/jobs")
    def list_jobs():
        return orch.list_jobs()

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        return orch.get_status(job_id)

    @app.get("/jobs/{job_id}/result")
    def get_result(job_id: str):
        data = orch.fetch_result(job_id)
        job = service.metadata.get_job(job_id)
        return Response(
            data,
            media_type="application/octet-stream",
            headers={"X-Checksum-SHA256": job.result.checksum, "X-Result-Path": job.result.path},
        )

    @app.get("/nodes")
    def list_nodes():
        with service.lock:
            return orch.list_nodes()

    @app.post("/admin/evict/{node_id}", status_code=202)
    def evict(node_id: str, notice_s: float = Query(30.0, ge=0)):
        notice = call(service.fleet.inject_eviction, node_id, notice_s, settle=True)
        return {"accepted": True, "node_id": node_id, "evicted_at": notice.evicted_at}

    @app.post("/admin/tick", status_code=202)
    def tick(seconds: float = Query(..., ge=0)):
        return {"accepted": True, "now": service.advance(seconds)}

    @app.post("/admin/reconcile")
    def reconcile():
        return call(orch.reconcile).as_dict()

    return app


def build_app(config: ServiceConfig, webhooks: bool = True) -> FastAPI:
    sender = httpx_webhook_sender() if webhooks else None
    return create_app(Service(config, webhook_sender=sender))
