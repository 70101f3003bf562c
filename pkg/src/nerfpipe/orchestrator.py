"""Central scheduler server: drives each job from upload to result.

Every job state change goes through ``MetadataStore.transition_job`` so the
store stays the single source of truth; the orchestrator itself holds no
state that a restart would lose.  Fleet events are consumed from
``Fleet.outbox`` at-least-once (peek, handle, then pop), and handlers treat a
state mismatch as "already done".
"""

from __future__ import annotations

import logging
import secrets
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import (
    AuthError,
    ConflictError,
    NoCapacityError,
    NoDataError,
    NotFoundError,
    PreconditionError,
    ResultNotReadyError,
    ValidationError,
)
from .fleet import (
    PROCESSING_PROFILE,
    TRAINING_PROFILE,
    EvictionNotice,
    Fleet,
    NodeEvicted,
    NodeReady,
    TraceProfile,
    WorkloadComplete,
)
from .metadata import DataManifest, JobRecord, JobState, MetadataStore
from .nodes import NodeRecord, NodeState
from .scheduler import AllocateNew, NodeMetrics, ReuseNode, SchedulerConfig, select_node
from .storage import BlobRef, BlobStore, ContainerKind, ContainerRef

log = logging.getLogger(__name__)

PROCESSING = "processing"
TRAINING = "training"
PHASE_STATE = {PROCESSING: JobState.PROCESSING, TRAINING: JobState.TRAINING}

# states in which a job owns its assigned node
_ON_NODE = (
    JobState.PROVISIONING,
    JobState.MOUNTING,
    JobState.PROCESSING,
    JobState.TRAINING,
    JobState.UNMOUNTING,
)
_LOST = (NodeState.DEALLOCATED, NodeState.EVICTING, NodeState.EVICTED)


@dataclass(frozen=True)
class WorkloadSpec:
    duration_s: float
    profile: TraceProfile

    def __post_init__(self):
        if self.duration_s < 0:
            raise ValidationError("workload duration must be >= 0")


def default_workloads() -> dict:
    return {
        PROCESSING: WorkloadSpec(600.0, PROCESSING_PROFILE),
        TRAINING: WorkloadSpec(1200.0, TRAINING_PROFILE),
    }


@dataclass
class OrchestratorConfig:
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    allow_allocation: bool = True
    max_live_nodes: Optional[int] = None
    max_attempts: int = 5
    idle_ttl_s: float = 300.0
    metrics_window_s: float = 60.0
    grant_ttl_s: float = 3600.0
    workloads: dict = field(default_factory=default_workloads)

    def __post_init__(self):
        if self.max_attempts < 0:
            raise ValidationError("max_attempts must be >= 0")
        if self.idle_ttl_s < 0 or self.metrics_window_s <= 0 or self.grant_ttl_s <= 0:
            raise ValidationError("idle_ttl_s >= 0, metrics_window_s > 0 and grant_ttl_s > 0 required")
        missing = {PROCESSING, TRAINING} - set(self.workloads)
        if missing:
            raise ValidationError(f"workloads missing phases: {sorted(missing)}")


@dataclass(frozen=True)
class UploadGrant:
    job_id: str
    container: ContainerRef
    upload_token: str
    expires_at: float

    def permits(self, container: str) -> bool:
        return container == self.container.name


@dataclass(frozen=True)
class DispatchAction:
    job_id: str
    action: str
    node_id: Optional[str] = None
    decision: Optional[dict] = None
    note: str = ""


@dataclass
class ReconcileReport:
    scanned: int = 0
    transitions_applied: int = 0
    repairs: list = field(default_factory=list)
    anomalies: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "scanned": self.scanned,
            "transitions_applied": self.transitions_applied,
            "repairs": list(self.repairs),
            "anomalies": list(self.anomalies),
        }


TransitionListener = Callable[[JobRecord, JobState, JobState], None]


class Orchestrator:
    def __init__(
        self,
        store: BlobStore,
        metadata: MetadataStore,
        fleet: Fleet,
        config: Optional[OrchestratorConfig] = None,
        webhook_sender: Optional[Callable[[str, dict], None]] = None,
    ):
        self.store = store
        self.metadata = metadata
        self.fleet = fleet
        self.clock = fleet.clock
        self.config = config or OrchestratorConfig()
        self.webhook_sender = webhook_sender
        self.listeners: list[TransitionListener] = []
        self.decisions: list[dict] = []
        self.anomalies: list[tuple[str, str]] = []
        self._lock = threading.RLock()
        self._dispatching = threading.Lock()
        self._reconciling = threading.Lock()
        self._idle_wakeups: dict[str, float] = {}

    # helpers --------------------------------------------------------------

    def now(self) -> float:
        return self.clock.now()

    def _move(self, job_id: str, src: JobState, dst: JobState, **annotations) -> JobRecord:
        now = self.now()
        rec = self.metadata.transition_job(job_id, src, dst, annotations, at=now)
        self.fleet.log.append(
            now,
            job_id,
            f"{src.value}->{dst.value}",
            node=rec.assigned_node or annotations.get("from_node"),
            attempts=rec.attempts,
        )
        for listener in list(self.listeners):
            listener(rec, src, dst)
        return rec

    def _anomaly(self, subject: str, text: str) -> None:
        log.warning("%s: %s", subject, text)
        self.anomalies.append((subject, text))

    def _notify(self, job: JobRecord, kind: str, payload: dict) -> None:
        self.metadata.add_notification(job.id, kind, payload, at=self.now())
        if job.webhook_url and self.webhook_sender is not None:
            try:
                self.webhook_sender(job.webhook_url, {"job_id": job.id, "kind": kind, **payload})
            except Exception as exc:  # webhook delivery is best-effort
                self._anomaly(job.id, f"webhook delivery failed: {exc}")

    def _reserved_nodes(self) -> dict[str, str]:
        return {j.assigned_node: j.id for j in self.metadata.query_jobs(_ON_NODE) if j.assigned_node}

    def _artifact_path(self, job: JobRecord, phase: str) -> str:
        return f"{job.id}/attempt-{job.attempts}/{phase}.bin"

    def _release_mounts(self, job: JobRecord, node: Optional[NodeRecord]) -> list[str]:
        if node is None:
            return []
        released = []
        wanted = {c.name for c in (job.input_container, job.output_container) if c is not None}
        for ref in sorted(node.mounted_containers, key=lambda c: c.name):
            if ref.name in wanted:
                self.fleet.unmount(ref, node.id)
                released.append(ref.name)
        return released

    # client API -----------------------------------------------------------

    def create_job(
        self, manifest: DataManifest, webhook_url: Optional[str] = None
    ) -> tuple[JobRecord, UploadGrant]:
        """Allocate an input container and register the job as AwaitingData."""
        if not isinstance(manifest, DataManifest):
            manifest = DataManifest.from_dict(manifest)
        with self._lock:
            job_id = f"job-{self.metadata.next_sequence('job'):06d}"
            container = self._create_container(f"{job_id}-in", ContainerKind.INPUT)
            now = self.now()
            rec = JobRecord(
                id=job_id,
                state=JobState.AWAITING_DATA,
                manifest=manifest,
                input_container=container,
                created_at=now,
                timestamps={JobState.AWAITING_DATA.value: now},
                webhook_url=webhook_url,
                history=[{"from": None, "to": JobState.AWAITING_DATA.value, "at": now, "annotations": {}}],
            )
            self.metadata.upsert_job(rec)
            self.fleet.log.append(now, job_id, "created->AwaitingData", name=manifest.name)
            token = secrets.token_urlsafe(24)
            expires = now + self.config.grant_ttl_s
            self.metadata.put_grant(token, job_id, container.name, expires)
            return rec, UploadGrant(job_id, container, token, expires)

    def _create_container(self, base: str, kind: ContainerKind, tries: int = 3) -> ContainerRef:
        last: Optional[ConflictError] = None
        for i in range(tries):
            name = base if i == 0 else f"{base}-{i + 1}"
            try:
                return self.store.create_container(name, kind)
            except ConflictError as exc:
                last = exc
        raise ConflictError(f"could not allocate a container after {tries} attempts: {last}")

    def authorize_upload(self, job_id: str, token: str) -> ContainerRef:
        grant = self.metadata.lookup_grant(token or "")
        if grant is None:
            raise AuthError("unknown upload token")
        g_job, g_container, expires_at = grant
        if g_job != job_id:
            raise AuthError("upload token belongs to another job")
        if self.now() > expires_at:
            raise AuthError("upload token expired")
        return self.store.get_container(g_container)

    def upload(self, job_id: str, path: str, data, token: str) -> BlobRef:
        container = self.authorize_upload(job_id, token)
        job = self.metadata.get_job(job_id)
        if job.state is not JobState.AWAITING_DATA:
            raise ConflictError(f"job {job_id} is {job.state.value}; uploads are closed")
        return self.store.put_blob(container, path, data)

    def complete_upload(self, job_id: str, details: Optional[dict] = None) -> JobRecord:
        """Close the upload window and enqueue the job."""
        with self._lock:
            job = self.metadata.get_job(job_id)
            if job.state is not JobState.AWAITING_DATA:
                raise ConflictError(f"job {job_id} is {job.state.value}, not AwaitingData")
            if not self.store.list_blobs(job.input_container):
                raise PreconditionError(f"job {job_id}: input container is empty")
            details = dict(details or {})
            webhook = details.pop("webhook_url", None)
            manifest = DataManifest.from_dict({**job.manifest.to_dict(), **details})
            if webhook:
                self.metadata.update_fields(job_id, webhook_url=webhook)
            job = self._move(job_id, JobState.AWAITING_DATA, JobState.DATA_READY, manifest=manifest)
            return self._enqueue(job)

    def _enqueue(self, job: JobRecord) -> JobRecord:
        out = self._ensure_output_container(job)
        seq = self.metadata.next_sequence("queue")
        return self._move(job.id, JobState.DATA_READY, JobState.QUEUED, output_container=out, queue_seq=seq)

    def _ensure_output_container(self, job: JobRecord) -> ContainerRef:
        if job.output_container is not None:
            return job.output_container
        try:
            ref = self.store.get_container(f"{job.id}-out")
            if ref.kind is ContainerKind.OUTPUT:
                return ref
        except NotFoundError:
            pass
        return self._create_container(f"{job.id}-out", ContainerKind.OUTPUT)

    # dispatch -------------------------------------------------------------

    def _candidates(self, reserved: dict[str, str]) -> list[tuple[NodeRecord, NodeMetrics]]:
        out = []
        for node in self.fleet.list_nodes():
            if node.id in reserved:
                continue
            if node.is_idle:
                try:
                    metrics = self.fleet.sample_metrics(node.id, self.config.metrics_window_s)
                except NoDataError:
                    metrics = NodeMetrics.idle()
                out.append((node, metrics))
            elif node.state is NodeState.DEALLOCATED:
                out.append((node, NodeMetrics.idle()))
        return out

    def _may_allocate(self) -> bool:
        if not self.config.allow_allocation:
            return False
        cap = self.config.max_live_nodes
        if cap is None:
            return True
        live = sum(1 for n in self.fleet.nodes.values() if n.state is not NodeState.DEALLOCATED)
        return live < cap

    def dispatch_pending(self, config: Optional[SchedulerConfig] = None) -> list[DispatchAction]:
        """Place every Queued job, oldest first, one job per node.

        A job that cannot be placed stays Queued and is reported with action
        ``"wait"``.  Only one dispatch pass runs at a time; a concurrent call
        returns an empty list.
        """
        if not self._dispatching.acquire(blocking=False):
            return []
        try:
            with self._lock:
                return self._dispatch(config or self.config.scheduler)
        finally:
            self._dispatching.release()

    def _dispatch(self, config: SchedulerConfig) -> list[DispatchAction]:
        actions: list[DispatchAction] = []
        queued = sorted(self.metadata.query_jobs(JobState.QUEUED), key=lambda j: (j.queue_seq or 0, j.id))
        for job in queued:
            reserved = self._reserved_nodes()
            try:
                decision = select_node(self._candidates(reserved), self._may_allocate(), config)
            except NoCapacityError as exc:
                actions.append(DispatchAction(job.id, "wait", note=str(exc)))
                continue
            audit = {"job_id": job.id, "at": self.now(), **decision.as_dict()}
            self.decisions.append(audit)
            act = decision.action
            if isinstance(act, AllocateNew):
                node = self.fleet.provision_node(act.node_class)
                kind = "allocate"
            else:
                node = self.fleet.get(act.node_id)
                kind = "reuse"
                if node.state is NodeState.DEALLOCATED:
                    self.fleet.start_node(node.id)
                    kind = "restart"
            try:
                self._move(job.id, JobState.QUEUED, JobState.PROVISIONING, assigned_node=node.id, decision=act.describe())
            except ConflictError as exc:
                self._anomaly(job.id, f"dispatch lost a race: {exc}")
                continue
            actions.append(DispatchAction(job.id, kind, node.id, audit))
            if node.is_idle:
                self._begin_mounting(job.id, node)
        return actions

    def _begin_mounting(self, job_id: str, node: NodeRecord) -> JobRecord:
        job = self._move(job_id, JobState.PROVISIONING, JobState.MOUNTING)
        return self._mount_and_process(job, node)

    def _mount_and_process(self, job: JobRecord, node: NodeRecord) -> JobRecord:
        self.fleet.mount(job.input_container, node.id)
        self.fleet.mount(job.output_container, node.id)
        job = self._move(job.id, JobState.MOUNTING, JobState.PROCESSING)
        self._run_phase(job, PROCESSING)
        return job

    def _run_phase(self, job: JobRecord, phase: str) -> None:
        spec: WorkloadSpec = self.config.workloads[phase]
        self.fleet.run_workload(
            job.assigned_node,
            job.id,
            phase,
            spec.duration_s,
            spec.profile,
            artifact_path=self._artifact_path(job, phase),
        )

    # fleet events ---------------------------------------------------------

    def handle_node_ready(self, node_id: str) -> Optional[JobRecord]:
        with self._lock:
            node = self.fleet.get(node_id)
            if not node.is_idle:
                return None
            waiting = self.metadata.query_jobs(JobState.PROVISIONING, assigned_node=node_id)
            if not waiting:
                return None
            return self._begin_mounting(waiting[0].id, node)

    def handle_phase_complete(self, job_id: str, phase: str, artifact: Optional[BlobRef]) -> JobRecord:
        """Advance a job whose workload phase just finished.

        Raises:
            ConflictError: the job is not in the state ``phase`` implies.
        """
        with self._lock:
            if phase not in PHASE_STATE:
                raise ValidationError(f"unknown phase {phase!r}")
            job = self.metadata.get_job(job_id)
            expected = PHASE_STATE[phase]
            if job.state is not expected:
                raise ConflictError(f"job {job_id} is {job.state.value}; cannot finish {phase}")
            node = self.fleet.nodes.get(job.assigned_node or "")
            if node is None or node.state in _LOST:
                raise ConflictError(f"job {job_id}: node {job.assigned_node} is no longer live")
            if artifact is None:
                self._release_mounts(job, node)
                return self._move(job_id, expected, JobState.FAILED, failure_reason=f"{phase} produced no artifact", assigned_node=None, from_node=node.id)
            artifacts = {**job.artifacts, phase: artifact}
            if phase == PROCESSING:
                job = self._move(job_id, JobState.PROCESSING, JobState.TRAINING, artifacts=artifacts)
                if node.is_idle:
                    self._run_phase(job, TRAINING)
                return job
            job = self._move(job_id, JobState.TRAINING, JobState.UNMOUNTING, artifacts=artifacts, result=artifact)
            return self._finish(job, node)

    def _finish(self, job: JobRecord, node: Optional[NodeRecord]) -> JobRecord:
        self._release_mounts(job, node)
        job = self._move(job.id, JobState.UNMOUNTING, JobState.COMPLETED, result=job.result)
        self._notify(job, "completed", {"result": job.result.to_dict() if job.result else None})
        return job

    def _requeue(self, job: JobRecord, node: Optional[NodeRecord], reason: str) -> JobRecord:
        self._release_mounts(job, node)
        from_node = job.assigned_node
        restarting = job.state in (JobState.PROCESSING, JobState.TRAINING)
        if restarting and job.attempts + 1 > self.config.max_attempts:
            failed = self._move(
                job.id,
                job.state,
                JobState.FAILED,
                assigned_node=None,
                failure_reason=f"gave up after {job.attempts} restarts; last: {reason}",
                from_node=from_node,
            )
            self._notify(failed, "failed", {"reason": failed.failure_reason})
            return failed
        return self._move(job.id, job.state, JobState.QUEUED, assigned_node=None, reason=reason, from_node=from_node)

    def handle_eviction_notice(self, node_id: str) -> list[JobRecord]:
        """Pull every job off a node that is about to be reclaimed."""
        with self._lock:
            node = self.fleet.nodes.get(node_id)
            updated = []
            for job in self.metadata.query_jobs(_ON_NODE, assigned_node=node_id):
                if job.state is JobState.UNMOUNTING:
                    updated.append(self._finish(job, node))
                else:
                    updated.append(self._requeue(job, node, f"node {node_id} evicted"))
            return updated

    def handle_node_evicted(self, node_id: str) -> None:
        with self._lock:
            node = self.fleet.get(node_id)
            if node.state is not NodeState.EVICTED:
                return
            if node.mounted_containers:
                self._anomaly(node_id, f"evicted with mounts {sorted(c.name for c in node.mounted_containers)}")
            self.fleet.deallocate_node(node_id)

    def _handle(self, event) -> None:
        if isinstance(event, NodeReady):
            self.handle_node_ready(event.node_id)
        elif isinstance(event, WorkloadComplete):
            self.handle_phase_complete(event.job_id, event.phase, event.artifact)
        elif isinstance(event, EvictionNotice):
            self.handle_eviction_notice(event.node_id)
        elif isinstance(event, NodeEvicted):
            self.handle_node_evicted(event.node_id)
        else:
            raise TypeError(f"unknown fleet event {event!r}")

    def drain_events(self) -> int:
        handled = 0
        outbox = self.fleet.outbox
        while outbox:
            event = outbox[0]
            try:
                self._handle(event)
            except (ConflictError, NotFoundError) as exc:
                self._anomaly(type(event).__name__, f"stale event ignored: {exc}")
            outbox.popleft()
            handled += 1
        return handled

    # housekeeping ---------------------------------------------------------

    def scale_down_idle(self) -> list[str]:
        """Deallocate nodes idle for at least the configured TTL."""
        now = self.now()
        ttl = self.config.idle_ttl_s
        reserved = self._reserved_nodes()
        released = []
        for node in self.fleet.list_nodes():
            if not node.is_idle or node.id in reserved or node.idle_since is None:
                continue
            expiry = node.idle_since + ttl
            if now >= expiry:
                self.fleet.deallocate_node(node.id)
                self._idle_wakeups.pop(node.id, None)
                released.append(node.id)
            elif self._idle_wakeups.get(node.id) != expiry:
                self._idle_wakeups[node.id] = expiry
                self.clock.call_at(expiry, lambda: None, label=f"idle-check:{node.id}")
        return released

    def pump(self) -> int:
        """Handle queued fleet events, trim idle nodes and dispatch, until quiet."""
        total = 0
        with self._lock:
            while True:
                handled = self.drain_events()
                self.scale_down_idle()
                actions = self.dispatch_pending()
                total += handled
                placed = [a for a in actions if a.action != "wait"]
                if not self.fleet.outbox and not placed:
                    return total

    def reconcile(self) -> ReconcileReport:
        """Scan live jobs against the fleet and repair what drifted.

        Running it twice in a row applies no transitions the second time.
        """
        report = ReconcileReport()
        if not self._reconciling.acquire(blocking=False):
            report.anomalies.append(("reconcile", "already running"))
            return report
        try:
            with self._lock:
                self._reconcile(report)
        finally:
            self._reconciling.release()
        return report

    def _reconcile(self, report: ReconcileReport) -> None:
        live = [j for j in self.metadata.query_jobs() if not j.state.terminal]
        for job in live:
            report.scanned += 1
            before = len(job.history)
            try:
                self._repair(job, report)
            except (ConflictError, NotFoundError) as exc:
                report.anomalies.append((job.id, f"repair skipped: {exc}"))
            after = len(self.metadata.get_job(job.id).history)
            report.transitions_applied += after - before
        active = {j.assigned_node: j for j in self.metadata.query_jobs(_ON_NODE) if j.assigned_node}
        for node in self.fleet.list_nodes():
            owner = active.get(node.id)
            allowed = set()
            if owner is not None:
                allowed = {c.name for c in (owner.input_container, owner.output_container) if c}
            for ref in sorted(node.mounted_containers, key=lambda c: c.name):
                if ref.name not in allowed:
                    self.fleet.unmount(ref, node.id)
                    report.repairs.append((node.id, f"released dangling mount {ref.name}"))

    def _repair(self, job: JobRecord, report: ReconcileReport) -> None:
        if job.state is JobState.DATA_READY:
            self._enqueue(job)
            report.repairs.append((job.id, "enqueued job stuck in DataReady"))
            return
        if job.state not in _ON_NODE:
            return
        node = self.fleet.nodes.get(job.assigned_node or "")
        if node is None or node.state in _LOST:
            where = "missing" if node is None else node.state.value
            if job.state is JobState.UNMOUNTING:
                self._finish(job, node)
                report.repairs.append((job.id, f"completed while node {where}"))
            else:
                self._requeue(job, node, f"orphaned on {where} node {job.assigned_node}")
                report.repairs.append((job.id, f"requeued from {where} node {job.assigned_node}"))
            return
        foreign = node.current_job is not None and node.current_job != job.id
        if foreign:
            report.anomalies.append((job.id, f"node {node.id} is running {node.current_job}"))
            self._requeue(job, node, f"node {node.id} taken by {node.current_job}")
            return
        if job.state is JobState.PROVISIONING:
            if node.is_idle:
                self._begin_mounting(job.id, node)
                report.repairs.append((job.id, "resumed after missed ready event"))
        elif job.state is JobState.MOUNTING:
            if node.is_idle:
                self._mount_and_process(job, node)
                report.repairs.append((job.id, "finished interrupted mount"))
        elif job.state in (JobState.PROCESSING, JobState.TRAINING):
            phase = PROCESSING if job.state is JobState.PROCESSING else TRAINING
            run = self.fleet.active_run(node.id)
            if run is not None and run.job_id == job.id and run.phase == phase:
                return
            if node.is_idle:
                path = self._artifact_path(job, phase)
                out = job.output_container
                if out is not None and self.store.has_blob(out, path):
                    self.handle_phase_complete(job.id, phase, self.store.stat_blob(out, path))
                    report.repairs.append((job.id, f"recorded finished {phase}"))
                else:
                    self._run_phase(job, phase)
                    report.repairs.append((job.id, f"relaunched lost {phase} run"))
        elif job.state is JobState.UNMOUNTING:
            self._finish(job, node)
            report.repairs.append((job.id, "finished interrupted unmount"))

    # read-only views ------------------------------------------------------

    def get_status(self, job_id: str) -> dict:
        job = self.metadata.get_job(job_id)
        view = job.to_dict()
        view["notifications"] = self.metadata.notifications(job_id)
        return view

    def fetch_result(self, job_id: str) -> bytes:
        job = self.metadata.get_job(job_id)
        if job.state is not JobState.COMPLETED or job.result is None:
            raise ResultNotReadyError(f"job {job_id} is {job.state.value}; no result yet")
        return self.store.get_blob(job.result.container, job.result.path)

    def list_jobs(self) -> list[dict]:
        return [
            {
                "id": j.id,
                "name": j.manifest.name,
                "state": j.state.value,
                "attempts": j.attempts,
                "assigned_node": j.assigned_node,
            }
            for j in self.metadata.query_jobs()
        ]

    def list_nodes(self) -> list[dict]:
        return self.fleet.view(self.config.metrics_window_s)
