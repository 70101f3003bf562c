"""Simulated pool of spot and container-instance nodes.

The fleet owns every ``NodeRecord``.  Commands (provision, evict, run a
workload...) are plain method calls; anything the orchestrator must react
to is appended to ``Fleet.outbox`` in the order it happened.  All timing
runs off the injected clock, so a virtual clock plus a seed makes a run
bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

from .clock import Timer, VirtualClock
from .errors import (
    IllegalTransitionError,
    MountError,
    NoDataError,
    NotFoundError,
    PreconditionError,
    UnsupportedClassError,
    ValidationError,
)
from .nodes import NodeClass, NodeRecord, NodeState
from .scheduler import NodeMetrics
from .storage import BlobRef, BlobStore, ContainerKind, ContainerRef

log = logging.getLogger(__name__)

DEFAULT_NOTICE_S = 30.0

_ID_PREFIX = {NodeClass.SPOT: "spot", NodeClass.CONTAINER_INSTANCE: "aci"}


@dataclass(frozen=True)
class ColdStartModel:
    """Gaussian cold-start duration clipped below at ``floor_s``.

    Defaults are the mean (70.5174 s, rounded) and sample spread (0.12 s) of
    ten measured spot-VM restarts.
    """

    mean_s: float = 70.517
    std_s: float = 0.12
    floor_s: float = 60.0

    def __post_init__(self):
        if not (self.floor_s >= 0 and self.mean_s > self.floor_s):
            raise ValidationError("cold-start model needs mean_s > floor_s >= 0")
        if self.std_s < 0:
            raise ValidationError("cold-start std_s must be >= 0")

    def sample(self, rng: np.random.Generator) -> float:
        if self.std_s == 0:
            return float(self.mean_s)
        return float(max(self.floor_s, rng.normal(self.mean_s, self.std_s)))


@dataclass(frozen=True)
class TraceProfile:
    """Shape of the resource trace a workload stub emits.

    CPU opens at ``peak_cpu`` and settles so the run averages ``avg_cpu``;
    memory ramps linearly from ``base_mem_mb`` to ``peak_mem_mb``.
    """

    avg_cpu: float
    peak_cpu: float
    peak_mem_mb: float
    base_mem_mb: float = 0.0
    sample_interval_s: float = 5.0
    output_bytes: int = 4096

    def __post_init__(self):
        if not (0 <= self.avg_cpu <= self.peak_cpu <= 1):
            raise ValidationError("trace profile needs 0 <= avg_cpu <= peak_cpu <= 1")
        if not (0 <= self.base_mem_mb <= self.peak_mem_mb):
            raise ValidationError("trace profile needs 0 <= base_mem_mb <= peak_mem_mb")
        if self.sample_interval_s <= 0:
            raise ValidationError("sample_interval_s must be > 0")
        if self.output_bytes < 0:
            raise ValidationError("output_bytes must be >= 0")

    def samples(self, start: float, duration_s: float) -> list[tuple[float, float, float]]:
        n = math.ceil(duration_s / self.sample_interval_s) if duration_s > 0 else 0
        if n == 0:
            return []
        if n == 1:
            cpu = [self.avg_cpu]
        else:
            rest = (self.avg_cpu * n - self.peak_cpu) / (n - 1)
            cpu = [self.peak_cpu] + [min(max(rest, 0.0), self.peak_cpu)] * (n - 1)
        out = []
        for i in range(n):
            frac = i / (n - 1) if n > 1 else 1.0
            mem = self.base_mem_mb + (self.peak_mem_mb - self.base_mem_mb) * frac
            out.append((start + i * self.sample_interval_s, cpu[i], mem))
        return out


# measured peak/average usage of the two pipeline phases (percent -> fraction)
PROCESSING_PROFILE = TraceProfile(avg_cpu=0.27, peak_cpu=0.90, peak_mem_mb=1507.0)
TRAINING_PROFILE = TraceProfile(avg_cpu=0.17, peak_cpu=0.65, peak_mem_mb=2543.0)


class ResourceTrace:
    """Time-ordered (timestamp, cpu fraction, mem MB) samples of one node."""

    def __init__(self, samples: Iterable[tuple[float, float, float]] = ()):
        self.samples: list[tuple[float, float, float]] = []
        for s in samples:
            self.record(*s)

    def record(self, t: float, cpu: float, mem_mb: float) -> None:
        if not 0.0 <= cpu <= 1.0:
            raise ValidationError(f"cpu fraction {cpu!r} outside [0, 1]")
        if self.samples and t <= self.samples[-1][0]:
            if t < self.samples[-1][0]:
                raise ValidationError("trace timestamps must be strictly increasing")
            self.samples[-1] = (t, cpu, mem_mb)
            return
        self.samples.append((t, cpu, mem_mb))

    def truncate_after(self, t: float) -> None:
        while self.samples and self.samples[-1][0] > t:
            self.samples.pop()

    def between(self, start: float, end: float) -> list[tuple[float, float, float]]:
        """Samples with ``start <= t < end``."""
        return [s for s in self.samples if start <= s[0] < end]

    def window(self, now: float, window_s: float) -> list[tuple[float, float, float]]:
        """Samples in ``(now - window_s, now]``.

        An empty window holds the last value seen before it.
        """
        lo = now - window_s
        inside = [s for s in self.samples if lo < s[0] <= now]
        if inside:
            return inside
        before = [s for s in self.samples if s[0] <= lo]
        return before[-1:]

    def __len__(self) -> int:
        return len(self.samples)


def reduce_samples(samples: list[tuple[float, float, float]], memory_mb: float) -> NodeMetrics:
    if not samples:
        raise NoDataError("no trace samples to reduce")
    cpus = [s[1] for s in samples]
    mems = [s[2] for s in samples]
    avg_cpu = min(sum(cpus) / len(cpus), max(cpus))
    return NodeMetrics(
        avg_cpu=avg_cpu,
        avg_mem=min(1.0, (sum(mems) / len(mems)) / memory_mb),
        peak_cpu=max(cpus),
        peak_mem_mb=max(mems),
    )


# events ---------------------------------------------------------------------


@dataclass(frozen=True)
class NodeReady:
    node_id: str
    at: float


@dataclass(frozen=True)
class EvictionNotice:
    node_id: str
    job_id: Optional[str]
    phase: Optional[str]
    at: float
    evicted_at: float


@dataclass(frozen=True)
class NodeEvicted:
    node_id: str
    at: float


@dataclass(frozen=True)
class WorkloadComplete:
    node_id: str
    job_id: str
    phase: str
    artifact: Optional[BlobRef]
    at: float
    run_id: int


FleetEvent = Union[NodeReady, EvictionNotice, NodeEvicted, WorkloadComplete]


@dataclass(frozen=True)
class LogRecord:
    seq: int
    timestamp: float
    entity: str
    transition: str
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp,
            "entity": self.entity,
            "transition": self.transition,
            "detail": self.detail,
        }


class EventLog:
    """Append-only log of every node, mount, workload and job transition."""

    def __init__(self):
        self.records: list[LogRecord] = []

    def append(self, timestamp: float, entity: str, transition: str, **detail) -> LogRecord:
        rec = LogRecord(len(self.records), timestamp, entity, transition, detail)
        self.records.append(rec)
        return rec

    def for_entity(self, entity: str) -> list[LogRecord]:
        return [r for r in self.records if r.entity == entity]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)


@dataclass
class WorkloadRun:
    run_id: int
    node_id: str
    job_id: str
    phase: str
    started_at: float
    duration_s: float
    artifact_path: str
    ended_at: Optional[float] = None
    interrupted: bool = False
    timer: Optional[Timer] = None


@dataclass(frozen=True)
class FleetConfig:
    cold_start: ColdStartModel = ColdStartModel()
    memory_mb: dict = field(
        default_factory=lambda: {NodeClass.SPOT: 28672.0, NodeClass.CONTAINER_INSTANCE: 28672.0}
    )
    idle_mem_mb: float = 0.0
    eviction_rate_per_hour: float = 0.0
    eviction_notice_s: float = DEFAULT_NOTICE_S

    def __post_init__(self):
        if self.eviction_rate_per_hour < 0:
            raise ValidationError("eviction_rate_per_hour must be >= 0")
        if self.eviction_notice_s <= 0:
            raise ValidationError("eviction_notice_s must be > 0")
        object.__setattr__(self, "memory_mb", {NodeClass(k): float(v) for k, v in self.memory_mb.items()})


class Fleet:
    """Owns node state, traces, the event log and the outbound event queue."""

    def __init__(
        self,
        clock: VirtualClock,
        store: BlobStore,
        config: FleetConfig = FleetConfig(),
        seed: int = 0,
        log_: Optional[EventLog] = None,
    ):
        self.clock = clock
        self.store = store
        self.config = config
        ss = np.random.SeedSequence(seed)
        cold_ss, evict_ss, payload_ss = ss.spawn(3)
        self._cold_rng = np.random.default_rng(cold_ss)
        self._evict_rng = np.random.default_rng(evict_ss)
        self._payload_seed = int(payload_ss.generate_state(1)[0])
        self.nodes: dict[str, NodeRecord] = {}
        self.traces: dict[str, ResourceTrace] = {}
        self.runs: list[WorkloadRun] = []
        self._active: dict[str, WorkloadRun] = {}
        self._counters = {cls: 0 for cls in NodeClass}
        self._epochs: dict[str, int] = {}
        self.outbox: deque = deque()
        self.log = log_ if log_ is not None else EventLog()
        self.cold_start_samples: list[float] = []

    # helpers --------------------------------------------------------------

    def get(self, node_id: str) -> NodeRecord:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NotFoundError(f"node {node_id!r} not found") from None

    def _move(self, node: NodeRecord, dst: NodeState, **detail) -> None:
        prev = node.transition(dst)
        self.log.append(self.clock.now(), node.id, f"{prev.value}->{dst.value}", **detail)

    def _emit(self, event: FleetEvent) -> None:
        self.outbox.append(event)

    def memory_mb(self, node: NodeRecord) -> float:
        return self.config.memory_mb.get(node.node_class, 28672.0)

    # lifecycle ------------------------------------------------------------

    def provision_node(
        self, node_class: Union[NodeClass, str], cold_start_model: Optional[ColdStartModel] = None
    ) -> NodeRecord:
        """Create a node and start its cold boot; Ready after the sampled delay."""
        node_class = NodeClass(node_class)
        self._counters[node_class] += 1
        node_id = f"{_ID_PREFIX[node_class]}-{self._counters[node_class]:04d}"
        node = NodeRecord(
            id=node_id,
            node_class=node_class,
            state=NodeState.DEALLOCATED,
            created_at=self.clock.now(),
            cold_start_duration_s=0.0,
        )
        self.nodes[node_id] = node
        self.traces[node_id] = ResourceTrace()
        self.log.append(node.created_at, node_id, "created", node_class=node_class.value)
        self._cold_start(node, cold_start_model)
        return node

    def start_node(self, node_id: str, cold_start_model: Optional[ColdStartModel] = None) -> NodeRecord:
        """Cold-boot an existing Deallocated node."""
        node = self.get(node_id)
        if node.state is not NodeState.DEALLOCATED:
            raise IllegalTransitionError(f"node {node_id} is {node.state.value}, not Deallocated")
        self._cold_start(node, cold_start_model)
        return node

    def _cold_start(self, node: NodeRecord, model: Optional[ColdStartModel]) -> None:
        model = model or self.config.cold_start
        duration = model.sample(self._cold_rng)
        node.cold_start_duration_s = duration
        node.cold_starts += 1
        epoch = self._epochs.get(node.id, 0) + 1
        self._epochs[node.id] = epoch
        self.cold_start_samples.append(duration)
        self._move(node, NodeState.COLD_STARTING, duration_s=duration)
        ready_at = self.clock.now() + duration
        self.clock.call_at(ready_at, lambda: self._on_ready(node.id, epoch), label=f"ready:{node.id}")

    def _on_ready(self, node_id: str, epoch: int) -> None:
        node = self.nodes[node_id]
        if self._epochs.get(node_id) != epoch or node.state is not NodeState.COLD_STARTING:
            return
        now = self.clock.now()
        self._move(node, NodeState.READY)
        node.idle_since = now
        self.traces[node_id].record(now, 0.0, self.config.idle_mem_mb)
        self._emit(NodeReady(node_id, now))
        self._schedule_random_eviction(node, epoch)

    def _schedule_random_eviction(self, node: NodeRecord, epoch: int) -> None:
        rate = self.config.eviction_rate_per_hour
        if rate <= 0 or not node.node_class.evictable:
            return
        delay = float(self._evict_rng.exponential(3600.0 / rate))

        def fire():
            n = self.nodes[node.id]
            if self._epochs.get(node.id) == epoch and n.state in (NodeState.READY, NodeState.BUSY):
                self.inject_eviction(node.id, self.config.eviction_notice_s)

        self.clock.call_later(delay, fire, label=f"poisson-evict:{node.id}")

    def deallocate_node(self, node_id: str) -> NodeRecord:
        node = self.get(node_id)
        if node.state not in (NodeState.READY, NodeState.EVICTED):
            raise IllegalTransitionError(
                f"node {node_id} is {node.state.value}; only Ready or Evicted nodes can be deallocated"
            )
        dangling = sorted(c.name for c in node.mounted_containers)
        node.mounted_containers.clear()
        node.idle_since = None
        self._epochs[node_id] = self._epochs.get(node_id, 0) + 1
        self._move(node, NodeState.DEALLOCATED, cleared_mounts=dangling)
        return node

    def inject_eviction(self, node_id: str, notice_s: float = DEFAULT_NOTICE_S) -> EvictionNotice:
        """Reclaim a spot node after ``notice_s`` seconds of warning.

        The notice is queued for the orchestrator immediately; any running
        workload is stopped and its job id carried on the notice.
        """
        node = self.get(node_id)
        if not node.node_class.evictable:
            raise UnsupportedClassError(f"{node.node_class.value} nodes cannot be evicted")
        if node.state not in (NodeState.READY, NodeState.BUSY):
            raise IllegalTransitionError(f"node {node_id} is {node.state.value}; cannot evict")
        if notice_s <= 0:
            raise ValidationError("eviction notice must be > 0 seconds")
        now = self.clock.now()
        job_id, phase = None, None
        run = self._active.pop(node_id, None)
        if run is not None:
            if run.timer is not None:
                run.timer.cancel()
            run.ended_at = now
            run.interrupted = True
            job_id, phase = run.job_id, run.phase
            self.traces[node_id].truncate_after(now)
        node.current_job = None
        node.idle_since = None
        self._move(node, NodeState.EVICTING, notice_s=notice_s, job=job_id)
        self.traces[node_id].record(now, 0.0, self.config.idle_mem_mb)
        epoch = self._epochs.get(node_id, 0)
        evicted_at = now + notice_s
        notice = EvictionNotice(node_id, job_id, phase, now, evicted_at)
        self._emit(notice)
        self.clock.call_at(evicted_at, lambda: self._on_evicted(node_id, epoch), label=f"evict:{node_id}")
        return notice

    def _on_evicted(self, node_id: str, epoch: int) -> None:
        node = self.nodes[node_id]
        if self._epochs.get(node_id) != epoch or node.state is not NodeState.EVICTING:
            return
        self._move(node, NodeState.EVICTED, mounts=sorted(c.name for c in node.mounted_containers))
        self._emit(NodeEvicted(node_id, self.clock.now()))

    # storage mounts -------------------------------------------------------

    def mount(self, container: Union[str, ContainerRef], node_id: str) -> frozenset:
        node = self.get(node_id)
        ref = self.store.get_container(container)
        already = ref in node.mounted_containers
        state = self.store.mount(ref, node)
        if not already:
            self.log.append(self.clock.now(), node_id, "mount", container=ref.name, kind=ref.kind.value)
        return state

    def unmount(self, container: Union[str, ContainerRef], node_id: str) -> frozenset:
        node = self.get(node_id)
        name = container.name if isinstance(container, ContainerRef) else container
        state = self.store.unmount(name, node)
        self.log.append(self.clock.now(), node_id, "unmount", container=name)
        return state

    # metrics --------------------------------------------------------------

    def sample_metrics(self, node_id: str, window_s: float = 60.0) -> NodeMetrics:
        node = self.get(node_id)
        if node.state is NodeState.DEALLOCATED:
            raise PreconditionError(f"node {node_id} is Deallocated; no live metrics")
        samples = self.traces[node_id].window(self.clock.now(), window_s)
        if not samples:
            raise NoDataError(f"node {node_id} has no trace samples yet")
        return reduce_samples(samples, self.memory_mb(node))

    # workloads ------------------------------------------------------------

    def run_workload(
        self,
        node_id: str,
        job_id: str,
        phase: str,
        duration_s: float,
        trace_profile: TraceProfile,
        artifact_path: Optional[str] = None,
    ) -> WorkloadRun:
        """Occupy a Ready node for ``duration_s`` seconds.

        On completion the node returns to Ready, a stub artifact is written
        to the node's mounted output container and a ``WorkloadComplete``
        event is queued.

        Raises:
            IllegalTransitionError: node is not Ready (or already has a job).
            MountError: node lacks exactly one input and one output mount.
        """
        node = self.get(node_id)
        if node.state is not NodeState.READY or node.current_job is not None:
            raise IllegalTransitionError(f"node {node_id} is {node.state.value}; cannot start a workload")
        kinds = [c.kind for c in node.mounted_containers]
        if kinds.count(ContainerKind.INPUT) != 1 or kinds.count(ContainerKind.OUTPUT) != 1:
            raise MountError(
                f"node {node_id} needs exactly one input and one output mount, has "
                f"{sorted(c.name for c in node.mounted_containers)}"
            )
        if duration_s < 0:
            raise ValidationError("workload duration must be >= 0")
        now = self.clock.now()
        path = artifact_path or f"{job_id}/{phase}.bin"
        run = WorkloadRun(len(self.runs), node_id, job_id, phase, now, float(duration_s), path)
        self.runs.append(run)
        self._active[node_id] = run
        node.current_job = job_id
        node.idle_since = None
        self._move(node, NodeState.BUSY, job=job_id, phase=phase)
        self.log.append(
            now,
            node_id,
            "workload_start",
            job=job_id,
            phase=phase,
            run_id=run.run_id,
            mounts=sorted(f"{c.kind.value}:{c.name}" for c in node.mounted_containers),
        )
        trace = self.traces[node_id]
        for t, cpu, mem in trace_profile.samples(now, duration_s):
            trace.record(t, cpu, mem)
        run.timer = self.clock.call_at(
            now + duration_s,
            lambda: self._on_workload_done(run, trace_profile),
            label=f"done:{job_id}:{phase}",
        )
        return run

    def _stub_payload(self, run: WorkloadRun, size: int) -> bytes:
        header = json.dumps(
            {"job": run.job_id, "phase": run.phase, "node": run.node_id, "started_at": run.started_at},
            sort_keys=True,
        ).encode()
        key = f"{self._payload_seed}:{run.job_id}:{run.phase}:{run.artifact_path}".encode()
        seed = int.from_bytes(hashlib.sha256(key).digest()[:8], "little")
        body = np.random.default_rng(seed).integers(0, 256, size, dtype=np.uint8).tobytes()
        return header + b"\n" + body

    def _on_workload_done(self, run: WorkloadRun, profile: TraceProfile) -> None:
        node = self.nodes[run.node_id]
        if self._active.get(run.node_id) is not run:
            return
        now = self.clock.now()
        del self._active[run.node_id]
        run.ended_at = now
        outputs = [c for c in node.mounted_containers if c.kind is ContainerKind.OUTPUT]
        artifact = None
        if outputs:
            artifact = self.store.put_blob(outputs[0], run.artifact_path, self._stub_payload(run, profile.output_bytes))
        else:
            log.warning("output container vanished from %s before %s finished", node.id, run.job_id)
        node.current_job = None
        self._move(node, NodeState.READY, job=run.job_id, phase=run.phase)
        node.idle_since = now
        self.traces[node.id].record(now, 0.0, self.config.idle_mem_mb)
        self.log.append(now, node.id, "workload_end", job=run.job_id, phase=run.phase, run_id=run.run_id)
        self._emit(WorkloadComplete(node.id, run.job_id, run.phase, artifact, now, run.run_id))

    def active_run(self, node_id: str) -> Optional[WorkloadRun]:
        return self._active.get(node_id)

    # views ----------------------------------------------------------------

    def list_nodes(self) -> list[NodeRecord]:
        return [self.nodes[k] for k in sorted(self.nodes)]

    def view(self, window_s: float = 60.0) -> list[dict]:
        rows = []
        for node in self.list_nodes():
            row = node.view()
            try:
                m = self.sample_metrics(node.id, window_s)
                row.update(avg_cpu=m.avg_cpu, peak_cpu=m.peak_cpu, avg_mem=m.avg_mem, peak_mem_mb=m.peak_mem_mb)
            except (NoDataError, PreconditionError):
                row.update(avg_cpu=None, peak_cpu=None, avg_mem=None, peak_mem_mb=None)
            rows.append(row)
        return rows
