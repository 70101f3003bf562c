"""Scenario runs of the whole stack under a virtual clock.

A scenario file describes the fleet, the workload stubs, the jobs to submit
and an eviction schedule.  ``run_scenario`` wires storage, metadata, fleet and
orchestrator together in a scratch directory, plays the scenario to
quiescence and returns a JSON-serializable report.  Same file + same seed
gives a byte-identical report.
"""

from __future__ import annotations

import json
import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .clock import VirtualClock, make_clock
from .config import (
    ConfigErrors,
    load_structured,
    parse_fleet,
    parse_orchestrator,
    parse_scheduler,
    parse_workloads,
    section,
    take,
)
from .errors import IllegalTransitionError, NotFoundError, UnsupportedClassError
from .fleet import DEFAULT_NOTICE_S, Fleet, FleetConfig
from .metadata import DataKind, DataManifest, JobRecord, JobState, MetadataStore, replay_history
from .orchestrator import PROCESSING, TRAINING, Orchestrator, OrchestratorConfig
from .storage import BlobStore

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PHASE_COLUMNS = {PROCESSING: "Data Processing", TRAINING: "Model Training"}


@dataclass(frozen=True)
class JobSpec:
    name: str
    kind: DataKind = DataKind.IMAGE_SET
    submit_at: float = 0.0
    files: int = 1
    file_bytes: int = 1024
    has_positional_data: bool = False


@dataclass(frozen=True)
class EvictionSpec:
    """Either a fixed ``(at, node)`` or ``after_s`` into a job's phase."""

    notice_s: float = DEFAULT_NOTICE_S
    at: Optional[float] = None
    node: Optional[str] = None
    job: Optional[str] = None
    phase: Optional[str] = None
    after_s: float = 0.0


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    clock: str = "virtual"
    horizon_s: float = 7 * 86400.0
    fleet: FleetConfig = field(default_factory=FleetConfig)
    orchestrator: OrchestratorConfig = field(default_factory=OrchestratorConfig)
    jobs: list = field(default_factory=list)
    evictions: list = field(default_factory=list)
    restarts: list = field(default_factory=list)


_TOP_KEYS = {
    "name",
    "schema_version",
    "seed",
    "clock",
    "horizon_s",
    "fleet",
    "scheduler",
    "orchestrator",
    "workloads",
    "jobs",
    "evictions",
    "restarts",
}


def _parse_job(data: Any, path: str, errors: ConfigErrors) -> Optional[JobSpec]:
    d = section(data, path, {"name", "kind", "submit_at", "files", "file_bytes", "has_positional_data"}, errors)
    if not d.get("name"):
        errors.add(f"{path}.name", "required")
        return None
    return JobSpec(
        name=str(d["name"]),
        kind=take(d, "kind", path, DataKind, DataKind.IMAGE_SET, errors),
        submit_at=take(d, "submit_at", path, float, 0.0, errors),
        files=take(d, "files", path, int, 1, errors),
        file_bytes=take(d, "file_bytes", path, int, 1024, errors),
        has_positional_data=bool(d.get("has_positional_data", False)),
    )


def _parse_eviction(data: Any, path: str, errors: ConfigErrors) -> Optional[EvictionSpec]:
    d = section(data, path, {"at", "node", "job", "phase", "after_s", "notice_s"}, errors)
    spec = EvictionSpec(
        notice_s=take(d, "notice_s", path, float, DEFAULT_NOTICE_S, errors),
        at=take(d, "at", path, float, None, errors),
        node=d.get("node"),
        job=d.get("job"),
        phase=d.get("phase"),
        after_s=take(d, "after_s", path, float, 0.0, errors),
    )
    fixed = spec.at is not None and spec.node is not None
    relative = spec.job is not None and spec.phase in (PROCESSING, TRAINING)
    if fixed == relative:
        errors.add(path, "give either (at, node) or (job, phase in {processing, training}, after_s)")
        return None
    return spec


def parse_scenario(data: dict, name: str = "scenario") -> ScenarioConfig:
    errors = ConfigErrors()
    d = section(data, "", _TOP_KEYS, errors)
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        errors.add("schema_version", f"required and must equal {SCHEMA_VERSION}, got {version!r}")
    clock = take(d, "clock", "", str, "virtual", errors)
    if clock not in ("virtual", "wall"):
        errors.add("clock", f"expected 'virtual' or 'wall', got {clock!r}")
    sched, extra = parse_scheduler(d.get("scheduler"), "scheduler", errors)
    workloads = parse_workloads(d.get("workloads"), "workloads", errors)
    jobs_raw = d.get("jobs") or []
    evictions_raw = d.get("evictions") or []
    if not isinstance(jobs_raw, list):
        errors.add("jobs", "expected a list")
        jobs_raw = []
    if not isinstance(evictions_raw, list):
        errors.add("evictions", "expected a list")
        evictions_raw = []
    jobs = [_parse_job(j, f"jobs[{i}]", errors) for i, j in enumerate(jobs_raw)]
    evictions = [_parse_eviction(e, f"evictions[{i}]", errors) for i, e in enumerate(evictions_raw)]
    names = [j.name for j in jobs if j]
    for e in evictions:
        if e and e.job is not None and e.job not in names:
            errors.add("evictions", f"unknown job name {e.job!r}")
    cfg = ScenarioConfig(
        name=str(d.get("name", name)),
        seed=take(d, "seed", "", int, 0, errors),
        clock=clock,
        horizon_s=take(d, "horizon_s", "", float, 7 * 86400.0, errors),
        fleet=parse_fleet(d.get("fleet"), "fleet", errors),
        orchestrator=parse_orchestrator(d.get("orchestrator"), "orchestrator", errors, sched, extra, workloads),
        jobs=[j for j in jobs if j],
        evictions=[e for e in evictions if e],
        restarts=take(d, "restarts", "", lambda v: sorted(float(x) for x in v), [], errors),
    )
    errors.raise_if_any("scenario")
    return cfg


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    path = Path(path)
    return parse_scenario(load_structured(path), name=path.stem)


class Simulation:
    """Storage, metadata, fleet and orchestrator sharing one clock."""

    def __init__(self, config: ScenarioConfig, workdir: Union[str, Path]):
        self.config = config
        self.workdir = Path(workdir)
        self.clock: VirtualClock = make_clock(config.clock)
        self.store = BlobStore(self.workdir / "blobs", clock=self.clock.now)
        self.metadata = MetadataStore(self.workdir / "metadata.sqlite3", clock=self.clock.now)
        self.fleet = Fleet(self.clock, self.store, config.fleet, seed=config.seed)
        self.orchestrator = self._new_orchestrator()
        self.job_ids: dict[str, str] = {}
        self.submitted_at: dict[str, float] = {}
        self.eviction_log: list[dict] = []
        self.reconcile_reports: list[dict] = []
        self.decisions: list[dict] = []
        self.anomalies: list[tuple[str, str]] = []
        self._pending_evictions = [e for e in config.evictions if e.job is not None]
        self._restart_due = False
        self._payload_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(4)[3])

    def _new_orchestrator(self) -> Orchestrator:
        orch = Orchestrator(self.store, self.metadata, self.fleet, self.config.orchestrator)
        orch.listeners.append(self._on_transition)
        return orch

    # scripted actions ----------------------------------------------------

    def submit(self, spec: JobSpec) -> str:
        manifest = DataManifest(spec.name, spec.kind, spec.has_positional_data, spec.files * spec.file_bytes)
        job, grant = self.orchestrator.create_job(manifest)
        for i in range(spec.files):
            payload = self._payload_rng.integers(0, 256, spec.file_bytes, dtype=np.uint8).tobytes()
            self.orchestrator.upload(job.id, f"raw/{i:05d}.bin", payload, grant.upload_token)
        self.orchestrator.complete_upload(job.id)
        self.job_ids[spec.name] = job.id
        self.submitted_at[job.id] = self.clock.now()
        return job.id

    def evict(self, node_id: str, notice_s: float, reason: str) -> None:
        try:
            self.fleet.inject_eviction(node_id, notice_s)
        except (IllegalTransitionError, UnsupportedClassError, NotFoundError) as exc:
            self.anomalies.append((node_id, f"eviction skipped: {exc}"))
            return
        self.eviction_log.append({"at": self.clock.now(), "node": node_id, "notice_s": notice_s, "trigger": reason})

    def restart_orchestrator(self) -> dict:
        """Drop the orchestrator object, build a fresh one and reconcile."""
        self.decisions.extend(self.orchestrator.decisions)
        self.anomalies.extend(self.orchestrator.anomalies)
        self.orchestrator.listeners.clear()
        self.orchestrator = self._new_orchestrator()
        report = self.orchestrator.reconcile().as_dict()
        report["at"] = self.clock.now()
        self.reconcile_reports.append(report)
        return report

    def _on_transition(self, job: JobRecord, src: JobState, dst: JobState) -> None:
        if dst not in (JobState.PROCESSING, JobState.TRAINING):
            return
        phase = PROCESSING if dst is JobState.PROCESSING else TRAINING
        for spec in self._pending_evictions:
            if spec.phase == phase and self.job_ids.get(spec.job) == job.id:
                self._pending_evictions.remove(spec)
                node, attempts = job.assigned_node, job.attempts

                def fire(spec=spec, node=node, attempts=attempts):
                    current = self.metadata.get_job(job.id)
                    if current.state is dst and current.assigned_node == node and current.attempts == attempts:
                        self.evict(node, spec.notice_s, f"{spec.job}:{spec.phase}+{spec.after_s}")
                    else:
                        self.anomalies.append((job.id, f"phase eviction skipped; job moved on to {current.state.value}"))

                self.clock.call_later(spec.after_s, fire, label=f"scripted-evict:{job.id}")
                return

    # driving --------------------------------------------------------------

    def schedule(self) -> None:
        for spec in self.config.jobs:
            self.clock.call_at(spec.submit_at, lambda spec=spec: self.submit(spec), label=f"submit:{spec.name}")
        for spec in self.config.evictions:
            if spec.at is not None:
                self.clock.call_at(spec.at, lambda spec=spec: self.evict(spec.node, spec.notice_s, "scheduled"))
        for t in self.config.restarts:
            self.clock.call_at(t, self._flag_restart, label="restart")

    def _flag_restart(self) -> None:
        self._restart_due = True

    def _settle(self) -> None:
        while True:
            self.clock.fire_due()
            if self._restart_due:
                self._restart_due = False
                self.restart_orchestrator()
            self.orchestrator.pump()
            nxt = self.clock.next_event_time()
            if not self.fleet.outbox and (nxt is None or nxt > self.clock.now()):
                return

    def run(self) -> None:
        self.schedule()
        self._settle()
        while True:
            nxt = self.clock.next_event_time()
            if nxt is None or nxt > self.config.horizon_s:
                break
            self.clock.advance_to(nxt)
            self._settle()

    def close(self) -> None:
        self.decisions.extend(self.orchestrator.decisions)
        self.anomalies.extend(self.orchestrator.anomalies)
        self.orchestrator.decisions = []
        self.orchestrator.anomalies = []
        self.metadata.close()

    # reporting ------------------------------------------------------------

    def report(self) -> dict:
        final = self.orchestrator.reconcile().as_dict()
        self.decisions.extend(self.orchestrator.decisions)
        self.anomalies.extend(self.orchestrator.anomalies)
        self.orchestrator.decisions = []
        self.orchestrator.anomalies = []
        jobs = [self._job_report(j) for j in self.metadata.query_jobs()]
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.config.name,
            "seed": self.config.seed,
            "end_time_s": self.clock.now(),
            "jobs": jobs,
            "nodes": [self._node_report(n.id) for n in self.fleet.list_nodes()],
            "resource_usage": self.resource_usage(),
            "cold_starts": {
                "count": len(self.fleet.cold_start_samples),
                "mean_s": float(np.mean(self.fleet.cold_start_samples)) if self.fleet.cold_start_samples else None,
                "durations_s": list(self.fleet.cold_start_samples),
            },
            "evictions": {"count": len(self.eviction_log), "events": self.eviction_log},
            "retries": sum(j["attempts"] for j in jobs),
            "penalty_audit": self.decisions,
            "reconcile": {"restarts": self.reconcile_reports, "final": final},
            "anomalies": [list(a) for a in self.anomalies],
        }

    def _job_report(self, job: JobRecord) -> dict:
        replay_history(job)
        spent: dict[str, float] = {}
        hist = job.history
        for cur, nxt in zip(hist, hist[1:]):
            spent[cur["to"]] = spent.get(cur["to"], 0.0) + (nxt["at"] - cur["at"])
        first_processing = next((h["at"] for h in hist if h["to"] == JobState.PROCESSING.value), None)
        submitted = self.submitted_at.get(job.id, job.created_at)
        end = job.timestamps.get(job.state.value) if job.state.terminal else None
        return {
            "id": job.id,
            "name": job.manifest.name,
            "kind": job.manifest.kind.value,
            "final_state": job.state.value,
            "attempts": job.attempts,
            "submitted_at_s": submitted,
            "finished_at_s": end,
            "first_processing_start_s": None if first_processing is None else first_processing - submitted,
            "latency_s": {
                "queue": spent.get(JobState.QUEUED.value, 0.0),
                "cold_start": spent.get(JobState.PROVISIONING.value, 0.0),
                "mount": spent.get(JobState.MOUNTING.value, 0.0),
                "processing": spent.get(JobState.PROCESSING.value, 0.0),
                "training": spent.get(JobState.TRAINING.value, 0.0),
                "unmount": spent.get(JobState.UNMOUNTING.value, 0.0),
                "total": None if end is None else end - submitted,
            },
            "state_path": [h["to"] for h in hist],
            "result_checksum": job.result.checksum if job.result else None,
            "failure_reason": job.failure_reason,
        }

    def _phase_samples(self, node_id: Optional[str] = None) -> dict[str, list]:
        out: dict[str, list] = {PROCESSING: [], TRAINING: []}
        for run in self.fleet.runs:
            if node_id is not None and run.node_id != node_id:
                continue
            end = run.ended_at if run.ended_at is not None else self.clock.now()
            out[run.phase].extend(self.fleet.traces[run.node_id].between(run.started_at, end))
        return out

    @staticmethod
    def _usage(samples: list) -> Optional[dict]:
        if not samples:
            return None
        cpu = [s[1] for s in samples]
        return {
            "peak_cpu_pct": 100.0 * max(cpu),
            "avg_cpu_pct": 100.0 * sum(cpu) / len(cpu),
            "peak_mem_mb": max(s[2] for s in samples),
        }

    def resource_usage(self) -> dict:
        """Per-phase usage laid out as rows x phase columns."""
        per_phase = {p: self._usage(s) for p, s in self._phase_samples().items()}
        rows = {"Peak CPU (%)": "peak_cpu_pct", "Avg CPU (%)": "avg_cpu_pct", "Peak Memory (MB)": "peak_mem_mb"}
        return {
            row: {PHASE_COLUMNS[p]: (per_phase[p] or {}).get(key) for p in (PROCESSING, TRAINING)}
            for row, key in rows.items()
        }

    def _node_report(self, node_id: str) -> dict:
        node = self.fleet.get(node_id)
        busy = sum(
            (r.ended_at if r.ended_at is not None else self.clock.now()) - r.started_at
            for r in self.fleet.runs
            if r.node_id == node_id
        )
        durations = [
            rec.detail["duration_s"] for rec in self.fleet.log.for_entity(node_id) if "duration_s" in rec.detail
        ]
        return {
            "id": node.id,
            "class": node.node_class.value,
            "final_state": node.state.value,
            "cold_starts": node.cold_starts,
            "cold_start_durations_s": durations,
            "busy_s": busy,
            "utilization": {p: self._usage(s) for p, s in self._phase_samples(node_id).items()},
        }


def run_scenario(config: ScenarioConfig, workdir: Union[str, Path, None] = None) -> dict:
    """Play a scenario to quiescence and return its report."""
    with tempfile.TemporaryDirectory(prefix="nerfpipe-sim-") as tmp:
        sim = Simulation(config, workdir or tmp)
        try:
            sim.run()
            return sim.report()
        finally:
            sim.close()


def dump_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def format_report(report: dict) -> str:
    """Human-readable summary of a scenario report."""
    lines = [f"scenario {report['scenario']} (seed {report['seed']}), ended at t={report['end_time_s']:.3f}s", ""]
    hdr = f"{'job':<12}{'name':<14}{'state':<11}{'tries':>6}{'queue':>9}{'cold':>9}{'proc':>9}{'train':>9}{'total':>10}"
    lines.append(hdr)
    for j in report["jobs"]:
        lat = j["latency_s"]
        total = "-" if lat["total"] is None else f"{lat['total']:.1f}"
        lines.append(
            f"{j['id']:<12}{j['name'][:13]:<14}{j['final_state']:<11}{j['attempts']:>6}"
            f"{lat['queue']:>9.1f}{lat['cold_start']:>9.1f}{lat['processing']:>9.1f}{lat['training']:>9.1f}{total:>10}"
        )
    lines += ["", f"{'':<18}{'Data Processing':>17}{'Model Training':>17}"]
    for row, cols in report["resource_usage"].items():
        cells = ["-" if v is None else f"{v:.1f}" for v in cols.values()]
        lines.append(f"{row:<18}{cells[0]:>17}{cells[1]:>17}")
    cs = report["cold_starts"]
    mean = "-" if cs["mean_s"] is None else f"{cs['mean_s']:.3f}s"
    lines += ["", f"cold starts: {cs['count']} (mean {mean}); evictions: {report['evictions']['count']}; retries: {report['retries']}"]
    return "\n".join(lines) + "\n"
