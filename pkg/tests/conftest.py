from dataclasses import dataclass, field
from pathlib import Path

import pytest

from nerfpipe.clock import VirtualClock
from nerfpipe.fleet import ColdStartModel, Fleet, FleetConfig
from nerfpipe.metadata import DataKind, DataManifest, MetadataStore
from nerfpipe.orchestrator import Orchestrator, OrchestratorConfig
from nerfpipe.storage import BlobStore



@dataclass
class Stack:
    """Storage, metadata, fleet and orchestrator on one virtual clock."""

    root: Path
    fleet_config: FleetConfig = field(default_factory=FleetConfig)
    config: OrchestratorConfig = field(default_factory=OrchestratorConfig)
    seed: int = 0

    def __post_init__(self):
        self.clock = VirtualClock()
        self.store = BlobStore(self.root / "blobs", clock=self.clock.now)
        self.metadata = MetadataStore(self.root / "meta.sqlite3", clock=self.clock.now)
        self.fleet = Fleet(self.clock, self.store, self.fleet_config, seed=self.seed)
        self.orch = Orchestrator(self.store, self.metadata, self.fleet, self.config)

    def restart(self) -> Orchestrator:
        self.orch = Orchestrator(self.store, self.metadata, self.fleet, self.config)
        return self.orch

    def submit(self, name="poster", kind=DataKind.IMAGE_SET, payload=b"img"):
        job, grant = self.orch.create_job(DataManifest(name, kind, True, len(payload)))
        self.orch.upload(job.id, "raw/0.bin", payload, grant.upload_token)
        return self.orch.complete_upload(job.id)

    def settle(self):
        while True:
            self.clock.fire_due()
            self.orch.pump()
            nxt = self.clock.next_event_time()
            if not self.fleet.outbox and (nxt is None or nxt > self.clock.now()):
                return

    def run_until(self, t: float):
        self.settle()
        while True:
            nxt = self.clock.next_event_time()
            if nxt is None or nxt > t:
                break
            self.clock.advance_to(nxt)
            self.settle()
        if t > self.clock.now():
            self.clock.advance_to(t)
            self.settle()

    def run_all(self, horizon: float = 1e6):
        self.run_until(horizon)

    def job(self, job_id):
        return self.metadata.get_job(job_id)


@pytest.fixture
def stack(tmp_path):
    s = Stack(tmp_path)
    yield s
    s.metadata.close()


@pytest.fixture
def make_stack(tmp_path):
    made = []

    def factory(sub="s", **kw):
        s = Stack(tmp_path / sub, **kw)
        made.append(s)
        return s

    yield factory
    for s in made:
        s.metadata.close()


EXACT_COLD = ColdStartModel(mean_s=70.517, std_s=0.0)


def assert_mount_discipline(fleet, metadata):
    """Replay the fleet log and check every run had its own job's two mounts.

    Also checks that containers are only mounted while their job is Mounting
    and that no terminal job is left mounted anywhere.
    """
    from nerfpipe.metadata import JobState

    jobs = {j.id: j for j in metadata.query_jobs()}
    owner = {}
    for j in jobs.values():
        for c in (j.input_container, j.output_container):
            if c is not None:
                owner[c.name] = j.id
    job_state = {}
    mounts: dict[str, set] = {}
    starts = 0
    for r in fleet.log.records:
        if r.entity in jobs and "->" in r.transition:
            job_state[r.entity] = JobState(r.transition.split("->")[1])
        elif r.transition == "mount":
            job = owner.get(r.detail["container"])
            assert job is None or job_state.get(job) is JobState.MOUNTING, f"{r}: mounted outside Mounting"
            mounts.setdefault(r.entity, set()).add(r.detail["container"])
        elif r.transition == "unmount":
            mounts[r.entity].discard(r.detail["container"])
        elif r.transition == "workload_start":
            starts += 1
            job = jobs[r.detail["job"]]
            want = {job.input_container.name, job.output_container.name}
            assert mounts.get(r.entity, set()) == want, f"{r}: run started with mounts {mounts.get(r.entity)}"
    for node in fleet.nodes.values():
        for ref in node.mounted_containers:
            job = owner.get(ref.name)
            assert job is None or not jobs[job].state.terminal, f"{node.id} still mounts {ref.name}"
    return starts


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
