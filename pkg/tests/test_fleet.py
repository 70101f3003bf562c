import json
import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nerfpipe.clock import VirtualClock
from nerfpipe.errors import (
    IllegalTransitionError,
    MountError,
    NoDataError,
    PreconditionError,
    UnsupportedClassError,
    ValidationError,
)
from nerfpipe.fleet import (
    PROCESSING_PROFILE,
    TRAINING_PROFILE,
    ColdStartModel,
    EvictionNotice,
    Fleet,
    FleetConfig,
    NodeEvicted,
    NodeReady,
    ResourceTrace,
    TraceProfile,
    WorkloadComplete,
    reduce_samples,
)
from nerfpipe.nodes import NodeClass, NodeRecord, NodeState, is_legal_node_transition
from nerfpipe.storage import BlobStore, ContainerKind

# ten measured spot-VM restart times, seconds
MEASURED_RESTARTS = [70.787, 70.489, 70.492, 70.411, 70.411, 70.495, 70.414, 70.638, 70.462, 70.575]


@pytest.fixture
def env(tmp_path):
    clock = VirtualClock()
    store = BlobStore(tmp_path / "blobs", clock=clock.now)
    return clock, store


def make_fleet(env, **cfg):
    clock, store = env
    return Fleet(clock, store, FleetConfig(**cfg), seed=0)


def ready_node(fleet, cls=NodeClass.SPOT):
    node = fleet.provision_node(cls)
    fleet.clock.advance(node.cold_start_duration_s)
    assert node.state is NodeState.READY
    return node


def mount_both(fleet, node, tag="j"):
    inp = fleet.store.create_container(f"{tag}-in", ContainerKind.INPUT)
    out = fleet.store.create_container(f"{tag}-out", ContainerKind.OUTPUT)
    fleet.mount(inp, node.id)
    fleet.mount(out, node.id)
    return inp, out


def replay_node_log(fleet, node_id):
    node = fleet.nodes[node_id]
    state = NodeState.DEALLOCATED
    for rec in fleet.log.for_entity(node_id):
        if "->" not in rec.transition:
            continue
        src, dst = (NodeState(s) for s in rec.transition.split("->"))
        assert src is state, f"{node_id}: log says {src}, replay is at {state}"
        assert is_legal_node_transition(node.node_class, src, dst)
        state = dst
    assert state is node.state


class TestMeasuredRestarts:
    def test_default_model_matches_measurements(self):
        m = ColdStartModel()
        assert m.mean_s == pytest.approx(statistics.mean(MEASURED_RESTARTS), abs=1e-3)
        assert m.std_s == pytest.approx(statistics.stdev(MEASURED_RESTARTS), abs=5e-3)


class TestNodeStateMachine:
    def test_legal_edges(self):
        spot, aci = NodeClass.SPOT, NodeClass.CONTAINER_INSTANCE
        S = NodeState
        assert is_legal_node_transition(spot, S.DEALLOCATED, S.COLD_STARTING)
        assert is_legal_node_transition(spot, S.READY, S.EVICTING)
        assert not is_legal_node_transition(aci, S.READY, S.EVICTING)
        assert not is_legal_node_transition(aci, S.BUSY, S.EVICTING)
        assert not is_legal_node_transition(spot, S.BUSY, S.DEALLOCATED)
        assert not is_legal_node_transition(spot, S.EVICTED, S.READY)

    def test_record_transition_rejects_illegal(self):
        n = NodeRecord("spot-0001", NodeClass.SPOT, NodeState.DEALLOCATED, 0.0, 1.0, set())
        with pytest.raises(IllegalTransitionError):
            n.transition(NodeState.READY)


class TestProvisioning:
    def test_ten_provisions_mean(self, env):
        fleet = make_fleet(env)
        for _ in range(10):
            fleet.provision_node(NodeClass.SPOT)
        assert abs(statistics.mean(fleet.cold_start_samples) - 70.517) <= 0.5

    def test_zero_std_is_exact(self, env):
        fleet = make_fleet(env, cold_start=ColdStartModel(70.517, 0.0))
        n = fleet.provision_node(NodeClass.SPOT)
        assert n.cold_start_duration_s == 70.517
        assert n.state is NodeState.COLD_STARTING

    def test_ready_threshold(self, env):
        clock, _ = env
        fleet = make_fleet(env, cold_start=ColdStartModel(5.0, 0.0, 0.0))
        n = fleet.provision_node("spot")
        clock.advance_to(4.9)
        assert n.state is NodeState.COLD_STARTING
        clock.advance_to(5.0)
        assert n.state is NodeState.READY
        assert isinstance(fleet.outbox[-1], NodeReady)

    def test_floor_clips(self):
        m = ColdStartModel(mean_s=61.0, std_s=50.0, floor_s=60.0)
        rng = np.random.default_rng(0)
        assert min(m.sample(rng) for _ in range(500)) == 60.0

    @pytest.mark.parametrize("kw", [{"mean_s": 10, "floor_s": 20}, {"std_s": -1}, {"floor_s": -1}])
    def test_invalid_model(self, kw):
        with pytest.raises(ValidationError):
            ColdStartModel(**kw)

    def test_ids_are_sequential_per_class(self, env):
        fleet = make_fleet(env)
        ids = [fleet.provision_node(c).id for c in ("spot", "container_instance", "spot")]
        assert ids == ["spot-0001", "aci-0001", "spot-0002"]

    def test_same_seed_same_durations(self, env, tmp_path):
        a = make_fleet(env)
        clock2 = VirtualClock()
        b = Fleet(clock2, BlobStore(tmp_path / "b", clock=clock2.now), FleetConfig(), seed=0)
        for f in (a, b):
            for _ in range(5):
                f.provision_node("spot")
        assert a.cold_start_samples == b.cold_start_samples


class TestDeallocate:
    def test_ready_to_deallocated_clears_mounts(self, env):
        fleet = make_fleet(env)
        n = ready_node(fleet)
        mount_both(fleet, n)
        fleet.deallocate_node(n.id)
        assert n.state is NodeState.DEALLOCATED and n.mounted_containers == set()

    def test_busy_is_illegal(self, env):
        fleet = make_fleet(env)
        n = ready_node(fleet)
        mount_both(fleet, n)
        fleet.run_workload(n.id, "j", "processing", 10, PROCESSING_PROFILE)
        with pytest.raises(IllegalTransitionError):
            fleet.deallocate_node(n.id)

    def test_evicted_to_deallocated(self, env):
        clock, _ = env
        fleet = make_fleet(env)
        n = ready_node(fleet)
        fleet.inject_eviction(n.id, 30)
        clock.advance(30)
        assert n.state is NodeState.EVICTED
        fleet.deallocate_node(n.id)
        assert n.state is NodeState.DEALLOCATED

    def test_restart_after_deallocate(self, env):
        clock, _ = env
        fleet = make_fleet(env)
        n = ready_node(fleet)
        fleet.deallocate_node(n.id)
        fleet.start_node(n.id)
        clock.advance(n.cold_start_duration_s)
        assert n.state is NodeState.READY and n.cold_starts == 2
        replay_node_log(fleet, n.id)


class TestEviction:
    def test_busy_spot_notice_then_evicted(self, env):
        clock, _ = env
        fleet = make_fleet(env)
        n = ready_node(fleet)
        mount_both(fleet, n)
        fleet.run_workload(n.id, "j", "training", 600, TRAINING_PROFILE)
        clock.advance(100)
        t0 = clock.now()
        fleet.outbox.clear()
        notice = fleet.inject_eviction(n.id)
        assert n.state is NodeState.EVICTING and n.current_job is None
        assert isinstance(fleet.outbox[0], EvictionNotice)
        assert (notice.job_id, notice.phase, notice.at, notice.evicted_at) == ("j", "training", t0, t0 + 30)
        clock.advance_to(t0 + 29.999)
        assert n.state is NodeState.EVICTING
        clock.advance_to(t0 + 30)
        assert n.state is NodeState.EVICTED
        assert isinstance(fleet.outbox[-1], NodeEvicted)
        # the interrupted run never completes
        clock.advance(10_000)
        assert not any(isinstance(e, WorkloadComplete) for e in fleet.outbox)
        replay_node_log(fleet, n.id)

    def test_notice_precedes_evicted(self, env):
        clock, _ = env
        fleet = make_fleet(env)
        n = ready_node(fleet)
        fleet.inject_eviction(n.id, 5)
        clock.advance(5)
        kinds = [type(e) for e in fleet.outbox]
        assert kinds.index(EvictionNotice) < kinds.index(NodeEvicted)

    def test_idle_spot(self, env):
        fleet = make_fleet(env)
        n = ready_node(fleet)
        assert fleet.inject_eviction(n.id).job_id is None

    def test_container_instance_rejected(self, env):
        fleet = make_fleet(env)
        n = ready_node(fleet, NodeClass.CONTAINER_INSTANCE)
        with pytest.raises(UnsupportedClassError):
            fleet.inject_eviction(n.id)

    def test_cold_starting_rejected(self, env):
        fleet = make_fleet(env)
        n = fleet.provision_node("spot")
        with pytest.raises(IllegalTransitionError):
            fleet.inject_eviction(n.id)

    def test_poisson_evictions(self, env):
        clock, _ = env
        fleet = make_fleet(env, eviction_rate_per_hour=60.0)
        n = ready_node(fleet)
        clock.advance(3 * 3600)
        assert n.state is NodeState.EVICTED


class TestMetrics:
    def test_constant_trace(self):
        m = reduce_samples([(t, 0.27, 100.0) for t in range(10)], 1000.0)
        assert m.avg_cpu == pytest.approx(0.27) and m.peak_cpu == 0.27

    def test_alternating(self):
        m = reduce_samples([(t, 0.9 if t % 2 else 0.0, 0.0) for t in range(10)], 1000.0)
        assert m.avg_cpu == pytest.approx(0.45) and m.peak_cpu == 0.9

    def test_empty(self):
        with pytest.raises(NoDataError):
            reduce_samples([], 1.0)

    def test_training_stub_peak_memory(self, env):
        clock, _ = env
        fleet = make_fleet(env)
        n = ready_node(fleet)
        mount_both(fleet, n)
        fleet.run_workload(n.id, "j", "training", 1200, TRAINING_PROFILE)
        clock.advance(1200)
        m = reduce_samples(fleet.traces[n.id].between(clock.now() - 1200, clock.now()), 28672)
        assert m.peak_mem_mb == 2543
        assert m.peak_cpu == 0.65 and m.avg_cpu == pytest.approx(0.17)

    def test_sample_metrics_window(self, env):
        clock, _ = env
        fleet = make_fleet(env)
        n = ready_node(fleet)
        mount_both(fleet, n)
        fleet.run_workload(n.id, "j", "processing", 600, PROCESSING_PROFILE)
        clock.advance(300)
        m = fleet.sample_metrics(n.id, 60)
        assert m.peak_cpu >= m.avg_cpu and m.peak_mem_mb <= 1507

    def test_deallocated_has_no_metrics(self, env):
        fleet = make_fleet(env)
        n = ready_node(fleet)
        fleet.deallocate_node(n.id)
        with pytest.raises(PreconditionError):
            fleet.sample_metrics(n.id)

    def test_no_samples(self, env):
        fleet = make_fleet(env)
        n = fleet.provision_node("spot")
        with pytest.raises(NoDataError):
            fleet.sample_metrics(n.id)

    def test_trace_rejects_time_going_backwards(self):
        tr = ResourceTrace([(1.0, 0.1, 1.0), (2.0, 0.1, 1.0)])
        with pytest.raises(ValidationError):
            tr.record(1.5, 0.1, 1.0)

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1e5)), min_size=1, max_size=40), st.floats(1, 500))
    def test_peak_at_least_avg(self, pts, window):
        tr = ResourceTrace([(float(i), c, m) for i, (c, m) in enumerate(pts)])
        samples = tr.window(float(len(pts)), window)
        m = reduce_samples(samples, 1e5)
        assert m.peak_cpu >= m.avg_cpu

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(1, 5000), st.integers(1, 400))
    def test_profile_hits_its_targets(self, a, b, mem, n):
        lo, hi = sorted((a, b))
        prof = TraceProfile(avg_cpu=lo, peak_cpu=hi, peak_mem_mb=mem, sample_interval_s=1.0)
        s = prof.samples(0.0, float(n))
        cpus = [c for _, c, _ in s]
        assert max(cpus) <= hi
        assert max(m for _, _, m in s) == pytest.approx(mem)
        if n > 1:
            assert max(cpus) == hi
            # the mean is exact unless the off-peak level had to be clamped at 0
            if lo * n >= hi:
                assert sum(cpus) / n == pytest.approx(lo, abs=1e-12)


class TestRunWorkload:
    def test_completion_writes_artifact(self, env):
        clock, store = env
        fleet = make_fleet(env)
        n = ready_node(fleet)
        _, out = mount_both(fleet, n, "poster")
        fleet.run_workload(n.id, "poster", "training", 1200, TRAINING_PROFILE, "poster/attempt-0/training.bin")
        assert n.state is NodeState.BUSY and n.current_job == "poster"
        clock.advance(1200)
        ev = fleet.outbox[-1]
        assert isinstance(ev, WorkloadComplete) and ev.artifact.path == "poster/attempt-0/training.bin"
        assert store.has_blob(out, ev.artifact.path)
        assert n.state is NodeState.READY and n.current_job is None

    def test_zero_duration(self, env):
        clock, _ = env
        fleet = make_fleet(env)
        n = ready_node(fleet)
        mount_both(fleet, n)
        fleet.run_workload(n.id, "j", "processing", 0, PROCESSING_PROFILE)
        clock.fire_due()
        assert isinstance(fleet.outbox[-1], WorkloadComplete)

    def test_missing_input_mount(self, env):
        fleet = make_fleet(env)
        n = ready_node(fleet)
        fleet.mount(fleet.store.create_container("o", ContainerKind.OUTPUT), n.id)
        with pytest.raises(MountError):
            fleet.run_workload(n.id, "j", "processing", 1, PROCESSING_PROFILE)

    def test_two_inputs_rejected(self, env):
        fleet = make_fleet(env)
        n = ready_node(fleet)
        mount_both(fleet, n)
        fleet.mount(fleet.store.create_container("extra", ContainerKind.INPUT), n.id)
        with pytest.raises(MountError):
            fleet.run_workload(n.id, "j", "processing", 1, PROCESSING_PROFILE)

    def test_not_ready(self, env):
        fleet = make_fleet(env)
        n = ready_node(fleet)
        mount_both(fleet, n)
        fleet.run_workload(n.id, "a", "processing", 10, PROCESSING_PROFILE)
        with pytest.raises(IllegalTransitionError):
            fleet.run_workload(n.id, "b", "processing", 10, PROCESSING_PROFILE)

    def test_cold_starting_node(self, env):
        fleet = make_fleet(env)
        n = fleet.provision_node("spot")
        with pytest.raises(IllegalTransitionError):
            fleet.run_workload(n.id, "a", "processing", 10, PROCESSING_PROFILE)

    def test_event_log_exports_jsonl(self, env):
        fleet = make_fleet(env)
        n = ready_node(fleet)
        lines = fleet.log.to_jsonl().splitlines()
        assert len(lines) == len(fleet.log.records) >= 3
        assert all({"timestamp", "entity", "transition"} <= set(json.loads(l)) for l in lines)
        replay_node_log(fleet, n.id)
