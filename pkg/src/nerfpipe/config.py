"""Service configuration files.

Config files are YAML (JSON is accepted as a YAML subset).  Parsing collects
every problem before failing, so a bad file reports all offending keys at
once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Union

import yaml

from .errors import NerfPipeError, ValidationError
from .fleet import ColdStartModel, FleetConfig, TraceProfile
from .nodes import NodeClass
from .orchestrator import PROCESSING, TRAINING, OrchestratorConfig, WorkloadSpec, default_workloads
from .scheduler import SchedulerConfig


class ConfigErrors:
    """Accumulates ``path: message`` problems while walking a config tree."""

    def __init__(self):
        self.items: list[str] = []

    def add(self, path: str, message: str) -> None:
        self.items.append(f"{path}: {message}")

    def raise_if_any(self, what: str) -> None:
        if self.items:
            raise ValidationError(f"invalid {what}:\n  " + "\n  ".join(self.items))


def load_structured(path: Union[str, Path]) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: not valid YAML/JSON: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    return data


def section(data: Any, path: str, allowed: set, errors: ConfigErrors) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        errors.add(path, "expected a mapping")
        return {}
    for key in sorted(set(data) - allowed, key=str):
        errors.add(f"{path}.{key}" if path else str(key), "unknown key")
    return data


def take(data: dict, key: str, path: str, cast: Callable, default: Any, errors: ConfigErrors) -> Any:
    if key not in data:
        return default
    try:
        return cast(data[key])
    except (TypeError, ValueError, NerfPipeError) as exc:
        errors.add(f"{path}.{key}" if path else key, f"bad value {data[key]!r} ({exc})")
        return default


def _bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    raise ValueError("expected true/false")


def _nonneg(value: Any) -> float:
    v = float(value)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _node_class_map(value: Any) -> dict:
    if not isinstance(value, dict):
        raise ValueError("expected a mapping of node class to number")
    return {NodeClass(k): float(v) for k, v in value.items()}


def parse_scheduler(data: Any, path: str, errors: ConfigErrors) -> tuple[SchedulerConfig, dict]:
    keys = {"bias", "cold_penalty", "cost_penalty_by_class", "allocation_classes", "allow_allocation", "max_live_nodes"}
    d = section(data, path, keys, errors)
    base = SchedulerConfig()
    costs = dict(base.cost_penalty_by_class)
    costs.update(take(d, "cost_penalty_by_class", path, _node_class_map, {}, errors))
    classes = take(d, "allocation_classes", path, lambda v: tuple(NodeClass(c) for c in v), base.allocation_classes, errors)
    try:
        cfg = SchedulerConfig(
            bias=take(d, "bias", path, float, base.bias, errors),
            cold_penalty=take(d, "cold_penalty", path, _nonneg, base.cold_penalty, errors),
            cost_penalty_by_class=costs,
            allocation_classes=classes,
        )
    except NerfPipeError as exc:
        errors.add(path, str(exc))
        cfg = base
    extra = {
        "allow_allocation": take(d, "allow_allocation", path, _bool, True, errors),
        "max_live_nodes": take(d, "max_live_nodes", path, lambda v: None if v is None else int(v), None, errors),
    }
    return cfg, extra


def parse_cold_start(data: Any, path: str, errors: ConfigErrors) -> ColdStartModel:
    d = section(data, path, {"mean_s", "std_s", "floor_s"}, errors)
    base = ColdStartModel()
    try:
        return ColdStartModel(
            mean_s=take(d, "mean_s", path, float, base.mean_s, errors),
            std_s=take(d, "std_s", path, float, base.std_s, errors),
            floor_s=take(d, "floor_s", path, float, base.floor_s, errors),
        )
    except NerfPipeError as exc:
        errors.add(path, str(exc))
        return base


def parse_fleet(data: Any, path: str, errors: ConfigErrors) -> FleetConfig:
    d = section(data, path, {"cold_start", "memory_mb", "idle_mem_mb", "eviction_rate_per_hour", "eviction_notice_s"}, errors)
    base = FleetConfig()
    memory = dict(base.memory_mb)
    memory.update(take(d, "memory_mb", path, _node_class_map, {}, errors))
    try:
        return FleetConfig(
            cold_start=parse_cold_start(d.get("cold_start"), f"{path}.cold_start", errors),
            memory_mb=memory,
            idle_mem_mb=take(d, "idle_mem_mb", path, _nonneg, base.idle_mem_mb, errors),
            eviction_rate_per_hour=take(d, "eviction_rate_per_hour", path, _nonneg, 0.0, errors),
            eviction_notice_s=take(d, "eviction_notice_s", path, float, base.eviction_notice_s, errors),
        )
    except NerfPipeError as exc:
        errors.add(path, str(exc))
        return base


_PROFILE_KEYS = {"duration_s", "avg_cpu", "peak_cpu", "peak_mem_mb", "base_mem_mb", "sample_interval_s", "output_bytes"}


def parse_workload(data: Any, path: str, default: WorkloadSpec, errors: ConfigErrors) -> WorkloadSpec:
    d = section(data, path, _PROFILE_KEYS, errors)
    p = default.profile
    try:
        profile = TraceProfile(
            avg_cpu=take(d, "avg_cpu", path, float, p.avg_cpu, errors),
            peak_cpu=take(d, "peak_cpu", path, float, p.peak_cpu, errors),
            peak_mem_mb=take(d, "peak_mem_mb", path, float, p.peak_mem_mb, errors),
            base_mem_mb=take(d, "base_mem_mb", path, float, p.base_mem_mb, errors),
            sample_interval_s=take(d, "sample_interval_s", path, float, p.sample_interval_s, errors),
            output_bytes=take(d, "output_bytes", path, int, p.output_bytes, errors),
        )
        return WorkloadSpec(take(d, "duration_s", path, _nonneg, default.duration_s, errors), profile)
    except NerfPipeError as exc:
        errors.add(path, str(exc))
        return default


def parse_workloads(data: Any, path: str, errors: ConfigErrors, base: Optional[dict] = None) -> dict:
    d = section(data, path, {PROCESSING, TRAINING}, errors)
    defaults = base or default_workloads()
    return {phase: parse_workload(d.get(phase), f"{path}.{phase}", defaults[phase], errors) for phase in (PROCESSING, TRAINING)}


def parse_orchestrator(data: Any, path: str, errors: ConfigErrors, scheduler: SchedulerConfig, extra: dict, workloads: dict) -> OrchestratorConfig:
    d = section(data, path, {"idle_ttl_s", "max_attempts", "metrics_window_s", "grant_ttl_s"}, errors)
    base = OrchestratorConfig()
    try:
        return OrchestratorConfig(
            scheduler=scheduler,
            allow_allocation=extra["allow_allocation"],
            max_live_nodes=extra["max_live_nodes"],
            max_attempts=take(d, "max_attempts", path, int, base.max_attempts, errors),
            idle_ttl_s=take(d, "idle_ttl_s", path, _nonneg, base.idle_ttl_s, errors),
            metrics_window_s=take(d, "metrics_window_s", path, float, base.metrics_window_s, errors),
            grant_ttl_s=take(d, "grant_ttl_s", path, float, base.grant_ttl_s, errors),
            workloads=workloads,
        )
    except NerfPipeError as exc:
        errors.add(path, str(exc))
        return base


@dataclass
class ServiceConfig:
    """Everything ``nerfpipe serve`` needs."""

    storage_root: Path = Path("./nerfpipe-data/blobs")
    metadata_path: Path = Path("./nerfpipe-data/metadata.sqlite3")
    host: str = "127.0.0.1"
    port: int = 8080
    clock: str = "wall"
    seed: int = 0
    tick_interval_s: float = 1.0
    fleet: FleetConfig = field(default_factory=FleetConfig)
    orchestrator: OrchestratorConfig = field(default_factory=OrchestratorConfig)


def parse_service_config(data: dict, base_dir: Optional[Path] = None) -> ServiceConfig:
    errors = ConfigErrors()
    keys = {"storage_root", "metadata_path", "listen", "clock", "seed", "tick_interval_s", "scheduler", "fleet", "orchestrator", "workloads"}
    d = section(data, "", keys, errors)
    base_dir = base_dir or Path(".")
    sched, extra = parse_scheduler(d.get("scheduler"), "scheduler", errors)
    workloads = parse_workloads(d.get("workloads"), "workloads", errors)
    listen = section(d.get("listen"), "listen", {"host", "port"}, errors)
    clock = take(d, "clock", "", str, "wall", errors)
    if clock not in ("wall", "virtual"):
        errors.add("clock", f"expected 'wall' or 'virtual', got {clock!r}")
    cfg = ServiceConfig(
        storage_root=base_dir / take(d, "storage_root", "", str, "nerfpipe-data/blobs", errors),
        metadata_path=base_dir / take(d, "metadata_path", "", str, "nerfpipe-data/metadata.sqlite3", errors),
        host=take(listen, "host", "listen", str, "127.0.0.1", errors),
        port=take(listen, "port", "listen", int, 8080, errors),
        clock=clock,
        seed=take(d, "seed", "", int, 0, errors),
        tick_interval_s=take(d, "tick_interval_s", "", float, 1.0, errors),
        fleet=parse_fleet(d.get("fleet"), "fleet", errors),
        orchestrator=parse_orchestrator(d.get("orchestrator"), "orchestrator", errors, sched, extra, workloads),
    )
    errors.raise_if_any("service config")
    return cfg


def load_service_config(path: Union[str, Path, None]) -> ServiceConfig:
    if path is None:
        return ServiceConfig()
    path = Path(path)
    return parse_service_config(load_structured(path), path.parent)
