"""Penalty-score node selection.

Every candidate node gets a scalar penalty mixing utilization, cold-start and
cost terms; the lowest penalty wins.  Utilizations are fractions in [0, 1].

    cpu   = 160**u_cpu + |0.5 - 80*u_cpu|**u_cpu
    mem   = 160**u_mem + |0.5 - 80*u_mem|**u_mem
    total = (cpu + mem + cold) * bias + cost * (1 - bias)

All functions here are pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

from .errors import ConfigError, DomainError, NoCapacityError, ValidationError
from .nodes import NodeClass, NodeRecord, NodeState

DEFAULT_COLD_PENALTY = 100.0
DEFAULT_COST_PENALTY = 200.0


def _check_fraction(name: str, value: float) -> None:
    if not (isinstance(value, (int, float)) and math.isfinite(value) and 0.0 <= value <= 1.0):
        raise DomainError(f"{name} must be a fraction in [0, 1], got {value!r}")


@dataclass(frozen=True)
class NodeMetrics:
    """Average/peak utilization of one node over a trailing window."""

    avg_cpu: float
    avg_mem: float
    peak_cpu: float
    peak_mem_mb: float

    def __post_init__(self):
        for name in ("avg_cpu", "avg_mem", "peak_cpu"):
            _check_fraction(name, getattr(self, name))
        if not (math.isfinite(self.peak_mem_mb) and self.peak_mem_mb >= 0):
            raise DomainError(f"peak_mem_mb must be finite and >= 0, got {self.peak_mem_mb!r}")

    @classmethod
    def idle(cls) -> "NodeMetrics":
        return cls(0.0, 0.0, 0.0, 0.0)


def _default_costs() -> dict[NodeClass, float]:
    return {cls: DEFAULT_COST_PENALTY for cls in NodeClass}


@dataclass(frozen=True)
class SchedulerConfig:
    """Tunables of the penalty score.

    ``allocation_classes`` lists the node classes a fresh node may be
    allocated from, in tie-break order.
    """

    bias: float = 0.5
    cold_penalty: float = DEFAULT_COLD_PENALTY
    cost_penalty_by_class: Mapping[NodeClass, float] = field(default_factory=_default_costs)
    allocation_classes: tuple[NodeClass, ...] = (NodeClass.SPOT,)

    def __post_init__(self):
        if not (math.isfinite(self.bias) and 0.0 <= self.bias <= 1.0):
            raise ValidationError(f"bias must lie in [0, 1], got {self.bias!r}")
        if not (math.isfinite(self.cold_penalty) and self.cold_penalty >= 0):
            raise ValidationError(f"cold_penalty must be >= 0, got {self.cold_penalty!r}")
        costs = {NodeClass(k): float(v) for k, v in self.cost_penalty_by_class.items()}
        for cls, value in costs.items():
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError(f"cost penalty for {cls.value} must be >= 0, got {value!r}")
        object.__setattr__(self, "cost_penalty_by_class", costs)
        object.__setattr__(
            self, "allocation_classes", tuple(NodeClass(c) for c in self.allocation_classes)
        )

    def cost_for(self, node_class: NodeClass) -> float:
        try:
            return self.cost_penalty_by_class[NodeClass(node_class)]
        except (KeyError, ValueError):
            raise ConfigError(f"no cost penalty configured for node class {node_class!r}") from None

    def with_bias(self, bias: float) -> "SchedulerConfig":
        return SchedulerConfig(bias, self.cold_penalty, self.cost_penalty_by_class, self.allocation_classes)


@dataclass(frozen=True)
class PenaltyBreakdown:
    cpu: float
    mem: float
    cold: float
    cost: float
    bias: float
    total: float

    @classmethod
    def combine(cls, cpu: float, mem: float, cold: float, cost: float, bias: float) -> "PenaltyBreakdown":
        total = (cpu + mem + cold) * bias + cost * (1 - bias)
        return cls(cpu, mem, cold, cost, bias, total)

    def as_dict(self) -> dict:
        return {
            "cpu": self.cpu,
            "mem": self.mem,
            "cold": self.cold,
            "cost": self.cost,
            "bias": self.bias,
            "total": self.total,
        }


@dataclass(frozen=True)
class ReuseNode:
    node_id: str

    def describe(self) -> str:
        return f"reuse:{self.node_id}"


@dataclass(frozen=True)
class AllocateNew:
    node_class: NodeClass

    def describe(self) -> str:
        return f"allocate:{self.node_class.value}"


Action = Union[ReuseNode, AllocateNew]


@dataclass(frozen=True)
class ScoredCandidate:
    action: Action
    breakdown: PenaltyBreakdown
    needs_cold_start: bool

    def __iter__(self):
        # unpacks as (candidate, breakdown)
        return iter((self.action, self.breakdown))


@dataclass(frozen=True)
class SchedulingDecision:
    action: Action
    breakdown: PenaltyBreakdown
    considered: tuple[ScoredCandidate, ...]
    needs_cold_start: bool = False

    def as_dict(self) -> dict:
        return {
            "action": self.action.describe(),
            "breakdown": self.breakdown.as_dict(),
            "considered": [
                {"candidate": c.action.describe(), "cold": c.needs_cold_start, **c.breakdown.as_dict()}
                for c in self.considered
            ],
        }


def utilization_penalty(u: float) -> float:
    """Penalty of one utilization fraction: ``160**u + |0.5 - 80u|**u``.

    ``0**0`` is taken as 1, so ``u = 0`` gives 2.  The function is not
    monotone below about 0.05: it dips to ~1.03 at ``u = 1/160`` where the
    second base vanishes.

    >>> utilization_penalty(0.0)
    2.0
    """
    _check_fraction("utilization", u)
    u = float(u)
    base = abs(0.5 - u * 80.0)
    # Python already defines 0.0 ** 0.0 == 1.0
    return 160.0**u + base**u


def compute_penalty(
    metrics: NodeMetrics,
    needs_cold_start: bool,
    node_class: NodeClass,
    config: SchedulerConfig,
) -> PenaltyBreakdown:
    cost = config.cost_for(node_class)
    return PenaltyBreakdown.combine(
        cpu=utilization_penalty(metrics.avg_cpu),
        mem=utilization_penalty(metrics.avg_mem),
        cold=config.cold_penalty if needs_cold_start else 0.0,
        cost=cost,
        bias=config.bias,
    )


def _eligible(node: NodeRecord) -> Optional[bool]:
    """Cold-start flag for a usable node, ``None`` when the node can't take work."""
    if node.state is NodeState.READY and node.current_job is None:
        return False
    if node.state is NodeState.DEALLOCATED:
        return True
    return None


def select_node(
    candidates: Iterable[tuple[NodeRecord, NodeMetrics]],
    allow_allocation: bool,
    config: SchedulerConfig,
    allocation_classes: Optional[Sequence[NodeClass]] = None,
) -> SchedulingDecision:
    """Pick the lowest-penalty action for one pending workload.

    Idle Ready nodes are warm candidates, Deallocated nodes are cold
    candidates, and each allowed allocation class contributes one virtual
    cold candidate with zero utilization.  Nodes in any other state are
    skipped.  Ties go to warm over cold, then existing over new, then the
    lowest node id (or earliest allocation class).

    Raises:
        NoCapacityError: nothing usable and allocation is disabled.
    """
    classes = tuple(allocation_classes if allocation_classes is not None else config.allocation_classes)
    scored: list[tuple[tuple, ScoredCandidate]] = []
    for node, metrics in candidates:
        cold = _eligible(node)
        if cold is None:
            continue
        bd = compute_penalty(metrics, cold, node.node_class, config)
        sc = ScoredCandidate(ReuseNode(node.id), bd, cold)
        scored.append(((bd.total, cold, False, node.id), sc))
    if allow_allocation:
        for idx, cls in enumerate(classes):
            bd = compute_penalty(NodeMetrics.idle(), True, cls, config)
            sc = ScoredCandidate(AllocateNew(NodeClass(cls)), bd, True)
            scored.append(((bd.total, True, True, idx), sc))
    if not scored:
        raise NoCapacityError("no usable node and allocation is disabled")
    _, winner = min(scored, key=lambda item: item[0])
    return SchedulingDecision(
        action=winner.action,
        breakdown=winner.breakdown,
        considered=tuple(sc for _, sc in scored),
        needs_cold_start=winner.needs_cold_start,
    )
