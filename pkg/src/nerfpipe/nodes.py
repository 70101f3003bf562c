"""Compute-node identity, class, and lifecycle graph.

Shared by the scheduler (which ranks nodes) and the fleet (which drives them),
so neither has to import the other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .errors import IllegalTransitionError


class NodeClass(str, Enum):
    SPOT = "spot"
    CONTAINER_INSTANCE = "container_instance"

    @property
    def evictable(self) -> bool:
        return self is NodeClass.SPOT


class NodeState(str, Enum):
    DEALLOCATED = "Deallocated"
    COLD_STARTING = "ColdStarting"
    READY = "Ready"
    BUSY = "Busy"
    EVICTING = "Evicting"
    EVICTED = "Evicted"


NODE_TRANSITIONS: dict[NodeState, frozenset[NodeState]] = {
    NodeState.DEALLOCATED: frozenset({NodeState.COLD_STARTING}),
    NodeState.COLD_STARTING: frozenset({NodeState.READY}),
    NodeState.READY: frozenset({NodeState.BUSY, NodeState.DEALLOCATED, NodeState.EVICTING}),
    NodeState.BUSY: frozenset({NodeState.READY, NodeState.EVICTING}),
    NodeState.EVICTING: frozenset({NodeState.EVICTED}),
    NodeState.EVICTED: frozenset({NodeState.DEALLOCATED}),
}


def is_legal_node_transition(
    node_class: NodeClass, src: NodeState, dst: NodeState
) -> bool:
    if dst not in NODE_TRANSITIONS[src]:
        return False
    if dst is NodeState.EVICTING and not node_class.evictable:
        return False
    return True


@dataclass
class NodeRecord:
    id: str
    node_class: NodeClass
    state: NodeState
    created_at: float
    cold_start_duration_s: float
    mounted_containers: set = field(default_factory=set)
    current_job: Optional[str] = None
    idle_since: Optional[float] = None
    cold_starts: int = 0

    def transition(self, dst: NodeState) -> NodeState:
        """Move to ``dst`` if the edge is legal; returns the previous state."""
        if not is_legal_node_transition(self.node_class, self.state, dst):
            raise IllegalTransitionError(
                f"node {self.id} ({self.node_class.value}): "
                f"{self.state.value} -> {dst.value} is not allowed"
            )
        prev, self.state = self.state, dst
        return prev

    def accepts_mounts(self) -> bool:
        return self.state is not NodeState.DEALLOCATED

    @property
    def is_idle(self) -> bool:
        return self.state is NodeState.READY and self.current_job is None

    def view(self) -> dict:
        return {
            "id": self.id,
            "class": self.node_class.value,
            "state": self.state.value,
            "created_at": self.created_at,
            "cold_start_duration_s": self.cold_start_duration_s,
            "mounted_containers": sorted(c.name for c in self.mounted_containers),
            "current_job": self.current_job,
        }
