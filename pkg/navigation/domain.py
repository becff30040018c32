from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set, Tuple, Union

from django.db import models

from environments.services import Viewpoint


class RuleMode(models.TextChoices):
    CONSTRAINT = 'constraint', 'binding constraint'
    PLAIN_CONTEXT = 'context', 'plain context'
    NONE = 'none', 'no rule'


class RuleKind(models.TextChoices):
    SUCCESS_GUIDANCE = 'success_guidance', 'success guidance'
    FAILURE_AVOIDANCE = 'failure_avoidance', 'failure avoidance'
    SCENE_DESCRIPTION = 'scene_description', 'scene description'


@dataclass(frozen=True)
class Observation:
    viewpoint_id: str
    image_ref: str = ''
    landmarks: Tuple[str, ...] = ()

    @classmethod
    def from_viewpoint(cls, viewpoint: Viewpoint) -> 'Observation':
        return cls(viewpoint_id=viewpoint.id, image_ref=viewpoint.image_ref, landmarks=viewpoint.landmarks)


@dataclass(frozen=True)
class PlanStep:
    action: str
    goal: str = ''


Plan = Tuple[PlanStep, ...]


@dataclass(frozen=True)
class Move:
    viewpoint_id: str


@dataclass(frozen=True)
class Stop:
    pass


Action = Union[Move, Stop]


@dataclass(frozen=True)
class Decision:
    analysis: str
    plan: Plan
    action: Action
    rationale: str = ''

    @property
    def is_stop(self) -> bool:
        return isinstance(self.action, Stop)


@dataclass(frozen=True)
class TrajectoryStep:
    """One backend decision: ``(id_i, r_i)`` plus the reasoning that produced it."""

    origin_id: str
    viewpoint_id: str
    rationale: str
    analysis: str = ''
    plan: Plan = ()
    stop: bool = False
    forced: bool = False

    @property
    def is_move(self) -> bool:
        return not self.stop


@dataclass
class TopoMap:
    nodes: Dict[str, Tuple[str, ...]] = field(default_factory=dict)
    edges: Set[Tuple[str, str]] = field(default_factory=set)

    def copy(self) -> 'TopoMap':
        return TopoMap(nodes=dict(self.nodes), edges=set(self.edges))

    def sorted_nodes(self) -> List[Tuple[str, Tuple[str, ...]]]:
        return sorted(self.nodes.items())

    def sorted_edges(self) -> List[Tuple[str, str]]:
        return sorted(self.edges)


def expand_map(
    topo: TopoMap,
    current: str,
    neighbors: Iterable[Tuple[str, Tuple[str, ...]]],
    current_landmarks: Tuple[str, ...] = (),
) -> TopoMap:
    """Append the current viewpoint, its neighbors and the connecting edges."""
    topo.nodes.setdefault(current, tuple(current_landmarks))
    for neighbor_id, landmarks in neighbors:
        topo.nodes.setdefault(neighbor_id, tuple(landmarks))
        topo.edges.add((current, neighbor_id) if current < neighbor_id else (neighbor_id, current))
    return topo


@dataclass(frozen=True)
class NavRule:
    kind: str
    text: str
    source_viewpoint: str
    source_episode: str = ''
    image_ref: Optional[str] = None
    failure_type: str = ''
    avoid_viewpoint: str = ''
    route: Tuple[str, ...] = ()
    anchored: bool = False


@dataclass(frozen=True)
class PromptBundle:
    """The prompt manager ``{I, O, H, M; R}`` for one step."""

    instruction: str
    current: Observation
    observations: Tuple[Observation, ...]
    history: Tuple[TrajectoryStep, ...]
    map: TopoMap
    rule: Optional[NavRule] = None
    rule_mode: str = RuleMode.CONSTRAINT

    @property
    def candidate_ids(self) -> List[str]:
        return [observation.viewpoint_id for observation in self.observations]

    @property
    def active_rule(self) -> Optional[NavRule]:
        """The rule when it is rendered as a binding constraint."""
        return self.rule if self.rule_mode == RuleMode.CONSTRAINT else None
