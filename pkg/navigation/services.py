from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings

from embeddings.services import (
    DimensionMismatchError,
    Embedder,
    fuse_observations,
    is_zero,
    load_fusion_weights,
    mean_pool,
    viewpoint_embedding,
)
from environments.services import EnvironmentGraph, Episode, MetricSet, score_episode
from memory.services import ExperienceMemory, RetrievalHit, retrieve
from navigation.domain import (
    Decision,
    NavRule,
    Observation,
    PromptBundle,
    RuleMode,
    Stop,
    TopoMap,
    TrajectoryStep,
    expand_map,
)
from navigation.prompts import DecisionError, ParseError, assemble_prompt, parse_decision, synthesize_rule
from policies.services import BackendError, DecisionBackend

logger = logging.getLogger(__name__)

__all__ = [
    'DecisionError',
    'EpisodeResult',
    'FusionMode',
    'NavigationConfig',
    'ParseError',
    'observation_embedding',
    'run_episode',
]

NO_CANDIDATES_RATIONALE = 'no navigable candidates from the current viewpoint'


class FusionMode:
    ATTENTION = 'attention'
    MEAN = 'mean'

    choices = (ATTENTION, MEAN)


@dataclass(frozen=True)
class NavigationConfig:
    max_steps: int = 15
    radius: float = 3.0
    retrieval_threshold: float = 0.55
    retrieval_top_k: int = 1
    rule_mode: str = RuleMode.CONSTRAINT
    parse_retries: int = 2
    fusion: str = FusionMode.ATTENTION
    fusion_weights: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_steps < 0:
            raise ValueError('max_steps must not be negative.')
        if self.parse_retries < 0:
            raise ValueError('parse_retries must not be negative.')
        if self.rule_mode not in RuleMode.values:
            raise ValueError(f'Unknown rule mode "{self.rule_mode}".')
        if self.fusion not in FusionMode.choices:
            raise ValueError(f'Unknown fusion mode "{self.fusion}".')

    @classmethod
    def from_settings(cls, **overrides: Any) -> 'NavigationConfig':
        values: Dict[str, Any] = {
            'max_steps': getattr(settings, 'NAVIGATION_MAX_STEPS', 15),
            'radius': getattr(settings, 'NAVIGATION_SUCCESS_RADIUS', 3.0),
            'retrieval_threshold': getattr(settings, 'NAVIGATION_RETRIEVAL_THRESHOLD', 0.55),
            'retrieval_top_k': getattr(settings, 'NAVIGATION_RETRIEVAL_TOP_K', 1),
            'parse_retries': getattr(settings, 'NAVIGATION_PARSE_RETRIES', 2),
        }
        weights_path = getattr(settings, 'FUSION_WEIGHTS_PATH', '')
        dimension = overrides.pop('dimension', None) or getattr(settings, 'EMBEDDING_DIMENSION', 512)
        if weights_path and dimension and 'fusion_weights' not in overrides:
            values['fusion_weights'] = load_fusion_weights(weights_path, dimension)
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)


@dataclass
class EpisodeResult:
    """Outcome of one episode.

    ``path`` lists visited viewpoints starting at the episode start; ``history``
    holds one step per backend decision, the final Stop included.
    """

    episode_id: str
    path: Tuple[str, ...]
    history: Tuple[TrajectoryStep, ...]
    stopped: bool
    metrics: MetricSet
    error: str = ''
    trace: List[Dict[str, Any]] = field(default_factory=list, repr=False)
    topo_map: TopoMap = field(default_factory=TopoMap, repr=False)

    @property
    def trajectory(self) -> Tuple[str, ...]:
        return self.path

    @property
    def failed_with_error(self) -> bool:
        return bool(self.error)


def observation_embedding(
    instruction_vector: np.ndarray,
    observations: Sequence[Observation],
    embedder: Embedder,
    config: NavigationConfig,
) -> Optional[np.ndarray]:
    """Fused candidate embedding, or None when no candidate has content."""
    views = [viewpoint_embedding(item.image_ref, item.landmarks, embedder) for item in observations]
    views = [view for view in views if not is_zero(view)]
    if not views:
        return None
    if config.fusion == FusionMode.MEAN:
        return mean_pool(views)
    return fuse_observations(instruction_vector, views, config.fusion_weights)


def _decision_record(decision: Decision) -> Dict[str, Any]:
    action = 'STOP' if decision.is_stop else decision.action.viewpoint_id
    return {
        'analysis': decision.analysis,
        'plan': [[step.action, step.goal] for step in decision.plan],
        'rationale': decision.rationale,
        'action': action,
    }


def _retrieval_record(hit: Optional[RetrievalHit]) -> Optional[Dict[str, Any]]:
    if hit is None:
        return None
    return {'unit': hit.unit.viewpoint_id, 'score': round(hit.score, 12), 'kind': hit.experience.kind}


def _decide(
    backend: DecisionBackend,
    bundle: PromptBundle,
    config: NavigationConfig,
    episode_id: str,
) -> Tuple[Decision, List[str], bool]:
    """Ask the backend, retrying unparsable replies; returns (decision, raw replies, forced)."""
    candidates = bundle.candidate_ids
    replies: List[str] = []
    for attempt in range(config.parse_retries + 1):
        raw = backend.decide(bundle, candidates, config.seed)
        replies.append(raw)
        try:
            return parse_decision(raw, candidates), replies, False
        except ParseError as exc:
            logger.warning('Episode %s: unparsable reply (attempt %d): %s', episode_id, attempt + 1, exc)
    logger.warning('Episode %s: forcing stop after %d unparsable replies', episode_id, len(replies))
    forced = Decision(
        analysis='',
        plan=(),
        action=Stop(),
        rationale=f'forced stop after {len(replies)} unparsable replies',
    )
    return forced, replies, True


def run_episode(
    graph: EnvironmentGraph,
    episode: Episode,
    memory: ExperienceMemory,
    embedder: Embedder,
    backend: DecisionBackend,
    config: Optional[NavigationConfig] = None,
) -> EpisodeResult:
    """Run the retrieve, prompt, decide loop for one episode. Memory is only read."""
    config = config or NavigationConfig.from_settings()
    graph.viewpoint(episode.start_id)
    graph.viewpoint(episode.goal_id)
    if memory.dimension != embedder.dimension:
        raise DimensionMismatchError(
            f'Memory dimension {memory.dimension} does not match embedder dimension {embedder.dimension}.'
        )

    instruction_vector = embedder.embed_text(episode.instruction)
    current = episode.start_id
    path: List[str] = [current]
    history: List[TrajectoryStep] = []
    trace: List[Dict[str, Any]] = []
    topo = TopoMap()
    stopped = False
    error = ''

    for step in range(config.max_steps):
        viewpoint = graph.viewpoint(current)
        candidates = graph.neighbors(current)
        expand_map(
            topo,
            current,
            [(neighbor, graph.viewpoint(neighbor).landmarks) for neighbor in candidates],
            viewpoint.landmarks,
        )
        if not candidates:
            logger.warning('Episode %s: no candidates at %s; stopping', episode.id, current)
            history.append(
                TrajectoryStep(origin_id=current, viewpoint_id=current, rationale=NO_CANDIDATES_RATIONALE, stop=True, forced=True)
            )
            trace.append(
                {
                    'step': step,
                    'viewpoint_id': current,
                    'candidates': [],
                    'retrieval': None,
                    'rule': None,
                    'prompt': '',
                    'replies': [],
                    'decision': {'analysis': '', 'plan': [], 'rationale': NO_CANDIDATES_RATIONALE, 'action': 'STOP'},
                    'forced': True,
                }
            )
            stopped = True
            break

        observations = tuple(Observation.from_viewpoint(graph.viewpoint(neighbor)) for neighbor in candidates)
        hit: Optional[RetrievalHit] = None
        rule: Optional[NavRule] = None
        if config.rule_mode != RuleMode.NONE:
            v_obs = observation_embedding(instruction_vector, observations, embedder, config)
            if v_obs is not None:
                hit = retrieve(
                    memory, v_obs, instruction_vector, current, config.retrieval_threshold, top_k=config.retrieval_top_k
                )
            if hit is not None:
                rule = synthesize_rule(hit, current)

        bundle = PromptBundle(
            instruction=episode.instruction,
            current=Observation.from_viewpoint(viewpoint),
            observations=observations,
            history=tuple(history),
            map=topo.copy(),
            rule=rule,
            rule_mode=config.rule_mode,
        )
        prompt = assemble_prompt(bundle)
        try:
            decision, replies, forced = _decide(backend, bundle, config, episode.id)
        except BackendError as exc:
            logger.error('Episode %s aborted at step %d: %s', episode.id, step, exc)
            error = str(exc)
            trace.append(
                {
                    'step': step,
                    'viewpoint_id': current,
                    'candidates': list(candidates),
                    'retrieval': _retrieval_record(hit),
                    'rule': rule.text if rule else None,
                    'prompt': prompt,
                    'error': error,
                }
            )
            break

        target = current if decision.is_stop else decision.action.viewpoint_id
        history.append(
            TrajectoryStep(
                origin_id=current,
                viewpoint_id=target,
                rationale=decision.rationale,
                analysis=decision.analysis,
                plan=decision.plan,
                stop=decision.is_stop,
                forced=forced,
            )
        )
        trace.append(
            {
                'step': step,
                'viewpoint_id': current,
                'candidates': list(candidates),
                'retrieval': _retrieval_record(hit),
                'rule': rule.text if rule else None,
                'prompt': prompt,
                'replies': replies,
                'decision': _decision_record(decision),
                'forced': forced,
            }
        )
        if decision.is_stop:
            stopped = True
            break
        path.append(target)
        current = target
    else:
        logger.info('Episode %s: step budget of %d exhausted at %s', episode.id, config.max_steps, current)

    metrics = score_episode(graph, episode, path, stopped, config.radius)
    logger.info(
        'Episode %s finished at %s after %d decisions (success=%s, ne=%.3f)',
        episode.id,
        current,
        len(history),
        metrics.success,
        metrics.ne,
    )
    return EpisodeResult(
        episode_id=episode.id,
        path=tuple(path),
        history=tuple(history),
        stopped=stopped,
        metrics=metrics,
        error=error,
        trace=trace,
        topo_map=topo,
    )
