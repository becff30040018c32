from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from django.conf import settings
from django.db import models

from embeddings.services import Embedder, is_zero
from environments.services import EnvironmentGraph, Episode, geodesic_distance
from memory.services import (
    Experience,
    ExperienceMemory,
    FailureExperience,
    FailureType,
    SuccessExperience,
    as_tuple,
    insert_failure,
    insert_success,
)
from navigation.services import EpisodeResult

logger = logging.getLogger(__name__)

DISTANCE_TOLERANCE = 1e-9


class ReflectionError(Exception):
    """Raised when an episode result cannot be reflected on."""


class Verdict(models.TextChoices):
    SUCCESS = 'success', 'Success'
    FAILURE = 'failure', 'Failure'


@dataclass(frozen=True)
class ReflectionOutcome:
    verdict: str
    failure_type: str = ''
    first_wrong_step: Optional[int] = None
    budget_exhausted: bool = False

    @property
    def is_success(self) -> bool:
        return self.verdict == Verdict.SUCCESS

    @property
    def label(self) -> str:
        return 'Success' if self.is_success else self.failure_type

    def as_dict(self) -> Dict[str, Any]:
        return {
            'verdict': self.verdict,
            'failure_type': self.failure_type,
            'first_wrong_step': self.first_wrong_step,
            'budget_exhausted': self.budget_exhausted,
        }


def _failure(failure_type: str, step: Optional[int], *, budget_exhausted: bool = False) -> ReflectionOutcome:
    return ReflectionOutcome(
        verdict=Verdict.FAILURE,
        failure_type=failure_type,
        first_wrong_step=step,
        budget_exhausted=budget_exhausted,
    )


def classify(
    graph: EnvironmentGraph,
    episode: Episode,
    result: EpisodeResult,
    radius: Optional[float] = None,
) -> ReflectionOutcome:
    """Label a finished episode Success, PGC, MRD or FGR (checked in that order)."""
    if radius is None:
        radius = getattr(settings, 'NAVIGATION_SUCCESS_RADIUS', 3.0)
    path = result.path
    if not path:
        raise ReflectionError(f'Episode {episode.id}: empty trajectory.')
    moves = [index for index, step in enumerate(result.history) if step.is_move]
    if len(path) - 1 != len(moves):
        raise ReflectionError(
            f'Episode {episode.id}: {len(path) - 1} transitions but {len(moves)} move decisions in the history.'
        )

    within = [graph.euclidean_distance(viewpoint_id, episode.goal_id) <= radius for viewpoint_id in path]
    if result.stopped and within[-1]:
        return ReflectionOutcome(verdict=Verdict.SUCCESS)

    entered = next((index for index, inside in enumerate(within) if inside), None)
    last_decision = len(result.history) - 1 if result.history else None
    if entered is not None:
        if entered < len(path) - 1:
            return _failure(FailureType.PGC, moves[entered])
        # Arrived but never stopped.
        return _failure(FailureType.FGR, last_decision, budget_exhausted=True)

    distances = [geodesic_distance(graph, viewpoint_id, episode.goal_id) for viewpoint_id in path]
    for position in range(1, len(distances)):
        if distances[position] > distances[position - 1] + DISTANCE_TOLERANCE:
            return _failure(FailureType.MRD, moves[position - 1])
    if result.stopped:
        return _failure(FailureType.FGR, last_decision)
    return _failure(FailureType.MRD, moves[-1] if moves else None, budget_exhausted=True)


def make_update(
    outcome: ReflectionOutcome,
    episode: Episode,
    result: EpisodeResult,
    *,
    graph: EnvironmentGraph,
    embedder: Embedder,
) -> Optional[Experience]:
    """The single memory update an episode produces, or None when there is nothing to learn."""
    instr_embedding = as_tuple(embedder.embed_text(episode.instruction))
    if outcome.is_success:
        if len(result.path) < 2:
            return None
        return SuccessExperience(
            instruction=episode.instruction,
            trajectory=tuple(result.path),
            path_length=graph.path_length(result.path),
            episode_id=episode.id,
            instr_embedding=instr_embedding,
        )
    if outcome.first_wrong_step is None:
        return None
    try:
        step = result.history[outcome.first_wrong_step]
    except IndexError:
        raise ReflectionError(
            f'Episode {episode.id}: step {outcome.first_wrong_step} is outside a history of {len(result.history)}.'
        ) from None
    rationale_vector = embedder.embed_text(step.rationale)
    return FailureExperience(
        instruction=episode.instruction,
        decision_viewpoint=step.origin_id,
        rationale=step.rationale,
        failure_type=outcome.failure_type,
        image_ref=graph.viewpoint(step.origin_id).image_ref,
        episode_id=episode.id,
        instr_embedding=instr_embedding,
        chosen_viewpoint='' if step.stop else step.viewpoint_id,
        rationale_embedding=() if is_zero(rationale_vector) else as_tuple(rationale_vector),
    )


def commit_update(memory: ExperienceMemory, update: Optional[Experience]) -> Dict[str, str]:
    if update is None:
        return {}
    if isinstance(update, SuccessExperience):
        return insert_success(memory, update)
    if isinstance(update, FailureExperience):
        return {update.decision_viewpoint: insert_failure(memory, update)}
    raise ReflectionError(f'Cannot commit {type(update).__name__} as a memory update.')


def reflect_and_commit(
    memory: ExperienceMemory,
    graph: EnvironmentGraph,
    episode: Episode,
    result: EpisodeResult,
    *,
    embedder: Embedder,
    radius: Optional[float] = None,
) -> Tuple[ReflectionOutcome, Dict[str, str]]:
    """Classify, build the update and insert it. Callers hold the only write access to ``memory``."""
    outcome = classify(graph, episode, result, radius)
    update = make_update(outcome, episode, result, graph=graph, embedder=embedder)
    inserts = commit_update(memory, update)
    logger.info(
        'Reflected on %s: %s (first wrong step %s), inserts %s',
        episode.id,
        outcome.label,
        outcome.first_wrong_step,
        inserts,
    )
    return outcome, inserts


def reflection_record(episode_id: str, outcome: ReflectionOutcome, inserts: Dict[str, str], **extra: Any) -> Dict[str, Any]:
    record: Dict[str, Any] = {'episode_id': episode_id, **extra}
    record.update(outcome.as_dict())
    record['inserts'] = {viewpoint_id: str(value) for viewpoint_id, value in sorted(inserts.items())}
    return record


def append_reflection_log(path: str | Path, records: List[Dict[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'a', encoding='utf-8') as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + '\n')
