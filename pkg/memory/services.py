from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from typing import ClassVar, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings
from django.db import models

from embeddings.services import (
    DimensionMismatchError,
    Embedder,
    ZeroVectorError,
    cosine_sim,
    is_zero,
    similarity_or_floor,
    viewpoint_embedding,
)
from environments.services import EnvironmentGraph, Viewpoint

logger = logging.getLogger(__name__)

Vector = Tuple[float, ...]


class MemoryStoreError(Exception):
    """Base error for the experience memory."""


class UnknownUnitError(MemoryStoreError, KeyError):
    """Raised when an experience targets a viewpoint without a memory unit."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else 'Unknown memory unit.'


class FailureType(models.TextChoices):
    MRD = 'MRD', 'mid-route deviation'
    FGR = 'FGR', 'false goal recognition'
    PGC = 'PGC', 'post-goal continuation'


class InsertOutcome(models.TextChoices):
    INSERTED = 'inserted', 'Inserted'
    REPLACED = 'replaced', 'Replaced'
    DISCARDED = 'discarded', 'Discarded'
    IGNORED = 'ignored', 'Ignored'


def as_tuple(vector: np.ndarray | Sequence[float]) -> Vector:
    return tuple(float(value) for value in np.asarray(vector, dtype=np.float64).tolist())


def as_array(vector: Vector) -> np.ndarray:
    return np.asarray(vector, dtype=np.float64)


@dataclass(frozen=True)
class SuccessExperience:
    instruction: str
    trajectory: Tuple[str, ...]
    path_length: float
    episode_id: str
    instr_embedding: Vector

    kind: ClassVar[str] = 'success'

    def __post_init__(self) -> None:
        if len(self.trajectory) < 2:
            raise MemoryStoreError('A successful route needs at least two viewpoints.')
        if not self.path_length > 0:
            raise MemoryStoreError('A successful route needs a positive length.')

    @property
    def goal_id(self) -> str:
        return self.trajectory[-1]


@dataclass(frozen=True)
class FailureExperience:
    instruction: str
    decision_viewpoint: str
    rationale: str
    failure_type: str
    image_ref: str
    episode_id: str
    instr_embedding: Vector
    chosen_viewpoint: str = ''
    rationale_embedding: Vector = ()

    kind: ClassVar[str] = 'failure'

    def __post_init__(self) -> None:
        if self.failure_type not in FailureType.values:
            raise MemoryStoreError(f'Unknown failure type "{self.failure_type}".')


@dataclass(frozen=True)
class SceneDescription:
    """Fixed textual description of a viewpoint, used instead of experiences."""

    viewpoint_id: str
    text: str

    kind: ClassVar[str] = 'scene_description'


Experience = Union[SuccessExperience, FailureExperience, SceneDescription]


@dataclass
class MemoryUnit:
    viewpoint_id: str
    image_ref: str
    landmarks: Tuple[str, ...]
    index_id: int
    experiences: List[Experience] = field(default_factory=list)


class VectorIndex:
    """Exact flat cosine index over unit-norm vectors, kept sorted by index id."""

    def __init__(self, dimension: int) -> None:
        self.dimension = dimension
        self._ids: List[int] = []
        self._matrix = np.zeros((0, dimension), dtype=np.float64)

    def __len__(self) -> int:
        return len(self._ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VectorIndex):
            return NotImplemented
        return (
            self.dimension == other.dimension
            and self._ids == other._ids
            and np.array_equal(self._matrix, other._matrix)
        )

    @property
    def ids(self) -> List[int]:
        return list(self._ids)

    def add(self, index_id: int, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dimension,):
            raise DimensionMismatchError(f'Index expects dimension {self.dimension}, got {vector.shape}.')
        if is_zero(vector):
            raise ZeroVectorError('The zero vector cannot be indexed.')
        position = bisect.bisect_left(self._ids, index_id)
        if position < len(self._ids) and self._ids[position] == index_id:
            raise MemoryStoreError(f'Index id {index_id} already present.')
        self._ids.insert(position, index_id)
        self._matrix = np.insert(self._matrix, position, vector, axis=0)

    def vector(self, index_id: int) -> np.ndarray:
        position = bisect.bisect_left(self._ids, index_id)
        if position == len(self._ids) or self._ids[position] != index_id:
            raise MemoryStoreError(f'Index id {index_id} not present.')
        return self._matrix[position].copy()

    def search(self, query: np.ndarray, k: int = 1) -> List[Tuple[int, float]]:
        """Top-k ``(index_id, cosine)`` by exhaustive scan; ties go to the lowest id."""
        if not self._ids:
            return []
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dimension,):
            raise DimensionMismatchError(f'Query has shape {query.shape}, index dimension is {self.dimension}.')
        norm = float(np.linalg.norm(query))
        if norm == 0.0:
            raise ZeroVectorError('Cannot search with the zero vector.')
        scores = np.clip((self._matrix @ query) / (np.linalg.norm(self._matrix, axis=1) * norm), -1.0, 1.0)
        if k == 1:
            best = int(np.argmax(scores))
            return [(self._ids[best], float(scores[best]))]
        order = np.lexsort((np.asarray(self._ids), -scores))[:k]
        return [(self._ids[position], float(scores[position])) for position in order]


@dataclass
class ExperienceMemory:
    dimension: int
    units: Dict[str, MemoryUnit]
    index: VectorIndex
    _by_index: Dict[int, str] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._by_index = {unit.index_id: unit.viewpoint_id for unit in self.units.values()}
        if len(self._by_index) != len(self.units):
            raise MemoryStoreError('Memory units must have unique index ids.')
        for index_id in self.index.ids:
            if index_id not in self._by_index:
                raise MemoryStoreError(f'Index entry {index_id} has no memory unit.')

    def unit(self, viewpoint_id: str) -> MemoryUnit:
        try:
            return self.units[viewpoint_id]
        except KeyError:
            raise UnknownUnitError(f'No memory unit for viewpoint "{viewpoint_id}".') from None

    def unit_for_index(self, index_id: int) -> MemoryUnit:
        try:
            return self.units[self._by_index[index_id]]
        except KeyError:
            raise MemoryStoreError(f'No memory unit for index id {index_id}.') from None

    def embedding_for(self, viewpoint_id: str) -> Optional[np.ndarray]:
        unit = self.unit(viewpoint_id)
        if unit.index_id not in self.index.ids:
            return None
        return self.index.vector(unit.index_id)

    def experience_count(self) -> int:
        return sum(len(unit.experiences) for unit in self.units.values())


@dataclass(frozen=True)
class RetrievalHit:
    unit: MemoryUnit
    experience: Experience
    score: float


@dataclass(frozen=True)
class SuccessFilterDecision:
    outcome: str
    replaced: Tuple[SuccessExperience, ...] = ()


def empty_memory(dimension: int) -> ExperienceMemory:
    return ExperienceMemory(dimension=dimension, units={}, index=VectorIndex(dimension))


def build_memory(graph: EnvironmentGraph, embedder: Embedder) -> ExperienceMemory:
    """One unit per viewpoint; units with nothing to embed stay out of the index."""
    units: Dict[str, MemoryUnit] = {}
    index = VectorIndex(embedder.dimension)
    for index_id, viewpoint in enumerate(graph.viewpoints.values()):
        units[viewpoint.id] = MemoryUnit(
            viewpoint_id=viewpoint.id,
            image_ref=viewpoint.image_ref,
            landmarks=viewpoint.landmarks,
            index_id=index_id,
        )
        vector = viewpoint_embedding(viewpoint.image_ref, viewpoint.landmarks, embedder)
        if is_zero(vector):
            logger.debug('Viewpoint %s has no embeddable content; left out of the index', viewpoint.id)
            continue
        index.add(index_id, vector)
    logger.info('Built memory with %d units, %d indexed', len(units), len(index))
    return ExperienceMemory(dimension=embedder.dimension, units=units, index=index)


def scene_description_for(viewpoint: Viewpoint | MemoryUnit) -> SceneDescription:
    viewpoint_id = viewpoint.id if isinstance(viewpoint, Viewpoint) else viewpoint.viewpoint_id
    if viewpoint.landmarks:
        text = f'Viewpoint {viewpoint_id} shows {", ".join(viewpoint.landmarks)}.'
    else:
        text = f'Viewpoint {viewpoint_id} shows no salient landmarks.'
    return SceneDescription(viewpoint_id=viewpoint_id, text=text)


def seed_scene_descriptions(memory: ExperienceMemory) -> None:
    """Replace every unit's experiences with its fixed scene description."""
    for unit in memory.units.values():
        unit.experiences = [scene_description_for(unit)]


def select_experience(unit: MemoryUnit, instr_embedding: np.ndarray, current_viewpoint: str) -> Optional[Experience]:
    """Failures anchored here first, then instruction similarity, then recency."""
    best: Optional[Experience] = None
    best_key: Optional[Tuple[int, float, int]] = None
    for position, experience in enumerate(unit.experiences):
        anchored = int(isinstance(experience, FailureExperience) and experience.decision_viewpoint == current_viewpoint)
        stored = getattr(experience, 'instr_embedding', ())
        similarity = similarity_or_floor(instr_embedding, as_array(stored), floor=-2.0) if stored else -2.0
        key = (anchored, similarity, position)
        if best_key is None or key > best_key:
            best, best_key = experience, key
    return best


def retrieve(
    memory: ExperienceMemory,
    v_obs: np.ndarray,
    instr_embedding: np.ndarray,
    current_viewpoint: str,
    threshold: float,
    top_k: int = 1,
) -> Optional[RetrievalHit]:
    """Best-scoring unit above the threshold that holds an experience.

    With ``top_k`` greater than one, lower-ranked units are consulted when the
    best unit is still empty.
    """
    if is_zero(np.asarray(v_obs)):
        raise ZeroVectorError('Retrieval needs a non-zero observation embedding.')
    for index_id, score in memory.index.search(v_obs, k=max(1, top_k)):
        unit = memory.unit_for_index(index_id)
        if score < threshold:
            logger.debug('Unit %s scored %.4f below threshold %.4f', unit.viewpoint_id, score, threshold)
            return None
        experience = select_experience(unit, instr_embedding, current_viewpoint)
        if experience is not None:
            logger.debug('Retrieved %s experience from unit %s (score %.4f)', experience.kind, unit.viewpoint_id, score)
            return RetrievalHit(unit=unit, experience=experience, score=score)
    return None


def _similar_routes(existing: Iterable[Experience], new: SuccessExperience, threshold: float) -> List[SuccessExperience]:
    similar = []
    for experience in existing:
        if not isinstance(experience, SuccessExperience) or experience.goal_id != new.goal_id:
            continue
        try:
            similarity = cosine_sim(as_array(experience.instr_embedding), as_array(new.instr_embedding))
        except ZeroVectorError:
            similarity = 1.0 if experience.instruction == new.instruction else 0.0
        if similarity >= threshold:
            similar.append(experience)
    return similar


def filter_success(
    existing: Sequence[Experience],
    new: SuccessExperience,
    threshold: Optional[float] = None,
) -> SuccessFilterDecision:
    if threshold is None:
        threshold = getattr(settings, 'MEMORY_SIMILAR_ROUTE_THRESHOLD', 0.95)
    similar = _similar_routes(existing, new, threshold)
    if not similar:
        return SuccessFilterDecision(InsertOutcome.INSERTED)
    if any(route.path_length <= new.path_length for route in similar):
        return SuccessFilterDecision(InsertOutcome.DISCARDED)
    return SuccessFilterDecision(InsertOutcome.REPLACED, replaced=tuple(similar))


def insert_success(
    memory: ExperienceMemory,
    experience: SuccessExperience,
    threshold: Optional[float] = None,
) -> Dict[str, str]:
    units = [memory.unit(viewpoint_id) for viewpoint_id in dict.fromkeys(experience.trajectory)]
    outcomes: Dict[str, str] = {}
    for unit in units:
        decision = filter_success(unit.experiences, experience, threshold)
        if decision.outcome == InsertOutcome.REPLACED:
            unit.experiences = [item for item in unit.experiences if item not in decision.replaced]
        if decision.outcome in (InsertOutcome.INSERTED, InsertOutcome.REPLACED):
            unit.experiences.append(experience)
        outcomes[unit.viewpoint_id] = decision.outcome
    logger.debug('Success %s committed: %s', experience.episode_id, outcomes)
    return outcomes


def _normalize_rationale(text: str) -> str:
    return ' '.join(text.lower().split())


def is_duplicate_failure(existing: FailureExperience, new: FailureExperience, threshold: float) -> bool:
    if existing.failure_type != new.failure_type:
        return False
    if _normalize_rationale(existing.rationale) == _normalize_rationale(new.rationale):
        return True
    if not existing.rationale_embedding or not new.rationale_embedding:
        return False
    return similarity_or_floor(as_array(existing.rationale_embedding), as_array(new.rationale_embedding)) >= threshold


def insert_failure(
    memory: ExperienceMemory,
    experience: FailureExperience,
    threshold: Optional[float] = None,
) -> str:
    if threshold is None:
        threshold = getattr(settings, 'MEMORY_RATIONALE_THRESHOLD', 0.95)
    unit = memory.unit(experience.decision_viewpoint)
    for existing in unit.experiences:
        if isinstance(existing, FailureExperience) and is_duplicate_failure(existing, experience, threshold):
            logger.debug('Failure at %s already represented; ignored', unit.viewpoint_id)
            return InsertOutcome.IGNORED
    unit.experiences.append(experience)
    return InsertOutcome.INSERTED
