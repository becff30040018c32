from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import networkx as nx

logger = logging.getLogger(__name__)

ENVIRONMENT_FORMAT_VERSION = 1
EDGE_LENGTH_TOLERANCE = 0.10


class NavigationGraphError(Exception):
    """Base error for environment graphs and episodes."""


class UnknownViewpointError(NavigationGraphError, KeyError):
    """Raised when a viewpoint id is not part of the environment."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else 'Unknown viewpoint.'


class InvalidTransitionError(NavigationGraphError):
    """Raised when a trajectory jumps between viewpoints that share no edge."""


class EnvironmentFormatError(NavigationGraphError):
    """Raised when an environment or episode document is malformed."""

    def __init__(self, message: str, *, source: str | Path | None = None, location: str | None = None) -> None:
        parts = [str(source)] if source else []
        if location:
            parts.append(location)
        prefix = f"{': '.join(parts)}: " if parts else ''
        super().__init__(f'{prefix}{message}')
        self.source = source
        self.location = location


@dataclass(frozen=True)
class Viewpoint:
    id: str
    position: Tuple[float, float, float]
    landmarks: Tuple[str, ...] = ()
    image_ref: str = ''


@dataclass(frozen=True)
class Episode:
    id: str
    instruction: str
    start_id: str
    goal_id: str
    reference_path: Tuple[str, ...]


@dataclass(frozen=True)
class MetricSet:
    ne: float
    success: bool
    oracle_success: bool
    spl: float

    def as_dict(self) -> Dict[str, Any]:
        return {
            'ne': self.ne,
            'success': self.success,
            'oracle_success': self.oracle_success,
            'spl': self.spl,
        }


@dataclass
class EnvironmentGraph:
    """Navigable viewpoints of one scene. Immutable once built."""

    viewpoints: Dict[str, Viewpoint]
    graph: nx.Graph
    _distances: Dict[str, Dict[str, float]] = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_parts(
        cls,
        viewpoints: Iterable[Viewpoint],
        edges: Iterable[Tuple[str, str, float]],
        *,
        check_geometry: bool = True,
    ) -> 'EnvironmentGraph':
        index: Dict[str, Viewpoint] = {}
        for viewpoint in viewpoints:
            if viewpoint.id in index:
                raise NavigationGraphError(f'Viewpoint "{viewpoint.id}" declared twice.')
            if len(viewpoint.position) != 3 or not all(math.isfinite(value) for value in viewpoint.position):
                raise NavigationGraphError(f'Viewpoint "{viewpoint.id}" has an invalid position.')
            index[viewpoint.id] = viewpoint

        graph = nx.Graph()
        graph.add_nodes_from(index)
        for source, target, length in edges:
            for endpoint in (source, target):
                if endpoint not in index:
                    raise UnknownViewpointError(f'Edge references unknown viewpoint "{endpoint}".')
            if source == target:
                raise NavigationGraphError(f'Self-loop on viewpoint "{source}".')
            if not length > 0:
                raise NavigationGraphError(f'Edge {source}-{target} must have a positive length.')
            if check_geometry:
                straight = math.dist(index[source].position, index[target].position)
                if abs(length - straight) > EDGE_LENGTH_TOLERANCE * straight + 1e-9:
                    raise NavigationGraphError(
                        f'Edge {source}-{target} length {length:.3f} m deviates from the '
                        f'{straight:.3f} m between its endpoints.'
                    )
            graph.add_edge(source, target, length=float(length))
        return cls(viewpoints=index, graph=graph)

    def viewpoint(self, viewpoint_id: str) -> Viewpoint:
        try:
            return self.viewpoints[viewpoint_id]
        except KeyError:
            raise UnknownViewpointError(f'Unknown viewpoint "{viewpoint_id}".') from None

    def neighbors(self, viewpoint_id: str) -> List[str]:
        self.viewpoint(viewpoint_id)
        return sorted(self.graph.neighbors(viewpoint_id))

    def has_edge(self, a: str, b: str) -> bool:
        return self.graph.has_edge(a, b)

    def edge_length(self, a: str, b: str) -> float:
        if not self.graph.has_edge(a, b):
            raise InvalidTransitionError(f'No navigable edge between "{a}" and "{b}".')
        return self.graph.edges[a, b]['length']

    def path_length(self, path: Sequence[str]) -> float:
        return sum(self.edge_length(a, b) for a, b in zip(path, path[1:]))

    def euclidean_distance(self, a: str, b: str) -> float:
        return math.dist(self.viewpoint(a).position, self.viewpoint(b).position)

    def same_component(self, a: str, b: str) -> bool:
        return math.isfinite(geodesic_distance(self, a, b))


def geodesic_distance(graph: EnvironmentGraph, a: str, b: str) -> float:
    """Shortest-path distance in meters; ``math.inf`` when a and b are disconnected."""
    graph.viewpoint(a)
    graph.viewpoint(b)
    if a == b:
        return 0.0
    distances = graph._distances.get(a)
    if distances is None:
        distances = nx.single_source_dijkstra_path_length(graph.graph, a, weight='length')
        graph._distances[a] = distances
    return float(distances.get(b, math.inf))


def validate_trajectory(graph: EnvironmentGraph, trajectory: Sequence[str]) -> None:
    for viewpoint_id in trajectory:
        graph.viewpoint(viewpoint_id)
    for index, (a, b) in enumerate(zip(trajectory, trajectory[1:]), start=1):
        if not graph.has_edge(a, b):
            raise InvalidTransitionError(f'Step {index}: no navigable edge between "{a}" and "{b}".')


def score_episode(
    graph: EnvironmentGraph,
    episode: Episode,
    trajectory: Sequence[str],
    stopped: bool,
    radius: float = 3.0,
) -> MetricSet:
    if not trajectory:
        raise NavigationGraphError(f'Episode {episode.id}: empty trajectory.')
    if trajectory[0] != episode.start_id:
        raise NavigationGraphError(
            f'Episode {episode.id}: trajectory starts at "{trajectory[0]}" instead of "{episode.start_id}".'
        )
    validate_trajectory(graph, trajectory)

    ne = graph.euclidean_distance(trajectory[-1], episode.goal_id)
    success = bool(stopped and ne <= radius)
    oracle_success = any(graph.euclidean_distance(viewpoint_id, episode.goal_id) <= radius for viewpoint_id in trajectory)

    spl = 0.0
    if success:
        shortest = geodesic_distance(graph, episode.start_id, episode.goal_id)
        travelled = graph.path_length(trajectory)
        denominator = max(travelled, shortest)
        spl = shortest / denominator if denominator > 0 else 1.0
    return MetricSet(ne=ne, success=success, oracle_success=oracle_success, spl=spl)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def load_environment(path: str | Path, *, check_geometry: bool = True) -> EnvironmentGraph:
    document = _read_json(path)
    if not isinstance(document, dict):
        raise EnvironmentFormatError('Expected a JSON object.', source=path)
    version = document.get('version')
    if version != ENVIRONMENT_FORMAT_VERSION:
        raise EnvironmentFormatError(
            f'Unsupported environment version {version!r} (expected {ENVIRONMENT_FORMAT_VERSION}).',
            source=path,
            location='version',
        )
    viewpoints = [
        _parse_viewpoint(raw, source=path, location=f'viewpoints[{index}]')
        for index, raw in enumerate(_require_list(document, 'viewpoints', source=path))
    ]
    edges = [
        _parse_edge(raw, source=path, location=f'edges[{index}]')
        for index, raw in enumerate(_require_list(document, 'edges', source=path))
    ]
    try:
        graph = EnvironmentGraph.from_parts(viewpoints, edges, check_geometry=check_geometry)
    except NavigationGraphError as exc:
        raise EnvironmentFormatError(str(exc), source=path) from exc
    logger.info('Loaded environment %s: %d viewpoints, %d edges', path, len(graph.viewpoints), graph.graph.number_of_edges())
    return graph


def load_episodes(path: str | Path, graph: EnvironmentGraph) -> List[Episode]:
    document = _read_json(path)
    if not isinstance(document, dict):
        raise EnvironmentFormatError('Expected a JSON object.', source=path)
    version = document.get('version', ENVIRONMENT_FORMAT_VERSION)
    if version != ENVIRONMENT_FORMAT_VERSION:
        raise EnvironmentFormatError(f'Unsupported episodes version {version!r}.', source=path, location='version')
    episodes: List[Episode] = []
    seen: set[str] = set()
    for index, raw in enumerate(_require_list(document, 'episodes', source=path)):
        location = f'episodes[{index}]'
        if not isinstance(raw, dict):
            raise EnvironmentFormatError('Expected an object.', source=path, location=location)
        try:
            episode = Episode(
                id=str(raw['id']),
                instruction=str(raw['instruction']),
                start_id=str(raw['start_id']),
                goal_id=str(raw['goal_id']),
                reference_path=tuple(str(item) for item in raw['reference_path']),
            )
        except KeyError as exc:
            raise EnvironmentFormatError(f'Missing field {exc}.', source=path, location=location) from exc
        if episode.id in seen:
            raise EnvironmentFormatError(f'Duplicate episode id "{episode.id}".', source=path, location=location)
        seen.add(episode.id)
        try:
            validate_episode(graph, episode)
        except NavigationGraphError as exc:
            raise EnvironmentFormatError(str(exc), source=path, location=location) from exc
        episodes.append(episode)
    return episodes


def validate_episode(graph: EnvironmentGraph, episode: Episode) -> None:
    graph.viewpoint(episode.start_id)
    graph.viewpoint(episode.goal_id)
    path = episode.reference_path
    if not path or path[0] != episode.start_id or path[-1] != episode.goal_id:
        raise NavigationGraphError(f'Episode {episode.id}: reference path must run from start to goal.')
    validate_trajectory(graph, path)
    if not graph.same_component(episode.start_id, episode.goal_id):
        raise NavigationGraphError(f'Episode {episode.id}: start and goal are not connected.')


def episodes_from_r2r(records: Iterable[Dict[str, Any]]) -> List[Episode]:
    """Convert R2R-style records (one path, several instructions) to episodes."""
    episodes: List[Episode] = []
    for record in records:
        path = tuple(str(item) for item in record.get('path') or [])
        if len(path) < 1:
            logger.debug('Skipping R2R record without path: %s', record.get('path_id'))
            continue
        for number, instruction in enumerate(record.get('instructions') or [], start=1):
            episodes.append(
                Episode(
                    id=f"{record.get('path_id')}_{number}",
                    instruction=str(instruction),
                    start_id=path[0],
                    goal_id=path[-1],
                    reference_path=path,
                )
            )
    return episodes


def _read_json(path: str | Path) -> Any:
    try:
        with open(path, encoding='utf-8') as handle:
            return json.load(handle)
    except FileNotFoundError as exc:
        raise EnvironmentFormatError('File not found.', source=path) from exc
    except json.JSONDecodeError as exc:
        raise EnvironmentFormatError(exc.msg, source=path, location=f'line {exc.lineno} column {exc.colno}') from exc


def _require_list(document: Dict[str, Any], key: str, *, source: str | Path) -> List[Any]:
    value = document.get(key)
    if not isinstance(value, list):
        raise EnvironmentFormatError(f'"{key}" must be a list.', source=source, location=key)
    return value


def _parse_viewpoint(raw: Any, *, source: str | Path, location: str) -> Viewpoint:
    if not isinstance(raw, dict):
        raise EnvironmentFormatError('Expected an object.', source=source, location=location)
    try:
        position = tuple(float(value) for value in raw['position'])
        return Viewpoint(
            id=str(raw['id']),
            position=position,  # type: ignore[arg-type]
            landmarks=tuple(str(token) for token in raw.get('landmarks') or []),
            image_ref=str(raw.get('image_ref') or ''),
        )
    except KeyError as exc:
        raise EnvironmentFormatError(f'Missing field {exc}.', source=source, location=location) from exc
    except (TypeError, ValueError) as exc:
        raise EnvironmentFormatError(f'Invalid position: {exc}.', source=source, location=f'{location}.position') from exc


def _parse_edge(raw: Any, *, source: str | Path, location: str) -> Tuple[str, str, float]:
    if not isinstance(raw, dict):
        raise EnvironmentFormatError('Expected an object.', source=source, location=location)
    try:
        return str(raw['source']), str(raw['target']), float(raw['length'])
    except KeyError as exc:
        raise EnvironmentFormatError(f'Missing field {exc}.', source=source, location=location) from exc
    except (TypeError, ValueError) as exc:
        raise EnvironmentFormatError(f'Invalid length: {exc}.', source=source, location=f'{location}.length') from exc


def dump_environment(graph: EnvironmentGraph) -> Dict[str, Any]:
    """Serialize a graph back to the versioned environment document."""
    return {
        'version': ENVIRONMENT_FORMAT_VERSION,
        'viewpoints': [
            {
                'id': viewpoint.id,
                'position': list(viewpoint.position),
                'landmarks': list(viewpoint.landmarks),
                'image_ref': viewpoint.image_ref,
            }
            for viewpoint in graph.viewpoints.values()
        ],
        'edges': [
            {'source': a, 'target': b, 'length': data['length']}
            for a, b, data in graph.graph.edges(data=True)
        ],
    }
