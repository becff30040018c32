"""Hand-built environments shared by the test suites."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, List, Sequence

from embeddings.services import HashEmbedder, VocabularyEmbedder
from environments.services import EnvironmentGraph, Episode, Viewpoint, dump_environment

FORK_INSTRUCTION = 'Walk past the couch, go through a doorway and stop by fireplace'
FORK_EDGE = math.sqrt(32.0)


def graph_from(viewpoints: Sequence[Viewpoint], edges: Iterable[tuple], *, check_geometry: bool = True) -> EnvironmentGraph:
    return EnvironmentGraph.from_parts(viewpoints, edges, check_geometry=check_geometry)


def corridor_graph() -> EnvironmentGraph:
    """A-B-C-D on a line (1 m apart) with side rooms X off B and Y off C."""
    viewpoints = [
        Viewpoint('A', (0.0, 0.0, 0.0), ('door',), 'img-a'),
        Viewpoint('B', (1.0, 0.0, 0.0), ('hallway',), 'img-b'),
        Viewpoint('C', (2.0, 0.0, 0.0), ('table',), 'img-c'),
        Viewpoint('D', (3.0, 0.0, 0.0), ('sofa',), 'img-d'),
        Viewpoint('X', (1.0, 1.0, 0.0), ('closet',), 'img-x'),
        Viewpoint('Y', (2.0, 1.0, 0.0), ('plant',), 'img-y'),
    ]
    edges = [('A', 'B', 1.0), ('B', 'C', 1.0), ('C', 'D', 1.0), ('B', 'X', 1.0), ('C', 'Y', 1.0)]
    return graph_from(viewpoints, edges)


def corridor_episode(start: str = 'A', episode_id: str = 'corridor') -> Episode:
    order = ['A', 'B', 'C', 'D']
    reference = tuple(order[order.index(start):]) if start in order else (start, 'B', 'C', 'D')
    return Episode(episode_id, 'Walk down the hallway past the table to the sofa', start, 'D', reference)


def metric_graph() -> EnvironmentGraph:
    """Five nodes: the direct route A-B-C and a detour A-D-E-B of twice the length."""
    viewpoints = [
        Viewpoint('A', (0.0, 0.0, 0.0), ('entrance',)),
        Viewpoint('B', (3.0, 0.0, 0.0), ('corridor',)),
        Viewpoint('C', (6.0, 0.0, 0.0), ('kitchen',)),
        Viewpoint('D', (0.0, 3.0, 0.0), ('stairs',)),
        Viewpoint('E', (3.0, 3.0, 0.0), ('landing',)),
    ]
    edges = [('A', 'B', 3.0), ('B', 'C', 3.0), ('A', 'D', 3.0), ('D', 'E', 3.0), ('E', 'B', 3.0)]
    return graph_from(viewpoints, edges)


def metric_episode() -> Episode:
    return Episode('metric', 'Go to the kitchen', 'A', 'C', ('A', 'B', 'C'))


def fork_graph() -> EnvironmentGraph:
    """Two look-alike branches leave p2; only the p6 branch reaches the fireplace."""
    viewpoints = [
        Viewpoint('p1', (0.0, 0.0, 0.0), ('hallway',)),
        Viewpoint('p2', (4.0, 0.0, 0.0), ('hallway', 'couch', 'doorway')),
        Viewpoint('p5', (8.0, 4.0, 0.0), ('couch', 'doorway')),
        Viewpoint('p6', (8.0, -4.0, 0.0), ('couch', 'doorway')),
        Viewpoint('p7', (12.0, -8.0, 0.0), ('couch', 'doorway', 'fireplace')),
    ]
    edges = [('p1', 'p2', 4.0), ('p2', 'p5', FORK_EDGE), ('p2', 'p6', FORK_EDGE), ('p6', 'p7', FORK_EDGE)]
    return graph_from(viewpoints, edges)


def fork_episode(episode_id: str = 'fork') -> Episode:
    return Episode(episode_id, FORK_INSTRUCTION, 'p1', 'p7', ('p1', 'p2', 'p6', 'p7'))


def fork_embedder(graph: EnvironmentGraph, episodes: Sequence[Episode] = (), dimension: int = 64) -> VocabularyEmbedder:
    texts = [' '.join(viewpoint.landmarks) for viewpoint in graph.viewpoints.values()]
    texts.extend(episode.instruction for episode in episodes)
    return VocabularyEmbedder.from_texts(texts, dimension=dimension)


def hash_embedder(dimension: int = 64) -> HashEmbedder:
    return HashEmbedder(dimension, key='tests')


def episodes_document(episodes: Iterable[Episode]) -> dict:
    return {
        'version': 1,
        'episodes': [
            {
                'id': episode.id,
                'instruction': episode.instruction,
                'start_id': episode.start_id,
                'goal_id': episode.goal_id,
                'reference_path': list(episode.reference_path),
            }
            for episode in episodes
        ],
    }


def write_json(directory: str | Path, name: str, document: object) -> Path:
    path = Path(directory) / name
    path.write_text(json.dumps(document, indent=2), encoding='utf-8')
    return path


def write_scenario(directory: str | Path, graph: EnvironmentGraph, episodes: List[Episode]) -> tuple[Path, Path]:
    return (
        write_json(directory, 'environment.json', dump_environment(graph)),
        write_json(directory, 'episodes.json', episodes_document(episodes)),
    )
