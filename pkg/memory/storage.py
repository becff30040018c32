"""Versioned JSON persistence for the experience memory."""
from __future__ import annotations

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List

import numpy as np

from embeddings.services import EmbeddingError
from memory.services import (
    Experience,
    ExperienceMemory,
    FailureExperience,
    MemoryStoreError,
    MemoryUnit,
    SceneDescription,
    SuccessExperience,
    VectorIndex,
)

logger = logging.getLogger(__name__)

MEMORY_FORMAT_VERSION = 1


class MemoryFileError(MemoryStoreError):
    def __init__(self, message: str, *, path: str | Path | None = None, location: str | None = None) -> None:
        parts = [str(path)] if path else []
        if location:
            parts.append(location)
        prefix = f"{': '.join(parts)}: " if parts else ''
        super().__init__(f'{prefix}{message}')
        self.path = path
        self.location = location


class MemoryVersionError(MemoryFileError):
    """Raised when a memory file declares an unsupported format version."""


def _experience_to_dict(experience: Experience) -> Dict[str, Any]:
    if isinstance(experience, SuccessExperience):
        return {
            'kind': experience.kind,
            'instruction': experience.instruction,
            'trajectory': list(experience.trajectory),
            'path_length': experience.path_length,
            'episode_id': experience.episode_id,
            'instr_embedding': list(experience.instr_embedding),
        }
    if isinstance(experience, FailureExperience):
        return {
            'kind': experience.kind,
            'instruction': experience.instruction,
            'decision_viewpoint': experience.decision_viewpoint,
            'chosen_viewpoint': experience.chosen_viewpoint,
            'rationale': experience.rationale,
            'failure_type': experience.failure_type,
            'image_ref': experience.image_ref,
            'episode_id': experience.episode_id,
            'instr_embedding': list(experience.instr_embedding),
            'rationale_embedding': list(experience.rationale_embedding),
        }
    return {'kind': experience.kind, 'viewpoint_id': experience.viewpoint_id, 'text': experience.text}


def memory_to_document(memory: ExperienceMemory) -> Dict[str, Any]:
    indexed = set(memory.index.ids)
    units: List[Dict[str, Any]] = []
    for unit in sorted(memory.units.values(), key=lambda item: item.index_id):
        embedding = memory.index.vector(unit.index_id).tolist() if unit.index_id in indexed else None
        units.append(
            {
                'viewpoint_id': unit.viewpoint_id,
                'index_id': unit.index_id,
                'image_ref': unit.image_ref,
                'landmarks': list(unit.landmarks),
                'embedding': embedding,
                'experiences': [_experience_to_dict(experience) for experience in unit.experiences],
            }
        )
    return {'version': MEMORY_FORMAT_VERSION, 'dimension': memory.dimension, 'units': units}


def save_memory(memory: ExperienceMemory, path: str | Path) -> None:
    """Write atomically so an interrupted run never leaves a truncated file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(memory_to_document(memory), ensure_ascii=False, indent=2) + '\n'
    descriptor, temporary = tempfile.mkstemp(prefix=f'.{path.name}.', dir=path.parent)
    try:
        with os.fdopen(descriptor, 'w', encoding='utf-8') as handle:
            handle.write(payload)
        os.replace(temporary, path)
    except BaseException:
        if os.path.exists(temporary):
            os.unlink(temporary)
        raise
    logger.info('Saved memory to %s (%d units, %d experiences)', path, len(memory.units), memory.experience_count())


def _require(raw: Dict[str, Any], key: str, location: str, path: str | Path | None) -> Any:
    if key not in raw:
        raise MemoryFileError(f'Missing field "{key}".', path=path, location=location)
    return raw[key]


def _vector(raw: Any, dimension: int, location: str, path: str | Path | None) -> tuple:
    if not isinstance(raw, list) or len(raw) != dimension:
        raise MemoryFileError(f'Expected a vector of {dimension} numbers.', path=path, location=location)
    try:
        return tuple(float(value) for value in raw)
    except (TypeError, ValueError) as exc:
        raise MemoryFileError(f'Invalid vector value: {exc}.', path=path, location=location) from exc


def _experience_from_dict(raw: Any, dimension: int, location: str, path: str | Path | None) -> Experience:
    if not isinstance(raw, dict):
        raise MemoryFileError('Expected an object.', path=path, location=location)
    kind = _require(raw, 'kind', location, path)
    try:
        if kind == SuccessExperience.kind:
            return SuccessExperience(
                instruction=str(_require(raw, 'instruction', location, path)),
                trajectory=tuple(str(item) for item in _require(raw, 'trajectory', location, path)),
                path_length=float(_require(raw, 'path_length', location, path)),
                episode_id=str(_require(raw, 'episode_id', location, path)),
                instr_embedding=_vector(_require(raw, 'instr_embedding', location, path), dimension, f'{location}.instr_embedding', path),
            )
        if kind == FailureExperience.kind:
            rationale_embedding = raw.get('rationale_embedding') or []
            return FailureExperience(
                instruction=str(_require(raw, 'instruction', location, path)),
                decision_viewpoint=str(_require(raw, 'decision_viewpoint', location, path)),
                rationale=str(_require(raw, 'rationale', location, path)),
                failure_type=str(_require(raw, 'failure_type', location, path)),
                image_ref=str(raw.get('image_ref') or ''),
                episode_id=str(_require(raw, 'episode_id', location, path)),
                instr_embedding=_vector(_require(raw, 'instr_embedding', location, path), dimension, f'{location}.instr_embedding', path),
                chosen_viewpoint=str(raw.get('chosen_viewpoint') or ''),
                rationale_embedding=(
                    _vector(rationale_embedding, dimension, f'{location}.rationale_embedding', path) if rationale_embedding else ()
                ),
            )
        if kind == SceneDescription.kind:
            return SceneDescription(
                viewpoint_id=str(_require(raw, 'viewpoint_id', location, path)),
                text=str(_require(raw, 'text', location, path)),
            )
    except MemoryFileError:
        raise
    except (MemoryStoreError, TypeError, ValueError) as exc:
        raise MemoryFileError(str(exc), path=path, location=location) from exc
    raise MemoryFileError(f'Unknown experience kind "{kind}".', path=path, location=f'{location}.kind')


def memory_from_document(document: Any, *, path: str | Path | None = None) -> ExperienceMemory:
    if not isinstance(document, dict):
        raise MemoryFileError('Expected a JSON object.', path=path)
    version = document.get('version')
    if version != MEMORY_FORMAT_VERSION:
        raise MemoryVersionError(
            f'Unsupported memory version {version!r} (expected {MEMORY_FORMAT_VERSION}).', path=path, location='version'
        )
    dimension = document.get('dimension')
    if not isinstance(dimension, int) or dimension < 2:
        raise MemoryFileError('"dimension" must be an integer of at least 2.', path=path, location='dimension')
    raw_units = document.get('units')
    if not isinstance(raw_units, list):
        raise MemoryFileError('"units" must be a list.', path=path, location='units')

    units: Dict[str, MemoryUnit] = {}
    index = VectorIndex(dimension)
    for position, raw in enumerate(raw_units):
        location = f'units[{position}]'
        if not isinstance(raw, dict):
            raise MemoryFileError('Expected an object.', path=path, location=location)
        viewpoint_id = str(_require(raw, 'viewpoint_id', location, path))
        index_id = _require(raw, 'index_id', location, path)
        if not isinstance(index_id, int):
            raise MemoryFileError('"index_id" must be an integer.', path=path, location=f'{location}.index_id')
        if viewpoint_id in units:
            raise MemoryFileError(f'Duplicate unit "{viewpoint_id}".', path=path, location=location)
        experiences = [
            _experience_from_dict(item, dimension, f'{location}.experiences[{number}]', path)
            for number, item in enumerate(raw.get('experiences') or [])
        ]
        units[viewpoint_id] = MemoryUnit(
            viewpoint_id=viewpoint_id,
            image_ref=str(raw.get('image_ref') or ''),
            landmarks=tuple(str(token) for token in raw.get('landmarks') or []),
            index_id=index_id,
            experiences=experiences,
        )
        embedding = raw.get('embedding')
        if embedding is not None:
            try:
                index.add(index_id, np.asarray(_vector(embedding, dimension, f'{location}.embedding', path)))
            except MemoryFileError:
                raise
            except (MemoryStoreError, EmbeddingError) as exc:
                raise MemoryFileError(str(exc), path=path, location=f'{location}.embedding') from exc
    try:
        return ExperienceMemory(dimension=dimension, units=units, index=index)
    except MemoryStoreError as exc:
        raise MemoryFileError(str(exc), path=path) from exc


def load_memory(path: str | Path) -> ExperienceMemory:
    try:
        with open(path, encoding='utf-8') as handle:
            document = json.load(handle)
    except FileNotFoundError as exc:
        raise MemoryFileError('File not found.', path=path) from exc
    except json.JSONDecodeError as exc:
        raise MemoryFileError(exc.msg, path=path, location=f'line {exc.lineno} column {exc.colno}') from exc
    memory = memory_from_document(document, path=path)
    logger.info('Loaded memory from %s (%d units)', path, len(memory.units))
    return memory
