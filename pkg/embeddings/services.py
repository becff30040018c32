from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import requests
from django.conf import settings

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-12
TOKEN_PATTERN = re.compile(r"[a-z0-9']+")
IMAGE_TOKEN_PREFIX = 'img:'


class EmbeddingError(Exception):
    """Base error for embedding operations."""


class DimensionMismatchError(EmbeddingError):
    """Raised when vectors or matrices disagree on the embedding dimension."""


class ZeroVectorError(EmbeddingError):
    """Raised when a similarity is requested for the zero-vector sentinel."""


class MissingEmbeddingConfiguration(RuntimeError):
    """Raised when the remote embedding service is not configured."""


class EmbeddingServiceError(EmbeddingError):
    def __init__(self, message: str, *, status_code: int, response_data: Any | None = None) -> None:
        super().__init__(message)
        self.status_code = status_code
        self.response_data = response_data


def tokenize(text: str) -> List[str]:
    return TOKEN_PATTERN.findall((text or '').lower())


def zero_vector(dimension: int) -> np.ndarray:
    return np.zeros(dimension, dtype=np.float64)


def is_zero(vector: np.ndarray) -> bool:
    return not np.any(vector)


def normalize(vector: np.ndarray) -> np.ndarray:
    """L2-normalize; vectors with a numerically zero norm become the zero sentinel."""
    vector = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm <= NORM_TOLERANCE:
        return zero_vector(vector.shape[0])
    return vector / norm


def _token_slot(token: str, dimension: int, key: bytes) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode('utf-8'), digest_size=8, key=key).digest()
    value = int.from_bytes(digest, 'big', signed=False)
    sign = -1.0 if value >> 63 else 1.0
    return value % dimension, sign


def hash_embed(tokens: Iterable[str], dimension: int, *, key: str | bytes = 'recallnav') -> np.ndarray:
    """Signed feature hashing of a token multiset, L2-normalized."""
    if dimension < 2:
        raise EmbeddingError('Embedding dimension must be at least 2.')
    key_bytes = key.encode('utf-8') if isinstance(key, str) else key
    vector = zero_vector(dimension)
    for token in tokens:
        index, sign = _token_slot(token, dimension, key_bytes)
        vector[index] += sign
    return normalize(vector)


class Embedder(ABC):
    """Maps landmark text and opaque image references to vectors of ``dimension``."""

    dimension: int

    @abstractmethod
    def embed_text(self, text: str) -> np.ndarray:
        raise NotImplementedError

    @abstractmethod
    def embed_image_ref(self, image_ref: str) -> np.ndarray:
        raise NotImplementedError


class HashEmbedder(Embedder):
    """Deterministic stand-in for an image/text encoder."""

    def __init__(self, dimension: Optional[int] = None, *, key: Optional[str] = None) -> None:
        self.dimension = dimension or getattr(settings, 'EMBEDDING_DIMENSION', 512)
        self.key = key or getattr(settings, 'EMBEDDING_HASH_KEY', 'recallnav')

    def embed_text(self, text: str) -> np.ndarray:
        return hash_embed(tokenize(text), self.dimension, key=self.key)

    def embed_image_ref(self, image_ref: str) -> np.ndarray:
        if not image_ref:
            return zero_vector(self.dimension)
        return hash_embed([f'{IMAGE_TOKEN_PREFIX}{image_ref}'], self.dimension, key=self.key)


class VocabularyEmbedder(HashEmbedder):
    """Bag of words over a closed vocabulary: one coordinate per known token.

    Known tokens (and known image references) never collide, which keeps hand-built
    scenarios exact. Unknown tokens fall back to hashing into the remaining
    coordinates.
    """

    def __init__(self, vocabulary: Iterable[str], dimension: Optional[int] = None, *, key: Optional[str] = None) -> None:
        super().__init__(dimension, key=key)
        self.vocabulary: Dict[str, int] = {}
        for token in vocabulary:
            if token not in self.vocabulary:
                self.vocabulary[token] = len(self.vocabulary)
        if len(self.vocabulary) >= self.dimension:
            raise EmbeddingError(
                f'Vocabulary of {len(self.vocabulary)} tokens does not fit in dimension {self.dimension}.'
            )

    @classmethod
    def from_texts(cls, texts: Iterable[str], image_refs: Iterable[str] = (), **kwargs: Any) -> 'VocabularyEmbedder':
        tokens = sorted({token for text in texts for token in tokenize(text)})
        images = sorted({f'{IMAGE_TOKEN_PREFIX}{ref}' for ref in image_refs if ref})
        return cls(tokens + images, **kwargs)

    def _embed_tokens(self, tokens: Iterable[str]) -> np.ndarray:
        vector = zero_vector(self.dimension)
        spare = self.dimension - len(self.vocabulary)
        key_bytes = self.key.encode('utf-8')
        for token in tokens:
            slot = self.vocabulary.get(token)
            if slot is not None:
                vector[slot] += 1.0
                continue
            index, sign = _token_slot(token, spare, key_bytes)
            vector[len(self.vocabulary) + index] += sign
        return normalize(vector)

    def embed_text(self, text: str) -> np.ndarray:
        return self._embed_tokens(tokenize(text))

    def embed_image_ref(self, image_ref: str) -> np.ndarray:
        if not image_ref:
            return zero_vector(self.dimension)
        return self._embed_tokens([f'{IMAGE_TOKEN_PREFIX}{image_ref}'])


class RemoteEmbedder(Embedder):
    """Client for an embedding service speaking ``{"input": [...]}`` -> ``{"data": [...]}``."""

    def __init__(
        self,
        *,
        api_key: Optional[str] = None,
        base_url: Optional[str] = None,
        model: Optional[str] = None,
        dimension: Optional[int] = None,
        timeout: Optional[float] = None,
    ) -> None:
        self.api_key = api_key or getattr(settings, 'EMBEDDING_API_KEY', '')
        self.base_url = (base_url or getattr(settings, 'EMBEDDING_API_BASE', '')).rstrip('/')
        if not self.base_url:
            raise MissingEmbeddingConfiguration('Set EMBEDDING_API_BASE before using the remote embedder.')
        self.model = model or getattr(settings, 'EMBEDDING_MODEL', '')
        self.dimension = dimension or getattr(settings, 'EMBEDDING_DIMENSION', 512)
        self.timeout = timeout or getattr(settings, 'EMBEDDING_TIMEOUT_SECONDS', 30)
        self.session = requests.Session()
        self._cache: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _request(self, inputs: List[str]) -> List[List[float]]:
        headers = {'Content-Type': 'application/json', 'Accept': 'application/json'}
        if self.api_key:
            headers['Authorization'] = f'Bearer {self.api_key}'
        payload: Dict[str, Any] = {'input': inputs}
        if self.model:
            payload['model'] = self.model
        try:
            response = self.session.post(f'{self.base_url}/embeddings', json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise EmbeddingServiceError(f'Embedding service unreachable: {exc}', status_code=0) from exc
        if response.status_code >= 400:
            try:
                data = response.json()
            except ValueError:
                data = {'raw': response.text}
            raise EmbeddingServiceError(f'Embedding service error: {data}', status_code=response.status_code, response_data=data)
        try:
            return [item['embedding'] for item in response.json()['data']]
        except (ValueError, KeyError, TypeError) as exc:
            raise EmbeddingServiceError('Malformed embedding response.', status_code=response.status_code) from exc

    def _embed(self, value: str) -> np.ndarray:
        with self._lock:
            cached = self._cache.get(value)
        if cached is not None:
            return cached
        (raw,) = self._request([value])
        vector = np.asarray(raw, dtype=np.float64)
        if vector.shape != (self.dimension,):
            raise DimensionMismatchError(f'Service returned {vector.shape[0]} dimensions, expected {self.dimension}.')
        vector = normalize(vector)
        with self._lock:
            self._cache[value] = vector
        return vector

    def embed_text(self, text: str) -> np.ndarray:
        if not text.strip():
            return zero_vector(self.dimension)
        return self._embed(text)

    def embed_image_ref(self, image_ref: str) -> np.ndarray:
        if not image_ref:
            return zero_vector(self.dimension)
        return self._embed(f'{IMAGE_TOKEN_PREFIX}{image_ref}')


def hybrid_embed(image_ref: str, landmarks: Sequence[str], embedder: Embedder) -> np.ndarray:
    text = ' '.join(landmarks)
    if not image_ref and not text.strip():
        raise EmbeddingError('A hybrid embedding needs an image reference or landmarks.')
    if not image_ref:
        return embedder.embed_text(text)
    if not text.strip():
        return embedder.embed_image_ref(image_ref)
    return normalize((embedder.embed_image_ref(image_ref) + embedder.embed_text(text)) / 2.0)


def viewpoint_embedding(image_ref: str, landmarks: Sequence[str], embedder: Embedder) -> np.ndarray:
    """Hybrid embedding, or the zero sentinel for a viewpoint with nothing to embed."""
    if not image_ref and not ' '.join(landmarks).strip():
        return zero_vector(embedder.dimension)
    return hybrid_embed(image_ref, landmarks, embedder)


def identity_weights(dimension: int) -> np.ndarray:
    return np.eye(dimension, dtype=np.float64)


def load_fusion_weights(path: str | Path, dimension: int) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix == '.npy':
            matrix = np.load(path)
        else:
            with open(path, encoding='utf-8') as handle:
                matrix = np.asarray(json.load(handle), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise EmbeddingError(f'{path}: cannot read fusion weights: {exc}') from exc
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (dimension, dimension):
        raise DimensionMismatchError(f'{path}: fusion weights have shape {matrix.shape}, expected {(dimension, dimension)}.')
    if not np.all(np.isfinite(matrix)):
        raise EmbeddingError(f'{path}: fusion weights contain non-finite entries.')
    return matrix


def _stack_views(instruction: np.ndarray, views: Sequence[np.ndarray]) -> np.ndarray:
    if len(views) == 0:
        raise EmbeddingError('At least one view is required.')
    matrix = np.vstack([np.asarray(view, dtype=np.float64) for view in views])
    if matrix.shape[1] != instruction.shape[0]:
        raise DimensionMismatchError(f'Views have dimension {matrix.shape[1]}, instruction has {instruction.shape[0]}.')
    return matrix


def attention_weights(instruction: np.ndarray, views: Sequence[np.ndarray], weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Softmax over the logits ``u^T W v_k``."""
    instruction = np.asarray(instruction, dtype=np.float64)
    matrix = _stack_views(instruction, views)
    dimension = instruction.shape[0]
    if weights is None:
        projected = instruction
    else:
        if weights.shape != (dimension, dimension):
            raise DimensionMismatchError(f'Fusion weights have shape {weights.shape}, expected {(dimension, dimension)}.')
        projected = weights.T @ instruction
    logits = matrix @ projected
    logits = logits - logits.max()
    exponentials = np.exp(logits)
    return exponentials / exponentials.sum()


def fuse_observations(instruction: np.ndarray, views: Sequence[np.ndarray], weights: Optional[np.ndarray] = None) -> np.ndarray:
    alpha = attention_weights(instruction, views, weights)
    matrix = _stack_views(np.asarray(instruction, dtype=np.float64), views)
    return normalize(alpha @ matrix)


def mean_pool(views: Sequence[np.ndarray]) -> np.ndarray:
    if len(views) == 0:
        raise EmbeddingError('At least one view is required.')
    matrix = np.vstack([np.asarray(view, dtype=np.float64) for view in views])
    return normalize(matrix.mean(axis=0))


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f'Cannot compare vectors of shapes {a.shape} and {b.shape}.')
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVectorError('Cosine similarity is undefined for the zero vector.')
    return max(-1.0, min(1.0, float(a @ b) / (norm_a * norm_b)))


def similarity_or_floor(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    """Cosine similarity, or ``floor`` when either side is the zero sentinel."""
    try:
        return cosine_sim(a, b)
    except ZeroVectorError:
        return floor


def build_embedder(kind: str = 'hash', *, texts: Iterable[str] = (), image_refs: Iterable[str] = (), dimension: Optional[int] = None) -> Embedder:
    if kind == 'hash':
        return HashEmbedder(dimension)
    if kind == 'vocab':
        return VocabularyEmbedder.from_texts(texts, image_refs, dimension=dimension)
    if kind == 'remote':
        return RemoteEmbedder(dimension=dimension)
    raise EmbeddingError(f'Unknown embedder "{kind}".')
