import json
import math
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase, override_settings

from embeddings.services import (
    DimensionMismatchError,
    Embedder,
    EmbeddingError,
    EmbeddingServiceError,
    HashEmbedder,
    MissingEmbeddingConfiguration,
    RemoteEmbedder,
    VocabularyEmbedder,
    ZeroVectorError,
    attention_weights,
    build_embedder,
    cosine_sim,
    fuse_observations,
    hash_embed,
    hybrid_embed,
    identity_weights,
    is_zero,
    load_fusion_weights,
    mean_pool,
    tokenize,
)


class FixedEmbedder(Embedder):
    """Returns preset vectors for text and image refs."""

    def __init__(self, text_vector, image_vector):
        self.dimension = len(text_vector)
        self.text_vector = np.asarray(text_vector, dtype=np.float64)
        self.image_vector = np.asarray(image_vector, dtype=np.float64)

    def embed_text(self, text):
        return self.text_vector.copy()

    def embed_image_ref(self, image_ref):
        return self.image_vector.copy()


def reference_fusion(u, views, weights):
    """Plain-Python softmax attention used as an independent oracle."""
    dimension = len(u)
    projected = [sum(weights[row][column] * u[row] for row in range(dimension)) for column in range(dimension)]
    logits = [sum(view[index] * projected[index] for index in range(dimension)) for view in views]
    peak = max(logits)
    exponentials = [math.exp(logit - peak) for logit in logits]
    total = sum(exponentials)
    alphas = [value / total for value in exponentials]
    raw = [sum(alphas[k] * views[k][index] for k in range(len(views))) for index in range(dimension)]
    norm = math.sqrt(sum(value * value for value in raw))
    return alphas, [value / norm for value in raw]


class HashEmbedTests(SimpleTestCase):
    def test_empty_input_is_zero_sentinel(self):
        self.assertTrue(is_zero(hash_embed([], 16)))

    def test_deterministic_and_order_free(self):
        first = hash_embed(['sofa', 'lamp'], 32)
        np.testing.assert_array_equal(first, hash_embed(['sofa', 'lamp'], 32))
        np.testing.assert_array_equal(first, hash_embed(['lamp', 'sofa'], 32))

    def test_output_is_unit_norm(self):
        vector = hash_embed(['sofa', 'lamp', 'sofa'], 32)
        self.assertAlmostEqual(float(np.linalg.norm(vector)), 1.0, delta=1e-6)

    def test_key_changes_the_embedding(self):
        vectors = [hash_embed(['a', 'b', 'c', 'd', 'e'], 512, key=key) for key in ('one', 'two')]
        self.assertFalse(np.array_equal(*vectors))

    def test_dimension_below_two_is_rejected(self):
        with self.assertRaises(EmbeddingError):
            hash_embed(['sofa'], 1)

    def test_tokenize_lowercases_and_strips_punctuation(self):
        self.assertEqual(tokenize('Walk past the Couch, then stop.'), ['walk', 'past', 'the', 'couch', 'then', 'stop'])

    @override_settings(EMBEDDING_DIMENSION=24, EMBEDDING_HASH_KEY='settings-key')
    def test_hash_embedder_reads_settings(self):
        embedder = HashEmbedder()
        self.assertEqual(embedder.dimension, 24)
        np.testing.assert_array_equal(embedder.embed_text('sofa'), hash_embed(['sofa'], 24, key='settings-key'))
        self.assertTrue(is_zero(embedder.embed_image_ref('')))


class VocabularyEmbedderTests(SimpleTestCase):
    def test_known_tokens_never_collide(self):
        embedder = VocabularyEmbedder.from_texts(['couch doorway', 'fireplace hallway'], dimension=8)
        vectors = [embedder.embed_text(token) for token in ('couch', 'doorway', 'fireplace', 'hallway')]
        for index, first in enumerate(vectors):
            for second in vectors[index + 1:]:
                self.assertEqual(float(first @ second), 0.0)

    def test_bag_of_words_cosine_is_exact(self):
        embedder = VocabularyEmbedder.from_texts(['couch doorway fireplace'], dimension=8)
        similarity = cosine_sim(embedder.embed_text('couch doorway'), embedder.embed_text('couch doorway fireplace'))
        self.assertAlmostEqual(similarity, 2 / math.sqrt(6), delta=1e-12)

    def test_unknown_tokens_fall_back_to_spare_coordinates(self):
        embedder = VocabularyEmbedder(['couch'], dimension=8)
        vector = embedder.embed_text('zebra')
        self.assertEqual(vector[0], 0.0)
        self.assertAlmostEqual(float(np.linalg.norm(vector)), 1.0)

    def test_vocabulary_must_fit(self):
        with self.assertRaises(EmbeddingError):
            VocabularyEmbedder(['a', 'b', 'c', 'd'], dimension=4)

    def test_build_embedder_selects_kind(self):
        self.assertIsInstance(build_embedder('vocab', texts=['sofa'], dimension=8), VocabularyEmbedder)
        self.assertIsInstance(build_embedder('hash', dimension=8), HashEmbedder)
        with self.assertRaises(EmbeddingError):
            build_embedder('clip')


class HybridEmbedTests(SimpleTestCase):
    def test_landmarks_only_equals_text_embedding(self):
        embedder = HashEmbedder(32, key='tests')
        np.testing.assert_array_equal(hybrid_embed('', ['couch'], embedder), embedder.embed_text('couch'))

    def test_image_only_equals_image_embedding(self):
        embedder = HashEmbedder(32, key='tests')
        np.testing.assert_array_equal(hybrid_embed('pano-1', [], embedder), embedder.embed_image_ref('pano-1'))

    def test_both_sides_normalized_mean(self):
        embedder = FixedEmbedder([1.0, 0.0], [0.0, 1.0])
        np.testing.assert_allclose(hybrid_embed('pano', ['couch'], embedder), [0.70710678, 0.70710678], atol=1e-6)

    def test_both_empty_raises(self):
        with self.assertRaises(EmbeddingError):
            hybrid_embed('', [], HashEmbedder(8))


class FusionTests(SimpleTestCase):
    def test_matches_reference_softmax_on_random_instances(self):
        rng = np.random.default_rng(20240611)
        for _ in range(200):
            dimension = int(rng.integers(2, 9))
            count = int(rng.integers(1, 6))
            u = rng.normal(size=dimension)
            views = [rng.normal(size=dimension) for _ in range(count)]
            weights = rng.normal(size=(dimension, dimension))
            expected_alpha, expected = reference_fusion(u.tolist(), [view.tolist() for view in views], weights.tolist())
            alpha = attention_weights(u, views, weights)
            self.assertAlmostEqual(float(alpha.sum()), 1.0, delta=1e-9)
            np.testing.assert_allclose(alpha, expected_alpha, rtol=0, atol=1e-9)
            np.testing.assert_allclose(fuse_observations(u, views, weights), expected, rtol=0, atol=1e-9)

    def test_single_view_is_returned_exactly(self):
        view = np.array([0.6, 0.8, 0.0])
        np.testing.assert_allclose(fuse_observations(np.array([1.0, 0.0, 0.0]), [view]), view, atol=1e-12)

    def test_equal_logits_give_uniform_weights(self):
        u = np.array([0.0, 0.0, 1.0])
        views = [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([-1.0, 0.0, 0.0])]
        np.testing.assert_array_equal(attention_weights(u, views), np.full(3, 1.0 / 3.0))

    def test_worked_two_dimensional_example(self):
        u = np.array([1.0, 0.0])
        views = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        alpha = np.array([math.e, 1.0]) / (1.0 + math.e)
        np.testing.assert_allclose(attention_weights(u, views, identity_weights(2)), alpha, atol=1e-12)
        np.testing.assert_allclose(fuse_observations(u, views), alpha / np.linalg.norm(alpha), atol=1e-12)
        np.testing.assert_allclose(fuse_observations(u, views), [0.938508, 0.345258], atol=1e-6)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        u = rng.normal(size=6)
        views = [rng.normal(size=6) for _ in range(4)]
        np.testing.assert_allclose(fuse_observations(u, views), fuse_observations(u, views[::-1]), atol=1e-9)

    def test_scaling_instruction_keeps_argmax(self):
        rng = np.random.default_rng(11)
        u = rng.normal(size=5)
        views = [rng.normal(size=5) for _ in range(4)]
        base = int(np.argmax(attention_weights(u, views)))
        for scale in (0.1, 2.0, 10.0):
            self.assertEqual(int(np.argmax(attention_weights(u * scale, views))), base)

    def test_attention_beats_mean_pooling_on_aligned_view(self):
        u = np.array([1.0, 0.0, 0.0, 0.0])
        aligned = np.array([1.0, 0.0, 0.0, 0.0])
        distractors = [np.array([0.0, 1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0, 0.0]), np.array([0.0, 0.0, 0.0, 1.0])]
        views = [aligned, *distractors]
        self.assertGreater(cosine_sim(fuse_observations(u, views), aligned), cosine_sim(mean_pool(views), aligned))

    def test_dimension_mismatch_raises(self):
        with self.assertRaises(DimensionMismatchError):
            fuse_observations(np.ones(3), [np.ones(4)])
        with self.assertRaises(DimensionMismatchError):
            attention_weights(np.ones(3), [np.ones(3)], np.eye(4))

    def test_no_views_raises(self):
        with self.assertRaises(EmbeddingError):
            fuse_observations(np.ones(3), [])


class CosineTests(SimpleTestCase):
    def test_known_values(self):
        a = np.array([1.0, 0.0])
        self.assertEqual(cosine_sim(a, a), 1.0)
        self.assertEqual(cosine_sim(a, np.array([0.0, 1.0])), 0.0)
        self.assertAlmostEqual(cosine_sim(a, np.array([1.0, 1.0]) / math.sqrt(2)), 0.70711, delta=1e-5)
        self.assertEqual(cosine_sim(a, -a), -1.0)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=8), rng.normal(size=8)
        self.assertEqual(cosine_sim(a, b), cosine_sim(b, a))

    def test_zero_sentinel_raises(self):
        with self.assertRaises(ZeroVectorError):
            cosine_sim(np.zeros(3), np.ones(3))


class FusionWeightsFileTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.directory = Path(self.tmp.name)

    def test_loads_json_and_npy(self):
        matrix = np.arange(9, dtype=np.float64).reshape(3, 3)
        json_path = self.directory / 'weights.json'
        json_path.write_text(json.dumps(matrix.tolist()), encoding='utf-8')
        npy_path = self.directory / 'weights.npy'
        np.save(npy_path, matrix)
        np.testing.assert_array_equal(load_fusion_weights(json_path, 3), matrix)
        np.testing.assert_array_equal(load_fusion_weights(npy_path, 3), matrix)

    def test_wrong_shape_is_rejected(self):
        path = self.directory / 'weights.json'
        path.write_text(json.dumps(np.eye(2).tolist()), encoding='utf-8')
        with self.assertRaises(DimensionMismatchError):
            load_fusion_weights(path, 3)

    def test_non_finite_entries_are_rejected(self):
        path = self.directory / 'weights.npy'
        matrix = np.eye(2)
        matrix[0, 1] = np.inf
        np.save(path, matrix)
        with self.assertRaises(EmbeddingError):
            load_fusion_weights(path, 2)


def embedding_response(*vectors, status_code=200):
    response = mock.Mock()
    response.status_code = status_code
    response.json.return_value = {'data': [{'embedding': list(vector)} for vector in vectors]}
    response.text = ''
    return response


@override_settings(EMBEDDING_API_BASE='https://embeddings.test/v1', EMBEDDING_API_KEY='secret', EMBEDDING_MODEL='clip')
class RemoteEmbedderTests(SimpleTestCase):
    def test_posts_input_and_normalizes_result(self):
        embedder = RemoteEmbedder(dimension=2)
        with mock.patch.object(embedder.session, 'post', return_value=embedding_response([3.0, 4.0])) as post:
            vector = embedder.embed_text('couch')
        np.testing.assert_allclose(vector, [0.6, 0.8])
        args, kwargs = post.call_args
        self.assertEqual(args[0], 'https://embeddings.test/v1/embeddings')
        self.assertEqual(kwargs['json'], {'input': ['couch'], 'model': 'clip'})
        self.assertEqual(kwargs['headers']['Authorization'], 'Bearer secret')

    def test_results_are_cached(self):
        embedder = RemoteEmbedder(dimension=2)
        with mock.patch.object(embedder.session, 'post', return_value=embedding_response([1.0, 0.0])) as post:
            embedder.embed_text('couch')
            embedder.embed_text('couch')
        self.assertEqual(post.call_count, 1)

    def test_http_error_carries_status(self):
        embedder = RemoteEmbedder(dimension=2)
        response = embedding_response(status_code=503)
        response.json.return_value = {'error': 'busy'}
        with mock.patch.object(embedder.session, 'post', return_value=response):
            with self.assertRaises(EmbeddingServiceError) as caught:
                embedder.embed_text('couch')
        self.assertEqual(caught.exception.status_code, 503)
        self.assertEqual(caught.exception.response_data, {'error': 'busy'})

    def test_wrong_dimension_is_rejected(self):
        embedder = RemoteEmbedder(dimension=3)
        with mock.patch.object(embedder.session, 'post', return_value=embedding_response([1.0, 0.0])):
            with self.assertRaises(DimensionMismatchError):
                embedder.embed_text('couch')

    @override_settings(EMBEDDING_API_BASE='')
    def test_missing_endpoint(self):
        with self.assertRaises(MissingEmbeddingConfiguration):
            RemoteEmbedder(dimension=2)
