from __future__ import annotations

from django.core.management.base import BaseCommand, CommandError

from embeddings.services import EmbeddingError
from environments.services import NavigationGraphError
from memory.services import MemoryStoreError
from runs.services import EMBEDDER_KINDS, build_memory_file


class Command(BaseCommand):
    help = 'Builds the per-viewpoint experience memory for an environment and saves it as JSON.'

    def add_arguments(self, parser):
        parser.add_argument('--env', required=True, help='Environment JSON file.')
        parser.add_argument('--memory', required=True, help='Output memory file.')
        parser.add_argument('--episodes', help='Episodes file; its instructions extend the vocabulary embedder.')
        parser.add_argument('--embedder', choices=EMBEDDER_KINDS, default='hash')
        parser.add_argument('--dimension', type=int, help='Embedding dimension (defaults to EMBEDDING_DIMENSION).')
        parser.add_argument(
            '--scene-desc',
            action='store_true',
            help='Seed every unit with a fixed scene description instead of experiences.',
        )
        parser.add_argument('--no-geometry-check', action='store_true', help='Skip the edge length check.')

    def handle(self, *args, **options):
        try:
            memory = build_memory_file(
                options['env'],
                options['memory'],
                episodes=options.get('episodes'),
                embedder=options['embedder'],
                scene_description=options['scene_desc'],
                dimension=options.get('dimension'),
                check_geometry=not options['no_geometry_check'],
            )
        except (NavigationGraphError, EmbeddingError, MemoryStoreError, OSError) as exc:
            raise CommandError(str(exc))
        self.stdout.write(
            self.style.SUCCESS(
                f'Memory with {len(memory.units)} units ({len(memory.index)} indexed) written to {options["memory"]}.'
            )
        )
