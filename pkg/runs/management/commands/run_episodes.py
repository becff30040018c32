from __future__ import annotations

from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from navigation.domain import RuleMode
from navigation.services import FusionMode
from policies.services import BackendKind
from runs.reports import ReportFormatError
from runs.services import EMBEDDER_KINDS, RunConfig, RunConfigurationError, execute_run


def _path(value):
    return Path(value) if value else None


class Command(BaseCommand):
    help = 'Runs navigation episodes against a memory and reports NE, SR, OSR and SPL.'

    def add_arguments(self, parser):
        parser.add_argument('--env', required=True, help='Environment JSON file.')
        parser.add_argument('--episodes', required=True, help='Episodes JSON file.')
        parser.add_argument('--memory', help='Memory file (read, and rewritten in continual mode).')
        parser.add_argument('--empty-memory', action='store_true', help='Start from a freshly built memory.')
        parser.add_argument('--backend', choices=BackendKind.values, default=BackendKind.ORACLE)
        parser.add_argument('--rule-mode', choices=RuleMode.values, default=RuleMode.CONSTRAINT)
        parser.add_argument('--tau', type=float, help='Retrieval similarity threshold.')
        parser.add_argument('--radius', type=float, help='Success radius in meters.')
        parser.add_argument('--max-steps', type=int, help='Decision budget per episode.')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--continual', action='store_true', help='Reflect after each episode and update memory.')
        parser.add_argument('--scene-desc', action='store_true', help='Use scene descriptions instead of experiences.')
        parser.add_argument('--passes', type=int, default=1, help='Repeat the episode list this many times.')
        parser.add_argument('--embedder', choices=EMBEDDER_KINDS, default='hash')
        parser.add_argument('--dimension', type=int)
        parser.add_argument('--fusion', choices=FusionMode.choices, default=FusionMode.ATTENTION)
        parser.add_argument('--workers', type=int, default=1, help='Parallel episodes (non-continual runs only).')
        parser.add_argument('--report', help='Report file (.json, .csv or .xlsx).')
        parser.add_argument('--traces-dir', help='Directory for per-episode JSONL traces.')
        parser.add_argument('--reflection-log', help='JSONL file receiving one reflection record per episode.')
        parser.add_argument('--record', action='store_true', help='Store the run and its episodes in the database.')
        parser.add_argument('--no-geometry-check', action='store_true', help='Skip the edge length check.')

    def handle(self, *args, **options):
        config = RunConfig(
            environment=Path(options['env']),
            episodes=Path(options['episodes']),
            memory=_path(options.get('memory')),
            backend=options['backend'],
            rule_mode=options['rule_mode'],
            tau=options.get('tau'),
            radius=options.get('radius'),
            max_steps=options.get('max_steps'),
            seed=options['seed'],
            continual=options['continual'],
            scene_description=options['scene_desc'],
            passes=options['passes'],
            embedder=options['embedder'],
            fusion=options['fusion'],
            workers=options['workers'],
            empty_memory=options['empty_memory'],
            report=_path(options.get('report')),
            traces_dir=_path(options.get('traces_dir')),
            reflection_log=_path(options.get('reflection_log')),
            record=options['record'],
            dimension=options.get('dimension'),
            check_geometry=not options['no_geometry_check'],
        )
        try:
            outcome = execute_run(config)
        except (RunConfigurationError, ReportFormatError) as exc:
            raise CommandError(str(exc))

        report = outcome.report
        for line in report.summary_lines():
            self.stdout.write(line)
        if report.labels():
            self.stdout.write('labels: ' + ', '.join(f'{label or "-"}={count}' for label, count in report.labels().items()))
        if config.report:
            self.stdout.write(f'Report written to {config.report}.')
        if outcome.error_count:
            self.stdout.write(self.style.WARNING(f'{outcome.error_count} episode(s) ended with an error.'))
            raise CommandError(f'{outcome.error_count} episode(s) failed.', returncode=2)
        self.stdout.write(self.style.SUCCESS('Run completed.'))
