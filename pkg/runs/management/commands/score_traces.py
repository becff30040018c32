from __future__ import annotations

from django.core.management.base import BaseCommand, CommandError

from environments.services import NavigationGraphError, load_environment
from runs.reports import ReportFormatError
from runs.services import TraceFormatError, score_traces


class Command(BaseCommand):
    help = 'Recomputes run metrics from a directory of episode traces.'

    def add_arguments(self, parser):
        parser.add_argument('--traces-dir', required=True)
        parser.add_argument('--env', required=True, help='Environment the traces were recorded in.')
        parser.add_argument('--report', help='Report file (.json, .csv or .xlsx).')
        parser.add_argument('--no-geometry-check', action='store_true', help='Skip the edge length check.')

    def handle(self, *args, **options):
        try:
            graph = load_environment(options['env'], check_geometry=not options['no_geometry_check'])
            report = score_traces(options['traces_dir'], graph)
            if options.get('report'):
                report.write(options['report'])
        except (NavigationGraphError, TraceFormatError, ReportFormatError) as exc:
            raise CommandError(str(exc))
        for line in report.summary_lines():
            self.stdout.write(line)
        self.stdout.write(self.style.SUCCESS(f'Scored {len(report.rows)} trace(s).'))
