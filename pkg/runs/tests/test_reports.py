import csv
import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase
from openpyxl import load_workbook

from runs.reports import EpisodeRow, ReportFormatError, RunReport, aggregate


def row(position, success, ne, spl, pass_index=1, label='', error=''):
    return EpisodeRow(
        pass_index=pass_index,
        position=position,
        episode_id=f'ep-{position}',
        trajectory=['A', 'B'],
        stopped=True,
        ne=ne,
        success=success,
        oracle_success=success,
        spl=spl,
        label=label or ('Success' if success else 'MRD'),
        error=error,
    )


class AggregateTests(SimpleTestCase):
    def test_means_and_percentages(self):
        values = aggregate([row(0, True, 0.0, 1.0), row(1, False, 4.0, 0.0), row(2, True, 2.0, 0.5)])
        self.assertEqual(values['episodes'], 3)
        self.assertAlmostEqual(values['ne'], 2.0)
        self.assertAlmostEqual(values['sr'], 200.0 / 3.0)
        self.assertEqual(values['sr_rounded'], 67)
        self.assertAlmostEqual(values['spl'], 0.5)

    def test_empty_run(self):
        values = aggregate([])
        self.assertEqual(values['episodes'], 0)
        self.assertIsNone(values['sr'])


class RunReportTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.directory = Path(self.tmp.name)
        self.report = RunReport(
            rows=[
                row(0, False, 5.0, 0.0, pass_index=1),
                row(0, True, 0.0, 1.0, pass_index=2),
                row(1, False, 3.0, 0.0, pass_index=2, label='FGR', error='timeout'),
            ],
            config={'backend': 'greedy'},
        )

    def test_per_pass_summary(self):
        self.assertEqual(self.report.passes, [1, 2])
        self.assertEqual(self.report.per_pass()[2]['sr'], 50.0)
        self.assertEqual(self.report.labels(), {'FGR': 1, 'MRD': 1, 'Success': 1})
        self.assertEqual(self.report.error_count, 1)
        lines = self.report.summary_lines()
        self.assertEqual(len(lines), 3)
        self.assertEqual(lines[0], 'all: 3 episodes, NE 2.67 m, SR 33%, OSR 33%, SPL 0.33')
        self.assertTrue(lines[2].startswith('pass 2: 2 episodes'))

    def test_json(self):
        path = self.report.write(self.directory / 'report.json')
        document = json.loads(path.read_text(encoding='utf-8'))
        self.assertEqual(document['config'], {'backend': 'greedy'})
        self.assertEqual(document['passes']['1']['episodes'], 1)
        self.assertEqual(document['episodes'][2]['error'], 'timeout')

    def test_csv_writes_rows_and_summary(self):
        self.report.write(self.directory / 'out' / 'report.csv')
        with open(self.directory / 'out' / 'report.csv', encoding='utf-8', newline='') as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual(len(rows), 3)
        self.assertEqual(rows[0]['trajectory'], 'A B')
        with open(self.directory / 'out' / 'report-summary.csv', encoding='utf-8', newline='') as handle:
            scopes = [line['scope'] for line in csv.DictReader(handle)]
        self.assertEqual(scopes, ['all', 'pass 1', 'pass 2'])

    def test_xlsx(self):
        path = self.report.write(self.directory / 'report.xlsx')
        workbook = load_workbook(path)
        self.assertEqual(workbook.sheetnames, ['Episodes', 'Summary'])
        self.assertEqual(workbook['Episodes'].max_row, 4)
        self.assertEqual(workbook['Summary']['A2'].value, 'all')

    def test_unknown_extension(self):
        with self.assertRaises(ReportFormatError):
            self.report.write(self.directory / 'report.txt')
