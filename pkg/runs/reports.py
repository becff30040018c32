"""Per-episode rows and aggregate metrics, exported as JSON, CSV or XLSX."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Any, Dict, List, Optional, Sequence

from openpyxl import Workbook

ROW_HEADERS = [
    'pass_index',
    'position',
    'episode_id',
    'trajectory',
    'stopped',
    'ne',
    'success',
    'oracle_success',
    'spl',
    'label',
    'first_wrong_step',
    'budget_exhausted',
    'error',
]
SUMMARY_HEADERS = ['scope', 'episodes', 'ne', 'sr', 'sr_rounded', 'osr', 'osr_rounded', 'spl']


class ReportFormatError(ValueError):
    """Raised for an unsupported report file extension."""


@dataclass(frozen=True)
class EpisodeRow:
    pass_index: int
    position: int
    episode_id: str
    trajectory: List[str]
    stopped: bool
    ne: float
    success: bool
    oracle_success: bool
    spl: float
    label: str = ''
    first_wrong_step: Optional[int] = None
    budget_exhausted: bool = False
    error: str = ''

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def aggregate(rows: Sequence[EpisodeRow]) -> Dict[str, Any]:
    """NE and SPL as means, SR and OSR as percentages (full precision and rounded)."""
    if not rows:
        return {'episodes': 0, 'ne': None, 'sr': None, 'sr_rounded': None, 'osr': None, 'osr_rounded': None, 'spl': None}
    sr = 100.0 * sum(row.success for row in rows) / len(rows)
    osr = 100.0 * sum(row.oracle_success for row in rows) / len(rows)
    return {
        'episodes': len(rows),
        'ne': fmean(row.ne for row in rows),
        'sr': sr,
        'sr_rounded': round(sr),
        'osr': osr,
        'osr_rounded': round(osr),
        'spl': fmean(row.spl for row in rows),
    }


@dataclass
class RunReport:
    rows: List[EpisodeRow] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def aggregates(self) -> Dict[str, Any]:
        return aggregate(self.rows)

    @property
    def passes(self) -> List[int]:
        return sorted({row.pass_index for row in self.rows})

    def per_pass(self) -> Dict[int, Dict[str, Any]]:
        return {number: aggregate([row for row in self.rows if row.pass_index == number]) for number in self.passes}

    @property
    def error_count(self) -> int:
        return sum(1 for row in self.rows if row.error)

    def labels(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for row in self.rows:
            counts[row.label] = counts.get(row.label, 0) + 1
        return dict(sorted(counts.items()))

    def as_dict(self) -> Dict[str, Any]:
        return {
            'config': self.config,
            'aggregates': self.aggregates,
            'passes': {str(number): values for number, values in self.per_pass().items()},
            'labels': self.labels(),
            'episodes': [row.as_dict() for row in self.rows],
        }

    def summary_lines(self) -> List[str]:
        lines = [self._summary_line('all', self.aggregates)]
        if len(self.passes) > 1:
            lines.extend(self._summary_line(f'pass {number}', values) for number, values in self.per_pass().items())
        return lines

    @staticmethod
    def _summary_line(scope: str, values: Dict[str, Any]) -> str:
        if not values['episodes']:
            return f'{scope}: no episodes'
        return (
            f"{scope}: {values['episodes']} episodes, NE {values['ne']:.2f} m, SR {values['sr_rounded']}%, "
            f"OSR {values['osr_rounded']}%, SPL {values['spl']:.2f}"
        )

    def _summary_rows(self) -> List[List[Any]]:
        scopes = [('all', self.aggregates)] + [(f'pass {number}', values) for number, values in self.per_pass().items()]
        return [[scope] + [values[key] for key in SUMMARY_HEADERS[1:]] for scope, values in scopes]

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        suffix = path.suffix.lower()
        writers = {'.json': self._write_json, '.csv': self._write_csv, '.xlsx': self._write_xlsx}
        if suffix not in writers:
            raise ReportFormatError(f'Unsupported report format "{suffix or path.name}"; use .json, .csv or .xlsx.')
        path.parent.mkdir(parents=True, exist_ok=True)
        writers[suffix](path)
        return path

    def _write_json(self, path: Path) -> None:
        path.write_text(json.dumps(self.as_dict(), ensure_ascii=False, indent=2) + '\n', encoding='utf-8')

    def _row_values(self, row: EpisodeRow) -> List[Any]:
        values = row.as_dict()
        values['trajectory'] = ' '.join(row.trajectory)
        return [values[key] for key in ROW_HEADERS]

    def _write_csv(self, path: Path) -> None:
        with open(path, 'w', encoding='utf-8', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(ROW_HEADERS)
            for row in self.rows:
                writer.writerow(self._row_values(row))
        summary = path.with_name(f'{path.stem}-summary.csv')
        with open(summary, 'w', encoding='utf-8', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(SUMMARY_HEADERS)
            writer.writerows(self._summary_rows())

    def _write_xlsx(self, path: Path) -> None:
        workbook = Workbook()
        worksheet = workbook.active
        worksheet.title = 'Episodes'
        worksheet.append(ROW_HEADERS)
        for row in self.rows:
            worksheet.append(self._row_values(row))

        summary = workbook.create_sheet('Summary')
        summary.append(SUMMARY_HEADERS)
        for values in self._summary_rows():
            summary.append(values)

        for sheet in (worksheet, summary):
            for column_cells in sheet.columns:
                max_length = max((len(str(cell.value)) for cell in column_cells if cell.value is not None), default=0)
                sheet.column_dimensions[column_cells[0].column_letter].width = min(max_length + 2, 40)
        workbook.save(path)
