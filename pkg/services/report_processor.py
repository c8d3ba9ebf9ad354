"""Report writers for evaluation results.

Writers share one interface so new output formats can be added by
subclassing ReportWriter and registering the class in WRITERS.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Type

from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter

from core.errors import ConfigError, IoError
from services.persistence import PersistenceService

logger = logging.getLogger(__name__)


# ==================== Data Classes ====================

@dataclass
class WriteResult:
    """Outcome of writing one report file."""
    success: bool
    path: Optional[Path] = None
    error_message: Optional[str] = None
    rows_written: int = 0


# ==================== Abstract Base Class ====================

class ReportWriter(ABC):
    """Writes an evaluation report dict to one file format."""

    @property
    @abstractmethod
    def extension(self) -> str:
        """File suffix without the dot (e.g. 'json', 'xlsx')."""
        pass

    @abstractmethod
    def write(self, report: Dict[str, Any], path: Path) -> WriteResult:
        pass


# ==================== Concrete Writers ====================

class JsonReportWriter(ReportWriter):
    """Canonical JSON: sorted keys, two-space indent."""

    @property
    def extension(self) -> str:
        return "json"

    def write(self, report: Dict[str, Any], path: Path) -> WriteResult:
        try:
            written = PersistenceService.save_json(path, report)
        except IoError as e:
            return WriteResult(success=False, error_message=str(e))
        return WriteResult(success=True, path=written, rows_written=len(report.get('per_pair', [])))


class ExcelReportWriter(ReportWriter):
    """Styled workbook with a per-pair sheet and an aggregate sheet."""

    HEADER_COLOR = "4472C4"
    ROW_COLOR = "FFFFFF"
    ALT_ROW_COLOR = "DDEBF7"
    PER_PAIR_COLUMNS = ('pair_id', 'clip_a', 'clip_b', 'snr_db', 'sdr', 'sir', 'sar',
                        'stoi', 'sdr_mixture', 'sdri')

    @property
    def extension(self) -> str:
        return "xlsx"

    def _style_sheet(self, ws, n_rows: int) -> None:
        header_fill = PatternFill(start_color=self.HEADER_COLOR, end_color=self.HEADER_COLOR, fill_type="solid")
        header_font = Font(bold=True, color="FFFFFF")
        row_fill = PatternFill(start_color=self.ROW_COLOR, end_color=self.ROW_COLOR, fill_type="solid")
        alt_row_fill = PatternFill(start_color=self.ALT_ROW_COLOR, end_color=self.ALT_ROW_COLOR, fill_type="solid")
        thin = Side(style='thin')
        border = Border(left=thin, right=thin, top=thin, bottom=thin)

        for row_idx, row in enumerate(ws.iter_rows(min_row=1, max_row=n_rows), start=1):
            for cell in row:
                cell.border = border
                cell.alignment = Alignment(vertical='top')
                if row_idx == 1:
                    cell.fill = header_fill
                    cell.font = header_font
                else:
                    cell.fill = alt_row_fill if row_idx % 2 == 0 else row_fill

        for col_idx, column_cells in enumerate(ws.columns, start=1):
            longest = max(min(len(str(c.value if c.value is not None else "")), 40) for c in column_cells)
            ws.column_dimensions[get_column_letter(col_idx)].width = longest + 2
        ws.freeze_panes = 'A2'

    @staticmethod
    def _cell(value: Any) -> Any:
        # Per-source lists are written one value per source
        if isinstance(value, list):
            return ', '.join(f"{v:.3f}" if isinstance(v, float) else str(v) for v in value)
        return value

    def _per_pair_rows(self, report: Dict[str, Any]) -> List[List[Any]]:
        rows = [list(self.PER_PAIR_COLUMNS)]
        for pair in report.get('per_pair', []):
            rows.append([self._cell(pair.get(col)) for col in self.PER_PAIR_COLUMNS])
        return rows

    @staticmethod
    def _aggregate_rows(report: Dict[str, Any]) -> List[List[Any]]:
        rows: List[List[Any]] = [['metric', 'value']]
        for key, value in report.get('aggregate', {}).items():
            rows.append([key, 'n/a' if value is None else value])
        for key in ('protocol', 'backend', 'n_pairs', 'seed', 'config_digest'):
            if key in report:
                rows.append([key, report[key]])
        for key in ('best_pairs', 'worst_pairs'):
            if key in report:
                rows.append([key, ', '.join(str(p) for p in report[key])])
        return rows

    def write(self, report: Dict[str, Any], path: Path) -> WriteResult:
        wb = Workbook()
        per_pair = wb.active
        per_pair.title = "Per Pair"
        pair_rows = self._per_pair_rows(report)
        for row in pair_rows:
            per_pair.append(row)
        self._style_sheet(per_pair, len(pair_rows))

        aggregate = wb.create_sheet("Aggregate")
        aggregate_rows = self._aggregate_rows(report)
        for row in aggregate_rows:
            aggregate.append(row)
        self._style_sheet(aggregate, len(aggregate_rows))

        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            wb.save(str(path))
        except OSError as e:
            return WriteResult(success=False, error_message=f"failed to write {path}: {e}")
        return WriteResult(success=True, path=path, rows_written=len(pair_rows) - 1)


WRITERS: Dict[str, Type[ReportWriter]] = {
    'json': JsonReportWriter,
    'xlsx': ExcelReportWriter,
}


# ==================== Operations ====================

def write_report(report: Dict[str, Any], out_path: Path, extra_formats: Sequence[str] = ()) -> List[WriteResult]:
    """Write the JSON report at out_path plus optional sibling formats.

    The JSON report is required; extra formats are best-effort and only
    logged when they fail.

    Raises:
        IoError: JSON report could not be written
        ConfigError: Unknown format name
    """
    unknown = [f for f in extra_formats if f not in WRITERS]
    if unknown:
        raise ConfigError(f"unknown report format(s): {', '.join(unknown)}")
    out_path = Path(out_path)
    results = [JsonReportWriter().write(report, out_path)]
    if not results[0].success:
        raise IoError(results[0].error_message)
    for name in extra_formats:
        if name == 'json':
            continue
        writer = WRITERS[name]()
        result = writer.write(report, out_path.with_suffix('.' + writer.extension))
        if not result.success:
            logger.warning(f"[Report] Skipping {name} report: {result.error_message}")
        results.append(result)
    return results
