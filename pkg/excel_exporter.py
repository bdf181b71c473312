#!/usr/bin/env python3
"""
Excel Exporter
Writes experiment tables (sweeps, training histories, solver traces) to styled workbooks
"""

import logging
import os
from datetime import datetime
from typing import Dict, List, Optional, Sequence

from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter

logger = logging.getLogger(__name__)

_THIN = Side(style='thin')
_BORDER = Border(left=_THIN, right=_THIN, top=_THIN, bottom=_THIN)


class ExcelExporter:
    """One "Summary" sheet of configuration values plus one sheet per table"""

    def export_tables_to_xlsx(self, filename: str, tables: Dict[str, Dict],
                              config: Optional[Dict] = None) -> str:
        """
        Export tables to an XLSX file.

        Args:
            filename: Output path
            tables: sheet name -> {"headers": [...], "rows": [[...], ...]}
            config: Configuration values for the summary sheet

        Returns:
            str: The written filename
        """
        wb = Workbook()
        wb.remove(wb.active)

        summary_sheet = wb.create_sheet(title="Summary")
        self._create_summary_sheet(summary_sheet, config or {}, tables)

        for name, table in tables.items():
            ws = wb.create_sheet(title=self._sheet_title(name))
            self._create_data_sheet(ws, name, table["headers"], table["rows"])

        directory = os.path.dirname(os.path.abspath(filename))
        os.makedirs(directory, exist_ok=True)
        wb.save(filename)

        logger.info(f"✓ Workbook exported to: {filename}")
        logger.debug(f"📁 Sheets: {', '.join(wb.sheetnames)}")
        return filename

    def _sheet_title(self, name: str) -> str:
        # Excel limits sheet titles to 31 characters without []:*?/\
        cleaned = "".join("_" if ch in '[]:*?/\\' else ch for ch in name)
        return cleaned[:31] or "Sheet"

    def _create_summary_sheet(self, ws, config: Dict, tables: Dict[str, Dict]):
        ws.append(["Experiment Summary"])
        ws.append([])
        ws.append(["Generated", datetime.now().strftime("%Y-%m-%d %H:%M:%S")])
        for name, table in tables.items():
            ws.append([f"{name} rows", len(table["rows"])])
        for key in sorted(config):
            value = config[key]
            ws.append([key, value if isinstance(value, (int, float, str)) else str(value)])
        self._style_summary_sheet(ws)

    def _create_data_sheet(self, ws, title: str, headers: Sequence[str], rows: List[Sequence]):
        ws.append([title])
        ws.append([])
        ws.append(list(headers))
        for row in rows:
            ws.append([self._cell_value(v) for v in row])
        self._style_data_sheet(ws, len(headers))

    def _cell_value(self, value):
        if isinstance(value, float) and value != value:
            return "nan"
        if isinstance(value, float) and value in (float("inf"), float("-inf")):
            return "inf" if value > 0 else "-inf"
        if hasattr(value, "item"):
            return value.item()
        return value

    def _style_title(self, ws):
        title_cell = ws.cell(row=1, column=1)
        title_cell.font = Font(bold=True, size=16, color="FFFFFF")
        title_cell.fill = PatternFill(start_color="2E4A75", end_color="2E4A75", fill_type="solid")

    def _style_summary_sheet(self, ws):
        self._style_title(ws)
        for row in range(3, ws.max_row + 1):
            ws.cell(row=row, column=1).font = Font(bold=True)
            for col in range(1, 3):
                ws.cell(row=row, column=col).border = _BORDER
        ws.column_dimensions['A'].width = 24
        ws.column_dimensions['B'].width = 30

    def _style_data_sheet(self, ws, max_col: int):
        self._style_title(ws)
        if ws.max_row < 3 or max_col < 1:
            return

        for col in range(1, max_col + 1):
            header_cell = ws.cell(row=3, column=col)
            header_cell.font = Font(bold=True, size=12, color="FFFFFF")
            header_cell.fill = PatternFill(start_color="5B7FA6", end_color="5B7FA6", fill_type="solid")
            header_cell.alignment = Alignment(horizontal='center', vertical='center')

        for row in range(4, ws.max_row + 1):
            fill_color = "F2F2F2" if row % 2 == 0 else "FFFFFF"
            for col in range(1, max_col + 1):
                cell = ws.cell(row=row, column=col)
                cell.fill = PatternFill(start_color=fill_color, end_color=fill_color, fill_type="solid")
                if isinstance(cell.value, float):
                    cell.number_format = '0.000000'
                    cell.alignment = Alignment(horizontal='right', vertical='center')
                elif isinstance(cell.value, int):
                    cell.number_format = '0'
                    cell.alignment = Alignment(horizontal='right', vertical='center')
                else:
                    cell.alignment = Alignment(horizontal='left', vertical='center')

        for row in range(3, ws.max_row + 1):
            for col in range(1, max_col + 1):
                ws.cell(row=row, column=col).border = _BORDER

        for col in range(1, max_col + 1):
            max_width = max((len(str(ws.cell(row=row, column=col).value or ""))
                             for row in range(3, ws.max_row + 1)), default=0)
            ws.column_dimensions[get_column_letter(col)].width = min(max(max_width + 3, 10), 50)
