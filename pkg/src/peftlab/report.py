"""Rank-distribution exports: CSV blocks per module-group panel and an optional grayscale SVG."""

from __future__ import annotations

import csv
import io
from xml.sax.saxutils import escape

from .allocator import RankReport
from .transformer import ModuleGroup


def report_rows(report: RankReport) -> list[list[str]]:
    """One block per panel: a header row (panel name, layer indices) then one row per role."""
    rows: list[list[str]] = []
    for group in ModuleGroup:
        grid = report.panels[group]
        rows.append([group.value] + [str(i) for i in range(grid.shape[1])])
        for role, line in zip(report.rows[group], grid):
            rows.append([role.value] + [str(int(v)) for v in line])
    return rows


def report_csv(report: RankReport) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\r\n").writerows(report_rows(report))
    return buf.getvalue()


def parse_report_csv(text: str) -> dict[str, dict[str, list[int]]]:
    """Inverse of :func:`report_csv` (panel -> role -> per-layer ranks)."""
    panels: dict[str, dict[str, list[int]]] = {}
    names = {g.value for g in ModuleGroup}
    current = None
    for row in csv.reader(io.StringIO(text)):
        if not row:
            continue
        if row[0] in names:
            current = panels.setdefault(row[0], {})
        elif current is not None:
            current[row[0]] = [int(v) for v in row[1:]]
    return panels


def report_svg(report: RankReport, cell: int = 24) -> str:
    """Heatmap with one panel per module group; darker cells carry more rank."""
    top = max(report.max_rank(), 1)
    label_w, gap, title_h = 40, 16, 18
    parts: list[str] = []
    x0 = 0
    height = 0
    for group in ModuleGroup:
        grid = report.panels[group]
        n_rows, n_cols = grid.shape
        parts.append(f'<text x="{x0 + label_w}" y="12" font-size="11">{escape(group.value)}</text>')
        for i, role in enumerate(report.rows[group]):
            y = title_h + i * cell
            parts.append(f'<text x="{x0 + 4}" y="{y + cell * 0.7:.1f}" font-size="10">{role.value}</text>')
            for j in range(n_cols):
                value = int(grid[i, j])
                shade = round(255 * (1 - value / top))
                parts.append(
                    f'<rect x="{x0 + label_w + j * cell}" y="{y}" width="{cell}" height="{cell}" '
                    f'fill="rgb({shade},{shade},{shade})" stroke="#888"><title>{value}</title></rect>'
                )
        height = max(height, title_h + n_rows * cell)
        x0 += label_w + n_cols * cell + gap
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{x0}" height="{height + 4}">'
        + "".join(parts)
        + "</svg>\n"
    )
