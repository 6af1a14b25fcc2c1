/** Per-stage training dynamics: every numeric column except `epoch` becomes a
 * series; multiple metrics files (one per stage) share the canvas. */

import { CsvError, CsvTable, columnIndex, numericColumn } from "../csv";
import { PALETTE, axes, document, el, fmt, linearScale, text } from "../svg";

const WIDTH = 660;
const HEIGHT = 420;
const MARGIN = { top: 32, right: 170, bottom: 44, left: 60 };

export interface NamedTable {
  name: string;
  table: CsvTable;
}

export function renderDynamics(inputs: NamedTable[], title = "Controller training dynamics"): string {
  if (inputs.length === 0) throw new CsvError("dynamics chart: no input tables");
  const series: Array<{ label: string; xs: number[]; ys: number[] }> = [];
  for (const { name, table } of inputs) {
    columnIndex(table, "epoch");
    if (table.rows.length === 0) throw new CsvError(`dynamics chart: '${name}' has no data rows`);
    const epochs = numericColumn(table, "epoch");
    for (const col of table.columns) {
      if (col === "epoch") continue;
      series.push({ label: `${name}:${col}`, xs: epochs, ys: numericColumn(table, col) });
    }
  }
  if (series.length === 0) throw new CsvError("dynamics chart: no metric columns besides epoch");

  const allX = series.flatMap((s) => s.xs);
  const allY = series.flatMap((s) => s.ys);
  const x = linearScale([Math.min(...allX), Math.max(...allX)], [MARGIN.left, WIDTH - MARGIN.right]);
  const lo = Math.min(0, Math.min(...allY));
  const hi = Math.max(...allY) * 1.05 || 1;
  const y = linearScale([lo, hi], [HEIGHT - MARGIN.bottom, MARGIN.top]);

  const body: string[] = [axes(x, y, "epoch", "metric value", WIDTH, HEIGHT, MARGIN)];
  series.forEach((s, k) => {
    const color = PALETTE[k % PALETTE.length];
    const pts = s.xs.map((vx, i) => `${fmt(x(vx))},${fmt(y(s.ys[i]))}`).join(" ");
    body.push(el("polyline", { points: pts, fill: "none", stroke: color, "stroke-width": 1.5 }));
    for (let i = 0; i < s.xs.length; i++) {
      body.push(el("circle", { cx: x(s.xs[i]), cy: y(s.ys[i]), r: 2.2, fill: color }));
    }
    const ly = MARGIN.top + 12 + 15 * k;
    body.push(el("rect", { x: WIDTH - MARGIN.right + 12, y: ly - 7, width: 9, height: 9, fill: color }));
    body.push(text(WIDTH - MARGIN.right + 26, ly + 1, s.label, { "font-size": 10, fill: "#111" }));
  });
  return document(WIDTH, HEIGHT, title, body.join(""));
}
