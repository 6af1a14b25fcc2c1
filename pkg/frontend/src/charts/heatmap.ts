/** Side-by-side convergence-progress grids: labels on the left, controller
 * predictions on the right, sharing one blue-to-yellow color ramp. */

import { CsvError, CsvTable, numericColumn } from "../csv";
import { document, el, heatColor, text } from "../svg";

export function renderHeatmap(table: CsvTable, title = "Convergence progress: labels vs predictions"): string {
  const positions = numericColumn(table, "position");
  const steps = numericColumn(table, "step");
  const labels = numericColumn(table, "label");
  const preds = numericColumn(table, "prediction");
  if (table.rows.length === 0) throw new CsvError("heatmap chart: no data rows");

  const posMin = Math.min(...positions);
  const posMax = Math.max(...positions);
  const stepMax = Math.max(...steps);
  const nPos = posMax - posMin + 1;
  const cell = Math.max(7, Math.min(20, Math.floor(330 / Math.max(stepMax, nPos))));
  const margin = { top: 40, right: 70, bottom: 42, left: 56 };
  const gap = 40;
  const panelW = cell * stepMax;
  const panelH = cell * nPos;
  const width = margin.left + panelW * 2 + gap + margin.right;
  const height = margin.top + panelH + margin.bottom;

  const body: string[] = [];

  const panel = (x0: number, values: number[], label: string) => {
    body.push(el("rect", { x: x0, y: margin.top, width: panelW, height: panelH,
                           fill: "#E9ECEF", stroke: "#bbb", "stroke-width": 0.5 }));
    for (let i = 0; i < values.length; i++) {
      body.push(el("rect", {
        x: x0 + (steps[i] - 1) * cell + 0.5,
        y: margin.top + (positions[i] - posMin) * cell + 0.5,
        width: cell - 1, height: cell - 1, fill: heatColor(values[i]),
      }));
    }
    body.push(text(x0 + panelW / 2, margin.top - 8, label,
      { "font-size": 11, "text-anchor": "middle", fill: "#111" }));
    body.push(text(x0 + panelW / 2, height - 10, "refinement step",
      { "font-size": 10, "text-anchor": "middle", fill: "#333" }));
  };

  panel(margin.left, labels, "trajectory-grounded labels");
  panel(margin.left + panelW + gap, preds, "controller predictions");
  body.push(el("g", { transform: `translate(14,${margin.top + panelH / 2}) rotate(-90)` },
    text(0, 0, "position", { "font-size": 10, "text-anchor": "middle", fill: "#333" })));

  // color bar
  const barX = width - margin.right + 18;
  const barH = panelH;
  const segments = 24;
  for (let i = 0; i < segments; i++) {
    const v = 1 - i / (segments - 1);
    body.push(el("rect", { x: barX, y: margin.top + (i * barH) / segments,
                           width: 12, height: barH / segments + 0.5, fill: heatColor(v) }));
  }
  body.push(text(barX + 16, margin.top + 8, "1.0", { "font-size": 9, fill: "#333" }));
  body.push(text(barX + 16, margin.top + barH, "0.0", { "font-size": 9, fill: "#333" }));
  return document(width, height, title, body.join(""));
}
