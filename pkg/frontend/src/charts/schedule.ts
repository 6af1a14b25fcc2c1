/** Unmask-schedule raster: steps across, positions down. Redundant cells are
 * filled yellow, the per-step top-1 pick blue, regulation-expanded commits
 * purple, and newly unmasked positions carry a dark marker. */

import { CsvError, CsvTable, numericColumn, stringColumn } from "../csv";
import { document, el, text } from "../svg";

const CATEGORY_FILL: Record<string, string> = {
  redundant: "#F5DC50",
  top1: "#5B9BD5",
  expanded: "#8172B3",
};
const MARKER = "#1F2D3D";
const FILL_ORDER = ["redundant", "top1", "expanded"];

export function renderSchedule(table: CsvTable, title = "Unmasking schedule"): string {
  const steps = numericColumn(table, "step");
  const positions = numericColumn(table, "position");
  const categories = stringColumn(table, "category");
  if (table.rows.length === 0) throw new CsvError("schedule chart: no data rows");
  for (const [i, c] of categories.entries()) {
    if (!(c in CATEGORY_FILL) && c !== "unmasked") {
      throw new CsvError(`schedule chart: unknown category '${c}' in row ${i + 2}`);
    }
  }

  const maxStep = Math.max(...steps);
  const maxPos = Math.max(...positions);
  const cell = Math.max(8, Math.min(22, Math.floor(560 / Math.max(maxStep, maxPos + 1))));
  const margin = { top: 34, right: 130, bottom: 40, left: 60 };
  const width = margin.left + cell * maxStep + margin.right;
  const height = margin.top + cell * (maxPos + 1) + margin.bottom;

  const body: string[] = [];
  const px = (step: number) => margin.left + (step - 1) * cell;
  const py = (pos: number) => margin.top + pos * cell;

  // grid backdrop
  body.push(el("rect", {
    x: margin.left, y: margin.top, width: cell * maxStep, height: cell * (maxPos + 1),
    fill: "#F4F6F8", stroke: "#ccc", "stroke-width": 0.5,
  }));

  for (const cat of FILL_ORDER) {
    for (let i = 0; i < steps.length; i++) {
      if (categories[i] !== cat) continue;
      body.push(el("rect", {
        x: px(steps[i]) + 0.5, y: py(positions[i]) + 0.5,
        width: cell - 1, height: cell - 1, fill: CATEGORY_FILL[cat],
      }));
    }
  }
  for (let i = 0; i < steps.length; i++) {
    if (categories[i] !== "unmasked") continue;
    body.push(el("circle", {
      cx: px(steps[i]) + cell / 2, cy: py(positions[i]) + cell / 2,
      r: Math.max(1.6, cell * 0.18), fill: MARKER,
    }));
  }

  for (let s = 1; s <= maxStep; s += Math.max(1, Math.ceil(maxStep / 16))) {
    body.push(text(px(s) + cell / 2, height - margin.bottom + 14, String(s),
      { "font-size": 9, "text-anchor": "middle", fill: "#333" }));
  }
  for (let p = 0; p <= maxPos; p += Math.max(1, Math.ceil((maxPos + 1) / 16))) {
    body.push(text(margin.left - 6, py(p) + cell / 2 + 3, String(p),
      { "font-size": 9, "text-anchor": "end", fill: "#333" }));
  }
  body.push(text(margin.left + (cell * maxStep) / 2, height - 8, "refinement step",
    { "font-size": 11, "text-anchor": "middle", fill: "#111" }));
  body.push(el("g", { transform: `translate(14,${margin.top + (cell * (maxPos + 1)) / 2}) rotate(-90)` },
    text(0, 0, "position", { "font-size": 11, "text-anchor": "middle", fill: "#111" })));

  const legend: Array<[string, string]> = [
    ["redundant", CATEGORY_FILL.redundant], ["top-1 pick", CATEGORY_FILL.top1],
    ["expanded", CATEGORY_FILL.expanded], ["unmasked", MARKER],
  ];
  legend.forEach(([label, color], i) => {
    const ly = margin.top + 10 + i * 18;
    body.push(el("rect", { x: width - margin.right + 14, y: ly - 8, width: 10, height: 10, fill: color }));
    body.push(text(width - margin.right + 29, ly + 1, label, { "font-size": 10, fill: "#111" }));
  });
  return document(width, height, title, body.join(""));
}
