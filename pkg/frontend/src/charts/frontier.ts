/** Accuracy-vs-NFE frontier: one polyline + markers per method. */

import { CsvError, CsvTable, numericColumn, stringColumn } from "../csv";
import { PALETTE, axes, document, el, fmt, linearScale, text } from "../svg";

const WIDTH = 640;
const HEIGHT = 420;
const MARGIN = { top: 32, right: 140, bottom: 44, left: 56 };

export function renderFrontier(table: CsvTable, title = "Accuracy vs NFE"): string {
  const methods = stringColumn(table, "method");
  const accuracy = numericColumn(table, "accuracy");
  const nfe = numericColumn(table, "mean_nfe");
  if (table.rows.length === 0) throw new CsvError("frontier chart: no data rows");

  const xDomain: [number, number] = [0, Math.max(...nfe) * 1.05];
  const lo = Math.min(...accuracy);
  const hi = Math.max(...accuracy);
  const pad = Math.max(0.02, (hi - lo) * 0.1);
  const yDomain: [number, number] = [Math.max(0, lo - pad), Math.min(1.0, hi + pad)];
  const x = linearScale(xDomain, [MARGIN.left, WIDTH - MARGIN.right]);
  const y = linearScale(yDomain, [HEIGHT - MARGIN.bottom, MARGIN.top]);

  const byMethod = new Map<string, Array<{ nfe: number; acc: number }>>();
  methods.forEach((m, i) => {
    if (!byMethod.has(m)) byMethod.set(m, []);
    byMethod.get(m)!.push({ nfe: nfe[i], acc: accuracy[i] });
  });

  const body: string[] = [axes(x, y, "mean NFE", "exact-match accuracy", WIDTH, HEIGHT, MARGIN)];
  let k = 0;
  for (const [method, pts] of byMethod) {
    const color = PALETTE[k % PALETTE.length];
    const sorted = [...pts].sort((a, b) => a.nfe - b.nfe || a.acc - b.acc);
    if (sorted.length > 1) {
      const d = sorted.map((p) => `${fmt(x(p.nfe))},${fmt(y(p.acc))}`).join(" ");
      body.push(el("polyline", { points: d, fill: "none", stroke: color, "stroke-width": 1.6 }));
    }
    for (const p of sorted) {
      body.push(el("circle", { cx: x(p.nfe), cy: y(p.acc), r: 3.4, fill: color, stroke: "#fff", "stroke-width": 0.8 }));
    }
    const ly = MARGIN.top + 14 + 16 * k;
    body.push(el("rect", { x: WIDTH - MARGIN.right + 12, y: ly - 8, width: 10, height: 10, fill: color }));
    body.push(text(WIDTH - MARGIN.right + 27, ly + 1, method, { "font-size": 11, fill: "#111" }));
    k += 1;
  }
  return document(WIDTH, HEIGHT, title, body.join(""));
}
