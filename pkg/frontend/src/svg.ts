/** Tiny deterministic SVG builder: plain string assembly, fixed geometry. */

export interface Margin {
  top: number;
  right: number;
  bottom: number;
  left: number;
}

export const PALETTE = [
  "#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3",
  "#937860", "#DA8BC3", "#8C8C8C", "#CCB974", "#64B5CD",
];

const XML = new Map([["&", "&amp;"], ["<", "&lt;"], [">", "&gt;"], ['"', "&quot;"]]);

export function esc(text: string): string {
  return text.replace(/[&<>"]/g, (c) => XML.get(c) as string);
}

export function el(tag: string, attrs: Record<string, string | number>, body = ""): string {
  const parts = Object.entries(attrs)
    .map(([k, v]) => `${k}="${typeof v === "number" ? fmt(v) : esc(v)}"`)
    .join(" ");
  return body === "" ? `<${tag} ${parts}/>` : `<${tag} ${parts}>${body}</${tag}>`;
}

/** Fixed-precision coordinates keep output byte-stable across platforms. */
export function fmt(v: number): string {
  const s = v.toFixed(2);
  return s === "-0.00" ? "0.00" : s;
}

export function text(x: number, y: number, body: string, attrs: Record<string, string | number> = {}): string {
  return el("text", { x, y, "font-family": "Helvetica, Arial, sans-serif", ...attrs }, esc(body));
}

export interface LinearScale {
  (v: number): number;
  domain: [number, number];
  range: [number, number];
}

export function linearScale(domain: [number, number], range: [number, number]): LinearScale {
  const [d0, d1] = domain;
  const [r0, r1] = range;
  const span = d1 - d0 || 1;
  const fn = ((v: number) => r0 + ((v - d0) / span) * (r1 - r0)) as LinearScale;
  fn.domain = domain;
  fn.range = range;
  return fn;
}

/** Round tick positions covering the domain (simple 1/2/5 ladder). */
export function ticks(domain: [number, number], count = 5): number[] {
  const [lo, hi] = domain;
  const span = hi - lo || 1;
  const step0 = span / Math.max(1, count);
  const mag = 10 ** Math.floor(Math.log10(step0));
  const norm = step0 / mag;
  const step = (norm >= 5 ? 5 : norm >= 2 ? 2 : 1) * mag;
  const start = Math.ceil(lo / step) * step;
  const out: number[] = [];
  for (let v = start; v <= hi + 1e-9; v += step) out.push(Number(v.toFixed(10)));
  return out;
}

export function tickLabel(v: number): string {
  return Math.abs(v) >= 1000 || (v !== 0 && Math.abs(v) < 0.001)
    ? v.toExponential(1)
    : Number(v.toFixed(4)).toString();
}

export function axes(
  x: LinearScale, y: LinearScale,
  xLabel: string, yLabel: string,
  width: number, height: number, margin: Margin,
): string {
  const parts: string[] = [];
  const [x0, x1] = x.range;
  const [yTop, yBottom] = [y.range[1], y.range[0]];
  parts.push(el("line", { x1: x0, y1: yBottom, x2: x1, y2: yBottom, stroke: "#333", "stroke-width": 1 }));
  parts.push(el("line", { x1: x0, y1: yTop, x2: x0, y2: yBottom, stroke: "#333", "stroke-width": 1 }));
  for (const t of ticks(x.domain)) {
    const px = x(t);
    parts.push(el("line", { x1: px, y1: yBottom, x2: px, y2: yBottom + 4, stroke: "#333", "stroke-width": 1 }));
    parts.push(text(px, yBottom + 16, tickLabel(t), { "font-size": 10, "text-anchor": "middle", fill: "#333" }));
  }
  for (const t of ticks(y.domain)) {
    const py = y(t);
    parts.push(el("line", { x1: x0 - 4, y1: py, x2: x0, y2: py, stroke: "#333", "stroke-width": 1 }));
    parts.push(text(x0 - 6, py + 3, tickLabel(t), { "font-size": 10, "text-anchor": "end", fill: "#333" }));
    parts.push(el("line", { x1: x0, y1: py, x2: x1, y2: py, stroke: "#ddd", "stroke-width": 0.5 }));
  }
  parts.push(text((x0 + x1) / 2, height - 6, xLabel, { "font-size": 11, "text-anchor": "middle", fill: "#111" }));
  parts.push(el("g", { transform: `translate(12,${(yTop + yBottom) / 2}) rotate(-90)` },
    text(0, 0, yLabel, { "font-size": 11, "text-anchor": "middle", fill: "#111" })));
  return parts.join("");
}

export function document(width: number, height: number, title: string, body: string): string {
  const head = text(width / 2, 16, title, { "font-size": 13, "text-anchor": "middle", fill: "#111", "font-weight": "bold" });
  return [
    `<?xml version="1.0" encoding="UTF-8"?>`,
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" viewBox="0 0 ${width} ${height}">`,
    el("rect", { x: 0, y: 0, width, height, fill: "#ffffff" }),
    head,
    body,
    `</svg>`,
    "",
  ].join("\n");
}

/** Blue -> yellow ramp for unit-interval heat values. */
export function heatColor(v: number): string {
  const t = Math.max(0, Math.min(1, v));
  const stops: Array<[number, [number, number, number]]> = [
    [0.0, [40, 60, 134]],
    [0.5, [70, 150, 140]],
    [1.0, [245, 220, 80]],
  ];
  let [t0, c0] = stops[0];
  let [t1, c1] = stops[stops.length - 1];
  for (let i = 0; i + 1 < stops.length; i++) {
    if (t >= stops[i][0] && t <= stops[i + 1][0]) {
      [t0, c0] = stops[i];
      [t1, c1] = stops[i + 1];
      break;
    }
  }
  const f = (t - t0) / (t1 - t0 || 1);
  const mix = c0.map((c, i) => Math.round(c + f * (c1[i] - c)));
  return `rgb(${mix[0]},${mix[1]},${mix[2]})`;
}
