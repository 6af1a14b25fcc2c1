#!/usr/bin/env node
/**
 * Standalone chart renderer for the lab's CSV outputs.
 *
 *   render --kind frontier --in frontier.csv --out frontier.svg [--title "..."]
 *
 * Kinds: frontier | schedule | heatmap | dynamics. The dynamics kind accepts
 * several inputs (repeat --in or comma-separate) — one per training stage.
 * Schema violations exit non-zero naming the offending column; an input with
 * a header but no data rows is an explicit error.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { parseArgs } from "node:util";

import { renderDynamics } from "./charts/dynamics";
import { renderFrontier } from "./charts/frontier";
import { renderHeatmap } from "./charts/heatmap";
import { renderSchedule } from "./charts/schedule";
import { CsvError, parseCsv } from "./csv";

export const CHART_KINDS = ["frontier", "schedule", "heatmap", "dynamics"] as const;
export type ChartKind = (typeof CHART_KINDS)[number];

function loadTable(file: string) {
  return parseCsv(fs.readFileSync(file, "utf8"));
}

export function renderChart(kind: ChartKind, inputs: string[], title?: string): string {
  if (inputs.length === 0) throw new CsvError("no input CSV given");
  if (kind !== "dynamics" && inputs.length !== 1) {
    throw new CsvError(`chart kind '${kind}' takes exactly one input CSV`);
  }
  switch (kind) {
    case "frontier":
      return renderFrontier(loadTable(inputs[0]), title ?? "Accuracy vs NFE");
    case "schedule":
      return renderSchedule(loadTable(inputs[0]), title ?? "Unmasking schedule");
    case "heatmap":
      return renderHeatmap(loadTable(inputs[0]), title ?? "Convergence progress: labels vs predictions");
    case "dynamics":
      return renderDynamics(
        inputs.map((f) => ({ name: path.basename(f).replace(/\.csv$/, ""), table: loadTable(f) })),
        title ?? "Controller training dynamics",
      );
  }
}

export function main(argv: string[]): number {
  let parsed;
  try {
    parsed = parseArgs({
      args: argv,
      options: {
        kind: { type: "string" },
        in: { type: "string", multiple: true },
        out: { type: "string" },
        title: { type: "string" },
        help: { type: "boolean" },
      },
      allowPositionals: false,
    });
  } catch (err) {
    process.stderr.write(`usage error: ${(err as Error).message}\n`);
    return 2;
  }
  const { values } = parsed;
  if (values.help) {
    process.stdout.write(
      "usage: render --kind <frontier|schedule|heatmap|dynamics> --in <csv> [--in <csv> ...] --out <svg> [--title t]\n",
    );
    return 0;
  }
  const kind = values.kind as string | undefined;
  if (!kind || !(CHART_KINDS as readonly string[]).includes(kind)) {
    process.stderr.write(`usage error: --kind must be one of ${CHART_KINDS.join(", ")}\n`);
    return 2;
  }
  if (!values.out) {
    process.stderr.write("usage error: --out <file.svg> is required\n");
    return 2;
  }
  const inputs = (values.in ?? []).flatMap((v) => v.split(",")).filter(Boolean);
  try {
    const svg = renderChart(kind as ChartKind, inputs, values.title);
    fs.writeFileSync(values.out, svg);
    process.stdout.write(`wrote ${values.out}\n`);
    return 0;
  } catch (err) {
    if (err instanceof CsvError) {
      process.stderr.write(`schema error: ${err.message}\n`);
    } else {
      process.stderr.write(`error: ${(err as Error).message}\n`);
    }
    return 1;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
