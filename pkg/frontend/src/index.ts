export { CsvError, CsvTable, parseCsv, columnIndex, numericColumn, stringColumn } from "./csv";
export { renderFrontier } from "./charts/frontier";
export { renderSchedule } from "./charts/schedule";
export { renderHeatmap } from "./charts/heatmap";
export { renderDynamics, NamedTable } from "./charts/dynamics";
export { renderChart, ChartKind, CHART_KINDS } from "./render";
