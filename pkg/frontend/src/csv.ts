/**
 * Minimal RFC-4180 CSV reader: quoted fields, embedded separators/newlines,
 * LF or CRLF line endings. Returns a header row plus string records.
 */

export class CsvError extends Error {}

export interface CsvTable {
  columns: string[];
  rows: string[][];
}

export function parseCsv(text: string): CsvTable {
  const records: string[][] = [];
  let field = "";
  let record: string[] = [];
  let inQuotes = false;
  let i = 0;

  const pushField = () => {
    record.push(field);
    field = "";
  };
  const pushRecord = () => {
    pushField();
    records.push(record);
    record = [];
  };

  while (i < text.length) {
    const ch = text[i];
    if (inQuotes) {
      if (ch === '"') {
        if (text[i + 1] === '"') {
          field += '"';
          i += 2;
          continue;
        }
        inQuotes = false;
        i += 1;
        continue;
      }
      field += ch;
      i += 1;
      continue;
    }
    if (ch === '"') {
      if (field.length > 0) throw new CsvError(`stray quote at offset ${i}`);
      inQuotes = true;
      i += 1;
    } else if (ch === ",") {
      pushField();
      i += 1;
    } else if (ch === "\r" && text[i + 1] === "\n") {
      pushRecord();
      i += 2;
    } else if (ch === "\n") {
      pushRecord();
      i += 1;
    } else {
      field += ch;
      i += 1;
    }
  }
  if (inQuotes) throw new CsvError("unterminated quoted field");
  if (field.length > 0 || record.length > 0) pushRecord();

  if (records.length === 0) throw new CsvError("file has no header row");
  const [columns, ...rows] = records;
  for (const [idx, row] of rows.entries()) {
    if (row.length !== columns.length) {
      throw new CsvError(
        `row ${idx + 2} has ${row.length} fields, expected ${columns.length}`,
      );
    }
  }
  return { columns, rows };
}

/** Column accessor with a named-column diagnostic on absence. */
export function columnIndex(table: CsvTable, name: string): number {
  const idx = table.columns.indexOf(name);
  if (idx < 0) {
    throw new CsvError(`missing required column '${name}' (found: ${table.columns.join(", ")})`);
  }
  return idx;
}

export function numericColumn(table: CsvTable, name: string): number[] {
  const idx = columnIndex(table, name);
  return table.rows.map((row, r) => {
    const v = Number(row[idx]);
    if (!Number.isFinite(v)) {
      throw new CsvError(`column '${name}', row ${r + 2}: '${row[idx]}' is not a finite number`);
    }
    return v;
  });
}

export function stringColumn(table: CsvTable, name: string): string[] {
  const idx = columnIndex(table, name);
  return table.rows.map((row) => row[idx]);
}
