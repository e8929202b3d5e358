/**
 * Readers for the two file formats the training harness emits:
 * newline-delimited metrics records behind a header line, and the
 * throughput CSV from the bench subcommand.  Unknown schema versions are
 * rejected, never guessed at.
 */

import { readFileSync } from "fs";

export const METRICS_SCHEMA = "sleepnet-metrics";
export const SUPPORTED_VERSION = 1;

export interface EvalEntry {
  [metric: string]: number;
}

export interface MetricsRecord {
  version: number;
  step: number;
  tokens_seen: number;
  train_loss: number;
  eval: Record<string, EvalEntry> | null;
  wall_clock_s: number;
  tokens_per_sec: number;
}

export interface RunSummary {
  name?: string;
  seed?: number;
  model?: { sleep_passes?: number; window?: number; evict?: string };
  [key: string]: unknown;
}

export interface MetricsFile {
  run: RunSummary;
  records: MetricsRecord[];
}

export class SchemaError extends Error {}

export function readMetrics(path: string): MetricsFile {
  const lines = readFileSync(path, "utf8")
    .split("\n")
    .filter((line) => line.trim().length > 0);
  if (lines.length === 0) {
    throw new SchemaError(`${path}: empty metrics file`);
  }
  const header = JSON.parse(lines[0]);
  if (header.schema !== METRICS_SCHEMA || header.version !== SUPPORTED_VERSION) {
    throw new SchemaError(
      `${path}: unsupported metrics schema ` +
        `${header.schema ?? "?"} v${header.version ?? "?"} ` +
        `(supported: ${METRICS_SCHEMA} v${SUPPORTED_VERSION})`,
    );
  }
  const records: MetricsRecord[] = [];
  for (const line of lines.slice(1)) {
    const rec = JSON.parse(line);
    if (rec.version !== SUPPORTED_VERSION) {
      throw new SchemaError(`${path}: record version ${rec.version} unsupported`);
    }
    records.push(rec as MetricsRecord);
  }
  return { run: header.run ?? {}, records };
}

export interface BenchRow {
  n_passes: number;
  window: number;
  mode: string;
  tokens_per_sec: number;
  block_passes: number;
  block_passes_expected: number;
}

const BENCH_COLUMNS = [
  "n_passes",
  "window",
  "mode",
  "tokens_per_sec",
  "block_passes",
  "block_passes_expected",
];

export function readBenchCsv(path: string): BenchRow[] {
  const lines = readFileSync(path, "utf8")
    .split("\n")
    .filter((line) => line.trim().length > 0);
  const header = lines[0].split(",");
  for (const col of BENCH_COLUMNS) {
    if (!header.includes(col)) {
      throw new SchemaError(`${path}: bench csv missing column ${col}`);
    }
  }
  return lines.slice(1).map((line) => {
    const cells = line.split(",");
    const row: Record<string, string> = {};
    header.forEach((col, i) => (row[col] = cells[i]));
    return {
      n_passes: Number(row.n_passes),
      window: Number(row.window),
      mode: row.mode,
      tokens_per_sec: Number(row.tokens_per_sec),
      block_passes: Number(row.block_passes),
      block_passes_expected: Number(row.block_passes_expected),
    };
  });
}
