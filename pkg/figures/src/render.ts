/**
 * Figure assembly: group metrics runs into panels (one per difficulty key)
 * with one curve per run, or turn a bench CSV into a throughput chart.
 *
 * The renderer is a pure function of its input files.  Difficulty keys
 * missing from some run are skipped with a warning, never interpolated.
 */

import { mkdirSync, writeFileSync } from "fs";
import { dirname } from "path";

import { readMetrics, readBenchCsv, MetricsFile } from "./schema.js";
import { renderLinePanels, renderBars, Panel, Series } from "./svg.js";

export interface FigureInput {
  path: string;
  label?: string;
}

export interface FigureSpec {
  kind: "curves" | "throughput";
  inputs: FigureInput[];
  out: string;
  metric?: string;          // eval metric for curves (default: loss)
  x?: "step" | "tokens_seen";
  smooth?: number;          // moving-average window, in records
  title?: string;
  subplots?: string[];      // difficulty keys; default: union of all seen
}

export type Warn = (msg: string) => void;

export function defaultLabel(run: MetricsFile["run"]): string {
  const n = run.model?.sleep_passes;
  if (n === 1) return "no loop";
  if (typeof n === "number") return `${n} loops`;
  return run.name ?? "run";
}

function smooth(points: Array<[number, number]>, window: number): Array<[number, number]> {
  if (window <= 1) return points;
  return points.map(([x], i) => {
    const lo = Math.max(0, i - window + 1);
    const slice = points.slice(lo, i + 1);
    const mean = slice.reduce((acc, p) => acc + p[1], 0) / slice.length;
    return [x, mean] as [number, number];
  });
}

export function buildCurveFigure(spec: FigureSpec, warn: Warn): string {
  const metric = spec.metric ?? "loss";
  const xKey = spec.x ?? "step";
  const files = spec.inputs.map((input) => ({
    input,
    file: readMetrics(input.path),
  }));

  const keys: string[] = [];
  for (const { file } of files) {
    for (const rec of file.records) {
      for (const key of Object.keys(rec.eval ?? {})) {
        if (key !== "pooled" && !keys.includes(key)) keys.push(key);
      }
    }
  }
  const wanted = spec.subplots ?? keys;

  const panels: Panel[] = [];
  for (const key of wanted) {
    const series: Series[] = [];
    for (const { input, file } of files) {
      const label = input.label ?? defaultLabel(file.run);
      const points: Array<[number, number]> = [];
      for (const rec of file.records) {
        const entry = rec.eval?.[key];
        if (entry && metric in entry) {
          points.push([rec[xKey], entry[metric]]);
        }
      }
      if (points.length === 0) {
        warn(`skipping ${label} in panel ${key}: no ${metric} values`);
        continue;
      }
      series.push({ label, points: smooth(points, spec.smooth ?? 1) });
    }
    if (series.length === 0) {
      warn(`skipping panel ${key}: no data in any input`);
      continue;
    }
    panels.push({ title: key, series });
  }
  if (panels.length === 0) {
    throw new Error("nothing to plot: no requested difficulty key has data");
  }
  return renderLinePanels(panels, {
    title: spec.title,
    xLabel: xKey === "step" ? "training step" : "tokens seen",
    yLabel: metric,
  });
}

export function buildThroughputFigure(spec: FigureSpec, warn: Warn): string {
  if (spec.inputs.length !== 1) {
    throw new Error("throughput figures take exactly one bench csv input");
  }
  const rows = readBenchCsv(spec.inputs[0].path);
  const mode = rows[0]?.mode;
  const bars = rows
    .filter((r) => r.mode === mode)
    .map((r) => ({ label: `N=${r.n_passes}`, value: r.tokens_per_sec }));
  if (rows.some((r) => r.mode !== mode)) {
    warn(`multiple eviction modes in csv; plotting mode=${mode}`);
  }
  return renderBars(bars, {
    title: spec.title ?? "training throughput vs sleep passes",
    xLabel: "offline passes per consolidation chunk",
    yLabel: "tokens / sec",
  });
}

export function renderFigure(spec: FigureSpec, warn: Warn = console.error): string {
  const svg = spec.kind === "throughput"
    ? buildThroughputFigure(spec, warn)
    : buildCurveFigure(spec, warn);
  mkdirSync(dirname(spec.out), { recursive: true });
  writeFileSync(spec.out, svg);
  return spec.out;
}
