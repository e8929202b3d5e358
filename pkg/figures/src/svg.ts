/**
 * A tiny deterministic SVG chart writer: multi-panel line charts and bar
 * charts with axes, ticks and a legend.  Numbers are formatted with fixed
 * precision so the same inputs always produce byte-identical files.
 */

const PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

const fmt = (x: number): string => {
  if (!Number.isFinite(x)) return "0";
  return x.toFixed(2).replace(/\.00$/, "");
};

const fmtTick = (x: number): string => {
  const ax = Math.abs(x);
  if (ax >= 100000) return `${(x / 1000).toFixed(0)}k`;
  if (ax >= 1000 && Number.isInteger(x / 100)) return `${(x / 1000).toFixed(1)}k`;
  if (Number.isInteger(x)) return x.toString();
  return x.toPrecision(3);
};

export interface Series {
  label: string;
  points: Array<[number, number]>;
}

export interface Panel {
  title: string;
  series: Series[];
}

export interface FigureLayout {
  title?: string;
  xLabel: string;
  yLabel: string;
  panelWidth?: number;
  panelHeight?: number;
}

function niceTicks(lo: number, hi: number, n = 4): number[] {
  if (!(hi > lo)) return [lo];
  const span = hi - lo;
  const step = Math.pow(10, Math.floor(Math.log10(span / n)));
  const candidates = [step, 2 * step, 2.5 * step, 5 * step, 10 * step];
  const chosen = candidates.find((s) => span / s <= n + 1) ?? 10 * step;
  const ticks: number[] = [];
  for (let t = Math.ceil(lo / chosen) * chosen; t <= hi + 1e-12; t += chosen) {
    ticks.push(Number(t.toPrecision(12)));
  }
  return ticks;
}

export function renderLinePanels(panels: Panel[], layout: FigureLayout): string {
  const pw = layout.panelWidth ?? 300;
  const ph = layout.panelHeight ?? 220;
  const margin = { left: 52, right: 12, top: 34, bottom: 40 };
  const legendH = 22;
  const width = panels.length * pw + 8;
  const height = ph + legendH + (layout.title ? 22 : 0);
  const titleOffset = layout.title ? 20 : 0;

  const out: string[] = [];
  out.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" ` +
      `font-family="Helvetica, Arial, sans-serif" font-size="11">`,
  );
  out.push(`<rect width="${width}" height="${height}" fill="white"/>`);
  if (layout.title) {
    out.push(
      `<text x="${width / 2}" y="14" text-anchor="middle" font-size="13" font-weight="bold">` +
        `${layout.title}</text>`,
    );
  }

  const labels: string[] = [];
  for (const panel of panels) {
    for (const s of panel.series) {
      if (!labels.includes(s.label)) labels.push(s.label);
    }
  }

  panels.forEach((panel, pi) => {
    const x0 = pi * pw + margin.left;
    const y0 = titleOffset + margin.top;
    const plotW = pw - margin.left - margin.right;
    const plotH = ph - margin.top - margin.bottom;

    const xs = panel.series.flatMap((s) => s.points.map((p) => p[0]));
    const ys = panel.series.flatMap((s) => s.points.map((p) => p[1]));
    const xLo = Math.min(...xs);
    const xHi = Math.max(...xs);
    const yLo = Math.min(...ys);
    const yHi = Math.max(...ys);
    const yPad = yHi > yLo ? 0.05 * (yHi - yLo) : Math.abs(yHi) * 0.1 + 0.01;
    const ylo = yLo - yPad;
    const yhi = yHi + yPad;
    const sx = (x: number) => x0 + (xHi > xLo ? ((x - xLo) / (xHi - xLo)) * plotW : plotW / 2);
    const sy = (y: number) => y0 + plotH - ((y - ylo) / (yhi - ylo)) * plotH;

    out.push(`<text x="${x0 + plotW / 2}" y="${y0 - 8}" text-anchor="middle" font-weight="bold">${panel.title}</text>`);
    out.push(`<rect x="${x0}" y="${y0}" width="${plotW}" height="${plotH}" fill="none" stroke="#444"/>`);
    for (const t of niceTicks(xLo, xHi)) {
      out.push(`<line x1="${fmt(sx(t))}" y1="${y0 + plotH}" x2="${fmt(sx(t))}" y2="${y0 + plotH + 4}" stroke="#444"/>`);
      out.push(`<text x="${fmt(sx(t))}" y="${y0 + plotH + 16}" text-anchor="middle">${fmtTick(t)}</text>`);
    }
    for (const t of niceTicks(ylo, yhi)) {
      out.push(`<line x1="${x0 - 4}" y1="${fmt(sy(t))}" x2="${x0}" y2="${fmt(sy(t))}" stroke="#444"/>`);
      out.push(`<text x="${x0 - 7}" y="${fmt(sy(t) + 3)}" text-anchor="end">${fmtTick(t)}</text>`);
      out.push(`<line x1="${x0}" y1="${fmt(sy(t))}" x2="${x0 + plotW}" y2="${fmt(sy(t))}" stroke="#ddd"/>`);
    }
    out.push(
      `<text x="${x0 + plotW / 2}" y="${y0 + plotH + 32}" text-anchor="middle">${layout.xLabel}</text>`,
    );
    out.push(
      `<text x="${x0 - 38}" y="${y0 + plotH / 2}" text-anchor="middle" ` +
        `transform="rotate(-90 ${x0 - 38} ${y0 + plotH / 2})">${layout.yLabel}</text>`,
    );
    panel.series.forEach((s) => {
      const color = PALETTE[labels.indexOf(s.label) % PALETTE.length];
      const path = s.points
        .map((p, i) => `${i === 0 ? "M" : "L"}${fmt(sx(p[0]))},${fmt(sy(p[1]))}`)
        .join(" ");
      out.push(`<path d="${path}" fill="none" stroke="${color}" stroke-width="1.6"/>`);
    });
  });

  labels.forEach((label, i) => {
    const lx = 16 + i * 120;
    const ly = height - 8;
    const color = PALETTE[i % PALETTE.length];
    out.push(`<line x1="${lx}" y1="${ly - 4}" x2="${lx + 18}" y2="${ly - 4}" stroke="${color}" stroke-width="2"/>`);
    out.push(`<text x="${lx + 23}" y="${ly}">${label}</text>`);
  });

  out.push("</svg>");
  return out.join("\n") + "\n";
}

export interface Bar {
  label: string;
  value: number;
}

export function renderBars(bars: Bar[], layout: FigureLayout): string {
  const width = layout.panelWidth ?? 360;
  const height = layout.panelHeight ?? 240;
  const margin = { left: 64, right: 16, top: 30, bottom: 44 };
  const plotW = width - margin.left - margin.right;
  const plotH = height - margin.top - margin.bottom;
  const vHi = Math.max(...bars.map((b) => b.value)) * 1.08;

  const out: string[] = [];
  out.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" ` +
      `font-family="Helvetica, Arial, sans-serif" font-size="11">`,
  );
  out.push(`<rect width="${width}" height="${height}" fill="white"/>`);
  if (layout.title) {
    out.push(`<text x="${width / 2}" y="16" text-anchor="middle" font-size="13" font-weight="bold">${layout.title}</text>`);
  }
  out.push(`<rect x="${margin.left}" y="${margin.top}" width="${plotW}" height="${plotH}" fill="none" stroke="#444"/>`);
  for (const t of niceTicks(0, vHi)) {
    const y = margin.top + plotH - (t / vHi) * plotH;
    out.push(`<line x1="${margin.left - 4}" y1="${fmt(y)}" x2="${margin.left}" y2="${fmt(y)}" stroke="#444"/>`);
    out.push(`<text x="${margin.left - 7}" y="${fmt(y + 3)}" text-anchor="end">${fmtTick(t)}</text>`);
    out.push(`<line x1="${margin.left}" y1="${fmt(y)}" x2="${margin.left + plotW}" y2="${fmt(y)}" stroke="#ddd"/>`);
  }
  const slot = plotW / bars.length;
  bars.forEach((bar, i) => {
    const bw = slot * 0.55;
    const bx = margin.left + i * slot + (slot - bw) / 2;
    const bh = (bar.value / vHi) * plotH;
    const by = margin.top + plotH - bh;
    out.push(`<rect x="${fmt(bx)}" y="${fmt(by)}" width="${fmt(bw)}" height="${fmt(bh)}" fill="${PALETTE[0]}"/>`);
    out.push(`<text x="${fmt(bx + bw / 2)}" y="${fmt(by - 4)}" text-anchor="middle">${fmtTick(bar.value)}</text>`);
    out.push(`<text x="${fmt(bx + bw / 2)}" y="${margin.top + plotH + 14}" text-anchor="middle">${bar.label}</text>`);
  });
  out.push(`<text x="${margin.left + plotW / 2}" y="${height - 6}" text-anchor="middle">${layout.xLabel}</text>`);
  out.push(
    `<text x="16" y="${margin.top + plotH / 2}" text-anchor="middle" ` +
      `transform="rotate(-90 16 ${margin.top + plotH / 2})">${layout.yLabel}</text>`,
  );
  out.push("</svg>");
  return out.join("\n") + "\n";
}
