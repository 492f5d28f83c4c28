/** Dependency-free canvas line chart: step on x, losses/grad norm on a
 * linear left axis, learning rate on a log-scale right axis (it spans
 * decades under double/halve interventions). */

import type { Point } from "./series.js";

export interface ChartSeries {
  label: string;
  color: string;
  points: Point[];
  axis: "left" | "right";
}

export interface Scale {
  (v: number): number;
}

export function linearScale(d0: number, d1: number, r0: number, r1: number): Scale {
  const span = d1 - d0 || 1;
  return (v) => r0 + ((v - d0) / span) * (r1 - r0);
}

export function log10Scale(d0: number, d1: number, r0: number, r1: number): Scale {
  const lo = Math.log10(Math.max(d0, 1e-300));
  const hi = Math.log10(Math.max(d1, 1e-300));
  const span = hi - lo || 1;
  return (v) => r0 + ((Math.log10(Math.max(v, 1e-300)) - lo) / span) * (r1 - r0);
}

export function extent(values: number[]): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  if (lo === Infinity) return [0, 1];
  if (lo === hi) return [lo - 0.5, hi + 0.5];
  return [lo, hi];
}

export function niceTicks(lo: number, hi: number, count = 5): number[] {
  const span = hi - lo;
  if (span <= 0 || !Number.isFinite(span)) return [lo];
  const rawStep = span / count;
  const mag = Math.pow(10, Math.floor(Math.log10(rawStep)));
  const candidates = [1, 2, 5, 10].map((m) => m * mag);
  const step = candidates.find((s) => span / s <= count) ?? candidates[3];
  const start = Math.ceil(lo / step) * step;
  const ticks: number[] = [];
  for (let v = start; v <= hi + 1e-12 * span; v += step) ticks.push(v);
  return ticks;
}

export function formatTick(v: number): string {
  if (v === 0) return "0";
  const abs = Math.abs(v);
  if (abs >= 1e4 || abs < 1e-3) return v.toExponential(1);
  return String(Math.round(v * 1e6) / 1e6);
}

const MARGIN = { top: 12, right: 56, bottom: 26, left: 64 };

export function renderChart(canvas: HTMLCanvasElement, series: ChartSeries[]): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const w = canvas.width;
  const h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  ctx.fillStyle = "#11151c";
  ctx.fillRect(0, 0, w, h);

  const plotted = series.filter((s) => s.points.length > 0);
  if (plotted.length === 0) {
    ctx.fillStyle = "#8899aa";
    ctx.font = "13px sans-serif";
    ctx.fillText("waiting for metrics…", MARGIN.left, h / 2);
    return;
  }

  const x0 = MARGIN.left;
  const x1 = w - MARGIN.right;
  const y0 = h - MARGIN.bottom;
  const y1 = MARGIN.top;

  const steps = plotted.flatMap((s) => s.points.map((p) => p.step));
  const [sLo, sHi] = extent(steps);
  const x = linearScale(sLo, sHi, x0, x1);

  const leftValues = plotted.filter((s) => s.axis === "left").flatMap((s) => s.points.map((p) => p.value));
  const [lLo, lHi] = extent(leftValues);
  const yLeft = linearScale(Math.min(lLo, 0), lHi, y0, y1);

  const rightValues = plotted.filter((s) => s.axis === "right").flatMap((s) => s.points.map((p) => p.value));
  const [rLo, rHi] = extent(rightValues);
  const yRight = log10Scale(rLo, rHi, y0, y1);

  // axes
  ctx.strokeStyle = "#2a3444";
  ctx.fillStyle = "#8899aa";
  ctx.font = "11px sans-serif";
  ctx.beginPath();
  ctx.moveTo(x0, y1);
  ctx.lineTo(x0, y0);
  ctx.lineTo(x1, y0);
  ctx.stroke();
  for (const t of niceTicks(sLo, sHi, 6)) {
    const px = x(t);
    ctx.fillText(formatTick(t), px - 8, y0 + 16);
  }
  if (leftValues.length) {
    for (const t of niceTicks(Math.min(lLo, 0), lHi, 5)) {
      ctx.fillText(formatTick(t), 4, yLeft(t) + 3);
    }
  }
  if (rightValues.length) {
    const decades = niceLogTicks(rLo, rHi);
    for (const t of decades) {
      ctx.fillText(formatTick(t), x1 + 4, yRight(t) + 3);
    }
  }

  for (const s of plotted) {
    const y = s.axis === "left" ? yLeft : yRight;
    ctx.strokeStyle = s.color;
    ctx.lineWidth = 1.4;
    ctx.beginPath();
    s.points.forEach((p, i) => {
      const px = x(p.step);
      const py = y(p.value);
      if (i === 0) ctx.moveTo(px, py);
      else ctx.lineTo(px, py);
    });
    ctx.stroke();
  }

  // legend
  let lx = x0 + 6;
  for (const s of plotted) {
    ctx.fillStyle = s.color;
    ctx.fillRect(lx, y1 + 2, 10, 3);
    ctx.fillStyle = "#c6d0dc";
    ctx.fillText(s.label, lx + 14, y1 + 7);
    lx += 14 + ctx.measureText(s.label).width + 16;
  }
}

export function niceLogTicks(lo: number, hi: number): number[] {
  const a = Math.floor(Math.log10(Math.max(lo, 1e-300)));
  const b = Math.ceil(Math.log10(Math.max(hi, 1e-300)));
  const ticks: number[] = [];
  // Number("1e-5") is exact where Math.pow(10, -5) is off by one ulp
  for (let e = a; e <= b && ticks.length < 12; e++) ticks.push(Number(`1e${e}`));
  return ticks;
}
