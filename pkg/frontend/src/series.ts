/** Per-branch metric series built from the event stream; chart data is
 * exactly the server's metric log (every point kept, no resampling). */

import type { TrainingEvent } from "./protocol.js";

export interface Point {
  step: number;
  value: number;
}

export interface MetricSeries {
  branchId: string;
  trainLoss: Point[];
  valLoss: Point[];
  gradNorm: Point[];
  lr: Point[];
}

function insertOrdered(points: Point[], p: Point): void {
  const last = points[points.length - 1];
  if (!last || p.step >= last.step) {
    points.push(p);
    return;
  }
  // out-of-order arrival: keep step-sorted
  let i = points.length - 1;
  while (i > 0 && points[i - 1].step > p.step) i--;
  points.splice(i, 0, p);
}

export class SeriesStore {
  private byBranch = new Map<string, MetricSeries>();

  branch(branchId: string): MetricSeries {
    let series = this.byBranch.get(branchId);
    if (!series) {
      series = { branchId, trainLoss: [], valLoss: [], gradNorm: [], lr: [] };
      this.byBranch.set(branchId, series);
    }
    return series;
  }

  get(branchId: string): MetricSeries | undefined {
    return this.byBranch.get(branchId);
  }

  branchIds(): string[] {
    return [...this.byBranch.keys()];
  }

  addEvent(event: TrainingEvent): void {
    if (event.event_type === "metric") {
      const p = event.payload;
      const step = typeof p.step === "number" ? p.step : event.step;
      const series = this.branch(event.branch_id);
      if (typeof p.train_loss === "number") insertOrdered(series.trainLoss, { step, value: p.train_loss });
      if (typeof p.grad_norm === "number") insertOrdered(series.gradNorm, { step, value: p.grad_norm });
      if (typeof p.lr === "number") insertOrdered(series.lr, { step, value: p.lr });
    } else if (event.event_type === "evaluation_result") {
      const p = event.payload;
      if (typeof p.val_loss === "number" && typeof p.step === "number") {
        insertOrdered(this.branch(event.branch_id).valLoss, { step: p.step, value: p.val_loss });
      }
    }
  }

  clear(): void {
    this.byBranch.clear();
  }
}
