// Loss-curve series and a minimal canvas renderer. Series assembly is
// pure so the point count can be checked against the run's iteration
// budget without a DOM.

import { RunEvent } from "./client.js";

export interface ChartPoint {
  index: number;
  t: number;
  k: number;
  loss: number;
  eta: number;
}

export class LossSeries {
  readonly points: ChartPoint[] = [];

  addEvents(events: RunEvent[]): void {
    for (const e of events) {
      this.points.push({ index: e.index, t: e.t, k: e.k, loss: e.loss, eta: e.eta });
    }
  }

  get count(): number {
    return this.points.length;
  }

  maxLoss(): number {
    let max = 0;
    for (const p of this.points) max = Math.max(max, p.loss);
    return max;
  }

  // timestep boundaries (first point index per t) for axis ticks
  timestepStarts(): ChartPoint[] {
    const out: ChartPoint[] = [];
    let last: number | null = null;
    for (const p of this.points) {
      if (p.t !== last) {
        out.push(p);
        last = p.t;
      }
    }
    return out;
  }
}

// iterations one full run emits: K per timestep, window inclusive of both ends
export function expectedPointCount(tBig: number, tPrime: number, bigK: number): number {
  return bigK * (tBig - tPrime + 1);
}

export function renderChart(ctx: CanvasRenderingContext2D, series: LossSeries,
                            width: number, height: number, total: number): void {
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#16181d";
  ctx.fillRect(0, 0, width, height);
  if (!series.count) return;
  const pad = 24;
  const plotW = width - 2 * pad;
  const plotH = height - 2 * pad;
  const maxLoss = Math.max(series.maxLoss(), 1e-9);
  const denom = Math.max(total - 1, 1);

  ctx.strokeStyle = "#3a3f4a";
  ctx.strokeRect(pad, pad, plotW, plotH);

  ctx.strokeStyle = "#2a2e36";
  for (const tick of series.timestepStarts()) {
    const x = pad + (tick.index / denom) * plotW;
    ctx.beginPath();
    ctx.moveTo(x, pad);
    ctx.lineTo(x, pad + plotH);
    ctx.stroke();
  }

  ctx.strokeStyle = "#6fb3ff";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  series.points.forEach((p, i) => {
    const x = pad + (p.index / denom) * plotW;
    const y = pad + plotH - (p.loss / maxLoss) * plotH;
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();

  ctx.fillStyle = "#9aa3b2";
  ctx.font = "11px system-ui, sans-serif";
  ctx.fillText(`loss max ${maxLoss.toFixed(3)}`, pad + 4, pad + 12);
  ctx.fillText(`${series.count}/${total} iterations`, pad + 4, height - 8);
}
