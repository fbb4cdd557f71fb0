// Authoring state for one drag-editing job: the loaded image, the
// uneditable-mask paint layer, one handle-region layer per instruction,
// point handles, and parameters. Pure state + operations; the canvas
// bindings live in main.ts.

import {
  DEFAULT_PARAMS,
  InstructionDoc,
  ParamsDoc,
  SpecDoc,
  imagePayload,
  maskToRle,
  serializeSpec,
} from "./canonical.js";

export type DragKind = "translation" | "deformation" | "rotation";

export interface PointXY {
  x: number;
  y: number;
}

export interface DraftInstruction {
  kind: DragKind;
  region: Uint8Array; // width*height paint layer
  handle: PointXY | null;
  target: PointXY | null;
  center: PointXY | null;
}

export class CanvasDocument {
  readonly width: number;
  readonly height: number;
  readonly pngBytes: Uint8Array;
  uneditable: Uint8Array;
  instructions: DraftInstruction[] = [];
  active = 0; // index of the instruction being edited
  params: ParamsDoc = { ...DEFAULT_PARAMS };
  intentNote = "";

  constructor(pngBytes: Uint8Array, width: number, height: number) {
    if (width < 8 || height < 8) {
      throw new Error(`image must be at least 8x8, got ${width}x${height}`);
    }
    this.width = width;
    this.height = height;
    this.pngBytes = pngBytes;
    this.uneditable = new Uint8Array(width * height);
    this.addInstruction();
  }

  addInstruction(kind: DragKind = "translation"): DraftInstruction {
    const inst: DraftInstruction = {
      kind,
      region: new Uint8Array(this.width * this.height),
      handle: null,
      target: null,
      center: null,
    };
    this.instructions.push(inst);
    this.active = this.instructions.length - 1;
    return inst;
  }

  removeInstruction(index: number): void {
    if (this.instructions.length <= 1) return;
    this.instructions.splice(index, 1);
    this.active = Math.min(this.active, this.instructions.length - 1);
  }

  // --- painting -----------------------------------------------------------

  private layer(target: "uneditable" | "region"): Uint8Array {
    return target === "uneditable" ? this.uneditable : this.instructions[this.active].region;
  }

  paintBrush(target: "uneditable" | "region", cx: number, cy: number,
             radius: number, value: boolean): void {
    const layer = this.layer(target);
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(cx - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
    const y0 = Math.max(0, Math.floor(cy - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) layer[y * this.width + x] = value ? 1 : 0;
      }
    }
  }

  paintRect(target: "uneditable" | "region", x0: number, y0: number,
            x1: number, y1: number, value: boolean): void {
    const layer = this.layer(target);
    const xa = Math.max(0, Math.min(x0, x1));
    const xb = Math.min(this.width - 1, Math.max(x0, x1));
    const ya = Math.max(0, Math.min(y0, y1));
    const yb = Math.min(this.height - 1, Math.max(y0, y1));
    for (let y = ya; y <= yb; y++) {
      layer.fill(value ? 1 : 0, y * this.width + xa, y * this.width + xb + 1);
    }
  }

  fillAll(target: "uneditable" | "region", value: boolean): void {
    this.layer(target).fill(value ? 1 : 0);
  }

  floodFill(target: "uneditable" | "region", sx: number, sy: number, value: boolean): void {
    const layer = this.layer(target);
    const w = this.width;
    const h = this.height;
    if (sx < 0 || sy < 0 || sx >= w || sy >= h) return;
    const from = layer[sy * w + sx];
    const to = value ? 1 : 0;
    if (from === to) return;
    const stack = [sy * w + sx];
    while (stack.length) {
      const idx = stack.pop()!;
      if (layer[idx] !== from) continue;
      layer[idx] = to;
      const x = idx % w;
      if (x > 0) stack.push(idx - 1);
      if (x < w - 1) stack.push(idx + 1);
      if (idx >= w) stack.push(idx - w);
      if (idx < w * (h - 1)) stack.push(idx + w);
    }
  }

  // --- validation ---------------------------------------------------------

  problems(): string[] {
    const out: string[] = [];
    for (let i = 0; i < this.instructions.length; i++) {
      const inst = this.instructions[i];
      const label = `instruction ${i + 1}`;
      if (!inst.region.some((v) => v)) out.push(`${label}: paint a handle region`);
      if (!inst.handle) out.push(`${label}: place the handle point`);
      if (!inst.target) out.push(`${label}: place the target point`);
      if (inst.kind === "rotation" && !inst.center) {
        out.push(`${label}: rotation needs a center point`);
      }
      if (inst.kind !== "rotation" && inst.center) {
        out.push(`${label}: only rotations take a center point`);
      }
      if (inst.handle && inst.region.some((v) => v)) {
        // handle must sit on (or within 2 px of) the painted region
        let near = false;
        const hx = Math.round(inst.handle.x);
        const hy = Math.round(inst.handle.y);
        for (let dy = -2; dy <= 2 && !near; dy++) {
          for (let dx = -2; dx <= 2 && !near; dx++) {
            const x = hx + dx;
            const y = hy + dy;
            if (x >= 0 && y >= 0 && x < this.width && y < this.height &&
                inst.region[y * this.width + x]) {
              near = true;
            }
          }
        }
        if (!near) out.push(`${label}: handle point is off its region`);
      }
      for (const [name, p] of [["handle", inst.handle], ["target", inst.target],
                               ["center", inst.center]] as const) {
        if (p && (p.x < 0 || p.y < 0 || p.x >= this.width || p.y >= this.height)) {
          out.push(`${label}: ${name} point is outside the image`);
        }
      }
    }
    if (this.params.big_k < 1) out.push("params: iterations per timestep must be >= 1");
    if (this.params.step_size <= 0) out.push("params: step size must be positive");
    const t = Math.floor(Math.abs(this.params.t_max * this.params.strength) + 0.5);
    if (t <= this.params.t_prime) {
      out.push("params: round(t_max*strength) must exceed t_prime");
    }
    return out;
  }

  // --- document -----------------------------------------------------------

  toDoc(): SpecDoc {
    const problems = this.problems();
    if (problems.length) {
      throw new Error("document not ready: " + problems.join("; "));
    }
    const instructions: InstructionDoc[] = this.instructions.map((inst) => {
      const entry: InstructionDoc = {
        type: inst.kind,
        handle_region: maskToRle(inst.region, this.width, this.height),
        handle: [inst.handle!.x, inst.handle!.y],
        target: [inst.target!.x, inst.target!.y],
      };
      if (inst.kind === "rotation") {
        entry.center = [inst.center!.x, inst.center!.y];
      }
      return entry;
    });
    const doc: SpecDoc = {
      image: imagePayload(this.pngBytes),
      uneditable_mask: maskToRle(this.uneditable, this.width, this.height),
      instructions,
      params: { ...this.params },
    };
    if (this.intentNote.trim().length) doc.intent_note = this.intentNote;
    return doc;
  }

  serialize(): string {
    return serializeSpec(this.toDoc());
  }
}
