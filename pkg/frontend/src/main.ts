// DOM wiring for the drag-authoring editor and the live run console.

import { CanvasDocument, DragKind, PointXY } from "./authoring.js";
import { expectedPointCount, LossSeries, renderChart } from "./chart.js";
import { EventBuffer, RunEvent, ServiceClient, driveRun } from "./client.js";
import { renderOverlays } from "./overlay.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el as T;
};

type Tool = "region-brush" | "region-erase" | "region-fill" | "mask-brush"
  | "mask-erase" | "mask-fill" | "point-h" | "point-g" | "point-c";

let doc: CanvasDocument | null = null;
let tool: Tool = "region-brush";
let brushSize = 6;
let scale = 6;
let running = false;
let cancelRequested: (() => void) | null = null;

const editorCanvas = $("editor") as unknown as HTMLCanvasElement;
const overlayCanvas = $("run-overlay") as unknown as HTMLCanvasElement;
const chartCanvas = $("chart") as unknown as HTMLCanvasElement;
const statusLine = $("status");
const problemsBox = $("problems");

function setStatus(text: string) {
  statusLine.textContent = text;
}

// --- image loading ---------------------------------------------------------

$("file").addEventListener("change", async (ev) => {
  const input = ev.target as HTMLInputElement;
  const file = input.files?.[0];
  if (!file) return;
  const bytes = new Uint8Array(await file.arrayBuffer());
  const bitmap = await createImageBitmap(new Blob([bytes], { type: file.type }));
  doc = new CanvasDocument(bytes, bitmap.width, bitmap.height);
  scale = Math.max(1, Math.floor(512 / Math.max(bitmap.width, bitmap.height)));
  for (const canvas of [editorCanvas, overlayCanvas]) {
    canvas.width = bitmap.width * scale;
    canvas.height = bitmap.height * scale;
  }
  (window as any)._bitmap = bitmap;
  redraw();
  setStatus(`loaded ${file.name} (${bitmap.width}x${bitmap.height})`);
});

// --- drawing ---------------------------------------------------------------

function redraw() {
  if (!doc) return;
  const ctx = editorCanvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, editorCanvas.width, editorCanvas.height);
  const bitmap = (window as any)._bitmap as ImageBitmap;
  ctx.drawImage(bitmap, 0, 0, editorCanvas.width, editorCanvas.height);

  paintLayer(ctx, doc.uneditable, [200, 60, 60, 90]);
  doc.instructions.forEach((inst, i) => {
    const alpha = i === doc!.active ? 120 : 60;
    paintLayer(ctx, inst.region, [80, 170, 255, alpha]);
  });

  const inst = doc.instructions[doc.active];
  drawPoint(ctx, inst.handle, "#ffd24a", "h");
  drawPoint(ctx, inst.target, "#6dff8a", "g");
  if (inst.kind === "rotation") drawPoint(ctx, inst.center, "#ff7ad9", "c");
  if (inst.handle && inst.target) {
    ctx.strokeStyle = "rgba(255,255,255,0.6)";
    ctx.setLineDash([4, 4]);
    ctx.beginPath();
    ctx.moveTo((inst.handle.x + 0.5) * scale, (inst.handle.y + 0.5) * scale);
    ctx.lineTo((inst.target.x + 0.5) * scale, (inst.target.y + 0.5) * scale);
    ctx.stroke();
    ctx.setLineDash([]);
  }
  refreshProblems();
}

function paintLayer(ctx: CanvasRenderingContext2D, layer: Uint8Array,
                    rgba: [number, number, number, number]) {
  if (!doc) return;
  const { width, height } = doc;
  const pixels = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < layer.length; i++) {
    if (layer[i]) {
      pixels[i * 4] = rgba[0];
      pixels[i * 4 + 1] = rgba[1];
      pixels[i * 4 + 2] = rgba[2];
      pixels[i * 4 + 3] = rgba[3];
    }
  }
  const off = new OffscreenCanvas(width, height);
  off.getContext("2d")!.putImageData(new ImageData(pixels, width, height), 0, 0);
  ctx.drawImage(off, 0, 0, width * scale, height * scale);
}

function drawPoint(ctx: CanvasRenderingContext2D, p: PointXY | null,
                   color: string, label: string) {
  if (!p) return;
  const x = (p.x + 0.5) * scale;
  const y = (p.y + 0.5) * scale;
  ctx.fillStyle = color;
  ctx.beginPath();
  ctx.arc(x, y, 5, 0, Math.PI * 2);
  ctx.fill();
  ctx.fillStyle = "#000";
  ctx.font = "bold 9px system-ui";
  ctx.fillText(label, x - 3, y + 3);
}

function refreshProblems() {
  if (!doc) return;
  const problems = doc.problems();
  problemsBox.textContent = problems.length ? problems.join("\n") : "ready";
  problemsBox.className = problems.length ? "problems bad" : "problems good";
  ($("run-btn") as HTMLButtonElement).disabled = problems.length > 0 || running;
}

// --- editing interactions ----------------------------------------------------

function canvasPixel(ev: MouseEvent): PointXY {
  const rect = editorCanvas.getBoundingClientRect();
  return {
    x: Math.floor((ev.clientX - rect.left) / scale),
    y: Math.floor((ev.clientY - rect.top) / scale),
  };
}

let painting = false;

editorCanvas.addEventListener("mousedown", (ev) => {
  if (!doc) return;
  const p = canvasPixel(ev);
  const inst = doc.instructions[doc.active];
  switch (tool) {
    case "point-h":
      inst.handle = p;
      break;
    case "point-g":
      inst.target = p;
      break;
    case "point-c":
      if (inst.kind === "rotation") inst.center = p;
      break;
    case "region-fill":
      doc.floodFill("region", p.x, p.y, true);
      break;
    case "mask-fill":
      doc.floodFill("uneditable", p.x, p.y, true);
      break;
    default:
      painting = true;
      applyBrush(p);
  }
  redraw();
});

editorCanvas.addEventListener("mousemove", (ev) => {
  if (!painting || !doc) return;
  applyBrush(canvasPixel(ev));
  redraw();
});

window.addEventListener("mouseup", () => {
  painting = false;
});

function applyBrush(p: PointXY) {
  if (!doc) return;
  switch (tool) {
    case "region-brush":
      doc.paintBrush("region", p.x, p.y, brushSize, true);
      break;
    case "region-erase":
      doc.paintBrush("region", p.x, p.y, brushSize, false);
      break;
    case "mask-brush":
      doc.paintBrush("uneditable", p.x, p.y, brushSize, true);
      break;
    case "mask-erase":
      doc.paintBrush("uneditable", p.x, p.y, brushSize, false);
      break;
  }
}

document.querySelectorAll("[data-tool]").forEach((button) => {
  button.addEventListener("click", () => {
    tool = (button as HTMLElement).dataset.tool as Tool;
    document.querySelectorAll("[data-tool]").forEach((b) => b.classList.remove("on"));
    button.classList.add("on");
  });
});

$("brush-size").addEventListener("input", (ev) => {
  brushSize = parseInt((ev.target as HTMLInputElement).value, 10);
});

($("drag-kind") as HTMLSelectElement).addEventListener("change", (ev) => {
  if (!doc) return;
  const kind = (ev.target as HTMLSelectElement).value as DragKind;
  const inst = doc.instructions[doc.active];
  inst.kind = kind;
  if (kind !== "rotation") inst.center = null;
  $("center-tool").style.display = kind === "rotation" ? "" : "none";
  redraw();
});

$("add-instruction").addEventListener("click", () => {
  if (!doc) return;
  doc.addInstruction(($("drag-kind") as HTMLSelectElement).value as DragKind);
  rebuildInstructionList();
  redraw();
});

function rebuildInstructionList() {
  if (!doc) return;
  const list = $("instruction-list");
  list.innerHTML = "";
  doc.instructions.forEach((inst, i) => {
    const item = document.createElement("button");
    item.textContent = `${i + 1}: ${inst.kind}`;
    item.className = i === doc!.active ? "on" : "";
    item.addEventListener("click", () => {
      doc!.active = i;
      ($("drag-kind") as HTMLSelectElement).value = inst.kind;
      rebuildInstructionList();
      redraw();
    });
    list.appendChild(item);
  });
}

// parameter panel
const paramFields: Array<[string, keyof typeof DEFAULTS]> = [
  ["p-tmax", "t_max"], ["p-strength", "strength"], ["p-tprime", "t_prime"],
  ["p-bigk", "big_k"], ["p-step", "step_size"], ["p-lambda", "lambda_m"],
];
const DEFAULTS = { t_max: 0, strength: 0, t_prime: 0, big_k: 0, step_size: 0, lambda_m: 0 };

for (const [id, key] of paramFields) {
  $(id).addEventListener("change", (ev) => {
    if (!doc) return;
    const raw = parseFloat((ev.target as HTMLInputElement).value);
    if (Number.isFinite(raw)) {
      (doc.params as any)[key] = ["t_max", "t_prime", "big_k"].includes(key)
        ? Math.round(raw) : raw;
    }
    refreshProblems();
  });
}

// --- running -----------------------------------------------------------------

$("run-btn").addEventListener("click", async () => {
  if (!doc || running) return;
  running = true;
  refreshProblems();
  const base = ($("service-url") as HTMLInputElement).value.replace(/\/$/, "");
  const client = new ServiceClient(base);
  const buffer = new EventBuffer();
  const series = new LossSeries();
  const params = doc.params;
  const tBig = Math.floor(Math.abs(params.t_max * params.strength) + 0.5);
  const total = expectedPointCount(tBig, params.t_prime, params.big_k);
  ($("cancel-btn") as HTMLButtonElement).disabled = false;

  const overlayCtx = overlayCanvas.getContext("2d")!;
  const chartCtx = chartCanvas.getContext("2d")!;

  try {
    const specJson = doc.serialize();
    const result = await driveRun(
      client, doc.pngBytes, specJson,
      {
        denoiser: ($("c-denoiser") as HTMLSelectElement).value,
        extractor: ($("c-extractor") as HTMLSelectElement).value,
        codec: ($("c-codec") as HTMLSelectElement).value,
      },
      buffer,
      {
        onCreated(id: string) {
          cancelRequested = () => {
            client.cancel(id).catch((err) => setStatus(`cancel failed: ${err}`));
          };
        },
        onEvents(events: RunEvent[]) {
          series.addEvents(events);
          const last = events[events.length - 1];
          setStatus(`t=${last.t} k=${last.k} loss=${last.loss.toFixed(3)} `
            + `eta=${last.eta.toFixed(3)} (${series.count}/${total})`);
          if (last.rho_preview) {
            overlayCtx.clearRect(0, 0, overlayCanvas.width, overlayCanvas.height);
            renderOverlays(overlayCtx, last.rho_preview, scale);
          }
          renderChart(chartCtx, series, chartCanvas.width, chartCanvas.height, total);
        },
        onState(state: string, error: string | null) {
          setStatus(error ? `${state}: ${error}` : state);
        },
      },
    );
    if (result.state === "done" || result.state === "cancelled") {
      const png = await client.fetchResultPng(result.id);
      const blob = new Blob([png.buffer as ArrayBuffer], { type: "image/png" });
      const url = URL.createObjectURL(blob);
      const link = $("download") as HTMLAnchorElement;
      link.href = url;
      link.download = "edited.png";
      link.style.display = "";
      const img = $("result-img") as HTMLImageElement;
      img.src = url;
      img.style.display = "";
      setStatus(`${result.state}: ${series.count}/${total} iterations`);
    }
  } catch (err) {
    setStatus(`error: ${err instanceof Error ? err.message : err}`);
  } finally {
    running = false;
    cancelRequested = null;
    ($("cancel-btn") as HTMLButtonElement).disabled = true;
    refreshProblems();
  }
});

$("cancel-btn").addEventListener("click", () => {
  cancelRequested?.();
});

rebuildInstructionList();
setStatus("load an image to begin");
