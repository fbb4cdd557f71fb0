// End-to-end checks against the real engine service:
//  - a UI-authored document is byte-identical to the engine's canonical
//    serialization of the same content;
//  - running it through the service reproduces the CLI result bit for bit;
//  - live run events decode to pixel-identical region overlays and the
//    loss chart sees exactly one point per iteration.

import { spawn, spawnSync, ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { CanvasDocument } from "../src/authoring.js";
import { expectedPointCount, LossSeries } from "../src/chart.js";
import { EventBuffer, RunEvent, ServiceClient, driveRun } from "../src/client.js";
import { decodeOverlay, overlayPixels, pixelsToMask, REGION_COLORS } from "../src/overlay.js";

const here = dirname(fileURLToPath(import.meta.url));
const fixtures = join(here, "fixtures");
const repoRoot = join(here, "..", "..");
const PY = process.env.PYTHON ?? "python3";

const PORT = 18000 + Math.floor(Math.random() * 2000);
const BASE = `http://127.0.0.1:${PORT}`;

let server: ChildProcess;
let work: string;

function authorBlobTranslation(): CanvasDocument {
  const png = new Uint8Array(readFileSync(join(fixtures, "image64.png")));
  const doc = new CanvasDocument(png, 64, 64);
  // handle region: the bright square plus its trailing background
  doc.paintRect("region", 4, 28, 23, 35, true);
  doc.instructions[0].handle = { x: 20, y: 32 };
  doc.instructions[0].target = { x: 30, y: 32 };
  doc.params = {
    ...doc.params,
    t_prime: 36,
    big_k: 4,
    step_size: 0.1,
  };
  return doc;
}

beforeAll(async () => {
  work = mkdtempSync(join(tmpdir(), "latentdrag-ui-"));
  server = spawn(PY, ["-m", "latentdrag.cli", "serve", "--port", String(PORT),
                      "--workers", "1"],
                 { cwd: repoRoot, env: { ...process.env, PYTHONPATH: "src" } });
  const deadline = Date.now() + 30_000;
  for (;;) {
    try {
      const r = await fetch(`${BASE}/healthz`);
      if (r.ok) break;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) throw new Error("service never became healthy");
    await new Promise((r) => setTimeout(r, 150));
  }
}, 40_000);

afterAll(() => {
  server?.kill("SIGTERM");
});

describe("spec fidelity (S1)", () => {
  it("UI-authored document matches the engine's canonical bytes", () => {
    const doc = authorBlobTranslation();
    const uiBytes = doc.serialize();
    const specPath = join(work, "authored.json");
    writeFileSync(specPath, uiBytes);
    const py = spawnSync(PY, ["-c", `
import sys
from latentdrag.instruction import parse_spec, serialize_spec
text = open(sys.argv[1], encoding="utf-8").read()
out = serialize_spec(parse_spec(text))
sys.stdout.write("same" if out == text else "different")
`, specPath], { cwd: repoRoot, env: { ...process.env, PYTHONPATH: "src" }, encoding: "utf-8" });
    expect(py.stderr).toBe("");
    expect(py.stdout).toBe("same");
  });

  it("service run reproduces the CLI result bit-identically", async () => {
    const doc = authorBlobTranslation();
    const specJson = doc.serialize();
    const specPath = join(work, "s1.json");
    writeFileSync(specPath, specJson);

    const cliOut = join(work, "cli.png");
    const cli = spawnSync(PY, ["-m", "latentdrag.cli", "run",
                               "--image", join(fixtures, "image64.png"),
                               "--spec", specPath, "--out", cliOut, "--seed", "0"],
                          { cwd: repoRoot, env: { ...process.env, PYTHONPATH: "src" },
                            encoding: "utf-8" });
    expect(cli.status).toBe(0);

    const client = new ServiceClient(BASE);
    const buffer = new EventBuffer();
    const outcome = await driveRun(client, doc.pngBytes, specJson, {}, buffer);
    expect(outcome.state).toBe("done");
    const servicePng = await client.fetchResultPng(outcome.id);
    const cliPng = new Uint8Array(readFileSync(cliOut));
    expect(Buffer.from(servicePng).equals(Buffer.from(cliPng))).toBe(true);
  }, 120_000);
});

describe("run console fidelity (S2)", () => {
  it("overlays decode pixel-identically and the chart counts every iteration", async () => {
    const doc = authorBlobTranslation();
    const client = new ServiceClient(BASE);
    const buffer = new EventBuffer();
    const series = new LossSeries();
    const overlayChecks: Array<{ rle: string }> = [];
    const outcome = await driveRun(client, doc.pngBytes, doc.serialize(), {}, buffer, {
      onEvents(events: RunEvent[]) {
        series.addEvents(events);
        for (const e of events) {
          if (e.rho_preview) overlayChecks.push({ rle: e.rho_preview[0] });
        }
      },
    });
    expect(outcome.state).toBe("done");

    const tBig = Math.floor(Math.abs(doc.params.t_max * doc.params.strength) + 0.5);
    const total = expectedPointCount(tBig, doc.params.t_prime, doc.params.big_k);
    expect(series.count).toBe(total);
    expect(buffer.events.map((e) => e.index)).toEqual(
      Array.from({ length: total }, (_, i) => i));

    expect(overlayChecks.length).toBe(total);
    for (const { rle } of overlayChecks) {
      const decoded = decodeOverlay(rle);
      expect(decoded.width).toBe(64);
      expect(decoded.height).toBe(64);
      const pixels = overlayPixels(decoded.bits, 64, 64, REGION_COLORS[0]);
      // the rendered overlay is on exactly the event's region pixels
      expect(Array.from(pixelsToMask(pixels))).toEqual(Array.from(decoded.bits));
      expect(decoded.bits.some((v) => v)).toBe(true);
    }
    // the drag fraction advances, so the final region differs from the first
    const first = decodeOverlay(overlayChecks[0].rle).bits;
    const last = decodeOverlay(overlayChecks[overlayChecks.length - 1].rle).bits;
    expect(Array.from(last)).not.toEqual(Array.from(first));
  }, 120_000);
});
