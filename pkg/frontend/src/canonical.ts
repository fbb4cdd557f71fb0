// Canonical instruction-document serialization, byte-compatible with the
// engine's serializer: keys sorted, compact separators, integral reals
// emitted as integers, UTF-8 as-is. A document authored here and the same
// content serialized server-side must produce identical bytes.

export interface InstructionDoc {
  type: "translation" | "deformation" | "rotation";
  handle_region: string; // RLE
  handle: [number, number];
  target: [number, number];
  center?: [number, number];
}

export interface ParamsDoc {
  t_max: number;
  strength: number;
  t_prime: number;
  big_k: number;
  step_size: number;
  lambda_m: number;
  optimizer: "adam" | "plain";
  adam_beta1: number;
  adam_beta2: number;
  adam_eps: number;
}

export interface SpecDoc {
  image: string; // "base64:..." or a path
  uneditable_mask: string; // RLE or a path
  instructions: InstructionDoc[];
  params: ParamsDoc;
  intent_note?: string;
}

export const DEFAULT_PARAMS: ParamsDoc = {
  t_max: 50,
  strength: 0.75,
  t_prime: 33,
  big_k: 10,
  step_size: 2e-2,
  lambda_m: 1.0,
  optimizer: "adam",
  adam_beta1: 0.9,
  adam_beta2: 0.999,
  adam_eps: 1e-8,
};

// The engine formats non-integral reals like Python's repr: shortest
// round-trip digits, fixed notation down to 1e-4, scientific below that
// with a sign and at least two exponent digits.
export function formatNumber(v: number): string {
  if (!Number.isFinite(v)) {
    throw new Error(`non-finite number ${v} cannot be serialized`);
  }
  if (Number.isInteger(v) && Math.abs(v) < 2 ** 53) {
    // -0 normalizes to 0
    return String(v === 0 ? 0 : v);
  }
  const exponential = v.toExponential(); // shortest mantissa
  const [mantissa, expPart] = exponential.split("e");
  const exp = parseInt(expPart, 10);
  if (exp < -4) {
    const sign = exp < 0 ? "-" : "+";
    const digits = String(Math.abs(exp)).padStart(2, "0");
    return `${mantissa}e${sign}${digits}`;
  }
  return String(v);
}

function serializeValue(value: unknown): string {
  if (value === null) return "null";
  if (typeof value === "boolean") return value ? "true" : "false";
  if (typeof value === "number") return formatNumber(value);
  if (typeof value === "string") return JSON.stringify(value);
  if (Array.isArray(value)) {
    return "[" + value.map(serializeValue).join(",") + "]";
  }
  if (typeof value === "object") {
    const obj = value as Record<string, unknown>;
    const keys = Object.keys(obj)
      .filter((k) => obj[k] !== undefined)
      .sort();
    const parts = keys.map((k) => JSON.stringify(k) + ":" + serializeValue(obj[k]));
    return "{" + parts.join(",") + "}";
  }
  throw new Error(`cannot serialize ${typeof value}`);
}

export function serializeSpec(doc: SpecDoc): string {
  return serializeValue(doc);
}

// ---------------------------------------------------------------------------
// run-length mask codec: "WxH:" then comma-separated runs alternating 0/1,
// starting with a zero run, row-major

export function maskToRle(bits: Uint8Array, width: number, height: number): string {
  if (bits.length !== width * height) {
    throw new Error(`mask size ${bits.length} != ${width}x${height}`);
  }
  const runs: number[] = [];
  let current = 0;
  let count = 0;
  for (let i = 0; i < bits.length; i++) {
    const v = bits[i] ? 1 : 0;
    if (v === current) {
      count++;
    } else {
      runs.push(count);
      current = v;
      count = 1;
    }
  }
  runs.push(count);
  return `${width}x${height}:` + runs.join(",");
}

export function rleToMask(text: string): { bits: Uint8Array; width: number; height: number } {
  const sep = text.indexOf(":");
  if (sep < 0) throw new Error(`bad RLE: ${text.slice(0, 32)}`);
  const header = text.slice(0, sep);
  const [w, h] = header.toLowerCase().split("x").map((s) => parseInt(s, 10));
  if (!Number.isInteger(w) || !Number.isInteger(h) || w < 1 || h < 1) {
    throw new Error(`bad RLE dimensions in ${header}`);
  }
  const body = text.slice(sep + 1);
  const runs = body.length ? body.split(",").map((s) => parseInt(s, 10)) : [];
  let total = 0;
  for (const r of runs) {
    if (!Number.isInteger(r) || r < 0) throw new Error("bad run length");
    total += r;
  }
  if (total !== w * h) throw new Error(`RLE runs sum to ${total}, expected ${w * h}`);
  const bits = new Uint8Array(w * h);
  let pos = 0;
  let value = 0;
  for (const r of runs) {
    if (value) bits.fill(1, pos, pos + r);
    pos += r;
    value = value ? 0 : 1;
  }
  return { bits, width: w, height: h };
}

// ---------------------------------------------------------------------------

export function bytesToBase64(bytes: Uint8Array): string {
  // chunked to stay under argument limits
  let binary = "";
  const chunk = 0x8000;
  for (let i = 0; i < bytes.length; i += chunk) {
    binary += String.fromCharCode(...bytes.subarray(i, i + chunk));
  }
  return btoa(binary);
}

export function imagePayload(pngBytes: Uint8Array): string {
  return "base64:" + bytesToBase64(pngBytes);
}
