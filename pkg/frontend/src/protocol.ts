/** Wire types for the rehearsal session websocket (JSON text frames) and
 * byte-level codecs for the base64 geometry payloads. */

export type ToolKind = "burr" | "kerrison" | "woodson" | "rongeur";

export interface ToolSpec {
  kind: ToolKind;
  radius_mm?: number;
  bite_mm?: [number, number, number];
}

export type Vec3 = [number, number, number];

export type AlarmLevel = "none" | "warn" | "danger";

export interface AlarmState {
  level: AlarmLevel;
  distance_mm: number | null;
  structure?: string | null;
}

export interface StructurePatch {
  structure: number;
  name?: string;
  color?: [number, number, number, number];
  vertex_count?: number;
  positions_b64: string;
  indices_b64: string;
}

export interface MeshPatch {
  chunk: [number, number, number];
  structures: StructurePatch[];
}

// client -> server
export type ClientMessage =
  | { type: "tool_select"; seq: number; tool: ToolSpec }
  | { type: "tool_pose"; seq: number; tip_mm: Vec3; direction?: Vec3 }
  | { type: "carve"; seq: number; tip_mm: Vec3; direction?: Vec3; tool?: ToolSpec; active?: boolean }
  | { type: "undo"; seq: number }
  | { type: "visibility"; seq: number; structures: Record<string, boolean> }
  | { type: "isolate"; seq: number; on: boolean }
  | { type: "exposure"; seq: number; levels: number[] }
  | { type: "report"; seq: number }
  | { type: "scene"; seq: number }
  | { type: "scene_checksum"; seq: number };

// server -> client
export interface AckMessage {
  type: "ack";
  seq: number;
  alarm?: AlarmState;
  patches?: MeshPatch[];
  structures?: Record<string, boolean>;
  undone?: boolean;
  scene_sha256?: string;
  [key: string]: unknown;
}

export interface CarveResultMessage {
  type: "carve_result";
  seq: number;
  applied: boolean;
  violation: boolean;
  removed: Record<string, number>;
  alarm: AlarmState;
  patches: MeshPatch[];
}

export interface AlarmMessage extends AlarmState {
  type: "alarm";
}

export interface ReportMessage {
  type: "report";
  seq: number;
  removed_mm3: Record<string, number>;
  removed_voxels: Record<string, number>;
  violation_count: number;
  carve_count: number;
  grid_sha256: string;
}

export interface ErrorMessage {
  type: "error";
  seq: number | null;
  message: string;
}

export type ServerMessage =
  | AckMessage
  | CarveResultMessage
  | AlarmMessage
  | ReportMessage
  | ErrorMessage;

export function parseServerMessage(raw: string): ServerMessage {
  const doc = JSON.parse(raw) as { type?: unknown };
  switch (doc.type) {
    case "ack":
    case "carve_result":
    case "alarm":
    case "report":
    case "error":
      return doc as ServerMessage;
    default:
      throw new Error(`unknown server message type: ${String(doc.type)}`);
  }
}

// ---------------------------------------------------------------------------
// base64 <-> bytes (environment-independent)
// ---------------------------------------------------------------------------

const B64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
const B64_REV: Record<string, number> = {};
for (let i = 0; i < B64.length; i++) B64_REV[B64[i] as string] = i;

export function bytesToBase64(bytes: Uint8Array): string {
  let out = "";
  for (let i = 0; i < bytes.length; i += 3) {
    const a = bytes[i] as number;
    const b = i + 1 < bytes.length ? (bytes[i + 1] as number) : 0;
    const c = i + 2 < bytes.length ? (bytes[i + 2] as number) : 0;
    out += B64[a >> 2];
    out += B64[((a & 3) << 4) | (b >> 4)];
    out += i + 1 < bytes.length ? B64[((b & 15) << 2) | (c >> 6)] : "=";
    out += i + 2 < bytes.length ? B64[c & 63] : "=";
  }
  return out;
}

export function base64ToBytes(s: string): Uint8Array {
  const clean = s.replace(/=+$/, "");
  const out = new Uint8Array(Math.floor((clean.length * 3) / 4));
  let o = 0;
  for (let i = 0; i < clean.length; i += 4) {
    const n =
      ((B64_REV[clean[i] as string] ?? 0) << 18) |
      ((B64_REV[clean[i + 1] as string] ?? 0) << 12) |
      ((B64_REV[clean[i + 2] as string] ?? 0) << 6) |
      (B64_REV[clean[i + 3] as string] ?? 0);
    if (o < out.length) out[o++] = (n >> 16) & 0xff;
    if (o < out.length) out[o++] = (n >> 8) & 0xff;
    if (o < out.length) out[o++] = n & 0xff;
  }
  return out;
}

/** Little-endian float32 positions (xyz triples, mm). */
export function decodePositions(b64: string): Float32Array {
  const bytes = base64ToBytes(b64);
  return new Float32Array(bytes.buffer, bytes.byteOffset, bytes.byteLength / 4);
}

/** Little-endian uint32 triangle index list. */
export function decodeIndices(b64: string): Uint32Array {
  const bytes = base64ToBytes(b64);
  return new Uint32Array(bytes.buffer, bytes.byteOffset, bytes.byteLength / 4);
}

export function encodePositions(a: Float32Array): string {
  return bytesToBase64(new Uint8Array(a.buffer, a.byteOffset, a.byteLength));
}

export function encodeIndices(a: Uint32Array): string {
  return bytesToBase64(new Uint8Array(a.buffer, a.byteOffset, a.byteLength));
}
