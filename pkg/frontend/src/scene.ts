/** Client-side mirror of the server's chunked scene geometry.
 *
 * The server sends replacement patches per 16-cell chunk; applying each
 * patch wholesale (replace, never merge) keeps the mirror bit-exact with
 * the server state, which `checksum()` verifies by reproducing the
 * server's canonical scene digest.
 */

import type { MeshPatch, StructurePatch } from "./protocol.js";
import { decodeIndices, decodePositions } from "./protocol.js";
import { sha256Hex } from "./sha256.js";

export interface StructureMesh {
  structure: number;
  name: string;
  color: [number, number, number, number];
  positions: Float32Array;
  indices: Uint32Array;
  /** Original wire payloads, kept verbatim so re-encoding can never drift. */
  positionsB64: string;
  indicesB64: string;
}

export interface ChunkState {
  key: [number, number, number];
  structures: Map<number, StructureMesh>;
}

export interface StructureInfo {
  structure: number;
  name: string;
  color: [number, number, number, number];
}

function chunkId(key: [number, number, number]): string {
  return `${key[0]},${key[1]},${key[2]}`;
}

function toMesh(p: StructurePatch): StructureMesh {
  return {
    structure: p.structure,
    name: p.name ?? String(p.structure),
    color: p.color ?? [0.8, 0.8, 0.8, 1.0],
    positions: decodePositions(p.positions_b64),
    indices: decodeIndices(p.indices_b64),
    positionsB64: p.positions_b64,
    indicesB64: p.indices_b64,
  };
}

export class ClientSceneState {
  readonly chunks = new Map<string, ChunkState>();
  readonly visibility = new Map<number, boolean>();
  lastAckedSeq = -1;
  /** Chunk ids touched since the renderer last synced. */
  readonly dirty = new Set<string>();

  applyPatches(patches: MeshPatch[]): void {
    for (const patch of patches) {
      const key = patch.chunk;
      const id = chunkId(key);
      if (patch.structures.length === 0) {
        this.chunks.delete(id);
      } else {
        const structures = new Map<number, StructureMesh>();
        for (const s of patch.structures) {
          const mesh = toMesh(s);
          structures.set(mesh.structure, mesh);
          if (!this.visibility.has(mesh.structure)) {
            this.visibility.set(mesh.structure, true);
          }
        }
        this.chunks.set(id, { key: [...key], structures });
      }
      this.dirty.add(id);
    }
  }

  setVisibility(updates: Record<string, boolean>): void {
    for (const [label, on] of Object.entries(updates)) {
      this.visibility.set(Number(label), on);
    }
  }

  isVisible(structure: number): boolean {
    return this.visibility.get(structure) ?? true;
  }

  /** Distinct structures present anywhere in the scene, ascending by id. */
  structures(): StructureInfo[] {
    const seen = new Map<number, StructureInfo>();
    for (const chunk of this.chunks.values()) {
      for (const m of chunk.structures.values()) {
        if (!seen.has(m.structure)) {
          seen.set(m.structure, {
            structure: m.structure, name: m.name, color: m.color,
          });
        }
      }
    }
    return [...seen.values()].sort((a, b) => a.structure - b.structure);
  }

  /** Canonical digest of the mirrored geometry.
   *
   * Must match the server byte for byte: chunks in ascending (i, j, k)
   * order, structures ascending, structures with no triangles skipped,
   * one line per structure carrying the base64 payloads, lines joined by
   * "\n", sha256 over UTF-8.
   */
  checksum(): string {
    const keys = [...this.chunks.values()]
      .map((c) => c.key)
      .sort((a, b) => a[0] - b[0] || a[1] - b[1] || a[2] - b[2]);
    const lines: string[] = [];
    for (const key of keys) {
      const chunk = this.chunks.get(chunkId(key));
      if (!chunk) continue;
      const labels = [...chunk.structures.keys()].sort((a, b) => a - b);
      for (const label of labels) {
        const m = chunk.structures.get(label) as StructureMesh;
        if (m.indices.length === 0) continue;
        lines.push(
          `chunk=${key[0]},${key[1]},${key[2]};structure=${label};` +
          `positions=${m.positionsB64};indices=${m.indicesB64}`,
        );
      }
    }
    return sha256Hex(lines.join("\n"));
  }
}
