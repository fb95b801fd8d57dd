/** View model for the decompression report panel. */

import type { ReportMessage } from "./protocol.js";

export interface ReportRow {
  structure: string; // structure name
  mm3: number;
}

export interface ReportView {
  rows: ReportRow[];
  /** Sum over the per-label voxel counts (removed_voxels is keyed by
   * numeric label id, removed_mm3 by structure name). */
  totalVoxels: number;
  totalMm3: number;
  violationCount: number;
  carveCount: number;
  gridSha256: string;
}

export function buildReportView(msg: ReportMessage): ReportView {
  const rows: ReportRow[] = Object.keys(msg.removed_mm3)
    .sort()
    .map((k) => ({ structure: k, mm3: msg.removed_mm3[k] as number }));
  return {
    rows,
    totalVoxels: Object.values(msg.removed_voxels ?? {})
      .reduce((s, v) => s + v, 0),
    totalMm3: rows.reduce((s, r) => s + r.mm3, 0),
    violationCount: msg.violation_count,
    carveCount: msg.carve_count,
    gridSha256: msg.grid_sha256,
  };
}

export function formatReport(view: ReportView): string {
  const lines = view.rows.map(
    (r) => `${r.structure}: ${r.mm3.toFixed(1)} mm³`,
  );
  lines.push(
    `total: ${view.totalVoxels} voxels (${view.totalMm3.toFixed(1)} mm³)`);
  lines.push(`carves: ${view.carveCount}, violations: ${view.violationCount}`);
  return lines.join("\n");
}
