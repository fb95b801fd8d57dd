/** Slice-panel helpers: URL construction, index clamping, and the mapping
 * from a 3D tool tip to crosshair positions on the three orthogonal
 * panels. */

import type { Vec3 } from "./protocol.js";

export type Axis = "sagittal" | "coronal" | "axial";

export const AXES: Axis[] = ["sagittal", "coronal", "axial"];
const AXIS_INDEX: Record<Axis, number> = { sagittal: 0, coronal: 1, axial: 2 };

export interface SliceRequest {
  axis: Axis;
  index: number;
  volume: "ct" | "mri";
  overlay: boolean;
}

export function clampIndex(index: number, size: number): number {
  if (size <= 0) return 0;
  return Math.min(size - 1, Math.max(0, Math.round(index)));
}

export function sliceUrl(base: string, caseId: string, req: SliceRequest): string {
  const q = new URLSearchParams({
    axis: req.axis,
    index: String(req.index),
    volume: req.volume,
    overlay: req.overlay ? "true" : "false",
  });
  return `${base}/cases/${encodeURIComponent(caseId)}/slices?${q.toString()}`;
}

/** Convert a tip position in mm to a voxel index given mm-per-voxel spacing
 * (the service's models use axis-aligned affines). */
export function tipToVoxel(tip_mm: Vec3, spacing: Vec3, shape: Vec3): Vec3 {
  return [0, 1, 2].map((a) =>
    clampIndex(tip_mm[a as 0 | 1 | 2] / spacing[a as 0 | 1 | 2],
      shape[a as 0 | 1 | 2]),
  ) as Vec3;
}

/** Panel slice indices that keep each panel centred on the tool tip. */
export function panelsForTip(voxel: Vec3): Record<Axis, number> {
  return { sagittal: voxel[0], coronal: voxel[1], axial: voxel[2] };
}

/** In-panel crosshair position (the two axes orthogonal to the panel). */
export function crosshairFor(axis: Axis, voxel: Vec3): [number, number] {
  const others = [0, 1, 2].filter((a) => a !== AXIS_INDEX[axis]) as
    [0 | 1 | 2, 0 | 1 | 2];
  return [voxel[others[0]], voxel[others[1]]];
}
