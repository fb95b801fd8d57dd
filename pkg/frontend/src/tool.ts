/** Pointer-to-tool mapping and message throttling.
 *
 * Pointer movement maps to a tool tip on a view-aligned plane whose depth
 * is adjusted with the scroll wheel. Outbound pose traffic is coalesced to
 * at most `maxHz` messages per second (latest pose wins); the burr carves
 * on every throttle tick while the pointer is held, the kerrison bites
 * once per click. The clock is injectable for deterministic tests.
 */

import type { Vec3 } from "./protocol.js";
import type { SessionClient } from "./session.js";

export interface Clock {
  now(): number; // milliseconds
  setTimeout(cb: () => void, ms: number): unknown;
  clearTimeout(handle: unknown): void;
}

export const systemClock: Clock = {
  now: () => Date.now(),
  setTimeout: (cb, ms) => setTimeout(cb, ms),
  clearTimeout: (h) => clearTimeout(h as Parameters<typeof clearTimeout>[0]),
};

/** Maps 2D pointer coordinates to a 3D tip on a camera-facing plane. */
export interface PointerMapper {
  /** (x, y) in client pixels -> world-space point on the working plane. */
  toWorld(x: number, y: number, depth: number): Vec3;
}

export type ToolMode = "burr" | "kerrison";

export class ToolController {
  depth = 0;
  depthStep = 1.0; // mm per wheel notch
  mode: ToolMode = "burr";
  viewDirection: Vec3 = [0, 1, 0];

  private lastSent = -Infinity;
  private queued: { tip: Vec3; carve: boolean } | null = null;
  private timer: unknown = null;
  private held = false;
  private readonly minIntervalMs: number;

  constructor(
    private readonly client: SessionClient,
    private readonly mapper: PointerMapper,
    private readonly clock: Clock = systemClock,
    maxHz = 60,
  ) {
    this.minIntervalMs = 1000 / maxHz;
  }

  pointerMove(x: number, y: number): void {
    const tip = this.mapper.toWorld(x, y, this.depth);
    // a held burr grinds continuously as it moves
    this.enqueue(tip, this.held && this.mode === "burr");
  }

  pointerDown(x: number, y: number): void {
    this.held = true;
    const tip = this.mapper.toWorld(x, y, this.depth);
    if (this.mode === "kerrison") {
      // one bite per click, never throttled away
      void this.client.carve(tip, { direction: this.viewDirection });
    } else {
      this.enqueue(tip, true);
    }
  }

  pointerUp(): void {
    this.held = false;
  }

  wheel(deltaY: number): void {
    this.depth += (deltaY > 0 ? 1 : -1) * this.depthStep;
  }

  /** Pending coalesced pose, if any (test introspection). */
  get pending(): boolean {
    return this.queued !== null;
  }

  private enqueue(tip: Vec3, carve: boolean): void {
    // a carve intent must not be downgraded by a later hover in the same slot
    const keepCarve = carve || (this.queued?.carve ?? false);
    this.queued = { tip, carve: keepCarve };
    const wait = this.lastSent + this.minIntervalMs - this.clock.now();
    if (wait <= 0) {
      this.flush();
    } else if (this.timer === null) {
      this.timer = this.clock.setTimeout(() => {
        this.timer = null;
        this.flush();
      }, wait);
    }
  }

  private flush(): void {
    if (this.queued === null) return;
    const { tip, carve } = this.queued;
    this.queued = null;
    this.lastSent = this.clock.now();
    if (carve) {
      void this.client.carve(tip, { direction: this.viewDirection });
    } else {
      void this.client.pose(tip, this.viewDirection);
    }
  }
}
