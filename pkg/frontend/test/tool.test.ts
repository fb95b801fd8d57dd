import { describe, expect, it } from "vitest";
import type { Vec3 } from "../src/protocol.js";
import type { Transport } from "../src/session.js";
import { SessionClient } from "../src/session.js";
import type { Clock, PointerMapper } from "../src/tool.js";
import { ToolController } from "../src/tool.js";

class FakeClock implements Clock {
  t = 0;
  private timers: Array<{ at: number; cb: () => void; id: number }> = [];
  private nextId = 1;

  now(): number {
    return this.t;
  }
  setTimeout(cb: () => void, ms: number): unknown {
    const id = this.nextId++;
    this.timers.push({ at: this.t + ms, cb, id });
    return id;
  }
  clearTimeout(handle: unknown): void {
    this.timers = this.timers.filter((x) => x.id !== handle);
  }
  advance(ms: number): void {
    this.t += ms;
    const due = this.timers.filter((x) => x.at <= this.t)
      .sort((a, b) => a.at - b.at);
    this.timers = this.timers.filter((x) => x.at > this.t);
    for (const timer of due) timer.cb();
  }
}

class RecordingTransport implements Transport {
  sent: Array<Record<string, unknown>> = [];
  onmessage: ((text: string) => void) | null = null;
  onclose: (() => void) | null = null;

  send(text: string): void {
    this.sent.push(JSON.parse(text));
  }
  close(): void {}
}

const planeMapper: PointerMapper = {
  toWorld: (x, y, depth): Vec3 => [x, y, depth],
};

function setup(): { t: RecordingTransport; clock: FakeClock; ctrl: ToolController } {
  const t = new RecordingTransport();
  const client = new SessionClient(t);
  const clock = new FakeClock();
  const ctrl = new ToolController(client, planeMapper, clock, 60);
  return { t, clock, ctrl };
}

describe("ToolController", () => {
  it("coalesces pose traffic to at most 60 messages per second", () => {
    const { t, clock, ctrl } = setup();
    // 1000 moves over one second of fake time
    for (let i = 0; i < 1000; i++) {
      ctrl.pointerMove(i, 0);
      clock.advance(1);
    }
    clock.advance(100); // let the trailing coalesced message flush
    expect(t.sent.length).toBeLessThanOrEqual(61);
    expect(t.sent.length).toBeGreaterThan(30);
    // the last delivered pose is the latest one, not an early one
    const last = t.sent[t.sent.length - 1] as { tip_mm: Vec3 };
    expect(last.tip_mm[0]).toBe(999);
  });

  it("burr carves continuously while held", () => {
    const { t, clock, ctrl } = setup();
    ctrl.mode = "burr";
    ctrl.pointerDown(0, 0);
    for (let i = 1; i <= 200; i++) {
      ctrl.pointerMove(i, 0);
      clock.advance(5);
    }
    ctrl.pointerUp();
    clock.advance(100);
    const carves = t.sent.filter((m) => m.type === "carve");
    expect(carves.length).toBeGreaterThan(10);
    // after release, movement goes back to plain poses
    ctrl.pointerMove(500, 0);
    clock.advance(100);
    expect(t.sent[t.sent.length - 1]?.type).toBe("tool_pose");
  });

  it("kerrison bites exactly once per click, unthrottled", () => {
    const { t, clock, ctrl } = setup();
    ctrl.mode = "kerrison";
    ctrl.pointerDown(10, 10);
    ctrl.pointerUp();
    ctrl.pointerDown(11, 10);
    ctrl.pointerUp();
    clock.advance(100);
    const carves = t.sent.filter((m) => m.type === "carve");
    expect(carves.length).toBe(2);
  });

  it("does not downgrade a queued carve to a pose", () => {
    const { t, clock, ctrl } = setup();
    ctrl.mode = "burr";
    ctrl.pointerMove(0, 0);        // sends immediately (pose)
    ctrl.pointerDown(1, 0);        // queued carve within the throttle window
    ctrl.pointerUp();
    ctrl.pointerMove(2, 0);        // later hover must not erase the carve
    clock.advance(100);
    const types = t.sent.map((m) => m.type);
    expect(types).toContain("carve");
  });

  it("scroll wheel shifts the working depth", () => {
    const { t, clock, ctrl } = setup();
    ctrl.wheel(120);
    ctrl.wheel(120);
    ctrl.wheel(-120);
    ctrl.pointerMove(5, 5);
    clock.advance(100);
    const last = t.sent[t.sent.length - 1] as { tip_mm: Vec3 };
    expect(last.tip_mm[2]).toBe(1.0);
  });
});
