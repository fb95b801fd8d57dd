import { describe, expect, it } from "vitest";
import type { MeshPatch } from "../src/protocol.js";
import { encodeIndices, encodePositions } from "../src/protocol.js";
import type { Transport } from "../src/session.js";
import { SessionClient } from "../src/session.js";

class FakeTransport implements Transport {
  sent: Array<Record<string, unknown>> = [];
  onmessage: ((text: string) => void) | null = null;
  onclose: (() => void) | null = null;
  closed = false;

  send(text: string): void {
    this.sent.push(JSON.parse(text));
  }
  close(): void {
    this.closed = true;
    this.onclose?.();
  }
  reply(msg: Record<string, unknown>): void {
    this.onmessage?.(JSON.stringify(msg));
  }
}

function onePatch(): MeshPatch {
  const pos = new Float32Array([0, 0, 0, 1, 0, 0, 0, 1, 0]);
  const idx = new Uint32Array([0, 1, 2]);
  return {
    chunk: [0, 0, 0],
    structures: [{
      structure: 22,
      positions_b64: encodePositions(pos),
      indices_b64: encodeIndices(idx),
    }],
  };
}

describe("SessionClient", () => {
  it("assigns increasing seq and settles each request exactly once", async () => {
    const t = new FakeTransport();
    const client = new SessionClient(t);
    const p0 = client.pose([1, 2, 3]);
    const p1 = client.undo();
    expect(t.sent.map((m) => m.seq)).toEqual([0, 1]);
    t.reply({ type: "ack", seq: 0 });
    t.reply({ type: "ack", seq: 1, undone: false });
    await expect(p0).resolves.toMatchObject({ seq: 0 });
    await expect(p1).resolves.toMatchObject({ seq: 1 });
    expect(client.scene.lastAckedSeq).toBe(1);
  });

  it("applies carve_result patches to the scene mirror", async () => {
    const t = new FakeTransport();
    const client = new SessionClient(t);
    const p = client.carve([5, 5, 5]);
    t.reply({
      type: "carve_result", seq: 0, applied: true, violation: false,
      removed: { "22": 10 },
      alarm: { level: "none", distance_mm: 9.5 },
      patches: [onePatch()],
    });
    const result = await p;
    expect(result.removed["22"]).toBe(10);
    expect(client.scene.chunks.size).toBe(1);
  });

  it("routes alarm transitions to the tracker and callback once per change",
     async () => {
    const t = new FakeTransport();
    const client = new SessionClient(t);
    const changes: string[] = [];
    client.onAlarmChange = (s) => changes.push(s.level);
    t.reply({ type: "alarm", level: "warn", distance_mm: 4.0,
              structure: "spinal_cord" });
    t.reply({ type: "alarm", level: "warn", distance_mm: 3.5,
              structure: "spinal_cord" });
    t.reply({ type: "alarm", level: "danger", distance_mm: 1.0,
              structure: "spinal_cord" });
    t.reply({ type: "alarm", level: "none", distance_mm: null });
    expect(changes).toEqual(["warn", "danger", "none"]);
    expect(client.alarms.transitions).toEqual(["warn", "danger", "none"]);
  });

  it("rejects in-flight requests when the connection drops", async () => {
    const t = new FakeTransport();
    const client = new SessionClient(t);
    const p = client.report();
    t.close();
    await expect(p).rejects.toThrow("session closed");
    expect(client.connected).toBe(false);
    await expect(client.undo()).rejects.toThrow("session closed");
  });

  it("rejects a request answered by a server error", async () => {
    const t = new FakeTransport();
    const client = new SessionClient(t);
    const p = client.exposure([20]);
    t.reply({ type: "error", seq: 0, message: "bad level" });
    await expect(p).rejects.toThrow("bad level");
  });

  it("exposes the server scene checksum", async () => {
    const t = new FakeTransport();
    const client = new SessionClient(t);
    const p = client.serverChecksum();
    t.reply({ type: "ack", seq: 0, scene_sha256: "deadbeef" });
    await expect(p).resolves.toBe("deadbeef");
  });
});
