/** End-to-end round trip against the real rehearsal service.
 *
 * Spawns the Python server with a preloaded carve model, drives a scripted
 * rehearsal through the client classes over a live websocket, and verifies:
 *  - the client's mirrored scene reproduces the server's canonical scene
 *    digest after initial load, after every carve, and after undo;
 *  - the alarm banner transitions exactly once per server alarm message;
 *  - the client-side report view totals equal the server's report.
 *
 * Prints one PASS/FAIL line per criterion.
 */

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import type { AlarmLevel, CarveResultMessage, Vec3 } from "../src/protocol.js";
import { SessionClient, wrapWebSocket } from "../src/session.js";
import { buildReportView } from "../src/report.js";

const PY = process.env.PYTHON ?? "python3";
const PORT = 8100 + (process.pid % 700);
const BASE = `http://127.0.0.1:${PORT}`;
const CASE_ID = "acceptance-case";

// Model matching the server-side test corpus: bone cylinder with gaps,
// a disc, and a protected cord column, 32 voxels cubed, 1 mm spacing.
const BUILD_MODEL = `
import sys, os
import numpy as np
from spinesim.volume import LabelMap, save_volume
root = sys.argv[1]
os.makedirs(os.path.join(root, "case"), exist_ok=True)
os.makedirs(os.path.join(root, "out"), exist_ok=True)
n = 32
ax = np.arange(n)
X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
seg = np.zeros((n, n, n), np.uint16)
c = n / 2
bone = ((X - c) ** 2 + (Y - c) ** 2 <= (n * 0.32) ** 2) & (Z % 11 < 7)
seg[bone] = 22
disc = ((X - c) ** 2 + (Y - c) ** 2 <= (n * 0.25) ** 2) & (Z % 11 >= 7)
seg[disc & (seg == 0)] = 122
cord = ((X - c) ** 2 + (Y - c - n * 0.1) ** 2 <= (n * 0.08) ** 2)
seg[cord] = 200
table = {22: "L3", 122: "disc_L3", 200: "spinal_cord"}
save_volume(LabelMap(data=seg, affine=np.eye(4), label_table=table),
            os.path.join(root, "out", "model_seg.nii.gz"))
`;

let workDir = "";
let server: ChildProcess | null = null;

function verdict(name: string, ok: boolean, detail: string): void {
  console.log(`ACCEPTANCE 14 ${name}: ${ok ? "PASS" : "FAIL"} (${detail})`);
}

async function waitForServer(): Promise<void> {
  const deadline = Date.now() + 60_000;
  for (;;) {
    try {
      const r = await fetch(`${BASE}/cases/${CASE_ID}`);
      if (r.ok) return;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) throw new Error("server did not start");
    await new Promise((res) => setTimeout(res, 250));
  }
}

function connect(): Promise<{ client: SessionClient; rawAlarms: AlarmLevel[] }> {
  return new Promise((resolve, reject) => {
    // platform WebSocket: built into node >= 21 (node 20 needs
    // NODE_OPTIONS=--experimental-websocket, set by the npm script)
    const ws = new WebSocket(`ws://127.0.0.1:${PORT}/cases/${CASE_ID}/session`);
    const rawAlarms: AlarmLevel[] = [];
    ws.addEventListener("message", (ev) => {
      try {
        const doc = JSON.parse(String(ev.data)) as { type?: string; level?: AlarmLevel };
        if (doc.type === "alarm" && doc.level) rawAlarms.push(doc.level);
      } catch {
        // non-JSON frame: ignore
      }
    });
    ws.addEventListener("open", () =>
      resolve({ client: new SessionClient(wrapWebSocket(ws)), rawAlarms }));
    ws.addEventListener("error", (ev) => reject(new Error(String(ev))));
  });
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "spinesim-ui-"));
  const caseDir = join(workDir, CASE_ID);
  const built = spawnSync(PY, ["-c", BUILD_MODEL, caseDir], { encoding: "utf-8" });
  if (built.status !== 0) {
    throw new Error(`model build failed: ${built.stderr}`);
  }
  server = spawn(PY, [
    "-m", "spinesim.cli", "serve",
    "--host", "127.0.0.1", "--port", String(PORT),
    "--work-dir", join(workDir, "wd"),
    "--preload", caseDir,
  ], { stdio: ["ignore", "pipe", "pipe"] });
  server.on("exit", (code) => {
    if (code !== null && code !== 0) {
      console.error(`server exited with code ${code}`);
    }
  });
  await waitForServer();
}, 90_000);

afterAll(() => {
  server?.kill("SIGTERM");
  if (workDir) rmSync(workDir, { recursive: true, force: true });
});

describe("round trip against the live service", () => {
  it("mirrors the scene, tracks alarms, and reconciles the report", async () => {
    const { client, rawAlarms } = await connect();
    try {
      // --- initial scene load mirrors the server exactly -----------------
      await client.loadScene();
      const initialLocal = client.scene.checksum();
      const initialRemote = await client.serverChecksum();
      verdict("scene-mirror-initial", initialLocal === initialRemote,
        `client ${initialLocal.slice(0, 12)} vs server ${initialRemote.slice(0, 12)}`);
      expect(initialLocal).toBe(initialRemote);
      expect(client.scene.chunks.size).toBeGreaterThan(0);

      // --- scripted rehearsal: approach, carve, verify per step ----------
      await client.selectTool({ kind: "burr", radius_mm: 2.5 });
      const script: Vec3[] = [
        [16, 16, 3],   // superior bone (the cord column runs nearby)
        [16, 16, 5],
        [10, 10, 14],  // lateral bone, clear of the cord
      ];
      const results: CarveResultMessage[] = [];
      let mirrored = 0;
      for (const tip of script) {
        await client.pose(tip);
        const res = await client.carve(tip);
        results.push(res);
        const local = client.scene.checksum();
        const remote = await client.serverChecksum();
        if (local === remote) mirrored += 1;
        expect(local).toBe(remote);
      }
      verdict("scene-mirror-after-carves", mirrored === script.length,
        `${mirrored}/${script.length} carves kept the mirror in sync`);
      const removedTotal = results.reduce((sum, r) =>
        sum + Object.values(r.removed).reduce((a, b) => a + b, 0), 0);
      expect(removedTotal).toBeGreaterThan(0);

      // approach the protected cord (pose only) and retreat: alarm edges
      await client.pose([16, 18.5, 16]);
      await client.pose([2, 2, 30]);

      // --- undo restores the exact previous geometry ----------------------
      const beforeUndo = client.scene.checksum();
      await client.undo(); // patches are applied by the client automatically
      const localAfterUndo = client.scene.checksum();
      const remoteAfterUndo = await client.serverChecksum();
      const undoOk = localAfterUndo === remoteAfterUndo &&
        localAfterUndo !== beforeUndo;
      verdict("undo-mirror", undoOk,
        `mirror ${localAfterUndo === remoteAfterUndo ? "synced" : "diverged"}, ` +
        `geometry ${localAfterUndo !== beforeUndo ? "reverted" : "unchanged"}`);
      expect(undoOk).toBe(true);

      // --- report totals reconcile with client-side bookkeeping ----------
      const report = await client.report();
      const view = buildReportView(report);
      // the last carve was undone, so its voxels leave the ledger;
      // carve_count keeps counting attempted carves
      const undoneRemoved = Object.values(
        (results[results.length - 1] as CarveResultMessage).removed)
        .reduce((a, b) => a + b, 0);
      const expectedVoxels = removedTotal - undoneRemoved;
      const reportOk = view.totalVoxels === expectedVoxels &&
        view.carveCount === script.length;
      verdict("report-totals", reportOk,
        `server ${view.totalVoxels} voxels / ${view.carveCount} carves, ` +
        `client ledger ${expectedVoxels} voxels / ${script.length} carves`);
      expect(view.totalVoxels).toBe(expectedVoxels);
      expect(view.carveCount).toBe(script.length);
      expect(view.totalMm3).toBeGreaterThan(0);

      // --- alarm banner transitions exactly with server messages ---------
      // by now every alarm frame has been delivered (the report reply
      // arrived after them); each frame changed the banner exactly once
      const transitions = client.alarms.transitions;
      const alarmsMatch =
        transitions.length === rawAlarms.length &&
        transitions.every((lvl, i) => lvl === rawAlarms[i]);
      verdict("alarm-banner-transitions", alarmsMatch,
        `${transitions.length} banner changes for ${rawAlarms.length} alarm messages` +
        ` [${transitions.join(",")}]`);
      expect(alarmsMatch).toBe(true);
      expect(rawAlarms.length).toBeGreaterThan(0); // the approach fired
    } finally {
      client.close();
    }
  }, 120_000);

  it("serves the artifacts the UI links to", async () => {
    const r = await fetch(`${BASE}/cases/${CASE_ID}`);
    expect(r.status).toBe(200);
    const body = (await r.json()) as { status: string };
    verdict("case-status", body.status === "done", `status=${body.status}`);
    expect(body.status).toBe("done");
  });
});
