/** Browser entry point: wires the session client, renderer, tool
 * controller, alarm banner, slice panels, and report view to the DOM. */

import * as THREE from "three";
import { bannerFor } from "./alarm.js";
import type { ToolKind, Vec3 } from "./protocol.js";
import { SceneRenderer } from "./render.js";
import { buildReportView, formatReport } from "./report.js";
import { SessionClient, wrapWebSocket } from "./session.js";
import { AXES, panelsForTip, sliceUrl, tipToVoxel } from "./slices.js";
import type { Axis } from "./slices.js";
import { ToolController } from "./tool.js";
import type { PointerMapper } from "./tool.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function caseIdFromUrl(): string {
  const id = new URLSearchParams(window.location.search).get("case");
  if (!id) throw new Error("open as index.html?case=<case_id>");
  return id;
}

export function start(): void {
  const caseId = caseIdFromUrl();
  const httpBase = window.location.origin;
  const wsBase = httpBase.replace(/^http/, "ws");

  const canvas = el<HTMLCanvasElement>("view");
  const banner = el<HTMLDivElement>("alarm-banner");
  const reportBox = el<HTMLPreElement>("report");
  const structureList = el<HTMLDivElement>("structures");
  const status = el<HTMLDivElement>("status");

  const socket = new WebSocket(`${wsBase}/cases/${caseId}/session`);
  const client = new SessionClient(wrapWebSocket(socket));
  const renderer = new SceneRenderer(client.scene, canvas);

  const spacing: Vec3 = [1, 1, 1];
  const shape: Vec3 = [256, 256, 256];

  const mapper: PointerMapper = {
    toWorld(x, y, depth): Vec3 {
      // unproject the pointer onto a plane facing the camera at `depth`
      const rect = canvas.getBoundingClientRect();
      const ndc = new THREE.Vector2(
        ((x - rect.left) / rect.width) * 2 - 1,
        -(((y - rect.top) / rect.height) * 2 - 1));
      const ray = new THREE.Raycaster();
      ray.setFromCamera(ndc, renderer.camera);
      const dist = renderer.camera.position.length() * 0.5 + depth;
      const p = ray.ray.at(dist, new THREE.Vector3());
      return [p.x, p.y, p.z];
    },
  };
  const tools = new ToolController(client, mapper);

  const updateSlices = (tip: Vec3): void => {
    const voxel = tipToVoxel(tip, spacing, shape);
    const panels = panelsForTip(voxel);
    for (const axis of AXES) {
      const img = el<HTMLImageElement>(`slice-${axis}`);
      img.src = sliceUrl(httpBase, caseId, {
        axis: axis as Axis, index: panels[axis as Axis],
        volume: "ct", overlay: true,
      });
    }
  };

  client.onAlarmChange = () => {
    const b = client.alarms.current;
    banner.style.display = b.visible ? "block" : "none";
    banner.style.background = b.color;
    banner.textContent = b.text;
  };
  client.onSceneChange = () => renderer.sync();
  client.onDisconnect = () => {
    const b = bannerFor({ level: "none", distance_mm: null });
    banner.style.display = "block";
    banner.style.background = b.color;
    banner.textContent = "Connection lost — reload to reconnect";
  };

  canvas.addEventListener("pointermove", (ev) => {
    tools.pointerMove(ev.clientX, ev.clientY);
    updateSlices(mapper.toWorld(ev.clientX, ev.clientY, tools.depth));
  });
  canvas.addEventListener("pointerdown",
    (ev) => tools.pointerDown(ev.clientX, ev.clientY));
  canvas.addEventListener("pointerup", () => tools.pointerUp());
  canvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    tools.wheel(ev.deltaY);
  }, { passive: false });

  el<HTMLSelectElement>("tool-select").addEventListener("change", (ev) => {
    const kind = (ev.target as HTMLSelectElement).value as ToolKind;
    tools.mode = kind === "kerrison" ? "kerrison" : "burr";
    void client.selectTool({ kind });
  });
  el<HTMLButtonElement>("undo").addEventListener("click", () => {
    void client.undo().then(() => renderer.sync());
  });
  el<HTMLButtonElement>("report-btn").addEventListener("click", () => {
    void client.report().then((msg) => {
      reportBox.textContent = formatReport(buildReportView(msg));
    });
  });

  const rebuildStructureList = (): void => {
    structureList.textContent = "";
    for (const info of client.scene.structures()) {
      const label = document.createElement("label");
      const box = document.createElement("input");
      box.type = "checkbox";
      box.checked = client.scene.isVisible(info.structure);
      box.addEventListener("change", () => {
        void client.setVisibility({ [String(info.structure)]: box.checked })
          .then(() => {
            client.scene.setVisibility(
              { [String(info.structure)]: box.checked });
            renderer.applyVisibility();
          });
      });
      label.append(box, ` ${info.name}`);
      structureList.append(label);
    }
  };

  socket.addEventListener("open", () => {
    status.textContent = "connected";
    void client.loadScene().then(() => {
      renderer.sync();
      renderer.frameToContent();
      rebuildStructureList();
    });
  });

  const loop = (): void => {
    renderer.render();
    requestAnimationFrame(loop);
  };
  loop();
}

start();
