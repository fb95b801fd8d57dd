/** Websocket session client with strict ack discipline.
 *
 * Every outbound message carries a monotonically increasing seq; the
 * server answers each seq exactly once with an ack or carve_result.
 * Unsolicited alarm messages ride alongside and are routed to the alarm
 * tracker. The transport is injectable so tests can drive the client
 * with a fake or a bare `ws` socket.
 */

import { AlarmTracker } from "./alarm.js";
import type {
  AckMessage,
  AlarmState,
  CarveResultMessage,
  ClientMessage,
  ReportMessage,
  ServerMessage,
  ToolSpec,
  Vec3,
} from "./protocol.js";
import { parseServerMessage } from "./protocol.js";
import { ClientSceneState } from "./scene.js";

export interface Transport {
  send(text: string): void;
  onmessage: ((text: string) => void) | null;
  onclose: (() => void) | null;
  close(): void;
}

type Reply = AckMessage | CarveResultMessage | ReportMessage;

type DistributiveOmit<T, K extends PropertyKey> =
  T extends unknown ? Omit<T, K> : never;
type ClientBody = DistributiveOmit<ClientMessage, "seq">;

interface Pending {
  resolve: (reply: Reply) => void;
  reject: (err: Error) => void;
}

export class SessionClient {
  readonly scene = new ClientSceneState();
  readonly alarms = new AlarmTracker();
  connected = true;
  onAlarmChange: ((state: AlarmState) => void) | null = null;
  onSceneChange: (() => void) | null = null;
  onDisconnect: (() => void) | null = null;

  private seq = 0;
  private pending = new Map<number, Pending>();

  constructor(private readonly transport: Transport) {
    transport.onmessage = (text) => this.receive(text);
    transport.onclose = () => {
      this.connected = false;
      const err = new Error("session closed");
      for (const p of this.pending.values()) p.reject(err);
      this.pending.clear();
      this.onDisconnect?.();
    };
  }

  close(): void {
    this.transport.close();
  }

  private receive(text: string): void {
    let msg: ServerMessage;
    try {
      msg = parseServerMessage(text);
    } catch {
      return; // not a protocol frame; ignore
    }
    if (msg.type === "alarm") {
      this.handleAlarm(msg);
      return;
    }
    if (msg.type === "error") {
      if (msg.seq !== null && this.pending.has(msg.seq)) {
        const p = this.pending.get(msg.seq) as Pending;
        this.pending.delete(msg.seq);
        p.reject(new Error(msg.message));
      }
      return;
    }
    // ack / carve_result / report — settle the matching request
    if (msg.type === "carve_result") {
      this.scene.applyPatches(msg.patches);
      if (msg.patches.length > 0) this.onSceneChange?.();
      this.handleAlarm(msg.alarm);
    } else if (msg.type === "ack") {
      if (msg.patches && msg.patches.length > 0) {
        this.scene.applyPatches(msg.patches);
        this.onSceneChange?.();
      }
      if (msg.structures) this.scene.setVisibility(msg.structures);
      if (msg.alarm) this.handleAlarm(msg.alarm);
    }
    const p = this.pending.get(msg.seq);
    if (p) {
      this.pending.delete(msg.seq);
      this.scene.lastAckedSeq = Math.max(this.scene.lastAckedSeq, msg.seq);
      p.resolve(msg);
    }
  }

  private handleAlarm(state: AlarmState): void {
    if (this.alarms.update(state) !== null) this.onAlarmChange?.(state);
  }

  private request(body: ClientBody): Promise<Reply> {
    if (!this.connected) {
      return Promise.reject(new Error("session closed"));
    }
    const seq = this.seq++;
    const msg = { ...body, seq } as ClientMessage;
    return new Promise<Reply>((resolve, reject) => {
      this.pending.set(seq, { resolve, reject });
      this.transport.send(JSON.stringify(msg));
    });
  }

  selectTool(tool: ToolSpec): Promise<Reply> {
    return this.request({ type: "tool_select", tool });
  }

  pose(tip_mm: Vec3, direction?: Vec3): Promise<Reply> {
    return this.request(
      direction === undefined
        ? { type: "tool_pose", tip_mm }
        : { type: "tool_pose", tip_mm, direction },
    );
  }

  carve(tip_mm: Vec3, opts: { direction?: Vec3; tool?: ToolSpec } = {}):
      Promise<CarveResultMessage> {
    return this.request({
      type: "carve", tip_mm, active: true, ...opts,
    }) as Promise<CarveResultMessage>;
  }

  undo(): Promise<Reply> {
    return this.request({ type: "undo" });
  }

  setVisibility(structures: Record<string, boolean>): Promise<Reply> {
    return this.request({ type: "visibility", structures });
  }

  isolate(on: boolean): Promise<Reply> {
    return this.request({ type: "isolate", on });
  }

  exposure(levels: number[]): Promise<Reply> {
    return this.request({ type: "exposure", levels });
  }

  report(): Promise<ReportMessage> {
    return this.request({ type: "report" }) as Promise<ReportMessage>;
  }

  /** Fetch the full scene as patches (initial load or resync). */
  loadScene(): Promise<Reply> {
    return this.request({ type: "scene" });
  }

  /** Server-side canonical scene digest (client-mirror verification). */
  async serverChecksum(): Promise<string> {
    const reply = await this.request({ type: "scene_checksum" });
    return (reply as AckMessage).scene_sha256 as string;
  }
}

interface SocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(type: "message", cb: (ev: { data: unknown }) => void): void;
  addEventListener(type: "close", cb: () => void): void;
}

/** Adapts a browser WebSocket or a node `ws` socket to Transport. */
export function wrapWebSocket(ws: SocketLike): Transport {
  const t: Transport = {
    send: (text) => ws.send(text),
    close: () => ws.close(),
    onmessage: null,
    onclose: null,
  };
  ws.addEventListener("message", (ev) => t.onmessage?.(String(ev.data)));
  ws.addEventListener("close", () => t.onclose?.());
  return t;
}
