/** Proximity-alarm banner state, driven purely by server alarm messages
 * (the client never re-derives distances on its own). */

import type { AlarmLevel, AlarmState } from "./protocol.js";

export interface BannerState {
  level: AlarmLevel;
  /** CSS color for the banner background. */
  color: string;
  text: string;
  visible: boolean;
}

const COLORS: Record<AlarmLevel, string> = {
  none: "#2d3436",
  warn: "#e67e22",
  danger: "#c0392b",
};

export function bannerFor(alarm: AlarmState): BannerState {
  const level = alarm.level;
  if (level === "none") {
    return { level, color: COLORS.none, text: "", visible: false };
  }
  const who = alarm.structure ? alarm.structure : "protected structure";
  const dist = alarm.distance_mm === null
    ? ""
    : ` — ${alarm.distance_mm.toFixed(1)} mm`;
  const text = level === "danger"
    ? `DANGER: contact imminent with ${who}${dist}`
    : `Caution: approaching ${who}${dist}`;
  return { level, color: COLORS[level], text, visible: true };
}

/** Tracks alarm transitions; `update` returns the new banner only when the
 * level actually changed, mirroring the server's emit-on-change contract. */
export class AlarmTracker {
  current: BannerState = bannerFor({ level: "none", distance_mm: null });
  readonly transitions: AlarmLevel[] = [];

  update(alarm: AlarmState): BannerState | null {
    const next = bannerFor(alarm);
    const changed = next.level !== this.current.level;
    this.current = next;
    if (changed) {
      this.transitions.push(next.level);
      return next;
    }
    return null;
  }
}
