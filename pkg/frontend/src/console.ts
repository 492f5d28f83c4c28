/** The log console model: every command_status and log event, in arrival
 * order, plus checkpoint/branch/end milestones worth surfacing. */

import type { TrainingEvent } from "./protocol.js";

export interface ConsoleEntry {
  kind: "command_status" | "log" | "milestone";
  text: string;
  time: number;
  uuid?: string;
  status?: string;
  level?: string;
}

export class LogConsole {
  entries: ConsoleEntry[] = [];

  addEvent(event: TrainingEvent): ConsoleEntry | null {
    let entry: ConsoleEntry | null = null;
    const p = event.payload;
    if (event.event_type === "command_status") {
      const uuid = String(p.uuid ?? "?");
      const status = String(p.status ?? "?");
      const detail = p.detail ? ` — ${String(p.detail)}` : "";
      entry = {
        kind: "command_status",
        uuid,
        status,
        time: event.time,
        text: `[${status}] ${uuid}${detail}`,
      };
    } else if (event.event_type === "log") {
      const level = String(p.level ?? "info");
      entry = {
        kind: "log",
        level,
        time: event.time,
        text: `${level}: ${String(p.message ?? "")}`,
      };
    } else if (event.event_type === "checkpoint_saved") {
      entry = {
        kind: "milestone",
        time: event.time,
        text: `checkpoint saved: ${String(p.uuid)} (step ${String(p.step)})`,
      };
    } else if (event.event_type === "branch_created") {
      entry = {
        kind: "milestone",
        time: event.time,
        text: `branch ${String(p.branch_id)} forked from ${String(p.parent_branch_id)} at step ${String(p.fork_step)}`,
      };
    } else if (event.event_type === "training_ended") {
      entry = { kind: "milestone", time: event.time, text: `training ended: ${String(p.reason)}` };
    }
    if (entry) this.entries.push(entry);
    return entry;
  }

  statusesFor(uuid: string): string[] {
    return this.entries
      .filter((e) => e.kind === "command_status" && e.uuid === uuid)
      .map((e) => e.status as string);
  }

  lifecycleCount(): number {
    return this.entries.filter((e) => e.kind === "command_status").length;
  }

  clear(): void {
    this.entries = [];
  }
}
